"""Learnable eigenvalue adaptation ``C(sigma) = g_s(a1) * sigma ** g_e(a2)``.

Two parameterizations are supported:

* ``C1``: ``g_s(a) = 1 / (1 + exp(a))`` per eigenvalue, one shared exponent
  ``max(0, a2)``.
* ``C2``: ``g_s(a) = max(0, a)`` and ``g_e(a) = max(0, a)``, both per
  eigenvalue.

``frozen`` leaves the spectrum untouched. Optional contiguous bins tie
parameters across runs of neighbouring eigenvalues.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class AdaptKind(str, Enum):
    C1 = "c1"
    C2 = "c2"
    FROZEN = "frozen"


@dataclass(frozen=True)
class BinSpec:
    d: int
    num_bins: int
    boundaries: np.ndarray = field(repr=False)

    @property
    def index(self) -> np.ndarray:
        """Bin id of every eigenvalue position."""
        sizes = np.diff(self.boundaries)
        return np.repeat(np.arange(self.num_bins), sizes)

    def to_dict(self):
        return {"d": self.d, "num_bins": self.num_bins,
                "boundaries": [int(b) for b in self.boundaries]}


def make_bins(d: int, num_bins: int) -> BinSpec:
    """Equal-count contiguous bins; the first ``d % num_bins`` bins get one extra."""
    if not 1 <= num_bins <= d:
        raise ValueError(f"need 1 <= num_bins <= d, got num_bins={num_bins}, d={d}")
    base, extra = divmod(d, num_bins)
    sizes = np.full(num_bins, base, dtype=np.int64)
    sizes[:extra] += 1
    boundaries = np.concatenate([[0], np.cumsum(sizes)])
    return BinSpec(d=d, num_bins=num_bins, boundaries=boundaries)


@dataclass
class AdaptationParams:
    kind: AdaptKind
    alpha1: np.ndarray
    alpha2: np.ndarray
    d: int
    bins: BinSpec | None = None

    def __post_init__(self):
        self.kind = AdaptKind(self.kind)
        self.alpha1 = np.asarray(self.alpha1, dtype=np.float64)
        self.alpha2 = np.asarray(self.alpha2, dtype=np.float64)
        if self.bins is not None and self.bins.d != self.d:
            raise ValueError("bin spec does not cover d eigenvalues")
        p = self.bins.num_bins if self.bins is not None else self.d
        expected = {
            AdaptKind.C1: (p, 1),
            AdaptKind.C2: (p, p),
            AdaptKind.FROZEN: (0, 0),
        }[self.kind]
        if (self.alpha1.shape, self.alpha2.shape) != ((expected[0],), (expected[1],)):
            raise ValueError(
                f"{self.kind.value} expects alpha shapes {expected}, "
                f"got {self.alpha1.shape}, {self.alpha2.shape}")

    @property
    def num_params(self) -> int:
        return self.alpha1.size + self.alpha2.size

    def index1(self) -> np.ndarray:
        """Map eigenvalue position -> alpha1 entry."""
        if self.bins is not None:
            return self.bins.index
        return np.arange(self.d)

    def index2(self) -> np.ndarray:
        if self.kind is AdaptKind.C1:
            return np.zeros(self.d, dtype=np.int64)
        return self.index1()

    def copy(self) -> "AdaptationParams":
        return AdaptationParams(self.kind, self.alpha1.copy(), self.alpha2.copy(),
                                self.d, self.bins)

    def to_dict(self):
        return {
            "kind": self.kind.value,
            "d": self.d,
            "bins": None if self.bins is None else self.bins.to_dict(),
            "alpha1": self.alpha1.tolist(),
            "alpha2": self.alpha2.tolist(),
        }

    @classmethod
    def from_dict(cls, obj) -> "AdaptationParams":
        bins = obj.get("bins")
        spec = make_bins(bins["d"], bins["num_bins"]) if bins else None
        return cls(AdaptKind(obj["kind"]), np.asarray(obj["alpha1"]),
                   np.asarray(obj["alpha2"]), int(obj["d"]), spec)


def init_params(kind, d: int, bins: BinSpec | None = None) -> AdaptationParams:
    """Identity-biased start (C2 is exactly the identity, C1 halves every value)."""
    kind = AdaptKind(kind)
    if kind is AdaptKind.FROZEN:
        return AdaptationParams(kind, np.zeros(0), np.zeros(0), d, None)
    p = bins.num_bins if bins is not None else d
    if kind is AdaptKind.C1:
        return AdaptationParams(kind, np.zeros(p), np.ones(1), d, bins)
    return AdaptationParams(kind, np.ones(p), np.ones(p), d, bins)


def _scale(kind: AdaptKind, a1: np.ndarray):
    """Return ``(g_s(a1), g_s'(a1))``."""
    if kind is AdaptKind.C1:
        g = 1.0 / (1.0 + np.exp(a1))
        return g, -g * (1.0 - g)
    return np.maximum(0.0, a1), (a1 > 0).astype(np.float64)


def _check_sigma(sigma, d):
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape != (d,):
        raise ValueError(f"expected {d} singular values, got shape {sigma.shape}")
    if np.any(sigma < 0):
        raise ValueError("singular values must be nonnegative")
    return sigma


def _power(sigma, e):
    # 0 ** 0 == 1 in numpy already; keep it explicit for clarity of contract
    out = np.power(sigma, e)
    out[(sigma == 0) & (e == 0)] = 1.0
    return out


def adapt(sigma, p: AdaptationParams) -> np.ndarray:
    if p.kind is AdaptKind.FROZEN:
        return np.array(sigma, dtype=np.float64, copy=True)
    sigma = _check_sigma(sigma, p.d)
    gs, _ = _scale(p.kind, p.alpha1)
    ge = np.maximum(0.0, p.alpha2)
    return gs[p.index1()] * _power(sigma, ge[p.index2()])


def adapt_grad(sigma, p: AdaptationParams, upstream):
    """Gradients ``(d alpha1, d alpha2)`` of ``sum(upstream * adapt(sigma, p))``."""
    if p.kind is AdaptKind.FROZEN:
        return np.zeros(0), np.zeros(0)
    sigma = _check_sigma(sigma, p.d)
    upstream = np.asarray(upstream, dtype=np.float64)
    i1, i2 = p.index1(), p.index2()
    gs, dgs = _scale(p.kind, p.alpha1)
    ge = np.maximum(0.0, p.alpha2)
    dge = (p.alpha2 > 0).astype(np.float64)
    powed = _power(sigma, ge[i2])
    with np.errstate(divide="ignore"):
        log_sigma = np.where(sigma > 0, np.log(np.where(sigma > 0, sigma, 1.0)), 0.0)
    g1 = upstream * dgs[i1] * powed
    g2 = upstream * gs[i1] * powed * log_sigma * dge[i2]
    d1 = np.bincount(i1, weights=g1, minlength=p.alpha1.size)
    d2 = np.bincount(i2, weights=g2, minlength=p.alpha2.size)
    return d1, d2


def l1_penalty(p: AdaptationParams, lam: float):
    """``lam * sum |g_s(alpha1)|`` over parameter entries, and its alpha1 gradient."""
    if p.kind is AdaptKind.FROZEN:
        raise ValueError("frozen adaptation has no scale parameters to penalize")
    gs, dgs = _scale(p.kind, p.alpha1)
    # g_s is nonnegative for both kinds, so |g_s| = g_s
    return float(lam * gs.sum()), lam * dgs
