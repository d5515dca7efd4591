"""Embeddings for the eigen model family and the MLP classifier head.

Every embedding is a horizontal stack of blocks. A spectral block has the
form ``s * U @ M(c)`` where ``c`` are the adapted singular values, so the head
never materialises ``E``: products ``E @ W`` and ``E.T @ G`` are evaluated
right-to-left through the small ``M``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from pathlib import Path

import numpy as np

from .adaptation import (AdaptationParams, AdaptKind, adapt, adapt_grad, init_params,
                         l1_penalty, make_bins)
from .spectral import FeatureSpectral, SpectralBasis, default_components, feature_scaling


class NonFiniteError(FloatingPointError):
    """Raised when a forward or backward pass produces NaN/inf."""


class Variant(str, Enum):
    EIGEN = "eigen"
    EIGEN_EIGEN = "eigen-eigen"
    EIGEN_CONCAT = "eigen-concat"
    REGEIGEN = "regeigen"
    LR = "lr"
    MLP = "mlp"


DISPLAY_NAMES = {
    Variant.EIGEN: "EigenNetwork",
    Variant.EIGEN_EIGEN: "Eigen-EigenNetwork",
    Variant.EIGEN_CONCAT: "Eigen-ConcatNetwork",
    Variant.REGEIGEN: "RegEigen-EigenNetwork",
    Variant.LR: "LR",
    Variant.MLP: "MLP",
}


@dataclass(frozen=True)
class ModelConfig:
    variant: Variant = Variant.EIGEN_EIGEN
    d: int | None = None
    k: int | None = None
    hidden: int = 64
    dropout: float = 0.5
    scale: float = 1.0
    use_order0: bool = False
    adapt: AdaptKind = AdaptKind.C2
    bins: int | None = None
    feature_scaling: str = "sqrt"

    def __post_init__(self):
        object.__setattr__(self, "variant", Variant(self.variant))
        object.__setattr__(self, "adapt", AdaptKind(self.adapt))

    def validate(self) -> "ModelConfig":
        if self.d is not None and self.d < 1:
            raise ValueError("d must be >= 1")
        if self.k is not None and self.k < 1:
            raise ValueError("k must be >= 1")
        if self.hidden < 0:
            raise ValueError("hidden width must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must lie in [0, 1)")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.variant is Variant.LR and self.hidden != 0:
            raise ValueError("LR uses a linear head (hidden = 0)")
        if self.variant is Variant.MLP and self.hidden == 0:
            raise ValueError("MLP needs a hidden layer")
        if self.variant is Variant.REGEIGEN and self.bins is None:
            raise ValueError("regeigen needs a bin count")
        if self.bins is not None and self.bins < 1:
            raise ValueError("bin count must be >= 1")
        if self.feature_scaling not in ("sqrt", "eig"):
            raise ValueError("feature_scaling must be 'sqrt' or 'eig'")
        return self

    @property
    def uses_graph(self) -> bool:
        return self.variant not in (Variant.LR, Variant.MLP)

    @property
    def uses_feature_spectrum(self) -> bool:
        return self.variant in (Variant.EIGEN_EIGEN, Variant.REGEIGEN, Variant.EIGEN_CONCAT) \
            or self.use_order0

    def resolve(self, n: int, m: int) -> "ModelConfig":
        """Fill in default component counts for an n-node, m-feature dataset."""
        d = self.d if self.d is not None else default_components(n)
        k = self.k if self.k is not None else min(m, n, 2048)
        return replace(self, d=min(d, n), k=min(k, m, n)).validate()

    def to_dict(self):
        out = asdict(self)
        out["variant"] = self.variant.value
        out["adapt"] = self.adapt.value
        return out

    @classmethod
    def from_dict(cls, obj) -> "ModelConfig":
        return cls(**obj)


@dataclass
class ModelParams:
    adaptation: AdaptationParams
    head: dict = field(default_factory=dict)

    def arrays(self) -> dict:
        """Trainable arrays keyed by name (views, not copies)."""
        out = {}
        if self.adaptation.kind is not AdaptKind.FROZEN:
            out["alpha1"] = self.adaptation.alpha1
            out["alpha2"] = self.adaptation.alpha2
        out.update(self.head)
        return out

    def copy(self) -> "ModelParams":
        return ModelParams(self.adaptation.copy(), {k: v.copy() for k, v in self.head.items()})


# ---------------------------------------------------------------------------
# explicit embeddings

def embed_eigennetwork(basis: SpectralBasis, p: AdaptationParams, s: float = 1.0) -> np.ndarray:
    """``s * U diag(C(sigma))``."""
    return s * basis.U * adapt(basis.sigma, p)


def embed_eigen_eigen(basis: SpectralBasis, u_xt: np.ndarray, c_x: np.ndarray,
                      p: AdaptationParams, s: float = 1.0) -> np.ndarray:
    """``s * U (U_xt * c c_x^T)`` with ``U_xt = U^T Q`` precomputed (d x k)."""
    if u_xt.shape != (basis.d, c_x.shape[0]):
        raise ValueError(
            f"projected features have shape {u_xt.shape}, expected ({basis.d}, {c_x.shape[0]})")
    c = adapt(basis.sigma, p)
    return s * basis.U @ (u_xt * np.outer(c, c_x))


def embed_eigen_concat(basis: SpectralBasis, reduced: np.ndarray, p: AdaptationParams,
                       s: float = 1.0) -> np.ndarray:
    if reduced.shape[0] != basis.n:
        raise ValueError("reduced features and basis disagree on node count")
    return np.hstack([reduced, embed_eigennetwork(basis, p, s)])


def augment_order0(e: np.ndarray, reduced: np.ndarray) -> np.ndarray:
    if e.shape[0] != reduced.shape[0]:
        raise ValueError(f"row mismatch: {e.shape[0]} vs {reduced.shape[0]}")
    return np.hstack([e, reduced])


# ---------------------------------------------------------------------------
# factored embedding blocks

class DenseBlock:
    def __init__(self, mat):
        self.mat = np.asarray(mat, dtype=np.float64)
        self.width = self.mat.shape[1]

    def dense(self, c):
        return self.mat

    def apply(self, c, W):
        return self.mat @ W

    def rapply(self, c, G):
        return self.mat.T @ G

    def grad_c(self, c, G, W):
        return None


class SpectralBlock:
    """``s * U @ M(c)``; ``M = diag(c)`` or ``diag(c) P diag(c_x)``."""

    def __init__(self, U, scale, P=None, c_x=None):
        self.U = U
        self.scale = float(scale)
        self.Pcx = None if P is None else P * c_x
        self.width = U.shape[1] if P is None else P.shape[1]

    def _m(self, c):
        return np.diag(c) if self.Pcx is None else c[:, None] * self.Pcx

    def dense(self, c):
        return self.scale * (self.U @ self._m(c))

    def apply(self, c, W):
        if self.Pcx is None:
            inner = c[:, None] * W
        else:
            inner = c[:, None] * (self.Pcx @ W)
        return self.scale * (self.U @ inner)

    def rapply(self, c, G):
        ug = self.U.T @ G
        if self.Pcx is None:
            return self.scale * (c[:, None] * ug)
        return self.scale * (self.Pcx.T @ (c[:, None] * ug))

    def grad_c(self, c, G, W):
        """dL/dc given dL/dE = G @ W.T restricted to this block's columns."""
        ug = self.U.T @ G
        if self.Pcx is None:
            return self.scale * np.einsum("jh,jh->j", ug, W)
        return self.scale * np.einsum("jh,jh->j", ug, self.Pcx @ W)


@dataclass
class ModelInputs:
    """Precomputed, read-only quantities shared by every trial on a dataset."""

    n: int
    basis: SpectralBasis | None = None
    u_xt: np.ndarray | None = None
    c_x: np.ndarray | None = None
    reduced: np.ndarray | None = None
    features: np.ndarray | None = None


def prepare_inputs(config: ModelConfig, X: np.ndarray, basis: SpectralBasis | None = None,
                   featspec: FeatureSpectral | None = None) -> ModelInputs:
    """Slice cached spectra to the configured sizes and precompute projections."""
    X = np.asarray(X, dtype=np.float64)
    n = X.shape[0]
    inputs = ModelInputs(n=n, features=X)
    if config.uses_graph:
        if basis is None:
            raise ValueError(f"{config.variant.value} needs a spectral basis")
        if basis.d < config.d:
            raise ValueError(f"basis has {basis.d} components, config asks for {config.d}")
        inputs.basis = basis if basis.d == config.d else basis.truncate(config.d)
    if config.uses_feature_spectrum:
        if featspec is None:
            raise ValueError(f"{config.variant.value} needs a feature spectrum")
        Q = featspec.Q[:, :config.k]
        sig = featspec.sigma_x[:config.k]
        inputs.c_x = feature_scaling(sig, config.feature_scaling)
        inputs.reduced = Q * inputs.c_x
        if inputs.basis is not None:
            inputs.u_xt = inputs.basis.U.T @ Q
    return inputs


def glorot(rng, fan_in, fan_out):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


@dataclass
class ForwardState:
    c: np.ndarray
    pre: np.ndarray | None
    hidden: np.ndarray | None
    mask: np.ndarray | None
    logits: np.ndarray
    probs: np.ndarray


def softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _check_finite(arr, layer):
    if not np.all(np.isfinite(arr)):
        raise NonFiniteError(f"non-finite activation in {layer}")


class EigenModel:
    """One model variant bound to precomputed dataset inputs."""

    def __init__(self, config: ModelConfig, inputs: ModelInputs, num_classes: int):
        self.config = config.validate()
        self.inputs = inputs
        self.num_classes = int(num_classes)
        self.blocks = self._build_blocks()
        self.in_width = sum(b.width for b in self.blocks)

    def _build_blocks(self):
        cfg, inp = self.config, self.inputs
        v = cfg.variant
        if v in (Variant.LR, Variant.MLP):
            blocks = [DenseBlock(inp.features)]
        elif v is Variant.EIGEN:
            blocks = [SpectralBlock(inp.basis.U, cfg.scale)]
        elif v in (Variant.EIGEN_EIGEN, Variant.REGEIGEN):
            blocks = [SpectralBlock(inp.basis.U, cfg.scale, inp.u_xt, inp.c_x)]
        elif v is Variant.EIGEN_CONCAT:
            blocks = [DenseBlock(inp.reduced), SpectralBlock(inp.basis.U, cfg.scale)]
        else:  # pragma: no cover
            raise ValueError(v)
        if cfg.use_order0:
            blocks.append(DenseBlock(inp.reduced))
        return blocks

    @property
    def adapt_kind(self) -> AdaptKind:
        return self.config.adapt if self.config.uses_graph else AdaptKind.FROZEN

    def init_params(self, rng) -> ModelParams:
        cfg = self.config
        if self.config.uses_graph:
            bins = make_bins(cfg.d, cfg.bins) if cfg.bins is not None and \
                self.adapt_kind is not AdaptKind.FROZEN else None
            adaptation = init_params(self.adapt_kind, cfg.d, bins)
        else:
            adaptation = init_params(AdaptKind.FROZEN, 0)
        m = self.num_classes
        if cfg.hidden == 0:
            head = {"W": glorot(rng, self.in_width, m), "b": np.zeros(m)}
        else:
            head = {"W1": glorot(rng, self.in_width, cfg.hidden), "b1": np.zeros(cfg.hidden),
                    "W2": glorot(rng, cfg.hidden, m), "b2": np.zeros(m)}
        return ModelParams(adaptation, head)

    def adapted(self, params: ModelParams) -> np.ndarray:
        if not self.config.uses_graph:
            return np.zeros(0)
        return adapt(self.inputs.basis.sigma, params.adaptation)

    def embedding(self, params: ModelParams) -> np.ndarray:
        c = self.adapted(params)
        return np.hstack([b.dense(c) for b in self.blocks])

    def _split(self, W):
        out, start = [], 0
        for b in self.blocks:
            out.append(W[start:start + b.width])
            start += b.width
        return out

    def _apply(self, c, W):
        return sum(b.apply(c, w) for b, w in zip(self.blocks, self._split(W)))

    def _rapply(self, c, G):
        return np.vstack([b.rapply(c, G) for b in self.blocks])

    def forward(self, params: ModelParams, train: bool = False, rng=None,
                mask: np.ndarray | None = None) -> ForwardState:
        """Scores for every node. ``mask`` overrides dropout sampling when given."""
        c = self.adapted(params)
        head = params.head
        if self.config.hidden == 0:
            logits = self._apply(c, head["W"]) + head["b"]
            _check_finite(logits, "output layer")
            return ForwardState(c, None, None, None, logits, softmax(logits))
        pre = self._apply(c, head["W1"]) + head["b1"]
        _check_finite(pre, "hidden layer")
        hidden = np.maximum(pre, 0.0)
        p = self.config.dropout
        if train and p > 0:
            if mask is None:
                keep = rng.random(hidden.shape) >= p
                mask = keep / (1.0 - p)
            hidden_d = hidden * mask
        else:
            mask = None
            hidden_d = hidden
        logits = hidden_d @ head["W2"] + head["b2"]
        _check_finite(logits, "output layer")
        return ForwardState(c, pre, hidden_d, mask, logits, softmax(logits))

    def backward(self, params: ModelParams, state: ForwardState, labels, train_idx,
                 weight_decay: float = 0.0, l1_lambda: float = 0.0):
        """Loss and gradients of masked mean CE + L2 on head weights + L1 on g_s."""
        train_idx = np.asarray(train_idx)
        head = params.head
        probs = state.probs
        if train_idx.size:
            y = np.asarray(labels)[train_idx]
            picked = probs[train_idx, y]
            loss = float(-np.mean(np.log(np.maximum(picked, 1e-12))))
            # gradient of the clamped log is zero below the clamp
            dlog = np.zeros_like(probs)
            rows = probs[train_idx].copy()
            rows[np.arange(train_idx.size), y] -= 1.0
            rows[picked < 1e-12] = 0.0
            dlog[train_idx] = rows / train_idx.size
        else:
            loss = 0.0
            dlog = np.zeros_like(probs)

        grads = {}
        c = state.c
        if self.config.hidden == 0:
            W = head["W"]
            grads["W"] = self._rapply(c, dlog)
            grads["b"] = dlog.sum(axis=0)
            g_in, w_in = dlog, W
        else:
            W1, W2 = head["W1"], head["W2"]
            grads["W2"] = state.hidden.T @ dlog
            grads["b2"] = dlog.sum(axis=0)
            dh = dlog @ W2.T
            if state.mask is not None:
                dh = dh * state.mask
            dpre = dh * (state.pre > 0)
            grads["W1"] = self._rapply(c, dpre)
            grads["b1"] = dpre.sum(axis=0)
            g_in, w_in = dpre, W1

        for name in ("W", "W1", "W2"):
            if name in head and weight_decay:
                loss += 0.5 * weight_decay * float(np.sum(head[name] ** 2))
                grads[name] = grads[name] + weight_decay * head[name]

        p = params.adaptation
        if p.kind is not AdaptKind.FROZEN:
            dc = np.zeros_like(c)
            for b, w in zip(self.blocks, self._split(w_in)):
                g = b.grad_c(c, g_in, w)
                if g is not None:
                    dc += g
            d1, d2 = adapt_grad(self.inputs.basis.sigma, p, dc)
            if l1_lambda:
                pen, dpen = l1_penalty(p, l1_lambda)
                loss += pen
                d1 = d1 + dpen
            grads["alpha1"], grads["alpha2"] = d1, d2
        for name, g in grads.items():
            _check_finite(g, f"gradient of {name}")
        return loss, grads


def model_backward(model: EigenModel, params: ModelParams, state: ForwardState, labels,
                   train_idx, weight_decay=0.0, l1_lambda=0.0):
    return model.backward(params, state, labels, train_idx, weight_decay, l1_lambda)


def head_forward(e: np.ndarray, head: dict, train: bool = False, dropout: float = 0.0,
                 rng=None, mask=None) -> ForwardState:
    """Classifier head on an explicit embedding matrix."""
    cfg = ModelConfig(variant=Variant.MLP if "W1" in head else Variant.LR,
                      hidden=head["W1"].shape[1] if "W1" in head else 0,
                      dropout=dropout)
    model = EigenModel(cfg, ModelInputs(n=e.shape[0], features=e),
                       (head.get("W2", head.get("W"))).shape[1])
    params = ModelParams(init_params(AdaptKind.FROZEN, 0), head)
    return model.forward(params, train=train, rng=rng, mask=mask)


# ---------------------------------------------------------------------------
# checkpoints

_CKPT_MAGIC = b"SACK"
_CKPT_VERSION = 1


def save_checkpoint(path, config: ModelConfig, params: ModelParams) -> None:
    arrays, offset, manifest = [], 0, []
    for name, arr in sorted(params.head.items()):
        arr = np.ascontiguousarray(arr, dtype="<f8")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset})
        arrays.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({
        "version": _CKPT_VERSION,
        "config": config.to_dict(),
        "adaptation": params.adaptation.to_dict(),
        "arrays": manifest,
    }, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(_CKPT_MAGIC + struct.pack("<IQ", _CKPT_VERSION, len(header)))
        fh.write(header)
        for blob in arrays:
            fh.write(blob)


def load_checkpoint(path):
    blob = Path(path).read_bytes()
    if blob[:4] != _CKPT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, hlen = struct.unpack("<IQ", blob[4:16])
    if version != _CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    header = json.loads(blob[16:16 + hlen])
    body = blob[16 + hlen:]
    head = {}
    for entry in header["arrays"]:
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=count, offset=entry["offset"])
        head[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
    config = ModelConfig.from_dict(header["config"])
    return config, ModelParams(AdaptationParams.from_dict(header["adaptation"]), head)
