"""Truncated spectra of the normalized adjacency and of the feature Gram matrix.

The adjacency solver is a restarted block Krylov iteration with full
reorthogonalization and Rayleigh-Ritz extraction. Ritz pairs are ordered by
eigenvalue magnitude, so the returned values are the top singular values of
the symmetric operator and the vectors its left singular vectors.
"""

from __future__ import annotations

import hashlib
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .graph import NormalizedAdjacency

MAX_COMPONENTS = 2048
OVERSAMPLE = 10
MAX_ITER = 1000
TOL = 1e-8

_BASIS_MAGIC = b"SABASIS1"
_FEATURE_MAGIC = b"SAFEATS1"


class SpectralError(RuntimeError):
    """Solver failed to converge; ``residuals`` holds the last residual norms."""

    def __init__(self, message, residuals=None):
        super().__init__(message)
        self.residuals = residuals


@dataclass(frozen=True)
class SpectralBasis:
    U: np.ndarray = field(repr=False)
    sigma: np.ndarray
    residuals: np.ndarray = field(default=None, repr=False)
    iterations: int = 0

    def __post_init__(self):
        # one memory layout whether computed, sliced or loaded, so BLAS results match bitwise
        object.__setattr__(self, "U", np.ascontiguousarray(self.U, dtype=np.float64))

    @property
    def n(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    def truncate(self, d: int) -> "SpectralBasis":
        if not 1 <= d <= self.d:
            raise ValueError(f"cannot truncate a {self.d}-component basis to {d}")
        res = None if self.residuals is None else self.residuals[:d]
        return SpectralBasis(self.U[:, :d], self.sigma[:d], res, self.iterations)


@dataclass(frozen=True)
class FeatureSpectral:
    Q: np.ndarray = field(repr=False)
    sigma_x: np.ndarray
    rank_deficient: bool = False

    def __post_init__(self):
        object.__setattr__(self, "Q", np.ascontiguousarray(self.Q, dtype=np.float64))

    @property
    def k(self) -> int:
        return self.Q.shape[1]

    def reduced_features(self, mode: str = "sqrt") -> np.ndarray:
        """Fixed low-dimensional features ``Q diag(c_x)``."""
        return self.Q * feature_scaling(self.sigma_x, mode)


def feature_scaling(sigma_x: np.ndarray, mode: str = "sqrt") -> np.ndarray:
    """Fixed feature adaptation ``c_x``: singular values of X or Gram eigenvalues."""
    if mode == "sqrt":
        return np.sqrt(sigma_x)
    if mode == "eig":
        return np.asarray(sigma_x, dtype=np.float64)
    raise ValueError(f"unknown feature scaling {mode!r}")


def default_components(n: int) -> int:
    return min(n, MAX_COMPONENTS)


def sign_fix(U: np.ndarray) -> np.ndarray:
    """Flip columns so each column's largest-magnitude entry is positive."""
    if U.size == 0:
        return U
    idx = np.argmax(np.abs(U), axis=0)
    signs = np.sign(U[idx, np.arange(U.shape[1])])
    signs[signs == 0] = 1.0
    return U * signs


def _orthogonalize(block, basis):
    """Project ``block`` off ``basis`` (twice) and return an orthonormal remainder.

    Columns are ordered by projected norm before the QR, so truncating the
    result keeps the most informative directions.
    """
    for _ in range(2):
        if basis is not None and basis.shape[1]:
            block = block - basis @ (basis.T @ block)
    if block.shape[1] == 0:
        return block
    order = np.argsort(-np.linalg.norm(block, axis=0), kind="stable")
    q, r = np.linalg.qr(block[:, order])
    diag = np.abs(np.diag(r))
    keep = diag > 1e-10 * max(diag.max(initial=0.0), 1.0)
    q = q[:, keep]
    if basis is not None and basis.shape[1] and q.shape[1]:
        q = q - basis @ (basis.T @ q)
        q, _ = np.linalg.qr(q)
    return q


def truncated_spectrum(a: NormalizedAdjacency, d: int, *, oversample: int = OVERSAMPLE,
                       depth: int = 3, max_iter: int = MAX_ITER, tol: float = TOL,
                       seed: int = 0) -> SpectralBasis:
    """Top-``d`` singular triplets of the symmetric operator ``a``.

    Each cycle grows a block Krylov space from the current Ritz block (up to
    ``depth`` blocks or the full dimension), then keeps the ``d + oversample``
    Ritz vectors of largest |theta| as the next starting block.
    """
    n = a.n
    if not 1 <= d <= n:
        raise ValueError(f"need 1 <= d <= n, got d={d}, n={n}")
    b = min(n, d + oversample)
    cap = min(n, depth * b)
    rng = np.random.default_rng(seed)
    block = _orthogonalize(rng.standard_normal((n, b)), None)

    residuals = None
    for it in range(1, max_iter + 1):
        basis = block
        frontier = block
        while basis.shape[1] < cap:
            grow = a.matvec(frontier)
            new = _orthogonalize(grow, basis)
            if new.shape[1] == 0:
                # invariant subspace reached; widen with fresh directions
                new = _orthogonalize(rng.standard_normal((n, b)), basis)
                if new.shape[1] == 0:
                    break
            new = new[:, :cap - basis.shape[1]]
            basis = np.hstack([basis, new])
            frontier = new

        a_basis = a.matvec(basis)
        h = basis.T @ a_basis
        h = 0.5 * (h + h.T)
        theta, s = np.linalg.eigh(h)
        order = np.lexsort((-theta, -np.abs(theta)))[:b]
        theta, s = theta[order], s[:, order]
        ritz = basis @ s
        r = a_basis @ s - ritz * theta
        residuals = np.linalg.norm(r[:, :d], axis=0)
        if residuals.max() <= tol:
            U = sign_fix(ritz[:, :d])
            return SpectralBasis(U=U, sigma=np.abs(theta[:d]), residuals=residuals,
                                 iterations=it)
        block = ritz
    raise SpectralError(
        f"truncated_spectrum did not converge in {max_iter} cycles "
        f"(max residual {residuals.max():.3e})", residuals)


def feature_spectrum(X: np.ndarray, k: int) -> FeatureSpectral:
    """Top-``k`` left singular vectors of X and the Gram eigenvalues (s**2)."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("feature matrix must be 2-D")
    n, m = X.shape
    if not 1 <= k <= min(n, m):
        raise ValueError(f"need 1 <= k <= min(n, m) = {min(n, m)}, got {k}")
    if not np.all(np.isfinite(X)):
        raise ValueError("feature matrix has non-finite entries")
    Q, s, _ = np.linalg.svd(X, full_matrices=False)
    Q, s = Q[:, :k], s[:k]
    thresh = (s[0] if s.size else 0.0) * max(n, m) * np.finfo(np.float64).eps
    small = s <= thresh
    sigma_x = np.where(small, 0.0, s * s)
    return FeatureSpectral(Q=sign_fix(Q), sigma_x=sigma_x,
                           rank_deficient=bool(small.any()))


def project(basis: SpectralBasis, mat: np.ndarray) -> np.ndarray:
    """``U^T @ mat`` for an (n, p) matrix."""
    mat = np.asarray(mat, dtype=np.float64)
    if mat.ndim != 2 or mat.shape[0] != basis.n:
        raise ValueError(
            f"cannot project a matrix with shape {mat.shape} onto a basis with n={basis.n}")
    return basis.U.T @ mat


# ---------------------------------------------------------------------------
# binary cache

def _pack(magic: bytes, U: np.ndarray, values: np.ndarray) -> bytes:
    n, d = U.shape
    payload = (magic + struct.pack("<QQ", n, d)
               + np.asarray(U, dtype="<f8").tobytes(order="F")
               + np.asarray(values, dtype="<f8").tobytes())
    return payload + hashlib.sha256(payload).digest()


def _unpack(blob: bytes, magic: bytes):
    if blob[:8] != magic:
        raise ValueError("bad magic in spectral cache file")
    payload, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ValueError("checksum mismatch in spectral cache file")
    n, d = struct.unpack("<QQ", payload[8:24])
    expected = 24 + 8 * (n * d + d)
    if len(payload) != expected:
        raise ValueError("truncated spectral cache file")
    U = np.frombuffer(payload, dtype="<f8", count=n * d, offset=24)
    U = U.reshape((n, d), order="F").astype(np.float64)
    vals = np.frombuffer(payload, dtype="<f8", count=d, offset=24 + 8 * n * d).astype(np.float64)
    return U, vals


def save_basis(basis: SpectralBasis, path) -> None:
    Path(path).write_bytes(_pack(_BASIS_MAGIC, basis.U, basis.sigma))


def load_basis(path) -> SpectralBasis:
    U, sigma = _unpack(Path(path).read_bytes(), _BASIS_MAGIC)
    return SpectralBasis(U=U, sigma=sigma)


def save_feature_spectrum(fs: FeatureSpectral, path) -> None:
    Path(path).write_bytes(_pack(_FEATURE_MAGIC, fs.Q, fs.sigma_x))


def load_feature_spectrum(path) -> FeatureSpectral:
    Q, sigma_x = _unpack(Path(path).read_bytes(), _FEATURE_MAGIC)
    return FeatureSpectral(Q=Q, sigma_x=sigma_x, rank_deficient=bool((sigma_x == 0).any()))


def cache_dir() -> Path:
    root = os.environ.get("SPECTRAL_ADAPT_CACHE")
    if root:
        return Path(root)
    return Path.home() / ".cache" / "spectral_adapt"


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(p if isinstance(p, bytes) else np.ascontiguousarray(p).tobytes())
        h.update(b"|")
    return h.hexdigest()[:24]


def cached_spectrum(a: NormalizedAdjacency, d: int, directory=None):
    """Return ``(basis, hit)``; computes and stores the basis on a miss."""
    directory = Path(directory) if directory is not None else cache_dir()
    key = _digest(np.int64(a.n), a.matrix.indptr, a.matrix.indices, a.matrix.data, np.int64(d))
    path = directory / f"basis-{key}.bin"
    if path.exists():
        try:
            return load_basis(path), True
        except ValueError:
            pass
    basis = truncated_spectrum(a, d)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_basis(basis, tmp)
    os.replace(tmp, path)
    return basis, False


def cached_feature_spectrum(X: np.ndarray, k: int, directory=None):
    directory = Path(directory) if directory is not None else cache_dir()
    X = np.ascontiguousarray(X, dtype=np.float64)
    key = _digest(np.asarray(X.shape, dtype=np.int64), X, np.int64(k))
    path = directory / f"feats-{key}.bin"
    if path.exists():
        try:
            return load_feature_spectrum(path), True
        except ValueError:
            pass
    fs = feature_spectrum(X, k)
    directory.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(".tmp")
    save_feature_spectrum(fs, tmp)
    os.replace(tmp, path)
    return fs, False
