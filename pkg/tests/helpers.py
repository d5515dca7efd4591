"""Shared builders for model tests and the finite-difference gradient oracle."""

import numpy as np

from conftest import connected_random_graph
from spectral_adapt.graph import sym_normalize
from spectral_adapt.model import EigenModel, ModelConfig, prepare_inputs
from spectral_adapt.spectral import feature_spectrum, truncated_spectrum

KINK_GAP = 1e-6


def small_instance(n=30, m=8, classes=3, seed=0):
    g = connected_random_graph(n, 0.15, seed)
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((n, m))
    y = rng.integers(0, classes, n)
    a = sym_normalize(g)
    basis = truncated_spectrum(a, n)
    fs = feature_spectrum(X, min(n, m))
    return a, X, y, basis, fs


def build_model(cfg: ModelConfig, X, basis, fs, classes):
    cfg = cfg.resolve(X.shape[0], X.shape[1])
    return EigenModel(cfg, prepare_inputs(cfg, X, basis, fs), classes)


def perturb_away_from_kinks(params, rng):
    """Move C2 parameters off their ReLU kinks and randomize the head biases."""
    p = params.adaptation
    if p.kind.value == "c2":
        p.alpha1[:] = rng.uniform(0.3, 2.0, p.alpha1.size)
        p.alpha2[:] = rng.uniform(0.3, 2.0, p.alpha2.size)
    elif p.kind.value == "c1":
        p.alpha1[:] = rng.normal(size=p.alpha1.size)
        p.alpha2[:] = rng.uniform(0.3, 2.0, p.alpha2.size)
    for k, v in params.head.items():
        if k.startswith("b"):
            v[:] = rng.normal(scale=0.1, size=v.shape)
    return params


def _pattern(state):
    return None if state.pre is None else state.pre > 0


def gradcheck(model, params, labels, train_idx, weight_decay=0.0, l1_lambda=0.0,
              h=1e-5, seed=0):
    """Return ``{name: (relative_error, skipped)}`` comparing analytic and central FD grads.

    Dropout uses one fixed mask for every evaluation. Coordinates whose
    perturbation flips a ReLU pattern are excluded from both sides of the
    comparison; so is everything when a pre-activation lies within
    ``KINK_GAP`` of zero.
    """
    rng = np.random.default_rng(seed)
    base = model.forward(params, train=True, rng=rng)
    mask = base.mask
    _, grads = model.backward(params, base, labels, train_idx, weight_decay, l1_lambda)

    def loss_at(p):
        st = model.forward(p, train=True, mask=mask)
        val, _ = model.backward(p, st, labels, train_idx, weight_decay, l1_lambda)
        return val, _pattern(st)

    ref_pattern = _pattern(base)
    out = {}
    for name, arr in params.arrays().items():
        analytic = grads[name].ravel()
        fd = np.zeros_like(analytic)
        keep = np.ones(analytic.size, dtype=bool)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, pat_p = loss_at(params)
            flat[i] = orig - h
            lm, pat_m = loss_at(params)
            flat[i] = orig
            if ref_pattern is not None and (
                    not np.array_equal(pat_p, ref_pattern)
                    or not np.array_equal(pat_m, ref_pattern)
                    or np.min(np.abs(base.pre)) < KINK_GAP):
                keep[i] = False
                continue
            fd[i] = (lp - lm) / (2 * h)
        a, f = analytic[keep], fd[keep]
        denom = max(np.linalg.norm(f), np.linalg.norm(a), 1e-12)
        out[name] = (float(np.linalg.norm(a - f) / denom), int((~keep).sum()))
    return out
