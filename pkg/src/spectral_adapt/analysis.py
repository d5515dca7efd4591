"""Diagnostic studies: eigenvector weight probe, adapted/original eigenvalue
ratios, accuracy versus component count and label budget, and rank tables.

The component and label studies return plot data of the form
``{"x": [...], "mean": [...], "std": [...], "meta": {...}}``; the probe and
ratio results have their own ``to_plot_data`` with the same ``x``/``meta``
keys.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.optimize import minimize
from scipy.stats import rankdata

from .adaptation import AdaptationParams, adapt
from .datasets import DatasetBundle, subsample_train
from .model import EigenModel, ModelConfig, ModelInputs, Variant
from .spectral import SpectralBasis
from .training import TrainConfig, evaluate, mean_std, sweep

PROBE_WEIGHT_DECAY = 5e-4
PROBE_MAX_ITER = 300
RATIO_FLOOR = 1e-12


@dataclass
class WeightProbeResult:
    weights: np.ndarray = field(repr=False)  # (classes, d), columns by descending sigma
    sigma: np.ndarray = field(repr=False)
    val_acc: float = float("nan")
    test_acc: float = float("nan")
    meta: dict = field(default_factory=dict)

    def to_plot_data(self):
        return {
            "x": list(range(self.weights.shape[1])),
            "weights": self.weights.tolist(),
            "sigma": self.sigma.tolist(),
            "meta": self.meta,
        }


def eigenweight_probe(basis: SpectralBasis, labels, split, num_classes: int,
                      weight_decay: float = PROBE_WEIGHT_DECAY,
                      max_iter: int = PROBE_MAX_ITER) -> WeightProbeResult:
    """Fit a softmax regression on ``U diag(sigma ** 0.5)`` and return its weights.

    The objective is the training module's masked cross-entropy plus
    ``0.5 * weight_decay * ||W||^2``. It is convex, so it is minimized with
    L-BFGS from a zero start; the weights are then a deterministic function
    of the data and need no early stopping.
    """
    labels = np.asarray(labels)
    if len(split.train) == 0 or len(split.val) == 0:
        raise ValueError("probe needs nonempty train and validation sets")
    feats = basis.U * np.sqrt(basis.sigma)
    cfg = ModelConfig(variant=Variant.LR, hidden=0, dropout=0.0)
    model = EigenModel(cfg, ModelInputs(n=basis.n, features=feats), num_classes)
    params = model.init_params(np.random.default_rng(0))
    d, m = basis.d, num_classes
    W, b = params.head["W"], params.head["b"]

    def objective(x):
        W[:] = x[:d * m].reshape(d, m)
        b[:] = x[d * m:]
        loss, grads = model.backward(params, model.forward(params), labels, split.train,
                                     weight_decay)
        return loss, np.concatenate([grads["W"].ravel(), grads["b"]])

    res = minimize(objective, np.zeros(d * m + m), jac=True, method="L-BFGS-B",
                   options={"maxiter": max_iter})
    objective(res.x)
    probs = model.forward(params).probs
    return WeightProbeResult(
        weights=W.T.copy(),
        sigma=basis.sigma.copy(),
        val_acc=evaluate(probs, labels, split.val),
        test_acc=evaluate(probs, labels, split.test) if len(split.test) else float("nan"),
        meta={"study": "weights", "solver": "l-bfgs-b", "weight_decay": weight_decay,
              "max_iter": max_iter, "iterations": int(res.nit), "converged": bool(res.success),
              "d": d, "classes": m},
    )


def moving_average(x, window: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if window < 1:
        raise ValueError("window must be >= 1")
    window = min(window, x.size)
    if window == 0:
        return x.copy()
    return np.convolve(x, np.ones(window) / window, mode="valid")


@dataclass
class RatioSeries:
    index: np.ndarray
    raw: np.ndarray
    smoothed: np.ndarray
    window: int
    omitted: np.ndarray

    def to_plot_data(self, meta=None):
        return {
            "x": self.index.tolist(),
            "raw": self.raw.tolist(),
            "smoothed": self.smoothed.tolist(),
            "meta": {"study": "ratio", "window": self.window,
                     "omitted": self.omitted.tolist(), **(meta or {})},
        }


def eig_ratio(params: AdaptationParams, sigma, window: int = 100) -> RatioSeries:
    """``C(sigma_i) / sigma_i`` for sigma_i >= 1e-12, plus a moving average."""
    sigma = np.asarray(sigma, dtype=np.float64)
    adapted = adapt(sigma, params)
    ok = sigma >= RATIO_FLOOR
    idx = np.flatnonzero(ok)
    raw = adapted[ok] / sigma[ok]
    w = max(1, min(window, raw.size))
    return RatioSeries(index=idx, raw=raw, smoothed=moving_average(raw, w) if raw.size else raw,
                       window=w, omitted=np.flatnonzero(~ok))


def _series(x, cells, meta):
    means, stds = [], []
    for row in cells:
        m, s = mean_std(row)
        means.append(m)
        stds.append(s)
    return {"x": list(x), "mean": means, "std": stds, "meta": meta}


def vary_components_study(bundle: DatasetBundle, splits, d_list, model_cfg: ModelConfig,
                          train_cfg: TrainConfig, inputs_for, space=None, trials: int = 1,
                          seed: int = 0, jobs: int = 1):
    """Test accuracy per component count; each point is sweep-selected over ``space``.

    ``inputs_for(cfg)`` builds :class:`ModelInputs` for a resolved config.
    """
    if max(d_list) > bundle.n:
        raise ValueError(f"component count {max(d_list)} exceeds n={bundle.n}")
    cells, picked = [], []
    for d in d_list:
        cfg = replace(model_cfg, d=int(d))
        if cfg.bins is not None:
            cfg = replace(cfg, bins=min(cfg.bins, int(d)))
        cfg = cfg.resolve(bundle.n, bundle.features.shape[1])
        res = sweep(cfg, train_cfg, space or {}, inputs_for, bundle.labels, bundle.num_classes,
                    splits, trials, seed, jobs)
        cells.append([r.test_acc for r in res.reports])
        picked.append(res.best_point)
    return _series([int(d) for d in d_list], cells,
                   {"study": "components", "model": model_cfg.to_dict(),
                    "train": train_cfg.to_dict(), "selected": picked,
                    "splits": len(splits)})


def vary_labels_study(bundle: DatasetBundle, splits, fractions, model_cfg: ModelConfig,
                      train_cfg: TrainConfig, inputs_for, space=None, trials: int = 1,
                      seed: int = 0, jobs: int = 1):
    """Test accuracy when only a fraction of each split's train set is labeled."""
    cfg = model_cfg.resolve(bundle.n, bundle.features.shape[1])
    cells, picked = [], []
    for frac in fractions:
        sub = [subsample_train(s, frac, seed + i) for i, s in enumerate(splits)]
        res = sweep(cfg, train_cfg, space or {}, inputs_for, bundle.labels,
                    bundle.num_classes, sub, trials, seed, jobs)
        cells.append([r.test_acc for r in res.reports])
        picked.append(res.best_point)
    return _series([float(f) for f in fractions], cells,
                   {"study": "labels", "model": model_cfg.to_dict(),
                    "train": train_cfg.to_dict(), "selected": picked,
                    "splits": len(splits)})


def rank_models(table: dict, groups: dict | None = None, threshold: float = 0.5):
    """Average rank per model within dataset groups.

    ``table[model][dataset]`` holds an accuracy or ``None``. Rank 1 is best;
    ties share the mean of their positions; missing cells rank last and are
    listed under ``"missing"``. ``groups`` maps dataset -> group name, or
    dataset -> homophily score (grouped at ``threshold`` into
    ``heterophilic``/``homophilic``).
    """
    models = sorted(table)
    if not models:
        raise ValueError("empty results table")
    datasets = sorted({ds for row in table.values() for ds in row})
    if not datasets:
        raise ValueError("empty results table")
    if groups is None:
        group_of = {ds: "all" for ds in datasets}
    else:
        group_of = {}
        for ds in datasets:
            g = groups[ds]
            if isinstance(g, (int, float)):
                g = "heterophilic" if g <= threshold else "homophilic"
            group_of[ds] = g

    ranks = {m: {} for m in models}
    missing = []
    for ds in datasets:
        vals = []
        for m in models:
            v = table[m].get(ds)
            if v is None or (isinstance(v, float) and np.isnan(v)):
                missing.append([m, ds])
                vals.append(-np.inf)
            else:
                vals.append(float(v))
        r = rankdata(-np.asarray(vals), method="average")
        for m, rank in zip(models, r):
            ranks[m][ds] = float(rank)

    out = {}
    for m in models:
        per_group = {}
        for ds, rank in ranks[m].items():
            per_group.setdefault(group_of[ds], []).append(rank)
        out[m] = {g: float(np.mean(v)) for g, v in sorted(per_group.items())}
    return {"average_rank": out, "per_dataset": ranks, "missing": missing}
