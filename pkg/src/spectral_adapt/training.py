"""Full-batch training: masked cross-entropy, Adam, early stopping and random search."""

from __future__ import annotations

import itertools
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .model import EigenModel, ModelConfig, ModelInputs, ModelParams, NonFiniteError

logger = logging.getLogger(__name__)

LR_GRID = (0.001, 0.003, 0.005, 0.008, 0.01)
DROPOUT_GRID = (0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8)
WEIGHT_DECAY_GRID = (1e-4, 5e-4, 1e-3, 5e-3, 1e-2, 5e-2, 1e-1)
HIDDEN_GRID = (16, 32, 64)
L1_GRID = tuple(float(x) for x in np.logspace(-3, 3, 7))


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    l1_lambda: float = 0.0
    max_epochs: int = 300
    patience: int = 30
    lr_decay: float = 0.99
    decay_every: int = 50
    seed: int = 0

    def __post_init__(self):
        for name in ("lr", "weight_decay", "l1_lambda", "lr_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be nonnegative")
        if self.max_epochs < 1 or self.patience < 1 or self.decay_every < 1:
            raise ValueError("max_epochs, patience and decay_every must be positive")

    def to_dict(self):
        return asdict(self)


def learning_rate(lr0: float, epoch: int, decay: float = 0.99, every: int = 50) -> float:
    """Step schedule ``lr0 * decay ** (epoch // every)`` with 0-based epochs."""
    return lr0 * decay ** (epoch // every)


def cross_entropy(probs, labels, mask) -> float:
    """Mean of ``-log p_true`` over ``mask``, with probabilities clamped at 1e-12."""
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("cross-entropy over an empty mask")
    y = np.asarray(labels)[mask]
    picked = np.asarray(probs)[mask, y]
    return float(-np.mean(np.log(np.maximum(picked, 1e-12))))


def predict(probs) -> np.ndarray:
    # argmax returns the first maximum, i.e. the lowest class id on ties
    return np.argmax(probs, axis=1)


def evaluate(probs, labels, mask) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        raise ValueError("accuracy over an empty mask")
    return float(np.mean(predict(probs[mask]) == np.asarray(labels)[mask]))


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, *,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
              weight_decay: float = 0.0, decay_keys=()) -> AdamState:
    """In-place bias-corrected Adam update of the arrays in ``params``.

    ``weight_decay`` is added to the gradients of ``decay_keys`` before the
    moment updates (L2-coupled decay).
    """
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name} at step {state.t + 1}")
    state.t += 1
    b1t = 1.0 - beta1 ** state.t
    b2t = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        p = params[name]
        if weight_decay and name in decay_keys:
            g = g + weight_decay * p
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= lr * (m / b1t) / (np.sqrt(v / b2t) + eps)
    return state


@dataclass
class FitReport:
    best_val_acc: float
    test_acc: float
    best_epoch: int
    epochs_run: int
    seed: int
    train_loss: list
    train_acc: list
    val_acc: list
    params: ModelParams = field(repr=False, default=None)

    def to_dict(self, include_params: bool = True):
        out = {
            "best_val_acc": self.best_val_acc,
            "test_acc": self.test_acc,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
            "seed": self.seed,
            "curves": {"train_loss": self.train_loss, "train_acc": self.train_acc,
                       "val_acc": self.val_acc},
        }
        if include_params and self.params is not None:
            out["adaptation"] = self.params.adaptation.to_dict()
        return out


def fit(model: EigenModel, labels, split, train_cfg: TrainConfig) -> FitReport:
    """Train with early stopping on validation accuracy; restore the best epoch.

    Ties in validation accuracy keep the earlier epoch. Training stops once
    ``patience`` consecutive epochs fail to improve on the best value.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(train_cfg.seed)
    params = model.init_params(rng)
    arrays = params.arrays()
    state = AdamState()
    train_idx, val_idx, test_idx = split.train, split.val, split.test

    best_val, best_epoch, best_params, best_test = -1.0, -1, None, float("nan")
    losses, train_accs, val_accs = [], [], []
    stale = 0
    epoch = 0
    for epoch in range(train_cfg.max_epochs):
        fwd = model.forward(params, train=True, rng=rng)
        loss, grads = model.backward(params, fwd, labels, train_idx,
                                     train_cfg.weight_decay, train_cfg.l1_lambda)
        losses.append(loss)
        train_accs.append(evaluate(fwd.probs, labels, train_idx))
        adam_step(arrays, grads, state,
                  learning_rate(train_cfg.lr, epoch, train_cfg.lr_decay, train_cfg.decay_every))
        probs = model.forward(params, train=False).probs
        val = evaluate(probs, labels, val_idx)
        val_accs.append(val)
        if val > best_val:
            best_val, best_epoch, stale = val, epoch, 0
            best_params = params.copy()
            best_test = evaluate(probs, labels, test_idx) if len(test_idx) else float("nan")
        else:
            stale += 1
            if stale >= train_cfg.patience:
                break
    return FitReport(best_val_acc=best_val, test_acc=best_test, best_epoch=best_epoch,
                     epochs_run=epoch + 1, seed=train_cfg.seed, train_loss=losses,
                     train_acc=train_accs, val_acc=val_accs, params=best_params)


# ---------------------------------------------------------------------------
# search

def mean_std(values):
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())


def format_mean_std(values) -> str:
    """``"mean (std)"`` in accuracy percent, two decimals."""
    mean, std = mean_std(values)
    return f"{100 * mean:.2f} ({100 * std:.2f})"


def default_space(variant, d: int | None = None, n: int | None = None) -> dict:
    """Hyperparameter grid for one model variant."""
    from .model import Variant

    variant = Variant(variant)
    space = {"lr": list(LR_GRID), "weight_decay": list(WEIGHT_DECAY_GRID)}
    if variant is Variant.LR:
        space["hidden"] = [0]
        return space
    space["dropout"] = list(DROPOUT_GRID)
    space["hidden"] = list(HIDDEN_GRID)
    if variant is Variant.MLP:
        return space
    space["adapt"] = ["c1", "c2"]
    space["scale"] = [1.0, 10.0]
    if variant is Variant.REGEIGEN:
        space["bins"] = bin_grid(n if n is not None else d, d)
        space["l1_lambda"] = list(L1_GRID)
    return space


def bin_grid(n: int, d: int, steps: int = 9) -> list:
    """Bin counts from 10% to 90% of the node count, clamped to [1, d]."""
    out = []
    for frac in np.linspace(0.1, 0.9, steps):
        b = int(min(max(round(frac * n), 1), d))
        if b not in out:
            out.append(b)
    return out


def grid_points(space: dict) -> list:
    keys = sorted(space)
    return [dict(zip(keys, combo)) for combo in itertools.product(*(space[k] for k in keys))]


def sample_configs(space: dict, trials: int, seed: int) -> list:
    """Seeded draw without replacement; the whole grid when ``trials`` covers it."""
    points = grid_points(space)
    if not points:
        raise ValueError("empty search space")
    if trials >= len(points):
        return points
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(points), size=trials, replace=False)
    return [points[i] for i in idx]


MODEL_KEYS = {"hidden", "dropout", "scale", "adapt", "bins", "use_order0", "d", "k",
              "feature_scaling"}
TRAIN_KEYS = {"lr", "weight_decay", "l1_lambda", "max_epochs", "patience", "seed"}


def apply_point(model_cfg: ModelConfig, train_cfg: TrainConfig, point: dict):
    m = {k: v for k, v in point.items() if k in MODEL_KEYS}
    t = {k: v for k, v in point.items() if k in TRAIN_KEYS}
    unknown = set(point) - MODEL_KEYS - TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
    return replace(model_cfg, **m), replace(train_cfg, **t)


def split_seed(seed: int, trial: int, split_index: int) -> int:
    ss = np.random.SeedSequence([seed, trial, split_index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


def run_cell(model_cfg: ModelConfig, train_cfg: TrainConfig, inputs: ModelInputs,
             labels, num_classes: int, split) -> FitReport:
    model = EigenModel(model_cfg, inputs, num_classes)
    return fit(model, labels, split, train_cfg)


def _run_cell_job(args):
    key, model_cfg, train_cfg, inputs, labels, num_classes, split = args
    return key, run_cell(model_cfg, train_cfg, inputs, labels, num_classes, split)


def run_cells(jobs_spec, jobs: int = 1) -> dict:
    """Run ``(key, model_cfg, train_cfg, inputs, labels, m, split)`` jobs; results keyed."""
    if jobs <= 1 or len(jobs_spec) <= 1:
        return dict(_run_cell_job(j) for j in jobs_spec)
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return dict(pool.map(_run_cell_job, jobs_spec))


@dataclass
class SweepResult:
    best_point: dict
    best_model: ModelConfig
    best_train: TrainConfig
    reports: list
    trials: list

    @property
    def summary(self) -> str:
        return format_mean_std([r.test_acc for r in self.reports])

    def to_dict(self):
        mean_test, std_test = mean_std([r.test_acc for r in self.reports])
        mean_val, _ = mean_std([r.best_val_acc for r in self.reports])
        return {
            "best_point": self.best_point,
            "best_model": self.best_model.to_dict(),
            "best_train": self.best_train.to_dict(),
            "mean_val_acc": mean_val,
            "mean_test_acc": mean_test,
            "std_test_acc": std_test,
            "summary": self.summary,
            "splits": [r.to_dict() for r in self.reports],
            "trials": self.trials,
        }


def sweep(model_cfg: ModelConfig, train_cfg: TrainConfig, space: dict, inputs_for,
          labels, num_classes: int, splits, trials: int, seed: int = 0,
          jobs: int = 1) -> SweepResult:
    """Random search; the winner maximizes mean validation accuracy over splits.

    ``inputs_for(model_cfg)`` returns the :class:`ModelInputs` for a resolved
    config, so component counts may vary across points. Ties keep the earlier
    sampled point.
    """
    points = sample_configs(space, trials, seed)
    specs = []
    configs = []
    for t, point in enumerate(points):
        mc, tc = apply_point(model_cfg, train_cfg, point)
        configs.append((mc, tc))
        inputs = inputs_for(mc)
        for s, split in enumerate(splits):
            specs.append(((t, s), mc, replace(tc, seed=split_seed(seed, t, s)), inputs,
                          labels, num_classes, split))
    results = run_cells(specs, jobs)

    best_t, best_val = 0, -np.inf
    trial_rows = []
    for t, point in enumerate(points):
        reports = [results[(t, s)] for s in range(len(splits))]
        val = mean_std([r.best_val_acc for r in reports])[0]
        test = mean_std([r.test_acc for r in reports])[0]
        trial_rows.append({"trial": t, "point": point, "mean_val_acc": val,
                           "mean_test_acc": test})
        if val > best_val:
            best_t, best_val = t, val
    mc, tc = configs[best_t]
    return SweepResult(best_point=points[best_t], best_model=mc, best_train=tc,
                       reports=[results[(best_t, s)] for s in range(len(splits))],
                       trials=trial_rows)
