"""Penalized, constrained training of additive models.

The objective is the batch-mean negative log likelihood plus two optional
penalties: a roughness penalty on smooth-flagged main effects (absolute
second differences over a fixed uniform grid) and an overlap penalty that
discourages correlation between each main effect and the pair effects
sharing its feature. After every optimizer step the constrained lattice
and calibrator parameters are projected back onto their monotonicity
constraints, and a final tightening projection plus term centering runs
once at the end.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import Dataset
from .errors import ConfigError, NumericOverflowError
from .model import AdditiveModel, center_terms

__all__ = [
    "TrainConfig",
    "PenaltyConfig",
    "TrainResult",
    "smoothness_penalty",
    "overlap_penalty",
    "objective",
    "train",
    "history_to_csv",
]


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    epochs: int = 1000
    convergence_eps: float = 0.0
    batch_size: int = 1000
    patience: int = 10
    omega_smooth: float = 0.0
    omega_mc: float = 0.0
    smooth_grid_size: int = 1000
    center_refresh_every: int = 1
    dykstra_iters: int = 10
    dykstra_tol: float = 1e-7
    optimizer: str = "adam"
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    optimizer_eps: float = 1e-8
    rms_rho: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0.0:
            raise ConfigError("learning rate must be positive")
        if self.epochs < 1 or self.batch_size < 1:
            raise ConfigError("epochs and batch size must be positive")
        if self.patience < 1:
            raise ConfigError("patience must be at least 1")
        if self.convergence_eps < 0.0 or self.omega_smooth < 0.0 or self.omega_mc < 0.0:
            raise ConfigError("thresholds and penalty weights must be non-negative")
        if self.smooth_grid_size < 3:
            raise ConfigError("smoothness grids need at least 3 points")
        if self.center_refresh_every < 1:
            raise ConfigError("center refresh cadence must be at least 1 epoch")
        if self.optimizer not in ("adam", "rmsprop"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        return TrainConfig(**d)


@dataclass
class PenaltyConfig:
    """Penalty weights plus the fixed grids the roughness penalty uses."""

    omega_smooth: float = 0.0
    omega_mc: float = 0.0
    smooth_grids: dict = field(default_factory=dict)  # term label -> 1-D grid

    @property
    def active(self) -> bool:
        return self.omega_smooth > 0.0 or self.omega_mc > 0.0


def build_smooth_grids(model: AdditiveModel, grid_size: int) -> dict:
    """Uniform grids over the observed training range of each smooth term."""
    grids = {}
    for t in model.terms:
        if t.spec.smooth:
            lo, hi = model.feature_ranges[t.spec.features[0]]
            grids[t.label] = np.linspace(lo, hi, grid_size)
    return grids


def _accumulate(target: dict, source: dict) -> None:
    for path, g in source.items():
        if path in target:
            target[path] += g
        else:
            target[path] = g


def term_roughness(model: AdditiveModel, term, grid: np.ndarray) -> float:
    """Sum of |second difference| / h^2 of the term's weighted shape."""
    h = grid[1] - grid[0]
    x = np.zeros((grid.size, len(model.feature_columns)))
    x[:, model._index[term.spec.features[0]]] = grid
    raw, _ = model.term_forward(term, x)
    v = float(term.alpha[0]) * (raw - term.center)
    d2 = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
    return float(np.sum(np.abs(d2)))


def smoothness_penalty(model: AdditiveModel, grids: dict, omega: float):
    """Roughness penalty over smooth-flagged main effects.

    For each term, absolute second differences of the weighted shape over
    its fixed uniform grid, divided by the squared spacing. Gradients flow
    to the term's parameters through the three stencil evaluations; the
    subgradient of |.| at zero is taken as zero.
    """
    value = 0.0
    grads: dict = {}
    if omega == 0.0:
        return value, grads
    for label, grid in grids.items():
        term = model.term(label)
        grid = np.asarray(grid, dtype=float)
        diffs = np.diff(grid)
        h = diffs[0]
        if np.any(np.abs(diffs - h) > 1e-9 * max(abs(h), 1.0)):
            raise ConfigError(f"smoothness grid for {label} is not uniform")
        x = np.zeros((grid.size, len(model.feature_columns)))
        x[:, model._index[term.spec.features[0]]] = grid
        raw, cache = model.term_forward(term, x)
        alpha = float(term.alpha[0])
        v = alpha * (raw - term.center)
        d2 = (v[2:] - 2.0 * v[1:-1] + v[:-2]) / (h * h)
        value += omega * float(np.sum(np.abs(d2)))
        sign = np.sign(d2) * omega / (h * h)
        up_v = np.zeros(grid.size)
        up_v[:-2] += sign
        up_v[1:-1] -= 2.0 * sign
        up_v[2:] += sign
        _accumulate(grads, {("term", term.label, "alpha"): np.array([np.dot(up_v, raw - term.center)])})
        _accumulate(grads, model.term_backward(term, cache, up_v * alpha))
    return value, grads


def overlap_penalty(model: AdditiveModel, x: np.ndarray, omega: float,
                    precomputed: dict | None = None):
    """Penalty on the mean product of main and overlapping pair effects.

    For every (main, pair) couple sharing a feature, the absolute batch
    mean of the product of the two centered term values is added; both
    factors receive gradients. The value is only meaningful while term
    centers are fresh, which the training loop maintains. `precomputed`
    may supply {label: (raw, cache)} forward results to reuse.
    """
    value = 0.0
    grads: dict = {}
    if omega == 0.0:
        return value, grads
    x = np.asarray(x, dtype=float)
    n = x.shape[0]
    mains = {t.spec.features[0]: t for t in model.terms if not t.spec.is_pair}
    pairs = [t for t in model.terms if t.spec.is_pair]
    if not pairs:
        return value, grads
    cache: dict = {}

    def values_of(term):
        if term.label not in cache:
            if precomputed is not None and term.label in precomputed:
                raw, cc = precomputed[term.label]
            else:
                raw, cc = model.term_forward(term, x)
            alpha = float(term.alpha[0])
            cache[term.label] = (raw, cc, alpha, alpha * (raw - term.center))
        return cache[term.label]

    up_v: dict = {}
    for pair in pairs:
        for f in pair.spec.features:
            if f not in mains:
                continue
            main = mains[f]
            _, _, _, v_main = values_of(main)
            _, _, _, v_pair = values_of(pair)
            g = float(np.mean(v_main * v_pair))
            value += omega * abs(g)
            scale = omega * np.sign(g) / n
            up_v[main.label] = up_v.get(main.label, 0.0) + scale * v_pair
            up_v[pair.label] = up_v.get(pair.label, 0.0) + scale * v_main
    for label, upstream in up_v.items():
        term = model.term(label)
        raw, cc, alpha, _ = cache[label]
        _accumulate(grads, {("term", label, "alpha"): np.array([np.dot(upstream, raw - term.center)])})
        _accumulate(grads, model.term_backward(term, cc, upstream * alpha))
    return value, grads


def objective(model: AdditiveModel, x: np.ndarray, y: np.ndarray, exposure=None,
              penalty: PenaltyConfig | None = None, terms=None, base_eta=None):
    """Batch objective value and exact gradients for every parameter.

    Returns (value, grads, parts) where parts holds the nll / smooth /
    overlap components. `terms` restricts evaluation and gradients to a
    subset of terms whose remaining (frozen) contribution is supplied as
    `base_eta`; penalties require the full model, so they cannot be
    combined with a frozen baseline offset.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    n = x.shape[0]
    if n == 0:
        raise ConfigError("objective needs a non-empty batch")
    active = list(model.terms) if terms is None else list(terms)
    if base_eta is not None and penalty is not None and penalty.active:
        raise ConfigError("penalties cannot be evaluated against a frozen offset")

    raws = []
    caches = []
    eta = np.full(n, model.bias[0]) if base_eta is None else model.bias[0] + np.asarray(base_eta)
    for t in active:
        r, c = model.term_forward(t, x)
        raws.append(r)
        caches.append(c)
        eta = eta + float(t.alpha[0]) * (r - t.center)
    if model.uses_offset:
        eta = eta + np.log(np.asarray(exposure, dtype=float))
    with np.errstate(over="ignore"):
        mu = np.clip(np.exp(np.minimum(eta, 709.0)), model.clip_lo, model.clip_hi)
    loss, dloss_dmu = model.distribution.nll(y, mu)
    if not np.all(np.isfinite(loss)):
        bad = int(np.argmax(~np.isfinite(loss)))
        raise NumericOverflowError(f"non-finite loss at batch row {bad}")
    nll = float(np.mean(loss))
    inside = (mu > model.clip_lo) & (mu < model.clip_hi)
    deta = dloss_dmu * mu * inside / n

    grads: dict = {("bias",): np.array([float(np.sum(deta))])}
    for t, r, c in zip(active, raws, caches):
        _accumulate(grads, {("term", t.label, "alpha"): np.array([float(np.dot(deta, r - t.center))])})
        _accumulate(grads, model.term_backward(t, c, deta * float(t.alpha[0])))

    smooth_val = mc_val = 0.0
    if penalty is not None and penalty.active:
        smooth_val, sgrads = smoothness_penalty(model, penalty.smooth_grids, penalty.omega_smooth)
        _accumulate(grads, sgrads)
        forwarded = {t.label: (r, c) for t, r, c in zip(active, raws, caches)}
        mc_val, ograds = overlap_penalty(model, x, penalty.omega_mc, precomputed=forwarded)
        _accumulate(grads, ograds)

    value = nll + smooth_val + mc_val
    return value, grads, {"nll": nll, "smooth": smooth_val, "mc": mc_val}


# ---------------------------------------------------------------------------
# optimizers
# ---------------------------------------------------------------------------

class Adam:
    def __init__(self, leaves, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {path: np.zeros_like(arr) for path, arr in leaves}
        self.v = {path: np.zeros_like(arr) for path, arr in leaves}
        self.t = 0

    def step(self, leaves, grads: dict) -> None:
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for path, arr in leaves:
            g = grads.get(path)
            if g is None:
                g = np.zeros_like(arr)
            m = self.m[path]
            v = self.v[path]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            arr -= self.lr * (m / bc1) / (np.sqrt(v / bc2) + self.eps)


class RmsProp:
    def __init__(self, leaves, lr, rho=0.9, eps=1e-8):
        self.lr, self.rho, self.eps = lr, rho, eps
        self.v = {path: np.zeros_like(arr) for path, arr in leaves}

    def step(self, leaves, grads: dict) -> None:
        for path, arr in leaves:
            g = grads.get(path)
            if g is None:
                g = np.zeros_like(arr)
            v = self.v[path]
            v *= self.rho
            v += (1.0 - self.rho) * g * g
            arr -= self.lr * g / (np.sqrt(v) + self.eps)


def _make_optimizer(cfg: TrainConfig, leaves):
    if cfg.optimizer == "adam":
        return Adam(leaves, cfg.learning_rate, cfg.adam_beta1, cfg.adam_beta2, cfg.optimizer_eps)
    return RmsProp(leaves, cfg.learning_rate, cfg.rms_rho, cfg.optimizer_eps)


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class EpochRecord:
    epoch: int
    train_objective: float
    train_nll: float
    val_nll: float
    smooth_pen: float
    mc_pen: float


@dataclass
class TrainResult:
    model: AdditiveModel
    history: list
    diverged: bool = False
    stop_reason: str = "epochs"

    @property
    def best_val_nll(self) -> float:
        return min(rec.val_nll for rec in self.history) if self.history else float("nan")


def history_to_csv(history, path) -> None:
    import csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "train_objective", "train_nll", "val_nll", "smooth_pen", "mc_pen"])
        for rec in history:
            writer.writerow(
                [rec.epoch, repr(rec.train_objective), repr(rec.train_nll),
                 repr(rec.val_nll), repr(rec.smooth_pen), repr(rec.mc_pen)]
            )


def validation_nll(model: AdditiveModel, ds: Dataset) -> float:
    """Mean NLL on a dataset with penalties off."""
    mu, _, _ = model.predict(ds.x, ds.exposure if model.uses_offset else None)
    return float(np.mean(model.distribution.nll(ds.y, mu)[0]))


def train(model: AdditiveModel, train_ds: Dataset, val_ds: Dataset, cfg: TrainConfig,
          frozen_terms=frozenset(), train_bias: bool = True,
          step_callback=None) -> TrainResult:
    """Minibatch projected training with validation-based early stopping.

    The exact update schedule, which two runs with equal inputs reproduce
    bit for bit when executed serially:

    1. Draw the row permutation for each epoch from PCG64(cfg.seed) and
       split it into consecutive chunks of cfg.batch_size (final partial
       chunk included). While the overlap penalty is active, refresh the
       term centers on the training data at the top of each epoch (an
       exact reparameterization; predictions are unchanged).
    2. Per chunk: evaluate the objective (mean NLL plus penalties when the
       omegas are non-zero), apply one optimizer update to the trainable
       parameters, then Dykstra-project every constrained lattice and
       monotone calibrator for cfg.dykstra_iters sweeps at cfg.dykstra_tol.
    3. Per epoch: compute the validation NLL with penalties off. Track the
       best epoch; stop once the count of consecutive non-improving epochs
       exceeds `patience`, when the full parameter vector moved less than
       `convergence_eps` since the previous epoch, or at `epochs`.
    4. Restore the best-validation parameters, run a hard tightening
       projection, and center every term on the training data.

    `frozen_terms` labels are evaluated once and folded into a constant
    offset, so their parameters receive no updates and stay bit-identical.
    A non-finite objective aborts the loop and returns the best finite
    snapshot with `diverged=True`.
    """
    rng = np.random.Generator(np.random.PCG64(cfg.seed))
    if cfg.batch_size > train_ds.n:
        raise ConfigError(
            f"batch size {cfg.batch_size} exceeds the {train_ds.n} training rows"
        )
    frozen = frozenset(frozen_terms)
    unknown = frozen - set(model.term_labels())
    if unknown:
        raise ConfigError(f"frozen labels not in model: {sorted(unknown)}")
    active_terms = [t for t in model.terms if t.label not in frozen]
    trainable_labels = {t.label for t in active_terms}

    all_leaves = model.param_leaves()
    opt_leaves = model.param_leaves(trainable_labels=trainable_labels, include_bias=train_bias)
    optimizer = _make_optimizer(cfg, opt_leaves)

    penalty = None
    if cfg.omega_smooth > 0.0 or cfg.omega_mc > 0.0:
        if frozen:
            raise ConfigError("penalties are not supported with frozen terms")
        penalty = PenaltyConfig(
            omega_smooth=cfg.omega_smooth,
            omega_mc=cfg.omega_mc,
            smooth_grids=build_smooth_grids(model, cfg.smooth_grid_size),
        )

    base_train = base_val = None
    if frozen:
        frozen_list = [t for t in model.terms if t.label in frozen]

        def frozen_eta(x):
            total = np.zeros(x.shape[0])
            for t in frozen_list:
                r, _ = model.term_forward(t, x)
                total += float(t.alpha[0]) * (r - t.center)
            return total

        base_train = frozen_eta(train_ds.x)
        base_val = frozen_eta(val_ds.x)

    # centers are refreshed during penalized training, so snapshots must
    # carry them alongside the bias that compensates them
    def snapshot():
        return [arr.copy() for _, arr in all_leaves], [t.center for t in model.terms]

    def restore(saved):
        arrays, centers = saved
        for (_, arr), s in zip(all_leaves, arrays):
            arr[...] = s
        for t, c in zip(model.terms, centers):
            t.center = c

    def val_score():
        if base_val is None:
            return validation_nll(model, val_ds)
        eta = model.bias[0] + base_val
        for t in active_terms:
            r, _ = model.term_forward(t, val_ds.x)
            eta = eta + float(t.alpha[0]) * (r - t.center)
        if model.uses_offset:
            eta = eta + np.log(val_ds.exposure)
        with np.errstate(over="ignore"):
            mu = np.clip(np.exp(np.minimum(eta, 709.0)), model.clip_lo, model.clip_hi)
        return float(np.mean(model.distribution.nll(val_ds.y, mu)[0]))

    n = train_ds.n
    history: list[EpochRecord] = []
    best_val = np.inf
    best_params = snapshot()
    wait = 0
    prev_params = snapshot()
    diverged = False
    stop_reason = "epochs"

    # the overlap penalty reads centered term values, so keep centers fresh
    # while it is active; centering is an exact reparameterization (the bias
    # absorbs the shift) and never changes predictions, so a refresh every
    # few epochs is enough for the penalty to track the covariance
    refresh_centers = penalty is not None and cfg.omega_mc > 0.0

    for epoch in range(1, cfg.epochs + 1):
        if refresh_centers and (epoch - 1) % cfg.center_refresh_every == 0:
            center_terms(model, train_ds)
        perm = rng.permutation(n)
        batch_vals, batch_nll, batch_smooth, batch_mc = [], [], [], []
        aborted = False
        for start in range(0, n, cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            expo = train_ds.exposure[idx] if model.uses_offset else None
            try:
                value, grads, parts = objective(
                    model, train_ds.x[idx], train_ds.y[idx], expo,
                    penalty=penalty,
                    terms=None if base_train is None else active_terms,
                    base_eta=None if base_train is None else base_train[idx],
                )
            except NumericOverflowError:
                aborted = True
                break
            if not np.isfinite(value):
                aborted = True
                break
            optimizer.step(opt_leaves, grads)
            model.project_constraints(cfg.dykstra_iters, cfg.dykstra_tol)
            batch_vals.append(value)
            batch_nll.append(parts["nll"])
            batch_smooth.append(parts["smooth"])
            batch_mc.append(parts["mc"])
            if step_callback is not None:
                step_callback(model, epoch)
        if aborted:
            diverged = True
            stop_reason = "diverged"
            break
        val_nll = val_score()
        history.append(
            EpochRecord(
                epoch=epoch,
                train_objective=float(np.mean(batch_vals)),
                train_nll=float(np.mean(batch_nll)),
                val_nll=val_nll,
                smooth_pen=float(np.mean(batch_smooth)),
                mc_pen=float(np.mean(batch_mc)),
            )
        )
        if not np.isfinite(val_nll):
            diverged = True
            stop_reason = "diverged"
            break
        if val_nll < best_val:
            best_val = val_nll
            best_params = snapshot()
            wait = 0
        else:
            wait += 1
            if wait > cfg.patience:
                stop_reason = "early_stop"
                break
        delta_sq = 0.0
        for (_, arr), prev in zip(all_leaves, prev_params[0]):
            d = arr - prev
            delta_sq += float(np.sum(d * d))
        prev_params = snapshot()
        if cfg.convergence_eps > 0.0 and np.sqrt(delta_sq) < cfg.convergence_eps:
            stop_reason = "converged"
            break

    restore(best_params)
    model.tighten_constraints()
    center_terms(model, train_ds)
    return TrainResult(model=model, history=history, diverged=diverged, stop_reason=stop_reason)
