"""Monotonicity-capable shape functions.

A term of this kind is a chain: each continuous input passes through a
piecewise-linear calibrator onto the lattice coordinate range [0, M-1],
then a 1-D or 2-D lattice interpolates trainable vertex values. Monotone
behavior is guaranteed by keeping the calibrator values non-decreasing and
constraining vertex differences along the monotone dimension, both
enforced with Dykstra's alternating projection after every update.

Categorical inputs skip the calibrator; their level index is the lattice
coordinate directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError

INCREASING = 1
NONE = 0
DECREASING = -1

# Per-update projection budget; a final tightening pass at training end
# drives violations to ~1e-12 so shipped models satisfy constraints hard.
DYKSTRA_STEP_ITERS = 10
DYKSTRA_STEP_TOL = 1e-7
DYKSTRA_FINAL_ITERS = 1000
DYKSTRA_FINAL_TOL = 1e-13


@dataclass
class Calibrator:
    """Trainable piecewise-linear map from raw input onto [0, out_max].

    Knot locations are fixed (uniform quantiles of training data); the
    per-knot output values train. Inputs outside the knot range clamp to
    the end values. With two knots and outputs {0, out_max} this is plain
    min-max scaling.
    """

    knots: np.ndarray
    values: np.ndarray
    out_max: float
    monotonic: bool = False

    def __post_init__(self):
        self.knots = np.asarray(self.knots, dtype=float)
        self.values = np.asarray(self.values, dtype=float)
        if self.knots.ndim != 1 or self.knots.size < 2:
            raise ConfigError("calibrator needs at least two knots")
        if np.any(np.diff(self.knots) <= 0.0):
            raise ConfigError("calibrator knots must be strictly increasing")
        if self.values.shape != self.knots.shape:
            raise ConfigError("calibrator values must match knots")

    def copy(self) -> "Calibrator":
        return Calibrator(self.knots.copy(), self.values.copy(), self.out_max, self.monotonic)


def init_calibrator(train_values: np.ndarray, n_knots: int, out_max: float,
                    monotonic: bool = False) -> Calibrator:
    """Knots at uniform quantiles of the data, values a linear ramp to out_max."""
    qs = np.quantile(np.asarray(train_values, dtype=float), np.linspace(0.0, 1.0, n_knots))
    knots = np.unique(qs)
    if knots.size < 2:
        raise DataError("calibrator input has fewer than two distinct values")
    values = np.linspace(0.0, out_max, knots.size)
    return Calibrator(knots=knots, values=values, out_max=out_max, monotonic=monotonic)


def calibrator_forward(cal: Calibrator, x: np.ndarray):
    """Batched evaluation; returns (scaled (n,), cache for backward)."""
    x = np.asarray(x, dtype=float)
    seg = np.clip(np.searchsorted(cal.knots, x, side="right") - 1, 0, cal.knots.size - 2)
    left = cal.knots[seg]
    width = cal.knots[seg + 1] - left
    t = np.clip((x - left) / width, 0.0, 1.0)  # clamps out-of-range inputs
    raw = (1.0 - t) * cal.values[seg] + t * cal.values[seg + 1]
    out = np.clip(raw, 0.0, cal.out_max)
    inside = raw == out  # at the exact boundary the interior branch wins
    return out, (seg, t, inside)


def calibrator_backward(cal: Calibrator, cache, upstream: np.ndarray) -> np.ndarray:
    """Accumulate d(loss)/d(values) from upstream d(loss)/d(scaled).

    Points whose output hit the [0, out_max] clamp pass no gradient.
    """
    seg, t, inside = cache
    upstream = np.asarray(upstream, dtype=float) * inside
    grad = np.zeros_like(cal.values)
    np.add.at(grad, seg, upstream * (1.0 - t))
    np.add.at(grad, seg + 1, upstream * t)
    return grad


def calibrate(cal: Calibrator, x: float):
    """Single-point contract: scaled value plus analytic gradients.

    Returns (scaled, dscaled_dvalues, dscaled_dx). Outside the knot range
    the output is the end value and both gradients-to-input vanish.
    """
    out, (seg, t, unclipped) = calibrator_forward(cal, np.array([float(x)]))
    j, tj = int(seg[0]), float(t[0])
    dvalues = np.zeros_like(cal.values)
    if unclipped[0]:
        dvalues[j] += 1.0 - tj
        dvalues[j + 1] += tj
    in_range = cal.knots[0] <= x <= cal.knots[-1] and unclipped[0]
    width = cal.knots[j + 1] - cal.knots[j]
    dx = (cal.values[j + 1] - cal.values[j]) / width if in_range else 0.0
    return float(out[0]), dvalues, float(dx)


@dataclass
class LatticeParams:
    """Vertex values on a 1-D or 2-D grid with per-dimension monotonicity."""

    values: np.ndarray  # shape (M,) or (Mj, Mk)
    monotonic: tuple = ()  # one of {1, 0, -1} per dimension

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.ndim not in (1, 2):
            raise ConfigError("lattices support 1 or 2 dimensions only")
        if any(m < 2 for m in self.values.shape):
            raise ConfigError("each lattice dimension needs at least 2 vertices")
        if len(self.monotonic) != self.values.ndim:
            raise ConfigError("monotonic directions must match lattice dimensions")
        if any(m not in (INCREASING, NONE, DECREASING) for m in self.monotonic):
            raise ConfigError("monotonic direction must be +1, 0 or -1")
        self.monotonic = tuple(self.monotonic)

    @property
    def dims(self) -> int:
        return self.values.ndim

    def copy(self) -> "LatticeParams":
        return LatticeParams(self.values.copy(), self.monotonic)


def init_lattice(shape: tuple, monotonic: tuple) -> LatticeParams:
    """Linear ramp over monotone dimensions, zero elsewhere.

    A vertex at index a along a monotone dimension of size M contributes
    a/(M-1), negated for decreasing dimensions; contributions sum.
    """
    values = np.zeros(shape)
    for d, direction in enumerate(monotonic):
        if direction == NONE:
            continue
        m = shape[d]
        ramp = direction * np.arange(m) / (m - 1)
        values += ramp.reshape([-1 if i == d else 1 for i in range(len(shape))])
    return LatticeParams(values=values, monotonic=tuple(monotonic))


def lattice_forward(params: LatticeParams, u: np.ndarray):
    """Multilinear interpolation at scaled coordinates u (n, dims).

    Cell indices are floor(u) clamped so the top boundary belongs to the
    last cell; raises if any coordinate is outside [0, M-1].
    """
    u = np.asarray(u, dtype=float)
    if u.ndim == 1:
        u = u.reshape(-1, 1)
    if u.shape[1] != params.dims:
        raise DataError(f"lattice expects {params.dims}-dimensional input")
    shape = params.values.shape
    for d in range(params.dims):
        if np.any(u[:, d] < 0.0) or np.any(u[:, d] > shape[d] - 1 + 1e-9):
            raise DataError(f"lattice input outside [0, {shape[d] - 1}] in dimension {d}")
    cells = []
    fracs = []
    for d in range(params.dims):
        a = np.clip(np.floor(u[:, d]).astype(int), 0, shape[d] - 2)
        cells.append(a)
        fracs.append(u[:, d] - a)
    if params.dims == 1:
        a, g = cells[0], fracs[0]
        vals = (1.0 - g) * params.values[a] + g * params.values[a + 1]
    else:
        a, b = cells
        g1, g2 = fracs
        v = params.values
        vals = (
            (1.0 - g1) * (1.0 - g2) * v[a, b]
            + g1 * (1.0 - g2) * v[a + 1, b]
            + (1.0 - g1) * g2 * v[a, b + 1]
            + g1 * g2 * v[a + 1, b + 1]
        )
    return vals, (cells, fracs)


def lattice_backward(params: LatticeParams, cache, upstream: np.ndarray):
    """Returns (vertex-value grads, input grads (n, dims))."""
    cells, fracs = cache
    upstream = np.asarray(upstream, dtype=float)
    grad = np.zeros_like(params.values)
    n = upstream.shape[0]
    dinput = np.zeros((n, params.dims))
    if params.dims == 1:
        a, g = cells[0], fracs[0]
        np.add.at(grad, a, upstream * (1.0 - g))
        np.add.at(grad, a + 1, upstream * g)
        dinput[:, 0] = upstream * (params.values[a + 1] - params.values[a])
    else:
        a, b = cells
        g1, g2 = fracs
        v = params.values
        np.add.at(grad, (a, b), upstream * (1.0 - g1) * (1.0 - g2))
        np.add.at(grad, (a + 1, b), upstream * g1 * (1.0 - g2))
        np.add.at(grad, (a, b + 1), upstream * (1.0 - g1) * g2)
        np.add.at(grad, (a + 1, b + 1), upstream * g1 * g2)
        dinput[:, 0] = upstream * (
            (1.0 - g2) * (v[a + 1, b] - v[a, b]) + g2 * (v[a + 1, b + 1] - v[a, b + 1])
        )
        dinput[:, 1] = upstream * (
            (1.0 - g1) * (v[a, b + 1] - v[a, b]) + g1 * (v[a + 1, b + 1] - v[a + 1, b])
        )
    return grad, dinput


def lattice_eval(params: LatticeParams, u):
    """Single-point contract: value, sparse vertex gradient, input gradient."""
    u = np.atleast_1d(np.asarray(u, dtype=float)).reshape(1, -1)
    vals, cache = lattice_forward(params, u)
    grad, dinput = lattice_backward(params, cache, np.ones(1))
    entries = [
        (tuple(idx) if params.dims > 1 else (int(idx[0]),), float(grad[tuple(idx)]))
        for idx in np.argwhere(grad != 0.0)
    ]
    return float(vals[0]), entries, dinput[0]


# ---------------------------------------------------------------------------
# monotonicity constraints and Dykstra projection
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ConstraintSet:
    """Difference constraints values[lo] <= values[hi] over flat indices."""

    pairs: tuple = ()

    def __post_init__(self):
        pairs = tuple((int(lo), int(hi)) for lo, hi in self.pairs)
        if len(set(pairs)) != len(pairs):
            raise ConfigError("duplicate constraint pairs")
        object.__setattr__(self, "pairs", pairs)

    def __len__(self) -> int:
        return len(self.pairs)


def build_constraints(params: LatticeParams) -> ConstraintSet:
    """List v[lo] <= v[hi] pairs for every monotone dimension.

    Pairs come out in ascending (lo, hi) lexicographic order so projection
    sweeps are deterministic.
    """
    shape = params.values.shape
    pairs = []
    if params.dims == 1:
        (m,) = shape
        for a in range(m - 1):
            if params.monotonic[0] == INCREASING:
                pairs.append((a, a + 1))
            elif params.monotonic[0] == DECREASING:
                pairs.append((a + 1, a))
    else:
        mj, mk = shape

        def flat(a, b):
            return a * mk + b

        if params.monotonic[0] != NONE:
            for a in range(mj - 1):
                for b in range(mk):
                    lo, hi = flat(a, b), flat(a + 1, b)
                    if params.monotonic[0] == DECREASING:
                        lo, hi = hi, lo
                    pairs.append((lo, hi))
        if params.monotonic[1] != NONE:
            for a in range(mj):
                for b in range(mk - 1):
                    lo, hi = flat(a, b), flat(a, b + 1)
                    if params.monotonic[1] == DECREASING:
                        lo, hi = hi, lo
                    pairs.append((lo, hi))
    return ConstraintSet(pairs=tuple(sorted(pairs)))


def chain_constraints(n: int) -> ConstraintSet:
    """Non-decreasing chain v[0] <= v[1] <= ... <= v[n-1]."""
    return ConstraintSet(pairs=tuple((i, i + 1) for i in range(n - 1)))


def dykstra_project(values: np.ndarray, constraints: ConstraintSet,
                    k_max: int = DYKSTRA_STEP_ITERS, tol: float = DYKSTRA_STEP_TOL) -> np.ndarray:
    """Dykstra's alternating projection onto the constraint intersection.

    Sweeps the halfspaces {v[lo] <= v[hi]} in order, each time projecting
    the corrected point v + p_i and updating the correction p_i. For a
    (+1, -1) difference row the halfspace projection moves both entries to
    their mean when violated. Stops after k_max sweeps or when a sweep
    moves the point by less than tol in Euclidean norm.

    Since each correction p_i is supported on its own (lo, hi) pair, the
    corrections are stored as per-constraint 2-vectors.
    """
    if k_max < 1:
        raise ConfigError("k_max must be at least 1")
    if tol <= 0.0:
        raise ConfigError("tolerance must be positive")
    original_shape = np.asarray(values, dtype=float).shape
    lam = [float(v) for v in np.asarray(values, dtype=float).ravel()]
    if len(constraints) == 0:
        return np.asarray(lam).reshape(original_shape)
    pairs = constraints.pairs
    corr = [[0.0, 0.0] for _ in pairs]
    for _ in range(k_max):
        prev = list(lam)
        for i, (lo, hi) in enumerate(pairs):
            p_lo, p_hi = corr[i]
            s_lo = lam[lo] + p_lo
            s_hi = lam[hi] + p_hi
            if s_lo > s_hi:
                mid = 0.5 * (s_lo + s_hi)
                r_lo = r_hi = mid
            else:
                r_lo, r_hi = s_lo, s_hi
            corr[i][0] = s_lo - r_lo
            corr[i][1] = s_hi - r_hi
            lam[lo] = r_lo
            lam[hi] = r_hi
        delta_sq = 0.0
        for a, b in zip(lam, prev):
            d = a - b
            delta_sq += d * d
        if delta_sq < tol * tol:
            break
    return np.asarray(lam).reshape(original_shape)


def max_violation(values: np.ndarray, constraints: ConstraintSet) -> float:
    """Largest positive v[lo] - v[hi]; zero when all constraints hold."""
    if len(constraints) == 0:
        return 0.0
    flat = np.asarray(values, dtype=float).ravel()
    worst = 0.0
    for lo, hi in constraints.pairs:
        worst = max(worst, flat[lo] - flat[hi])
    return worst


def tighten(values: np.ndarray, constraints: ConstraintSet,
            target: float = 1e-12) -> np.ndarray:
    """Projection run until constraints hold within target (hard cap on work)."""
    out = dykstra_project(values, constraints, DYKSTRA_FINAL_ITERS, DYKSTRA_FINAL_TOL)
    budget = 8
    while max_violation(out, constraints) > target and budget > 0:
        out = dykstra_project(out, constraints, DYKSTRA_FINAL_ITERS, DYKSTRA_FINAL_TOL)
        budget -= 1
    return out
