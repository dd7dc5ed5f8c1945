"""Additive model assembly.

A model is a bias plus a weighted sum of per-term shape functions, pushed
through an inverse link with clipping. Each term owns one univariate or
bivariate shape function backed either by a small feedforward network or
by a calibrated lattice. Every term carries an output weight (alpha) and a
centering offset; after finalization the offsets make each term average to
zero on the training sample, with the bias absorbing the shift so
predictions are unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import ColumnSchema, Dataset
from .distributions import CLIP_HI, CLIP_LO, DistributionSpec, link_apply
from .errors import ConfigError, DataError, HeredityError
from .lattice import (
    Calibrator,
    ConstraintSet,
    LatticeParams,
    build_constraints,
    calibrator_backward,
    calibrator_forward,
    chain_constraints,
    dykstra_project,
    init_calibrator,
    init_lattice,
    lattice_backward,
    lattice_forward,
    max_violation,
    tighten,
)
from .mlp import MlpConfig, MlpParams, backward as mlp_backward, forward as mlp_forward, init_glorot

DEFAULT_MAIN_VERTICES = 10
DEFAULT_PAIR_VERTICES = 8


@dataclass(frozen=True)
class TermSpec:
    """Declaration of one main or pairwise effect.

    monotonic holds one direction per feature (+1 increasing, -1
    decreasing, 0 free); any non-zero direction forces the lattice
    backend. Smoothing is only meaningful for main effects.
    """

    features: tuple
    backend: str = "mlp"
    monotonic: tuple = ()
    smooth: bool = False
    hidden_layers: int = 2
    first_hidden_width: int = 20
    leaky_slope: float = 0.01
    lattice_sizes: tuple = ()
    calibrator_knots: int = 10

    def __post_init__(self):
        features = tuple(self.features)
        object.__setattr__(self, "features", features)
        if len(features) not in (1, 2):
            raise ConfigError("a term takes one or two features")
        if len(set(features)) != len(features):
            raise ConfigError("pair features must be distinct")
        if self.backend not in ("mlp", "lattice"):
            raise ConfigError(f"unknown backend {self.backend!r}")
        mono = tuple(self.monotonic) if self.monotonic else (0,) * len(features)
        if len(mono) != len(features) or any(m not in (-1, 0, 1) for m in mono):
            raise ConfigError("monotonic directions must give +1/0/-1 per feature")
        object.__setattr__(self, "monotonic", mono)
        if any(mono) and self.backend != "lattice":
            raise ConfigError("monotone terms require the lattice backend")
        if self.smooth and len(features) != 1:
            raise ConfigError("smoothing applies to main effects only")
        sizes = tuple(self.lattice_sizes)
        if self.backend == "lattice" and not sizes:
            default = DEFAULT_MAIN_VERTICES if len(features) == 1 else DEFAULT_PAIR_VERTICES
            sizes = (default,) * len(features)
        object.__setattr__(self, "lattice_sizes", sizes)

    @property
    def label(self) -> str:
        return ":".join(self.features)

    @property
    def is_pair(self) -> bool:
        return len(self.features) == 2

    def to_dict(self) -> dict:
        return {
            "features": list(self.features),
            "backend": self.backend,
            "monotonic": list(self.monotonic),
            "smooth": self.smooth,
            "hidden_layers": self.hidden_layers,
            "first_hidden_width": self.first_hidden_width,
            "leaky_slope": self.leaky_slope,
            "lattice_sizes": list(self.lattice_sizes),
            "calibrator_knots": self.calibrator_knots,
        }

    @staticmethod
    def from_dict(d: dict) -> "TermSpec":
        return TermSpec(
            features=tuple(d["features"]),
            backend=d["backend"],
            monotonic=tuple(d["monotonic"]),
            smooth=d["smooth"],
            hidden_layers=d["hidden_layers"],
            first_hidden_width=d["first_hidden_width"],
            leaky_slope=d["leaky_slope"],
            lattice_sizes=tuple(d["lattice_sizes"]),
            calibrator_knots=d["calibrator_knots"],
        )


@dataclass
class Term:
    """A term spec plus its trainable state."""

    spec: TermSpec
    mlp: MlpParams | None = None
    calibrators: list = field(default_factory=list)  # per dim, None for categorical
    lattice: LatticeParams | None = None
    alpha: np.ndarray = None
    center: float = 0.0
    constraints: ConstraintSet = field(default_factory=ConstraintSet)

    @property
    def label(self) -> str:
        return self.spec.label

    def copy(self) -> "Term":
        return Term(
            spec=self.spec,
            mlp=self.mlp.copy() if self.mlp else None,
            calibrators=[c.copy() if c else None for c in self.calibrators],
            lattice=self.lattice.copy() if self.lattice else None,
            alpha=self.alpha.copy(),
            center=self.center,
            constraints=self.constraints,
        )


def _one_hot(codes: np.ndarray, n_levels: int) -> np.ndarray:
    out = np.zeros((codes.shape[0], n_levels))
    out[np.arange(codes.shape[0]), codes.astype(int)] = 1.0
    return out


def _encoded_width(col: ColumnSchema) -> int:
    return len(col.levels) if col.kind == "categorical" else 1


class AdditiveModel:
    """Bias + weighted centered shape functions behind a clipped log link."""

    def __init__(self, feature_columns, terms, distribution: DistributionSpec,
                 uses_offset: bool = False, clip_lo: float = CLIP_LO, clip_hi: float = CLIP_HI,
                 feature_ranges: dict | None = None):
        self.feature_columns = tuple(feature_columns)
        self.feature_names = tuple(c.name for c in self.feature_columns)
        self._index = {n: i for i, n in enumerate(self.feature_names)}
        self.terms = list(terms)
        self.distribution = distribution
        self.uses_offset = uses_offset
        self.clip_lo = clip_lo
        self.clip_hi = clip_hi
        self.bias = np.zeros(1)
        self.feature_ranges = dict(feature_ranges or {})
        validate_heredity([t.spec for t in self.terms])
        for t in self.terms:
            for name in t.spec.features:
                if name not in self._index:
                    raise DataError(f"term {t.label}: unknown feature '{name}'")

    # -- lookups ---------------------------------------------------------

    def column_schema(self, name: str) -> ColumnSchema:
        return self.feature_columns[self._index[name]]

    def term(self, label: str) -> Term:
        for t in self.terms:
            if t.label == label:
                return t
        raise DataError(f"model has no term '{label}'")

    def term_labels(self) -> list:
        return [t.label for t in self.terms]

    # -- evaluation ------------------------------------------------------

    def _check_x(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if x.ndim == 1:
            x = x.reshape(1, -1)
        if x.shape[1] != len(self.feature_columns):
            raise DataError(
                f"input has {x.shape[1]} features, model expects {len(self.feature_columns)}"
            )
        return x

    def term_forward(self, term: Term, x: np.ndarray):
        """Raw (uncentered, unweighted) shape values plus a backward cache."""
        cols = [x[:, self._index[f]] for f in term.spec.features]
        if term.spec.backend == "mlp":
            parts = []
            for f, v in zip(term.spec.features, cols):
                col = self.column_schema(f)
                parts.append(_one_hot(v, len(col.levels)) if col.kind == "categorical"
                             else v.reshape(-1, 1))
            inp = np.hstack(parts)
            vals, cache = mlp_forward(term.mlp, inp)
            return vals, ("mlp", cache)
        coords = []
        cal_caches = []
        for d, v in enumerate(cols):
            cal = term.calibrators[d]
            if cal is None:  # categorical: level index is the coordinate
                coords.append(v)
                cal_caches.append(None)
            else:
                scaled, cache = calibrator_forward(cal, v)
                coords.append(scaled)
                cal_caches.append(cache)
        u = np.column_stack(coords)
        vals, lat_cache = lattice_forward(term.lattice, u)
        return vals, ("lattice", (cal_caches, lat_cache))

    def term_backward(self, term: Term, cache, upstream: np.ndarray) -> dict:
        """Gradients of sum(upstream * raw) w.r.t. the term's parameters.

        Keys are parameter paths as produced by param_leaves.
        """
        kind, inner = cache
        out = {}
        if kind == "mlp":
            w_grads, b_grads, _ = mlp_backward(term.mlp, inner, upstream)
            for l, g in enumerate(w_grads):
                out[("term", term.label, "w", l)] = g
            for l, g in enumerate(b_grads):
                out[("term", term.label, "b", l)] = g
            return out
        cal_caches, lat_cache = inner
        lat_grad, dinput = lattice_backward(term.lattice, lat_cache, upstream)
        out[("term", term.label, "lat")] = lat_grad
        for d, cal in enumerate(term.calibrators):
            if cal is None or cal_caches[d] is None:
                continue
            out[("term", term.label, "cal", d)] = calibrator_backward(
                cal, cal_caches[d], dinput[:, d]
            )
        return out

    def raw_term_values(self, x: np.ndarray) -> np.ndarray:
        x = self._check_x(x)
        return np.column_stack([self.term_forward(t, x)[0] for t in self.terms]) if self.terms \
            else np.zeros((x.shape[0], 0))

    def contributions(self, x: np.ndarray) -> np.ndarray:
        """Centered, weighted per-term values (the local explanation)."""
        raw = self.raw_term_values(self._check_x(x))
        alphas = np.array([float(t.alpha[0]) for t in self.terms])
        centers = np.array([t.center for t in self.terms])
        return (raw - centers) * alphas

    def predict(self, x: np.ndarray, exposure=None):
        """Returns (mu, eta, contributions) for a batch of rows."""
        x = self._check_x(x)
        if self.uses_offset and exposure is None:
            raise DataError("model uses an exposure offset; pass exposure values")
        if not self.uses_offset and exposure is not None:
            raise DataError("model does not use an offset; unexpected exposure values")
        contrib = self.contributions(x)
        eta = self.bias[0] + contrib.sum(axis=1)
        if self.uses_offset:
            exposure = np.asarray(exposure, dtype=float)
            if exposure.shape != (x.shape[0],):
                raise DataError("exposure length does not match rows")
            if np.any(exposure <= 0.0):
                raise DataError("exposure values must be positive")
            eta = eta + np.log(exposure)
        mu = link_apply(self.distribution.link, eta, self.clip_lo, self.clip_hi)
        return np.atleast_1d(mu), eta, contrib

    def predict_row(self, x_row, exposure: float | None = None):
        """Single-row contract: (mu, eta, per-term contribution dict)."""
        expo = None if exposure is None else np.array([float(exposure)])
        mu, eta, contrib = self.predict(np.asarray(x_row, dtype=float).reshape(1, -1), expo)
        return float(mu[0]), float(eta[0]), dict(zip(self.term_labels(), contrib[0]))

    # -- parameters ------------------------------------------------------

    def param_leaves(self, trainable_labels=None, include_bias: bool = True) -> list:
        """(path, array) pairs over every trainable array, in stable order."""
        leaves = []
        if include_bias:
            leaves.append((("bias",), self.bias))
        for t in self.terms:
            if trainable_labels is not None and t.label not in trainable_labels:
                continue
            leaves.append((("term", t.label, "alpha"), t.alpha))
            if t.spec.backend == "mlp":
                for l in range(len(t.mlp.weights)):
                    leaves.append((("term", t.label, "w", l), t.mlp.weights[l]))
                    leaves.append((("term", t.label, "b", l), t.mlp.biases[l]))
            else:
                for d, cal in enumerate(t.calibrators):
                    if cal is not None:
                        leaves.append((("term", t.label, "cal", d), cal.values))
                leaves.append((("term", t.label, "lat"), t.lattice.values))
        return leaves

    def copy(self) -> "AdditiveModel":
        clone = AdditiveModel(
            self.feature_columns,
            [t.copy() for t in self.terms],
            self.distribution,
            uses_offset=self.uses_offset,
            clip_lo=self.clip_lo,
            clip_hi=self.clip_hi,
            feature_ranges=self.feature_ranges,
        )
        clone.bias = self.bias.copy()
        return clone

    # -- constraint projection --------------------------------------------

    def project_constraints(self, k_max: int, tol: float) -> None:
        """Dykstra-project every constrained lattice and monotone calibrator.

        The output weight of a constrained term is clamped non-negative as
        well: a negative weight would flip the declared direction of an
        otherwise feasible shape.
        """
        for t in self.terms:
            if t.spec.backend != "lattice":
                continue
            if len(t.constraints):
                t.lattice.values = dykstra_project(t.lattice.values, t.constraints, k_max, tol)
                if t.alpha[0] < 0.0:
                    t.alpha[0] = 0.0
            for cal in t.calibrators:
                if cal is None:
                    continue
                if cal.monotonic:
                    cal.values = dykstra_project(
                        cal.values, chain_constraints(cal.values.size), k_max, tol
                    )
                np.clip(cal.values, 0.0, cal.out_max, out=cal.values)

    def tighten_constraints(self, target: float = 1e-12) -> None:
        """Final projection so the shipped model satisfies constraints hard."""
        for t in self.terms:
            if t.spec.backend != "lattice":
                continue
            if len(t.constraints):
                t.lattice.values = tighten(t.lattice.values, t.constraints, target)
                if t.alpha[0] < 0.0:
                    t.alpha[0] = 0.0
            for cal in t.calibrators:
                if cal is None:
                    continue
                if cal.monotonic:
                    cal.values = tighten(cal.values, chain_constraints(cal.values.size), target)
                np.clip(cal.values, 0.0, cal.out_max, out=cal.values)

    def constraint_violation(self) -> float:
        worst = 0.0
        for t in self.terms:
            if t.spec.backend != "lattice":
                continue
            worst = max(worst, max_violation(t.lattice.values, t.constraints))
            for cal in t.calibrators:
                if cal is not None and cal.monotonic:
                    worst = max(
                        worst,
                        max_violation(cal.values, chain_constraints(cal.values.size)),
                    )
        return worst


def validate_heredity(specs) -> None:
    """Every pair term needs both parent main effects present."""
    mains = {s.features[0] for s in specs if not s.is_pair}
    for s in specs:
        if s.is_pair:
            missing = [f for f in s.features if f not in mains]
            if missing:
                raise HeredityError(
                    f"pair {s.label} lacks main effect(s) for {missing}"
                )


def build_term(train: Dataset, spec: TermSpec, seed: int,
               lattice_init: str = "ramp") -> Term:
    """Fresh parameters for one term: Glorot networks or ramp lattices.

    Calibrator knots sit at uniform quantiles of the training column;
    categorical lattice dimensions use the level index directly. Lattices
    start as monotone ramps by default; `lattice_init="zero"` starts them
    flat instead, which is the neutral choice when grafting a new term
    onto an already-trained model.
    """
    if lattice_init not in ("ramp", "zero"):
        raise ConfigError(f"unknown lattice initialization {lattice_init!r}")
    term = Term(spec=spec, alpha=np.ones(1))
    if spec.backend == "mlp":
        width = 0
        for f in spec.features:
            col = next(c for c in train.feature_columns if c.name == f)
            width += _encoded_width(col)
        cfg = MlpConfig(
            input_dim=width,
            hidden_layers=spec.hidden_layers,
            first_hidden_width=spec.first_hidden_width,
            activation="leaky_relu",
            leaky_slope=spec.leaky_slope,
            seed=seed,
        )
        term.mlp = init_glorot(cfg)
    else:
        sizes = []
        for d, f in enumerate(spec.features):
            col = next(c for c in train.feature_columns if c.name == f)
            if col.kind == "categorical":
                sizes.append(len(col.levels))
                term.calibrators.append(None)
            else:
                m = spec.lattice_sizes[d]
                sizes.append(m)
                term.calibrators.append(
                    init_calibrator(
                        train.column(f),
                        spec.calibrator_knots,
                        float(m - 1),
                        monotonic=spec.monotonic[d] != 0,
                    )
                )
        if lattice_init == "ramp":
            term.lattice = init_lattice(tuple(sizes), spec.monotonic)
        else:
            term.lattice = LatticeParams(values=np.zeros(tuple(sizes)), monotonic=spec.monotonic)
        term.constraints = build_constraints(term.lattice)
    return term


def build_model(train: Dataset, specs, distribution: DistributionSpec,
                uses_offset: bool = False, seed: int = 0) -> AdditiveModel:
    """Construct a model with freshly initialized parameters.

    Network weights are Glorot-initialized from per-term streams spawned
    off the seed; lattices start as monotone ramps and calibrators as
    linear maps with knots at uniform quantiles of the training column.
    """
    specs = list(specs)
    validate_heredity(specs)
    if uses_offset and train.exposure is None:
        raise DataError("offset model requires a dataset with an exposure column")
    ranges = {
        name: (float(train.column(name).min()), float(train.column(name).max()))
        for name in train.feature_names
    }
    seeds = np.random.SeedSequence(seed).spawn(len(specs))
    terms = [
        build_term(train, spec, int(seq.generate_state(1)[0]))
        for spec, seq in zip(specs, seeds)
    ]
    model = AdditiveModel(
        train.feature_columns, terms, distribution, uses_offset=uses_offset,
        feature_ranges=ranges,
    )
    # start the bias at the intercept-only maximum likelihood so training
    # never spends epochs rescaling predictions to the response level
    denom = np.sum(train.exposure) if uses_offset else train.n
    rate = float(np.sum(train.y)) / denom
    model.bias[0] = np.log(max(rate, 1e-12))
    return model


# ---------------------------------------------------------------------------
# finalization and inspection
# ---------------------------------------------------------------------------

def center_terms(model: AdditiveModel, train: Dataset) -> AdditiveModel:
    """Zero every term's training-sample mean, compensating through the bias.

    Sets each center to the raw term mean over the training rows and adds
    the induced shift back into the bias, so predictions are unchanged.
    """
    if train.n == 0:
        raise DataError("cannot center on an empty dataset")
    raw = model.raw_term_values(train.x)
    for j, term in enumerate(model.terms):
        new_center = float(np.mean(raw[:, j]))
        delta = new_center - term.center
        model.bias[0] += float(term.alpha[0]) * delta
        term.center = new_center
    return model


def importance(model: AdditiveModel, data: Dataset) -> list:
    """Terms ranked by the variance-style score of their contributions.

    score(term) = sum(contribution^2) / (n - 1) over the given rows;
    descending, with declaration order breaking ties.
    """
    if data.n < 2:
        raise DataError("importance needs at least two rows")
    contrib = model.contributions(data.x)
    scores = (contrib**2).sum(axis=0) / (data.n - 1)
    ranked = sorted(zip(model.term_labels(), scores), key=lambda kv: -kv[1])
    return [(label, float(s)) for label, s in ranked]


@dataclass
class ShapeGrid:
    """Evaluated shape function on a grid, ready for CSV or plotting."""

    label: str
    feature_names: tuple
    inputs: list  # one array (or level list) per feature, row-major expanded
    values: np.ndarray

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow([f"input{i + 1}" for i in range(len(self.feature_names))] + ["value"])
            for row_inputs, v in zip(zip(*self.inputs), self.values):
                writer.writerow([*(str(r) for r in row_inputs), repr(float(v))])


def _grid_for(model: AdditiveModel, name: str, resolution: int):
    col = model.column_schema(name)
    if col.kind == "categorical":
        return np.arange(len(col.levels), dtype=float), list(col.levels)
    lo, hi = model.feature_ranges[name]
    pts = np.linspace(lo, hi, resolution)
    return pts, pts


def export_shape_grid(model: AdditiveModel, label: str, resolution: int | None = None) -> ShapeGrid:
    """Centered term values over a grid of inputs.

    Main effects default to 1000 uniformly spaced points across the
    observed training range; pairs to a 100 x 100 rectangle (row-major,
    second input fastest). Categorical inputs enumerate their levels.
    """
    term = model.term(label)
    names = term.spec.features
    if not term.spec.is_pair:
        coords, display = _grid_for(model, names[0], resolution or 1000)
        x = np.zeros((coords.size, len(model.feature_columns)))
        # off-term features stay at zero; they do not enter this term
        x[:, model._index[names[0]]] = coords
        vals, _ = model.term_forward(term, x)
        centered = float(term.alpha[0]) * (vals - term.center)
        return ShapeGrid(label=label, feature_names=names, inputs=[display], values=centered)
    res = resolution or 100
    c1, d1 = _grid_for(model, names[0], res)
    c2, d2 = _grid_for(model, names[1], res)
    g1 = np.repeat(c1, len(c2))
    g2 = np.tile(c2, len(c1))
    x = np.zeros((g1.size, len(model.feature_columns)))
    x[:, model._index[names[0]]] = g1
    x[:, model._index[names[1]]] = g2
    vals, _ = model.term_forward(term, x)
    centered = float(term.alpha[0]) * (vals - term.center)
    disp1 = [d1[i] for i in np.repeat(np.arange(len(c1)), len(c2))]
    disp2 = [d2[i] for i in np.tile(np.arange(len(c2)), len(c1))]
    return ShapeGrid(label=label, feature_names=names, inputs=[disp1, disp2], values=centered)


def multi_output_predict(models, x, exposures=None):
    """Evaluate several single-output assemblies sharing one feature layout.

    Returns an (n, q) matrix of means, one column per output head.
    """
    models = list(models)
    if not models:
        raise ConfigError("need at least one output head")
    names = models[0].feature_names
    for m in models[1:]:
        if m.feature_names != names:
            raise DataError("output heads disagree on the feature layout")
    cols = []
    for o, m in enumerate(models):
        expo = None
        if exposures is not None:
            expo = exposures[o]
        mu, _, _ = m.predict(x, expo)
        cols.append(mu)
    return np.column_stack(cols)


def marginal_product_measure(model: AdditiveModel, data: Dataset) -> dict:
    """Mean product of each main effect with its overlapping pair effects.

    For every (main, pair) couple sharing a feature, returns
    |mean(main_contribution * pair_contribution)| over the rows; small
    values mean the pair carries little of the main effect's signal.
    """
    contrib = model.contributions(data.x)
    labels = model.term_labels()
    by_label = {lab: contrib[:, j] for j, lab in enumerate(labels)}
    out = {}
    for t in model.terms:
        if not t.spec.is_pair:
            continue
        for f in t.spec.features:
            if f in by_label:
                out[(f, t.label)] = float(abs(np.mean(by_label[f] * by_label[t.label])))
    return out
