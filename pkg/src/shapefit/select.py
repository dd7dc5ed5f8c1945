"""Staged term selection: main-effect ranking, pair screening, fine tuning.

Stage 1 trains an ensemble of mains-only models (likelihood objective
only) and ranks features by the ensemble-average variance of their shape
functions. Stage 2 trains one candidate per eligible feature pair, each
grafted onto a frozen copy of a shared mains-only baseline, and ranks
pairs by validation-loss improvement. Stage 3 retrains the chosen terms
jointly from fresh parameters with penalties and constraints on.
"""

from __future__ import annotations

import json
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .data import Dataset
from .distributions import DistributionSpec
from .errors import ConfigError, SelectionError
from .model import AdditiveModel, TermSpec, build_model, build_term
from .train import TrainConfig, TrainResult, train, validation_nll


@dataclass(frozen=True)
class ArchitectureConfig:
    """Per-term sizing used when assembling a model from feature lists.

    pair_backend chooses the representation of pairs with no monotone
    feature: networks extrapolate freely in thin data corners, lattices
    stay bounded by their vertex values.
    """

    main_layers: int = 2
    main_width: int = 20
    pair_layers: int = 10
    pair_width: int = 100
    main_lattice_vertices: int = 10
    pair_lattice_vertices: int = 8
    calibrator_knots: int = 10
    pair_backend: str = "mlp"


def make_term_specs(mains, pairs, monotone: dict | None = None, smooth=(),
                    arch: ArchitectureConfig | None = None) -> list:
    """TermSpecs for the given features; monotone features take lattices."""
    arch = arch or ArchitectureConfig()
    monotone = monotone or {}
    smooth = set(smooth)
    specs = []
    for f in mains:
        if f in monotone:
            specs.append(
                TermSpec(
                    (f,), backend="lattice", monotonic=(monotone[f],),
                    smooth=f in smooth,
                    lattice_sizes=(arch.main_lattice_vertices,),
                    calibrator_knots=arch.calibrator_knots,
                )
            )
        else:
            specs.append(
                TermSpec(
                    (f,), hidden_layers=arch.main_layers,
                    first_hidden_width=arch.main_width, smooth=f in smooth,
                )
            )
    for a, b in pairs:
        if a in monotone or b in monotone or arch.pair_backend == "lattice":
            specs.append(
                TermSpec(
                    (a, b), backend="lattice",
                    monotonic=(monotone.get(a, 0), monotone.get(b, 0)),
                    lattice_sizes=(arch.pair_lattice_vertices,) * 2,
                    calibrator_knots=arch.calibrator_knots,
                )
            )
        else:
            specs.append(
                TermSpec(
                    (a, b), hidden_layers=arch.pair_layers,
                    first_hidden_width=arch.pair_width,
                )
            )
    return specs


@dataclass(frozen=True)
class SelectionConfig:
    """Settings for the staged screening pipeline."""

    ensemble_size: int = 10
    k1: int | None = None  # None: report scores, caller decides
    k2: int | None = None
    distribution: DistributionSpec = field(default_factory=DistributionSpec)
    monotone: dict = field(default_factory=dict)  # feature -> +1 / -1
    arch: ArchitectureConfig = field(default_factory=ArchitectureConfig)
    stage_train: TrainConfig = field(default_factory=TrainConfig)
    stage2_patience: int = 10
    # the shared stage-2 baseline should sit at the mains-only optimum so
    # candidate deltas measure the pair term, not leftover main training;
    # None reuses stage_train with stage2_patience
    baseline_train: TrainConfig | None = None
    # pair candidates often need a different step size than the shallow
    # stage-1 members; None reuses stage_train with stage2_patience
    candidate_train: TrainConfig | None = None
    member_seeds: tuple = ()  # derived from seed when empty
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.ensemble_size < 1:
            raise ConfigError("ensemble size must be at least 1")
        if self.jobs < 1:
            raise ConfigError("jobs must be at least 1")

    def resolved_member_seeds(self) -> tuple:
        if self.member_seeds:
            return tuple(int(s) for s in self.member_seeds)
        children = np.random.SeedSequence([self.seed, 1]).spawn(self.ensemble_size)
        return tuple(int(c.generate_state(1)[0]) for c in children)


@dataclass
class SelectionReport:
    """Scores and choices produced by the screening stages."""

    stage: str
    feature_scores: dict = field(default_factory=dict)
    member_scores: dict = field(default_factory=dict)  # feature -> per-member list
    selected_mains: list = field(default_factory=list)
    baseline_val_nll: float | None = None
    pair_deltas: dict = field(default_factory=dict)  # "a:b" -> delta
    selected_pairs: list = field(default_factory=list)
    dropped_members: int = 0

    def to_json(self) -> str:
        doc = {
            "stage": self.stage,
            "feature_scores": self.feature_scores,
            "member_scores": self.member_scores,
            "selected_mains": self.selected_mains,
            "baseline_val_nll": self.baseline_val_nll,
            "pair_deltas": self.pair_deltas,
            "selected_pairs": self.selected_pairs,
            "dropped_members": self.dropped_members,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "SelectionReport":
        doc = json.loads(text)
        return SelectionReport(**doc)

    def scores_csv(self) -> str:
        if self.stage == "main":
            lines = ["feature,score"]
            lines += [f"{f},{s!r}" for f, s in self.feature_scores.items()]
        else:
            lines = ["pair,delta_val_nll"]
            lines += [f"{p},{d!r}" for p, d in self.pair_deltas.items()]
        return "\n".join(lines) + "\n"


def _stage_cfg(cfg: SelectionConfig, seed: int, patience: int | None = None) -> TrainConfig:
    # screening stages train on the likelihood alone
    return replace(
        cfg.stage_train,
        omega_smooth=0.0,
        omega_mc=0.0,
        seed=seed,
        patience=patience if patience is not None else cfg.stage_train.patience,
    )


def _train_member(args):
    train_ds, val_ds, specs, dist, uses_offset, member_seed, train_cfg = args
    model = build_model(train_ds, specs, dist, uses_offset=uses_offset, seed=member_seed)
    result = train(model, train_ds, val_ds, train_cfg)
    if result.diverged:
        return member_seed, None
    contrib = model.contributions(train_ds.x)
    scores = (contrib**2).sum(axis=0) / (train_ds.n - 1)
    return member_seed, dict(zip(model.term_labels(), scores))


def select_main(train_ds: Dataset, val_ds: Dataset, cfg: SelectionConfig,
                features=None) -> SelectionReport:
    """Stage 1: ensemble variance ranking of main effects.

    Each ensemble member is built and batched from its own seed. Scores
    are averaged over members in ascending seed order, so permuting the
    seed list never changes the result. Diverged members are dropped with
    a warning; more than half dropping is an error.
    """
    features = list(features) if features is not None else list(train_ds.feature_names)
    if cfg.k1 is not None and cfg.k1 > len(features):
        raise ConfigError("k1 exceeds the number of candidate features")
    specs = make_term_specs(features, [], cfg.monotone, (), cfg.arch)
    uses_offset = cfg.distribution.family == "poisson" and train_ds.exposure is not None
    seeds = cfg.resolved_member_seeds()
    jobs_args = [
        (train_ds, val_ds, specs, cfg.distribution, uses_offset, s, _stage_cfg(cfg, s))
        for s in seeds
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_train_member, jobs_args))
    else:
        outcomes = [_train_member(a) for a in jobs_args]

    member_scores = {f: [] for f in features}
    dropped = 0
    for seed, scores in sorted(outcomes, key=lambda kv: kv[0]):
        if scores is None:
            dropped += 1
            warnings.warn(f"ensemble member with seed {seed} diverged and was dropped")
            continue
        for f in features:
            member_scores[f].append(scores[f])
    if dropped > cfg.ensemble_size / 2:
        raise SelectionError(f"{dropped} of {cfg.ensemble_size} ensemble members diverged")

    feature_scores = {f: float(np.mean(member_scores[f])) for f in features}
    ranked = sorted(features, key=lambda f: -feature_scores[f])
    selected = ranked[: cfg.k1] if cfg.k1 is not None else []
    return SelectionReport(
        stage="main",
        feature_scores=feature_scores,
        member_scores={f: [float(v) for v in member_scores[f]] for f in features},
        selected_mains=selected,
        dropped_members=dropped,
    )


def _train_candidate(args):
    (baseline_blob, train_ds, val_ds, pair_spec, pair_seed, train_cfg) = args
    import pickle

    model: AdditiveModel = pickle.loads(baseline_blob)
    # graft the candidate neutrally: flat lattice (still feasible) and a
    # centering offset equal to its initial mean, so the candidate starts
    # from the baseline's predictions instead of a perturbed state
    pair_term = build_term(train_ds, pair_spec, pair_seed, lattice_init="zero")
    model.terms.append(pair_term)
    raw, _ = model.term_forward(pair_term, train_ds.x)
    pair_term.center = float(np.mean(raw))
    parents = set(pair_spec.features)
    frozen = {t.label for t in model.terms if not t.spec.is_pair and t.spec.features[0] not in parents}
    result = train(model, train_ds, val_ds, train_cfg, frozen_terms=frozen, train_bias=False)
    if result.diverged:
        return pair_spec.label, None
    return pair_spec.label, validation_nll(model, val_ds)


def select_pairs(train_ds: Dataset, val_ds: Dataset, selected_mains,
                 cfg: SelectionConfig) -> SelectionReport:
    """Stage 2: screen every eligible pair against a frozen baseline.

    The mains-only baseline is trained once; every candidate starts from a
    byte-identical copy, adds one pair term, and trains only that term and
    its two parent mains. Pairs are ranked by the drop in validation NLL
    relative to the baseline.
    """
    mains = list(selected_mains)
    if len(mains) < 2:
        raise ConfigError("pair screening needs at least two selected mains")
    n_pairs = len(mains) * (len(mains) - 1) // 2
    if cfg.k2 is not None and cfg.k2 > n_pairs:
        raise ConfigError("k2 exceeds the number of eligible pairs")

    uses_offset = cfg.distribution.family == "poisson" and train_ds.exposure is not None
    base_seed = int(np.random.SeedSequence([cfg.seed, 2]).generate_state(1)[0])
    base_specs = make_term_specs(mains, [], cfg.monotone, (), cfg.arch)
    baseline = build_model(train_ds, base_specs, cfg.distribution,
                           uses_offset=uses_offset, seed=base_seed)
    if cfg.baseline_train is not None:
        base_cfg = replace(cfg.baseline_train, omega_smooth=0.0, omega_mc=0.0, seed=base_seed)
    else:
        base_cfg = _stage_cfg(cfg, base_seed, cfg.stage2_patience)
    train(baseline, train_ds, val_ds, base_cfg)
    baseline_val = validation_nll(baseline, val_ds)

    pairs = [(mains[i], mains[j]) for i in range(len(mains)) for j in range(i + 1, len(mains))]
    pair_specs = [make_term_specs([], [p], cfg.monotone, (), cfg.arch)[0] for p in pairs]
    children = np.random.SeedSequence([cfg.seed, 3]).spawn(len(pairs))
    pair_seeds = [int(c.generate_state(1)[0]) for c in children]

    import pickle

    blob = pickle.dumps(baseline)

    def candidate_cfg(seed: int) -> TrainConfig:
        if cfg.candidate_train is not None:
            return replace(cfg.candidate_train, omega_smooth=0.0, omega_mc=0.0, seed=seed)
        return _stage_cfg(cfg, seed, cfg.stage2_patience)

    jobs_args = [
        (blob, train_ds, val_ds, spec, seed, candidate_cfg(seed))
        for spec, seed in zip(pair_specs, pair_seeds)
    ]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            outcomes = list(pool.map(_train_candidate, jobs_args))
    else:
        outcomes = [_train_candidate(a) for a in jobs_args]

    deltas = {}
    dropped = 0
    for label, val_nll in outcomes:
        if val_nll is None:
            dropped += 1
            warnings.warn(f"pair candidate {label} diverged and was dropped")
            continue
        deltas[label] = float(baseline_val - val_nll)
    if dropped > len(pairs) / 2:
        raise SelectionError(f"{dropped} of {len(pairs)} pair candidates diverged")

    ranked = sorted(deltas, key=lambda k: -deltas[k])
    chosen = ranked[: cfg.k2] if cfg.k2 is not None else []
    return SelectionReport(
        stage="pairs",
        selected_mains=mains,
        baseline_val_nll=float(baseline_val),
        pair_deltas={k: deltas[k] for k in ranked},
        selected_pairs=chosen,
        dropped_members=dropped,
    )


def fine_tune(train_ds: Dataset, val_ds: Dataset, mains, pairs,
              cfg: SelectionConfig, train_cfg: TrainConfig,
              smooth=(), arch: ArchitectureConfig | None = None) -> tuple[AdditiveModel, TrainResult]:
    """Stage 3: joint training of the chosen terms from fresh parameters.

    Penalties and constraints follow train_cfg; the returned model is
    finalized (projected hard and centered).
    """
    pair_tuples = [tuple(p.split(":")) if isinstance(p, str) else tuple(p) for p in pairs]
    specs = make_term_specs(mains, pair_tuples, cfg.monotone, smooth, arch or cfg.arch)
    uses_offset = cfg.distribution.family == "poisson" and train_ds.exposure is not None
    seed = int(np.random.SeedSequence([cfg.seed, 4]).generate_state(1)[0])
    model = build_model(train_ds, specs, cfg.distribution, uses_offset=uses_offset, seed=seed)
    result = train(model, train_ds, val_ds, train_cfg)
    return model, result
