"""Glue between field files, features, and the network.

A :class:`ProblemSetup` fixes everything a trained model needs to turn a
case into network inputs: the shock calibration, the feature recipe, the
target columns and what the branch receives.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .burgers import calibrate_t_shock, case_to_field
from .features import (
    FeatureParams,
    ShockCalibration,
    axis_spacing,
    build_trunk_features,
    calibrate_shock_station,
    sample_weights,
    trunk_features_from_arrays,
    wall_distance,
)
from .field_io import CaseRecord, second_axis
from .neural import FusionModel, make_architecture, mc_dropout_predict

MODEL_VARIANTS = ("shock_aware", "fusion_orig", "vanilla", "external_calibration")

# The Burgers front is thinner than one output cell; trunk noise of 0.03 in
# standardized units moves a point by about two cells and heavy dropout keeps
# the fit from resolving the jump, so that problem uses lighter settings.
BURGERS_REGULARIZATION = {"dropout": 0.05, "input_noise": 0.0}


def is_burgers(case: CaseRecord) -> bool:
    return second_axis(case.zones[0]) == "T"


@dataclass
class ProblemSetup:
    features: FeatureParams
    calibration: ShockCalibration
    targets: tuple = ("U", "V")
    branch_inputs: str = "condition"  # or "condition+station"

    @property
    def branch_dim(self) -> int:
        return 2 if self.branch_inputs == "condition+station" else 1

    def branch_rows(self, conditions) -> np.ndarray:
        c = np.asarray(conditions, dtype=float).reshape(-1)
        if self.branch_inputs == "condition+station":
            return np.column_stack([c, self.calibration.station(c)])
        return c[:, None]

    def to_dict(self) -> dict:
        return {"features": self.features.to_dict(), "calibration": self.calibration.to_dict(),
                "targets": list(self.targets), "branch_inputs": self.branch_inputs}

    @classmethod
    def from_dict(cls, d: dict) -> "ProblemSetup":
        return cls(FeatureParams.from_dict(d["features"]), ShockCalibration.from_dict(d["calibration"]),
                   tuple(d["targets"]), d.get("branch_inputs", "condition"))


def calibrate(cases, robust: bool = False) -> ShockCalibration:
    """Shock-station fit for nozzle-style cases, t_shock fit for Burgers cases."""
    if is_burgers(cases[0]):
        return calibrate_t_shock([(c.condition, case_to_field(c)) for c in cases], robust=robust)
    return calibrate_shock_station(cases, robust=robust)


def make_setup(train_cases, variant: str = "shock_aware", features: FeatureParams | None = None,
               targets=None, calibration: ShockCalibration | None = None) -> ProblemSetup:
    """Derive the feature recipe and calibration for a model variant.

    ``shock_aware`` uses the full shock-aligned trunk; ``fusion_orig`` and
    ``vanilla`` see raw coordinates only; ``external_calibration`` uses a
    Huber-regressed station both in the trunk features and as a second
    branch input.
    """
    if variant not in MODEL_VARIANTS:
        raise ValueError(f"unknown model variant {variant!r}")
    burgers = is_burgers(train_cases[0])
    fp = FeatureParams(**(features.to_dict() if features else {}))
    fp.walls = tuple(fp.walls)
    if burgers:
        fp.axis = "T"
        fp.indicator = "tanh"
        fp.envelope_floor = 1e-12
        fp.wall_distance = False
    fp.mode = "raw" if variant in ("fusion_orig", "vanilla") else "shock"
    lo = min(float(z[fp.axis].min()) for c in train_cases for z in c.zones)
    hi = max(float(z[fp.axis].max()) for c in train_cases for z in c.zones)
    fp.length_scale = (hi - lo) if hi > lo else 1.0
    if calibration is None:
        calibration = calibrate(train_cases, robust=variant == "external_calibration")
    if targets is None:
        targets = ("U",) if burgers else ("U", "V")
    branch = "condition+station" if variant == "external_calibration" else "condition"
    return ProblemSetup(fp, calibration, tuple(targets), branch)


def architecture_for(setup: ProblemSetup, variant: str = "shock_aware", scale: float = 1.0,
                     simpler: bool = False, **overrides):
    """Default network for a setup; ``simpler`` halves fusion/decoder widths and drops a decoder block.

    Time-axis (Burgers) setups default to :data:`BURGERS_REGULARIZATION`;
    explicit ``overrides`` win.
    """
    kind = "dot_product" if variant == "vanilla" else "hadamard_fusion"
    if setup.features.axis == "T":
        overrides = {**BURGERS_REGULARIZATION, **overrides}
    hidden = tuple(int(round(w * scale)) for w in overrides.pop("hidden", (64, 96)))
    fusion = int(round(overrides.pop("fusion_dim", 128) * scale))
    decoder = tuple(int(round(w * scale)) for w in overrides.pop("decoder", (128, 128)))
    if simpler:
        fusion //= 2
        decoder = tuple(w // 2 for w in decoder[:-1]) or (max(decoder[0] // 2, 1),)
    if kind == "dot_product":
        fusion -= fusion % len(setup.targets)
    return make_architecture(kind, setup.branch_dim, setup.features.width, len(setup.targets),
                             hidden=hidden, fusion_dim=fusion, decoder=decoder, **overrides)


@dataclass
class PointSet:
    """Flat per-point arrays for a group of cases (raw, unstandardized)."""

    branch: np.ndarray
    trunk: np.ndarray
    target: np.ndarray
    weights: dict = field(default_factory=dict)  # phase name -> (n,)
    w_dist: np.ndarray | None = None
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    condition: np.ndarray | None = None
    dx: np.ndarray | None = None
    wall: np.ndarray | None = None
    case_index: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.trunk.shape[0]

    def take(self, idx) -> "PointSet":
        def sel(a):
            return None if a is None else a[idx]
        return PointSet(self.branch[idx], self.trunk[idx], self.target[idx],
                        {k: v[idx] for k, v in self.weights.items()}, sel(self.w_dist), sel(self.x),
                        sel(self.y), sel(self.condition), sel(self.dx), sel(self.wall), sel(self.case_index))

    @staticmethod
    def concat(sets) -> "PointSet":
        sets = list(sets)

        def cat(name):
            vals = [getattr(s, name) for s in sets]
            return None if any(v is None for v in vals) else np.concatenate(vals)
        keys = sets[0].weights.keys()
        return PointSet(cat("branch"), cat("trunk"), cat("target"),
                        {k: np.concatenate([s.weights[k] for s in sets]) for k in keys},
                        cat("w_dist"), cat("x"), cat("y"), cat("condition"), cat("dx"), cat("wall"),
                        cat("case_index"))

    def rebuild_trunk(self, idx, x_shift, setup: ProblemSetup) -> np.ndarray:
        """Trunk rows for ``idx`` recomputed at ``x + x_shift``."""
        return trunk_features_from_arrays(self.x[idx] + x_shift, self.y[idx], self.condition[idx],
                                          setup.calibration, setup.features, self.dx[idx],
                                          None if self.wall is None else self.wall[idx])


def case_points(case: CaseRecord, setup: ProblemSetup, lams: dict | None = None,
                case_index: int = 0) -> PointSet:
    """Inputs, targets and per-phase sample weights for every point of a case."""
    lams = lams or {}
    trunks, targets, xs, ys, dxs, walls, wds = [], [], [], [], [], [], []
    weights = {k: [] for k in lams}
    for z in case.zones:
        dx = axis_spacing(z, setup.features)
        trunks.append(build_trunk_features(z, case.condition, setup.calibration, setup.features, dx))
        targets.append(np.column_stack([z[t] for t in setup.targets]))
        xs.append(z["X"])
        ys.append(z[second_axis(z)])
        dxs.append(np.full(z.n_points, dx))
        if setup.features.wall_distance and setup.features.mode != "raw":
            walls.append(wall_distance(z, setup.features.walls))
        for name, lam in lams.items():
            parts = {}
            weights[name].append(sample_weights(z, case.condition, setup.calibration, setup.features,
                                                lam, dx, parts))
        if lams:
            wds.append(parts["W_d"])
    n = case.n_points
    return PointSet(
        branch=setup.branch_rows(np.full(n, case.condition)),
        trunk=np.concatenate(trunks),
        target=np.concatenate(targets),
        weights={k: np.concatenate(v) for k, v in weights.items()},
        w_dist=np.concatenate(wds) if wds else None,
        x=np.concatenate(xs), y=np.concatenate(ys), condition=np.full(n, float(case.condition)),
        dx=np.concatenate(dxs), wall=np.concatenate(walls) if walls else None,
        case_index=np.full(n, case_index),
    )


def build_points(cases, setup: ProblemSetup, lams: dict | None = None, max_points_per_case=None,
                 rng=None) -> PointSet:
    """Concatenated point sets, optionally subsampled per case without replacement."""
    sets = []
    for k, c in enumerate(cases):
        ps = case_points(c, setup, lams, k)
        if max_points_per_case is not None and ps.n > max_points_per_case:
            idx = np.sort(rng.choice(ps.n, size=max_points_per_case, replace=False))
            ps = ps.take(idx)
        sets.append(ps)
    return PointSet.concat(sets)


def predict_case(model: FusionModel, case: CaseRecord, setup: ProblemSetup) -> np.ndarray:
    """Deterministic prediction ``(n_points, n_targets)`` in physical units."""
    ps = case_points(case, setup)
    return model.predict(ps.branch, ps.trunk)


def mc_predict_case(model: FusionModel, case: CaseRecord, setup: ProblemSetup, n_samples: int, rng):
    ps = case_points(case, setup)
    return mc_dropout_predict(model, ps.branch, ps.trunk, n_samples, rng)
