"""Error metrics, centerline tables, and the comparison and ablation harnesses."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import EmptySelection, ShapeMismatch, ZeroRange, ZeroReference
from .features import FeatureParams, sample_weights
from .field_io import CaseRecord, second_axis
from .neural import FusionModel
from .pipeline import architecture_for, make_setup, predict_case
from .trainer import TrainConfig, derive_seed, prepare_training_data, train_curriculum

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# metrics

def _pair(truth, pred):
    truth = np.asarray(truth, dtype=float).reshape(-1)
    pred = np.asarray(pred, dtype=float).reshape(-1)
    if truth.shape != pred.shape:
        raise ShapeMismatch(f"truth has {truth.size} values, prediction {pred.size}")
    return truth, pred


def rel_l2(truth, pred) -> float:
    """``||truth - pred|| / ||truth||``."""
    truth, pred = _pair(truth, pred)
    ref = np.linalg.norm(truth)
    if not ref > 0:
        raise ZeroReference("reference field has zero norm")
    return float(np.linalg.norm(truth - pred) / ref)


def joint_rel_l2(truths, preds) -> float:
    """Relative L2 of all channels stacked into one vector."""
    pairs = [_pair(t, p) for t, p in zip(truths, preds)]
    return rel_l2(np.concatenate([t for t, _ in pairs]), np.concatenate([p for _, p in pairs]))


def range_normalized_errors(truth, pred) -> tuple[float, float]:
    """NRMSE and NMAE in percent of the reference value range."""
    truth, pred = _pair(truth, pred)
    span = float(truth.max() - truth.min()) if truth.size else 0.0
    if not span > 0:
        raise ZeroRange("reference field has zero value range")
    err = pred - truth
    return (float(np.sqrt(np.mean(err ** 2)) / span * 100.0),
            float(np.mean(np.abs(err)) / span * 100.0))


@dataclass
class ChannelMetrics:
    rel_l2: float
    nrmse: float
    nmae: float


@dataclass
class MetricsReport:
    model: str
    condition: float
    channels: dict  # name -> ChannelMetrics
    joint_rel_l2: float
    role: str = ""
    seed: int | None = None
    n_points: int = 0

    def row(self) -> dict:
        out = {"model": self.model, "condition": self.condition, "role": self.role, "seed": self.seed,
               "n_points": self.n_points, "joint_rel_l2": self.joint_rel_l2}
        for name, m in self.channels.items():
            out[f"{name}_rel_l2"] = m.rel_l2
            out[f"{name}_nrmse_pct"] = m.nrmse
            out[f"{name}_nmae_pct"] = m.nmae
        return out

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = {k: asdict(v) for k, v in self.channels.items()}
        return d


def case_metrics(case: CaseRecord, pred, targets, model: str = "", seed=None) -> MetricsReport:
    """Metrics for a prediction array ``(n_points, len(targets))`` of one case."""
    pred = np.asarray(pred, dtype=float).reshape(case.n_points, -1)
    if pred.shape[1] != len(targets):
        raise ShapeMismatch(f"{pred.shape[1]} predicted channels for targets {tuple(targets)}")
    channels, truths = {}, []
    for k, name in enumerate(targets):
        t = case.column(name)
        truths.append(t)
        nrmse, nmae = range_normalized_errors(t, pred[:, k])
        channels[name] = ChannelMetrics(rel_l2(t, pred[:, k]), nrmse, nmae)
    joint = joint_rel_l2(truths, [pred[:, k] for k in range(len(targets))])
    return MetricsReport(model, float(case.condition), channels, joint, str(case.meta.get("role", "")),
                         seed, case.n_points)


# ---------------------------------------------------------------------------
# centerline tables

@dataclass
class CenterlineTable:
    x: np.ndarray
    axis_coord: np.ndarray
    truth: np.ndarray
    pred: np.ndarray
    sigma: np.ndarray

    @property
    def lower(self):
        return self.pred - 2.0 * self.sigma

    @property
    def upper(self):
        return self.pred + 2.0 * self.sigma

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["x", "axis", "truth", "pred", "sigma", "lower_2sigma", "upper_2sigma"])
            for row in zip(self.x, self.axis_coord, self.truth, self.pred, self.sigma, self.lower, self.upper):
                w.writerow([repr(float(v)) for v in row])


def centerline_profile(case: CaseRecord, pred, sigma=None, axis_value: float = 0.0,
                       channel: str = "U", across: str | None = None) -> CenterlineTable:
    """Values along the grid line nearest to ``across == axis_value``.

    For every I-column of every zone the J-row closest to ``axis_value`` is
    taken, provided it lies within half a cell of it.  ``pred`` and ``sigma``
    are per-point arrays for ``channel``.  Rows come back sorted by x.
    """
    pred = np.asarray(pred, dtype=float).reshape(-1)
    sigma = np.zeros_like(pred) if sigma is None else np.asarray(sigma, dtype=float).reshape(-1)
    if pred.size != case.n_points or sigma.size != case.n_points:
        raise ShapeMismatch("pred/sigma must have one value per case point")
    xs, cs, ts, ps, ss = [], [], [], [], []
    offset = 0
    for z in case.zones:
        ax = across or second_axis(z)
        n = z.n_points
        shape = (z.j_count, z.i_count)
        Y = z.as_grid(ax)
        X, T = z.as_grid("X"), z.as_grid(channel)
        P, S = pred[offset:offset + n].reshape(shape), sigma[offset:offset + n].reshape(shape)
        offset += n
        dist = np.abs(Y - axis_value)
        j = np.argmin(dist, axis=0)
        cols = np.arange(z.i_count)
        if z.j_count > 1:
            # half the local cell size around the chosen row
            up = np.abs(Y[np.minimum(j + 1, z.j_count - 1), cols] - Y[j, cols])
            down = np.abs(Y[j, cols] - Y[np.maximum(j - 1, 0), cols])
            half = 0.5 * np.maximum(up, down)
        else:
            half = np.zeros(z.i_count)
        ok = dist[j, cols] <= half + 1e-12 * np.maximum(1.0, np.abs(axis_value))
        for arr, src in ((xs, X), (cs, Y), (ts, T), (ps, P), (ss, S)):
            arr.append(src[j, cols][ok])
    x = np.concatenate(xs)
    if x.size == 0:
        raise EmptySelection(f"no grid row within half a cell of {axis_value!r}")
    order = np.argsort(x, kind="stable")
    return CenterlineTable(x[order], np.concatenate(cs)[order], np.concatenate(ts)[order],
                           np.concatenate(ps)[order], np.concatenate(ss)[order])


# ---------------------------------------------------------------------------
# harnesses

def improvement_pct(value: float, reference: float) -> float:
    """Relative reduction of ``value`` with respect to ``reference`` in percent."""
    if reference == 0:
        return 0.0 if value == 0 else -np.inf
    return float((reference - value) / reference * 100.0)


@dataclass
class RunSpec:
    """What one trained model in a harness run is made of."""

    tag: str
    model_variant: str = "shock_aware"
    feature_overrides: dict = field(default_factory=dict)
    simpler: bool = False


def train_variant(train_cases, run: RunSpec, config: TrainConfig, features: FeatureParams | None = None,
                  arch_overrides: dict | None = None):
    """Build the setup, train one model and return ``(model, setup, history, train_points)``."""
    fp = FeatureParams(**{**(features.to_dict() if features else {}), **run.feature_overrides})
    setup = make_setup(train_cases, run.model_variant, fp)
    data = prepare_training_data(train_cases, setup, config)
    spec = architecture_for(setup, run.model_variant, simpler=run.simpler, **(arch_overrides or {}))
    model = FusionModel(spec, seed=derive_seed(config.seed, "init"))
    model.meta = {"variant": run.model_variant, "tag": run.tag, "setup": setup.to_dict()}
    trained, history = train_curriculum(data, model, config)
    return trained, setup, history, data.train


@dataclass
class HarnessResult:
    reports: list  # MetricsReport
    summary: dict = field(default_factory=dict)

    def rows(self) -> list[dict]:
        return [r.row() for r in self.reports]

    def write(self, out_dir, stem: str):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_rows_csv(self.rows(), out_dir / f"{stem}.csv")
        doc = {"reports": [r.to_dict() for r in self.reports], "summary": self.summary}
        (out_dir / f"{stem}.json").write_text(json.dumps(doc, indent=2, default=_json_default) + "\n")
        return out_dir / f"{stem}.csv", out_dir / f"{stem}.json"


COMPARE_VARIANTS = ("shock_aware", "fusion_orig", "vanilla")


def compare_models(train_cases, test_cases, config: TrainConfig, variants=COMPARE_VARIANTS, seeds=None,
                   features: FeatureParams | None = None, arch_overrides: dict | None = None) -> HarnessResult:
    """Train each variant (per seed) under the same split and budget; score every test case.

    The summary holds per-variant medians of the joint relative L2 and the
    improvement of each variant over every other one in percent.
    """
    seeds = [config.seed] if seeds is None else list(seeds)
    reports = []
    for seed in seeds:
        cfg = replace(config, seed=int(seed))
        for v in variants:
            model, setup, _, _ = train_variant(train_cases, RunSpec(v, v), cfg, features, arch_overrides)
            counts = set()
            for case in test_cases:
                pred = predict_case(model, case, setup)
                counts.add(pred.shape[0])
                reports.append(case_metrics(case, pred, setup.targets, v, seed))
            log.info("compare: variant %s seed %d done", v, seed)
    by_case = {}
    for r in reports:
        by_case.setdefault((r.condition, r.seed), set()).add(r.n_points)
    assert all(len(s) == 1 for s in by_case.values()), "variants scored on different point sets"
    med = {v: float(np.median([r.joint_rel_l2 for r in reports if r.model == v])) for v in variants}
    improvement = {a: {b: improvement_pct(med[a], med[b]) for b in variants} for a in variants}
    return HarnessResult(reports, {"median_joint_rel_l2": med, "improvement_pct": improvement,
                                   "seeds": seeds})


def ablation_variants() -> list[RunSpec]:
    """The five configurations; all but the last learn the shock position end to end."""
    base = {"use_rel_weight": True, "beta": 0.8}
    return [
        RunSpec("baseline_end_to_end", "fusion_orig", dict(base)),
        RunSpec("no_gradient_weighting", "fusion_orig", {**base, "beta": 0.0}),
        RunSpec("no_relative_weighting", "fusion_orig", {**base, "use_rel_weight": False}),
        RunSpec("simpler_architecture", "fusion_orig", dict(base), simpler=True),
        RunSpec("external_calibration", "external_calibration", dict(base)),
    ]


def run_ablation(train_cases, test_case: CaseRecord, config: TrainConfig,
                 features: FeatureParams | None = None, arch_overrides: dict | None = None,
                 variants=None) -> HarnessResult:
    """Train every ablation variant and report NRMSE/NMAE on one held-out case.

    The summary records, per variant, the range of the gradient weight
    component over the training points as a check on the configuration.
    """
    variants = ablation_variants() if variants is None else variants
    reports, summary = [], {"weight_gradient_range": {}, "n_parameters": {}}
    for run in variants:
        model, setup, _, _ = train_variant(train_cases, run, config, features, arch_overrides)
        pred = predict_case(model, test_case, setup)
        reports.append(case_metrics(test_case, pred, setup.targets, run.tag, config.seed))
        parts = {}
        lam = config.phases[-1].lam
        lo, hi = np.inf, -np.inf
        for c in train_cases:
            for z in c.zones:
                sample_weights(z, c.condition, setup.calibration, setup.features, lam, None, parts)
                lo, hi = min(lo, float(parts["W_g"].min())), max(hi, float(parts["W_g"].max()))
        summary["weight_gradient_range"][run.tag] = [lo, hi]
        summary["n_parameters"][run.tag] = model.n_parameters()
        log.info("ablation: %s done", run.tag)
    return HarnessResult(reports, summary)


# ---------------------------------------------------------------------------
# output

def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def write_rows_csv(rows, path):
    rows = list(rows)
    cols = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})
    return Path(path)


def write_report(report: MetricsReport, out_dir, stem: str = "metrics"):
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    write_rows_csv([report.row()], out_dir / f"{stem}.csv")
    (out_dir / f"{stem}.json").write_text(json.dumps(report.to_dict(), indent=2, default=_json_default) + "\n")
    return out_dir / f"{stem}.csv", out_dir / f"{stem}.json"
