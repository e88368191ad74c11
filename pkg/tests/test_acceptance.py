"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary
(see ``conftest.py``) whether or not the assertion holds.
"""

import math
import time

import numpy as np
import pytest

from oracles import adamw_first_step, cole_hopf, tecplot_text
from shockfusion.burgers import NU_BASE, BurgersConfig, calibrate_t_shock, case_to_field, solve_burgers
from shockfusion.evaluation import ablation_variants, compare_models, rel_l2, run_ablation
from shockfusion.features import (
    ShockCalibration,
    calibrate_shock_station,
    distance_weight,
    rbf_envelopes,
    sample_weights,
    signed_distance,
    soft_indicator,
)
from shockfusion.field_io import (
    NOZZLE_COLUMNS,
    CaseRecord,
    ZoneGrid,
    format_tecplot,
    parse_tecplot,
    prediction_case,
)
from shockfusion.features import FeatureParams
from shockfusion.neural import FusionModel, OptimizerState, adamw_step
from shockfusion.pipeline import architecture_for, make_setup, predict_case
from shockfusion.trainer import (
    CurriculumPhase,
    TrainConfig,
    derive_seed,
    group_split,
    huber,
    prepare_training_data,
    train_curriculum,
    weighted_huber,
)
from test_neural import fd_check, small_model

RESULTS = []


def verdict(n, ok, detail):
    line = f"ACCEPTANCE {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1-2: full-size Burgers training

@pytest.fixture(scope="module")
def burgers_run(default_burgers):
    start = time.perf_counter()
    train = default_burgers["train"]
    config = TrainConfig()
    setup = make_setup(train, "shock_aware")
    data = prepare_training_data(train, setup, config)
    model = FusionModel(architecture_for(setup, "shock_aware"), seed=derive_seed(config.seed, "init"))
    model, history = train_curriculum(data, model, config)
    errors = {}
    for role in ("interp", "extrap"):
        case = default_burgers[role][0]
        errors[role] = rel_l2(case.column("U"), predict_case(model, case, setup)[:, 0])
    return errors, time.perf_counter() - start, history


@pytest.mark.slow
def test_c01_burgers_interpolation(burgers_run):
    errors, seconds, history = burgers_run
    ok = errors["interp"] <= 0.04 and seconds <= 30 * 60
    verdict(1, ok, f"interp relL2={errors['interp']:.4f} (<=0.040), train+eval {seconds:.0f}s (<=1800s), "
                   f"epochs {history.phase_epochs()}")


@pytest.mark.slow
def test_c02_burgers_extrapolation(burgers_run):
    errors, _, _ = burgers_run
    verdict(2, errors["extrap"] <= 0.05, f"extrap relL2={errors['extrap']:.4f} (<=0.050)")


# ---------------------------------------------------------------------------
# 3: ordering against the dot-product baseline

COMPARE_EPOCHS = 80
COMPARE_POINTS = 8192


@pytest.mark.slow
def test_c03_baseline_ordering(default_burgers):
    config = TrainConfig(phases=[CurriculumPhase("warmup", 1.0, 0.7, COMPARE_EPOCHS),
                                 CurriculumPhase("focus", 0.5, 0.4, COMPARE_EPOCHS)],
                         max_points_per_case=COMPARE_POINTS)
    tests = default_burgers["interp"] + default_burgers["extrap"]
    res = compare_models(default_burgers["train"], tests, config, variants=("shock_aware", "vanilla"),
                         seeds=[0, 1, 2])
    med = res.summary["median_joint_rel_l2"]
    verdict(3, med["shock_aware"] <= med["vanilla"],
            f"median joint relL2 shock_aware={med['shock_aware']:.4f} vanilla={med['vanilla']:.4f} "
            f"(improvement {res.summary['improvement_pct']['shock_aware']['vanilla']:.1f}%)")


# ---------------------------------------------------------------------------
# 4: finite-difference gradient oracle

def test_c04_gradient_oracle():
    start = time.perf_counter()
    b = np.array([[0.3], [0.3], [-1.2], [0.8]])
    t = np.random.default_rng(5).normal(size=(4, 3))
    worst = max(fd_check(small_model(v), b, t, "train", seed=11) for v in ("hadamard_fusion", "dot_product"))
    seconds = time.perf_counter() - start
    verdict(4, worst < 1e-4 and seconds < 10, f"max rel err {worst:.2e} (<1e-4), {seconds:.2f}s (<10s)")


# ---------------------------------------------------------------------------
# 5: feature invariants

def test_c05_feature_invariants():
    cal = ShockCalibration(0.1, 0.004, 0.0)
    rng = np.random.default_rng(0)
    n = 2000
    pr = rng.uniform(10, 40, n)
    xs = cal.station(pr)
    x = rng.uniform(-1, 1, n)
    dx = rng.uniform(1e-4, 0.1, n)
    worst = 0.0
    worst = max(worst, np.max(np.abs(soft_indicator(xs, pr, cal, 1.8e3) - 0.5)))
    worst = max(worst, np.max(np.abs(signed_distance(xs, pr, cal))))
    worst = max(worst, max(abs(p - 1.0) for p in rbf_envelopes(0.0, 0.01)))
    for k in rng.uniform(1.0, 5e3, 20):
        anti = soft_indicator(x, pr, cal, k) + soft_indicator(2 * xs - x, pr, cal, k) - 1.0
        worst = max(worst, np.max(np.abs(anti)))
    p1, p2, p3 = rbf_envelopes(x - xs, dx)
    ordered = bool(np.all(p1 <= p2) and np.all(p2 <= p3))
    min_w = np.inf
    for _ in range(200):
        u = rng.uniform(-10, 10, int(rng.integers(3, 12)))
        z = ZoneGrid(u.size, 1, {"X": np.linspace(0, 0.4, u.size), "Y": np.zeros(u.size), "U": u})
        params = FeatureParams(alpha=rng.uniform(0.01, 10), beta=rng.uniform(0, 5), use_rel_weight=True)
        min_w = min(min_w, float(sample_weights(z, 25.0, cal, params, rng.uniform(0, 1), dx=0.01).min()))
    c = rng.uniform(-10, 10, n)
    moved = ShockCalibration(cal.a0 + c, cal.a1, 0.0)
    d0, d1 = signed_distance(x, pr, cal), signed_distance(x + c, pr, moved)
    shift = max(np.max(np.abs(d1 - d0)),
                np.max(np.abs(soft_indicator(x + c, pr, moved, 1.8e3) - soft_indicator(x, pr, cal, 1.8e3))),
                max(np.max(np.abs(a - b)) for a, b in zip(rbf_envelopes(d0, dx), rbf_envelopes(d1, dx))),
                np.max(np.abs(distance_weight(x + c, pr, moved, 2.0, dx) - distance_weight(x, pr, cal, 2.0, dx))))
    worst = max(worst, shift)
    verdict(5, worst <= 1e-12 and ordered and min_w >= 1.0,
            f"max deviation {worst:.1e} (<=1e-12), envelope ordering {ordered}, min weight {min_w:.6f} (>=1)")


# ---------------------------------------------------------------------------
# 6: loss

def test_c06_loss_suite():
    a = float(huber(0.25, 0.6))
    b = float(huber(2.0, 0.6))
    h = 1e-7
    c1 = 0.0
    for r in (0.6, -0.6):
        left = (huber(r, 0.6) - huber(r - h, 0.6)) / h
        right = (huber(r + h, 0.6) - huber(r, 0.6)) / h
        c1 = max(c1, abs(left - right), abs(huber(r + h, 0.6) - huber(r - h, 0.6)))
    rng = np.random.default_rng(1)
    pred, target, w = rng.normal(size=(50, 2)), rng.normal(size=(50, 2)), rng.uniform(0.1, 3, 50)
    l0, g0 = weighted_huber(pred, target, w, 0.6)
    scale = max(max(abs(weighted_huber(pred, target, s * w, 0.6)[0] - l0),
                    np.max(np.abs(weighted_huber(pred, target, s * w, 0.6)[1] - g0))) for s in (1e-3, 7.0, 1e3))
    ok = abs(a - 0.03125) < 1e-15 and abs(b - 1.02) < 1e-15 and c1 < 1e-6 and scale <= 1e-12
    verdict(6, ok, f"huber(0.25)={a!r} huber(2)={b!r} C1 gap {c1:.1e} scale gap {scale:.1e}")


# ---------------------------------------------------------------------------
# 7: optimizer

def test_c07_adamw_first_step():
    params = {"w": np.array([1.0])}
    adamw_step(params, {"w": np.array([0.5])}, OptimizerState(lr=1e-3, weight_decay=0.01, clipnorm=None))
    oracle = adamw_first_step(1.0, 0.5, 1e-3, 0.9, 0.999, 1e-8, 0.01)
    got = float(params["w"][0])
    verdict(7, abs(got - 0.998990) <= 1e-9 and abs(got - oracle) <= 1e-15,
            f"theta'={got!r}, oracle {oracle!r}")


# ---------------------------------------------------------------------------
# 8: field files

def test_c08_tecplot_round_trip():
    rng = np.random.default_rng(7)

    def rows(i, j, x0):
        out = []
        for jj in range(j):
            for ii in range(i):
                out.append([x0 + ii / (i - 1), jj / (j - 1) * 0.2, *rng.normal(size=len(NOZZLE_COLUMNS) - 2)])
        return out
    text = tecplot_text([(100, 60, rows(100, 60, 0.0)), (40, 30, rows(40, 30, 1.0))], NOZZLE_COLUMNS)
    a = parse_tecplot(text, 25.0)
    b = parse_tecplot(format_tecplot(a), 25.0)
    exact = all(np.array_equal(za[n], zb[n]) for za, zb in zip(a.zones, b.zones) for n in za.names)
    exact &= [(z.i_count, z.j_count) for z in b.zones] == [(100, 60), (40, 30)]
    case = CaseRecord([ZoneGrid(4, 1, {"X": np.arange(4.0), "Y": np.zeros(4), "U": [2.0, 0.0, -1.0, 3.0],
                                       "V": [1.0, 1.0, 1.0, 1.0]})], 1.0)
    z = prediction_case(case, [1.0, 0.1, -1.0, 3.0], [1.0, 1.0, 1.0, 1.0], epsilon=1e-3).zones[0]
    # |t - p| / max(|t|, eps) and (t - p)^2 / max(t^2, eps^2), entry by entry
    hand = {"Error_U": [1.0 / 2.0, 0.1 / 1e-3, 0.0, 0.0], "ErrorU_L2": [1.0 / 4.0, 0.1 ** 2 / 1e-3 ** 2, 0.0, 0.0],
            "Error_V": [0.0] * 4, "ErrorV_L2": [0.0] * 4}
    cols = all(np.array_equal(z[k], v) for k, v in hand.items())
    verdict(8, exact and cols, f"round trip exact {exact}, error columns exact {cols}")


# ---------------------------------------------------------------------------
# 9: calibration recovery

def _smooth_shock(pr):
    x, y = np.meshgrid(np.linspace(0.0, 0.4, 401), np.linspace(0.0, 0.1, 5))
    u = 1.25 - 0.75 * np.tanh((x - (0.1 + 0.004 * pr)) / 0.004)
    return CaseRecord([ZoneGrid(401, 5, {"X": x.ravel(), "Y": y.ravel(), "U": u.ravel()})], float(pr))


@pytest.mark.slow
def test_c09_calibration_recovery(default_burgers):
    cal = calibrate_shock_station([_smooth_shock(pr) for pr in (15, 18, 21, 24, 27, 33)])
    da0, da1 = abs(cal.a0 - 0.1), abs(cal.a1 - 0.004)
    train = default_burgers["train"]
    tcal = calibrate_t_shock([(c.condition, case_to_field(c)) for c in train])
    order = np.argsort(tcal.conditions)
    ts = np.asarray(tcal.locations)[order]
    monotone = bool(np.all(np.diff(ts) <= 0) and tcal.a1 <= 0)
    verdict(9, da0 < 1e-6 and da1 < 1e-6 and monotone,
            f"|da0|={da0:.1e} |da1|={da1:.1e} (<1e-6); t_shock over increasing nu "
            f"{np.round(ts, 4).tolist()}, slope {tcal.a1:.3g} (nonincreasing required: {monotone})")


# ---------------------------------------------------------------------------
# 10: split hygiene

def test_c10_split_hygiene():
    rng = np.random.default_rng(0)
    violations = 0
    for trial in range(1000):
        conds = rng.choice(np.arange(40.0), size=int(rng.integers(2, 30)))
        if len(set(conds)) < 2:
            conds = np.append(conds, conds[0] + 1)
        cases = [CaseRecord([ZoneGrid(1, 1, {"X": [0.0]})], float(c)) for c in conds]
        train, val = group_split(cases, float(rng.uniform(0.05, 0.95)), trial)
        tc, vc = {c.condition for c in train}, {c.condition for c in val}
        violations += bool(tc & vc) or not tc or not vc or len(train) + len(val) != len(cases)
    verdict(10, violations == 0, f"{violations} violations in 1000 trials")


# ---------------------------------------------------------------------------
# 11: solver against the exact solution

def _max_error(refine, substeps):
    f = solve_burgers(BurgersConfig(nu=NU_BASE, nt=401, refine=refine, substeps=substeps))
    err = 0.0
    for t in (0.25, 0.5, 1.0):
        k = int(round(t * 400))
        assert abs(f.t[k] - t) < 1e-12
        err = max(err, float(np.max(np.abs(f.u[k] - cole_hopf(f.x, t, NU_BASE)))))
    return err


@pytest.mark.slow
def test_c11_solver_oracle():
    d = BurgersConfig()
    ladder = [_max_error(r, s) for r, s in ((d.refine // 4, d.substeps // 4), (d.refine // 2, d.substeps // 2),
                                           (d.refine, d.substeps))]
    ratios = [ladder[0] / ladder[1], ladder[1] / ladder[2]]
    ok = ladder[-1] < 1e-3 and min(ratios) >= 3.0
    verdict(11, ok, f"max-abs errors {['%.2e' % e for e in ladder]} (default <1e-3), "
                    f"ratios {['%.2f' % r for r in ratios]} (>=3)")


# ---------------------------------------------------------------------------
# 12: ablation harness

@pytest.mark.slow
def test_c12_ablation_table(default_burgers):
    config = TrainConfig(phases=[CurriculumPhase("warmup", 1.0, 0.7, 10), CurriculumPhase("focus", 0.5, 0.4, 10)],
                         max_points_per_case=4096)
    res = run_ablation(default_burgers["train"], default_burgers["interp"][0], config)
    rows = res.rows()
    tags = [r["model"] for r in rows]
    cols = ("U_nrmse_pct", "U_nmae_pct")
    complete = tags == [v.tag for v in ablation_variants()] and all(
        all(c in r and math.isfinite(r[c]) and r[c] >= 0 for c in cols) for r in rows)
    table = "; ".join(f"{r['model']} {r['U_nrmse_pct']:.2f}/{r['U_nmae_pct']:.2f}" for r in rows)
    verdict(12, complete, f"5 variants, NRMSE/NMAE %: {table}")
