"""Command-line entry point: ``shockfusion <subcommand> [flags]``.

Every subcommand reads one optional JSON config (``--config``), applies
``--set section.key=value`` overrides and dedicated flags on top, and writes
a ``run_manifest.json`` describing its inputs and outputs into ``--out``.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import subprocess
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .burgers import BurgersConfig, default_nu_sets, generate_burgers_dataset
from .errors import ShockFusionError
from .evaluation import case_metrics, centerline_profile, compare_models, run_ablation, write_rows_csv
from .features import FeatureParams, ShockCalibration
from .field_io import load_manifest, read_case, write_prediction_file
from .neural import FusionModel, load_model, save_model
from .pipeline import (
    MODEL_VARIANTS,
    ProblemSetup,
    architecture_for,
    calibrate,
    make_setup,
    mc_predict_case,
    predict_case,
)
from .trainer import TrainConfig, derive_seed, prepare_training_data, substream, train_curriculum

log = logging.getLogger("shockfusion")

VARIANT_ALIASES = {"fusion": "fusion_orig", "current": "shock_aware"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

def default_config() -> dict:
    return {
        "variant": "shock_aware",
        "features": FeatureParams().to_dict(),
        "architecture": {},
        "train": TrainConfig().to_dict(),
        "burgers": asdict(BurgersConfig()),
    }


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise UsageError(f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    node = cfg
    parts = key.split(".")
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise UsageError(f"cannot set {key!r}: {p!r} is not a section")
    node[parts[-1]] = _parse_value(value)


def resolve_config(args) -> dict:
    """Defaults < config file < ``--set`` overrides < dedicated flags."""
    cfg = default_config()
    if args.config:
        path = Path(args.config)
        if not path.exists():
            raise UsageError(f"config file not found: {path}")
        cfg = _merge(cfg, json.loads(path.read_text()))
    for assignment in args.set or []:
        apply_override(cfg, assignment)
    if args.seed is not None:
        cfg["train"]["seed"] = int(args.seed)
    if getattr(args, "variant", None):
        cfg["variant"] = VARIANT_ALIASES.get(args.variant, args.variant)
    if getattr(args, "epochs", None) is not None:
        for p in cfg["train"]["phases"]:
            p["max_epochs"] = int(args.epochs)
    if getattr(args, "max_points", None) is not None:
        cfg["train"]["max_points_per_case"] = int(args.max_points)
    return cfg


def _features(cfg) -> FeatureParams:
    return FeatureParams.from_dict(cfg["features"])


def _train_config(cfg) -> TrainConfig:
    return TrainConfig.from_dict(cfg["train"])


# ---------------------------------------------------------------------------
# run manifest

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def build_id() -> str:
    try:
        out = subprocess.run(["git", "rev-parse", "--short", "HEAD"], cwd=Path(__file__).parent,
                             capture_output=True, text=True, timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


class RunRecorder:
    """Collects inputs and outputs of one invocation and writes the run manifest."""

    def __init__(self, command: str, cfg: dict, out_dir: Path):
        self.command, self.cfg, self.out_dir = command, cfg, out_dir
        self.inputs: dict[str, str] = {}
        self.outputs: list[str] = []

    def add_input(self, path):
        path = Path(path)
        self.inputs[str(path)] = sha256_file(path)

    def add_inputs_from_manifest(self, manifest):
        manifest = Path(manifest)
        self.add_input(manifest)
        for rel in json.loads(manifest.read_text()):
            p = Path(rel) if Path(rel).is_absolute() else manifest.parent / rel
            if p.exists():
                self.add_input(p)

    def add_output(self, path):
        self.outputs.append(str(Path(path)))

    def write(self) -> Path:
        doc = {
            "command": self.command,
            "build": build_id(),
            "seed": self.cfg["train"]["seed"],
            "config": self.cfg,
            "inputs": dict(sorted(self.inputs.items())),
            "outputs": self.outputs,
        }
        path = self.out_dir / "run_manifest.json"
        path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
        return path


# ---------------------------------------------------------------------------
# helpers

def _require_manifest(args) -> Path:
    if not args.manifest:
        raise UsageError("--manifest is required")
    path = Path(args.manifest)
    if not path.exists():
        raise UsageError(f"manifest not found: {path}")
    return path


def _split_cases(manifest):
    cases = load_manifest(manifest)
    train = [c for c in cases if c.meta.get("role", "train") == "train"]
    test = [c for c in cases if c.meta.get("role", "train") != "train"]
    return train, test


def _setup_of(model) -> ProblemSetup:
    if "setup" not in model.meta:
        raise UsageError("checkpoint carries no feature setup")
    return ProblemSetup.from_dict(model.meta["setup"])


def _check_width(model, setup: ProblemSetup):
    if model.spec.trunk_dim != setup.features.width or model.spec.branch_dim != setup.branch_dim:
        raise UsageError(f"checkpoint expects trunk width {model.spec.trunk_dim} / branch width "
                         f"{model.spec.branch_dim}, setup provides {setup.features.width} / {setup.branch_dim}")


def _pred_name(case) -> str:
    return "pred_" + Path(case.source_path).name


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_burgers(args, cfg, rec: RunRecorder):
    bc = dict(cfg["burgers"])
    for key in ("nx", "nt", "refine", "substeps"):
        if getattr(args, key) is not None:
            bc[key] = getattr(args, key)
    if args.t_end is not None:
        bc["t_end"] = args.t_end
    if args.nu:
        if any(not v > 0 for v in args.nu):
            raise UsageError("all --nu values must be positive")
        nus, roles = list(args.nu), list(args.roles or ["train"] * len(args.nu))
        if len(roles) != len(nus):
            raise UsageError("--roles must match --nu in length")
    else:
        sets = default_nu_sets()
        nus = sets["train"] + sets["interp"] + sets["extrap"]
        roles = ["train"] * len(sets["train"]) + ["interp", "extrap"]
    bcfg = BurgersConfig(**{**bc, "x_domain": tuple(bc["x_domain"])})
    paths = generate_burgers_dataset(nus, bcfg, args.out, roles)
    for p in paths:
        rec.add_output(p)
        print(p)
    rec.add_output(Path(args.out) / "manifest.json")
    print(Path(args.out) / "manifest.json")


def cmd_calibrate(args, cfg, rec: RunRecorder):
    manifest = _require_manifest(args)
    rec.add_inputs_from_manifest(manifest)
    train, _ = _split_cases(manifest)
    calib = calibrate(train, robust=args.robust)
    path = calib.save(Path(args.out) / "calibration.json")
    rec.add_output(path)
    print(f"a0={calib.a0!r} a1={calib.a1!r} residual={calib.residual!r}")
    if calib.robust:
        r = calib.robust
        print(f"huber a0={r['a0']!r} a1={r['a1']!r} residual={r['residual']!r}")


def cmd_train(args, cfg, rec: RunRecorder):
    manifest = _require_manifest(args)
    rec.add_inputs_from_manifest(manifest)
    variant = cfg["variant"]
    if variant not in MODEL_VARIANTS:
        raise UsageError(f"unknown variant {variant!r}; choose from {', '.join(MODEL_VARIANTS)}")
    train, _ = _split_cases(manifest)
    calib = None
    if args.calibration:
        rec.add_input(args.calibration)
        calib = ShockCalibration.load(args.calibration)
    setup = make_setup(train, variant, _features(cfg), calibration=calib)
    tcfg = _train_config(cfg)
    data = prepare_training_data(train, setup, tcfg)
    model = FusionModel(architecture_for(setup, variant, **cfg["architecture"]),
                        seed=derive_seed(tcfg.seed, "init"))
    model.meta = {"variant": variant, "tag": variant, "setup": setup.to_dict()}
    model, history = train_curriculum(data, model, tcfg)
    out = Path(args.out)
    ckpt = save_model(model, out / "model.npz", {"variant": variant, "val_loss": history.best_val[-1],
                                                 "phase_epochs": history.phase_epochs()})
    history.to_csv(out / "history.csv")
    for p in (ckpt, ckpt.with_suffix(".json"), out / "history.csv"):
        rec.add_output(p)
    print(f"final val loss {history.best_val[-1]:.6g}; epochs per phase {history.phase_epochs()}")


def _load_checkpoint(args, rec):
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    path = Path(args.checkpoint)
    if not path.exists():
        raise UsageError(f"checkpoint not found: {path}")
    rec.add_input(path)
    model = load_model(path)
    setup = _setup_of(model)
    _check_width(model, setup)
    return model, setup


def _input_cases(args, rec):
    if args.input:
        if args.condition is None:
            raise UsageError("--input needs --condition")
        rec.add_input(args.input)
        return [read_case(args.input, args.condition)]
    manifest = _require_manifest(args)
    rec.add_inputs_from_manifest(manifest)
    cases = load_manifest(manifest, role=args.role)
    if not cases:
        raise UsageError(f"no cases with role {args.role!r} in {manifest}")
    return cases


def cmd_predict(args, cfg, rec: RunRecorder):
    model, setup = _load_checkpoint(args, rec)
    cases = _input_cases(args, rec)
    out = Path(args.out)
    rng = substream(cfg["train"]["seed"], "mc")
    for case in cases:
        extra = {}
        if args.mc_samples:
            mean, sigma = mc_predict_case(model, case, setup, args.mc_samples, rng)
            pred = mean
            for k, name in enumerate(setup.targets):
                extra[f"Sigma_{name}"] = sigma[:, k]
        else:
            pred = predict_case(model, case, setup)
        cols = dict(zip(setup.targets, pred.T))
        if "U" not in cols:
            raise UsageError("prediction files need a U target")
        text = write_prediction_file(case, cols["U"], cols.get("V"), extra_columns=extra or None)
        path = out / _pred_name(case)
        path.write_text(text)
        rec.add_output(path)
        print(path)


def cmd_eval(args, cfg, rec: RunRecorder):
    out = Path(args.out)
    pairs = []
    if args.truth or args.pred:
        if len(args.truth or []) != len(args.pred or []):
            raise UsageError("--truth and --pred must be given the same number of times")
        conds = args.condition_list or [0.0] * len(args.truth)
        for t, p, c in zip(args.truth, args.pred, conds):
            rec.add_input(t)
            rec.add_input(p)
            pairs.append((read_case(t, c), read_case(p, c)))
    else:
        manifest = _require_manifest(args)
        rec.add_inputs_from_manifest(manifest)
        pred_dir = Path(args.pred_dir or out)
        for case in load_manifest(manifest, role=args.role):
            p = pred_dir / _pred_name(case)
            if not p.exists():
                raise UsageError(f"prediction file missing: {p}")
            rec.add_input(p)
            pairs.append((case, read_case(p, case.condition)))
    rows = []
    for truth, pred in pairs:
        targets = [t for t in (args.targets or ("U", "V")) if t in truth.names and t in pred.names]
        if not targets:
            raise UsageError(f"no common target columns in {truth.source_path} and {pred.source_path}")
        arr = np.column_stack([pred.column(t) for t in targets])
        report = case_metrics(truth, arr, targets, Path(pred.source_path).name)
        rows.append(report.row())
        if args.centerline is not None:
            ch = targets[0]
            sig = pred.column(f"Sigma_{ch}") if f"Sigma_{ch}" in pred.names else None
            table = centerline_profile(truth, pred.column(ch), sig, args.centerline, ch)
            cpath = out / f"centerline_{Path(pred.source_path).stem}.csv"
            table.to_csv(cpath)
            rec.add_output(cpath)
    path = write_rows_csv(rows, out / "metrics.csv")
    (out / "metrics.json").write_text(json.dumps(rows, indent=2) + "\n")
    rec.add_output(path)
    rec.add_output(out / "metrics.json")
    for r in rows:
        print(f"{r['model']}: joint relL2 {r['joint_rel_l2']:.6g}")


def cmd_compare(args, cfg, rec: RunRecorder):
    manifest = _require_manifest(args)
    rec.add_inputs_from_manifest(manifest)
    train, test = _split_cases(manifest)
    if not test:
        raise UsageError("manifest has no held-out cases")
    seeds = args.seeds or [cfg["train"]["seed"]]
    res = compare_models(train, test, _train_config(cfg), seeds=seeds, features=_features(cfg),
                         arch_overrides=cfg["architecture"])
    for p in res.write(args.out, "compare"):
        rec.add_output(p)
    for v, m in res.summary["median_joint_rel_l2"].items():
        print(f"{v}: median joint relL2 {m:.6g}")


def cmd_ablate(args, cfg, rec: RunRecorder):
    manifest = _require_manifest(args)
    rec.add_inputs_from_manifest(manifest)
    train, test = _split_cases(manifest)
    pick = [c for c in test if c.meta.get("role") == args.test_role] or test
    if not pick:
        raise UsageError("manifest has no held-out case for the ablation")
    res = run_ablation(train, pick[0], _train_config(cfg), _features(cfg), cfg["architecture"])
    for p in res.write(args.out, "ablation"):
        rec.add_output(p)
    for r in res.rows():
        print(r["model"], " ".join(f"{k}={v:.4g}" for k, v in r.items() if k.endswith("_pct")))


COMMANDS = {
    "gen-burgers": cmd_gen_burgers,
    "calibrate": cmd_calibrate,
    "train": cmd_train,
    "predict": cmd_predict,
    "eval": cmd_eval,
    "compare": cmd_compare,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--seed", type=int, help="root seed for every random stream")
    common.add_argument("--out", default=".", help="output directory")
    common.add_argument("--manifest", help="dataset manifest (JSON)")
    common.add_argument("--set", action="append", metavar="KEY=VALUE",
                        help="override a config entry, e.g. train.lr=1e-3 (repeatable)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="shockfusion", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-burgers", parents=[common], help="solve Burgers for a set of viscosities")
    p.add_argument("--nu", type=float, nargs="+", help="viscosities (default: built-in train/test set)")
    p.add_argument("--roles", nargs="+", help="manifest role per --nu value")
    p.add_argument("--nx", type=int)
    p.add_argument("--nt", type=int)
    p.add_argument("--t-end", type=float)
    p.add_argument("--refine", type=int)
    p.add_argument("--substeps", type=int)

    p = sub.add_parser("calibrate", parents=[common], help="fit the shock-station map")
    p.add_argument("--robust", action="store_true", help="add a Huber refit")

    p = sub.add_parser("train", parents=[common], help="train one model")
    p.add_argument("--variant", choices=sorted(set(MODEL_VARIANTS) | set(VARIANT_ALIASES)))
    p.add_argument("--epochs", type=int, help="max epochs for every phase")
    p.add_argument("--max-points", type=int, help="training points sampled per case")
    p.add_argument("--calibration", help="use this calibration JSON instead of fitting one")

    p = sub.add_parser("predict", parents=[common], help="write prediction field files")
    p.add_argument("--checkpoint", help="model .npz")
    p.add_argument("--input", help="single field file instead of a manifest")
    p.add_argument("--condition", type=float, help="condition of --input")
    p.add_argument("--role", help="manifest role to predict (default: all)")
    p.add_argument("--mc-samples", type=int, default=0, help="MC-dropout samples; adds Sigma_* columns")

    p = sub.add_parser("eval", parents=[common], help="score prediction files against references")
    p.add_argument("--truth", action="append", help="reference field file (repeatable)")
    p.add_argument("--pred", action="append", help="prediction field file (repeatable)")
    p.add_argument("--condition", dest="condition_list", type=float, action="append")
    p.add_argument("--pred-dir", help="directory holding pred_<name> files for --manifest")
    p.add_argument("--role", help="manifest role to score (default: all)")
    p.add_argument("--targets", nargs="+")
    p.add_argument("--centerline", type=float, help="also write a profile table at this coordinate")

    p = sub.add_parser("compare", parents=[common], help="shock-aware vs fusion vs vanilla")
    p.add_argument("--seeds", type=int, nargs="+")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-points", type=int)

    p = sub.add_parser("ablate", parents=[common], help="run the five ablation variants")
    p.add_argument("--test-role", default="interp")
    p.add_argument("--epochs", type=int)
    p.add_argument("--max-points", type=int)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        rec = RunRecorder(args.command, cfg, out)
        COMMANDS[args.command](args, cfg, rec)
        rec.write()
    except UsageError as exc:
        print(f"shockfusion {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ShockFusionError, ValueError, OSError, KeyError) as exc:
        print(f"shockfusion {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
