import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from shockfusion.burgers import BurgersConfig, default_nu_sets, generate_burgers_dataset  # noqa: E402
from shockfusion.field_io import load_manifest  # noqa: E402


def _burgers_dir(root, cfg):
    sets = default_nu_sets()
    nus = sets["train"] + sets["interp"] + sets["extrap"]
    roles = ["train"] * len(sets["train"]) + ["interp", "extrap"]
    generate_burgers_dataset(nus, cfg, root, roles=roles)
    return root


@pytest.fixture(scope="session")
def tiny_burgers_dir(tmp_path_factory):
    """Coarse Burgers dataset (33 x 21 points per case) for fast training tests."""
    return _burgers_dir(tmp_path_factory.mktemp("tiny_burgers"), BurgersConfig(nx=33, nt=21, refine=2, substeps=2))


@pytest.fixture(scope="session")
def tiny_burgers(tiny_burgers_dir):
    cases = load_manifest(tiny_burgers_dir / "manifest.json")
    return {role: [c for c in cases if c.meta["role"] == role] for role in ("train", "interp", "extrap")}


@pytest.fixture(scope="session")
def default_burgers(tmp_path_factory):
    """Burgers dataset at the default solver and output resolution."""
    root = _burgers_dir(tmp_path_factory.mktemp("default_burgers"), BurgersConfig())
    cases = load_manifest(root / "manifest.json")
    return {role: [c for c in cases if c.meta["role"] == role] for role in ("train", "interp", "extrap")}


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
