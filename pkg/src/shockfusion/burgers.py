"""Viscous 1-D Burgers reference data and the shock-formation time map.

Solves ``u_t + (u**2 / 2)_x = nu * u_xx`` on ``[x_lo, x_hi]`` with
``u(x, 0) = -sin(pi x)`` and homogeneous Dirichlet boundaries.  The scheme is
Crank-Nicolson on the full right-hand side (conservative central flux plus
central diffusion), solved with Newton iterations on the tridiagonal
Jacobian.  It runs on an internal grid ``refine`` times finer than the output
grid with ``substeps`` steps per output interval and is second order in both
space and time.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import solve_banded

from .errors import RankDeficient, UnstableStep
from .features import ShockCalibration, fit_affine, fit_huber_irls
from .field_io import CaseRecord, ConditionKind, ZoneGrid, save_manifest, write_case

log = logging.getLogger(__name__)

NU_BASE = 0.01 / np.pi
TRAIN_NU_FACTORS = (0.5, 0.75, 1.0, 1.5, 2.0)
INTERP_NU_FACTOR = 1.25
EXTRAP_NU_FACTOR = 0.35


@dataclass
class BurgersConfig:
    nu: float = NU_BASE
    x_domain: tuple = (-1.0, 1.0)
    nx: int = 256
    t_end: float = 1.0
    nt: int = 400
    ic: str = "neg_sin_pi_x"
    bc: str = "dirichlet_zero"
    refine: int = 16
    substeps: int = 8
    newton_tol: float = 1e-12
    max_newton: int = 25

    def __post_init__(self):
        self.x_domain = tuple(float(v) for v in self.x_domain)
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if self.nx < 3:
            raise ValueError("nx must be at least 3")
        if self.nt < 2:
            raise ValueError("nt must be at least 2")
        if not self.x_domain[0] < self.x_domain[1]:
            raise ValueError("x_domain must satisfy x_lo < x_hi")
        if not self.t_end > 0:
            raise ValueError("t_end must be positive")
        if self.refine < 1 or self.substeps < 1:
            raise ValueError("refine and substeps must be >= 1")
        if self.ic != "neg_sin_pi_x" or self.bc != "dirichlet_zero":
            raise ValueError("only ic='neg_sin_pi_x' with bc='dirichlet_zero' is supported")


@dataclass
class SpaceTimeField:
    x: np.ndarray
    t: np.ndarray
    u: np.ndarray  # (nt, nx)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.t = np.asarray(self.t, dtype=float)
        self.u = np.asarray(self.u, dtype=float)
        if self.u.shape != (self.t.size, self.x.size):
            raise ValueError(f"u has shape {self.u.shape}, expected {(self.t.size, self.x.size)}")
        if not np.all(np.isfinite(self.u)):
            raise ValueError("field contains non-finite values")


def _flux_rhs(u, h, nu):
    f = np.zeros_like(u)
    f[1:-1] = -(u[2:] ** 2 - u[:-2] ** 2) / (4.0 * h) + nu * (u[2:] - 2.0 * u[1:-1] + u[:-2]) / h ** 2
    return f


def solve_burgers(cfg: BurgersConfig) -> SpaceTimeField:
    """Reference solution sampled on the ``nx`` by ``nt`` output grid."""
    x_lo, x_hi = cfg.x_domain
    n = (cfg.nx - 1) * cfg.refine + 1
    x = np.linspace(x_lo, x_hi, n)
    h = x[1] - x[0]
    steps = (cfg.nt - 1) * cfg.substeps
    dt = cfg.t_end / steps
    nu = cfg.nu

    u = -np.sin(np.pi * x)
    u[0] = u[-1] = 0.0
    out = np.empty((cfg.nt, cfg.nx))
    out[0] = -np.sin(np.pi * x[::cfg.refine])

    m = n - 2
    ab = np.zeros((3, m))
    diag = 1.0 + dt * nu / h ** 2
    off = 0.5 * dt * nu / h ** 2
    for step in range(1, steps + 1):
        rhs_old = _flux_rhs(u, h, nu)
        v = u.copy()
        for _ in range(cfg.max_newton):
            r = (v - u - 0.5 * dt * (_flux_rhs(v, h, nu) + rhs_old))[1:-1]
            ab[1, :] = diag
            ab[0, 1:] = -off + 0.25 * dt * v[2:-1] / h
            ab[2, :-1] = -off - 0.25 * dt * v[1:-2] / h
            dv = solve_banded((1, 1), ab, -r)
            v[1:-1] += dv
            if not np.all(np.isfinite(v)):
                raise UnstableStep(step)
            if np.max(np.abs(dv)) <= cfg.newton_tol * max(1.0, np.max(np.abs(v))):
                break
        else:
            raise UnstableStep(step, f"Newton iteration did not converge at step {step}")
        u = v
        if step % cfg.substeps == 0:
            out[step // cfg.substeps] = u[::cfg.refine]
    return SpaceTimeField(x[::cfg.refine], np.linspace(0.0, cfg.t_end, cfg.nt), out)


def estimate_t_shock(fld: SpaceTimeField) -> float:
    """Time of the largest spatial gradient magnitude (earliest on ties)."""
    g = np.abs(np.gradient(fld.u, fld.x, axis=1)).max(axis=1)
    return float(fld.t[int(np.argmax(g))])


def _pav(y, increasing=True):
    """Pool-adjacent-violators fit of a monotone sequence."""
    y = np.asarray(y, dtype=float)
    if not increasing:
        return -_pav(-y, True)
    vals, counts = [], []
    for v in y:
        vals.append(v)
        counts.append(1)
        while len(vals) > 1 and vals[-2] > vals[-1]:
            c = counts[-2] + counts[-1]
            vals[-2] = (vals[-2] * counts[-2] + vals[-1] * counts[-1]) / c
            counts[-2] = c
            vals.pop()
            counts.pop()
    return np.repeat(vals, counts)


@dataclass
class ShockTimeCalibration(ShockCalibration):
    """``t_shock(nu) = a0 + a1 nu`` with an optional isotonic refit.

    The isotonic curve is monotone in the direction of the affine slope and
    is evaluated by linear interpolation, clamped at the end points.
    """

    axis: str = "T"
    iso_conditions: list[float] = field(default_factory=list)
    iso_values: list[float] = field(default_factory=list)
    iso_residual: float | None = None
    use_isotonic: bool = False

    def station(self, condition):
        if self.use_isotonic and self.iso_conditions:
            return np.interp(np.asarray(condition, dtype=float), self.iso_conditions, self.iso_values)
        return super().station(condition)

    def to_dict(self) -> dict:
        d = super().to_dict()
        d["kind"] = "t_shock"
        return d


def calibrate_t_shock(solutions, isotonic: bool = False, robust: bool = False) -> ShockTimeCalibration:
    """Affine least-squares fit of :func:`estimate_t_shock` against ``nu``.

    ``solutions`` is a sequence of ``(nu, SpaceTimeField)`` pairs.  Both the
    affine and the isotonic residuals are reported; ``isotonic`` selects which
    map :meth:`~ShockTimeCalibration.station` uses; ``robust`` adds a Huber
    refit that takes precedence over the affine one.
    """
    nus = np.array([float(nu) for nu, _ in solutions])
    if np.unique(nus).size < 2:
        raise RankDeficient("t_shock calibration needs at least two distinct viscosities")
    ts = np.array([estimate_t_shock(f) for _, f in solutions])
    a0, a1, res = fit_affine(nus, ts)
    order = np.argsort(nus, kind="stable")
    iso = _pav(ts[order], increasing=a1 >= 0)
    # collapse repeated nu values to their mean for interpolation
    xs, inv = np.unique(nus[order], return_inverse=True)
    ys = np.bincount(inv, weights=iso) / np.bincount(inv)
    iso_res = float(np.sqrt(np.mean((ts[order] - iso) ** 2)))
    calib = ShockTimeCalibration(a0, a1, res, nus.tolist(), ts.tolist(), axis="T",
                                 iso_conditions=xs.tolist(), iso_values=ys.tolist(),
                                 iso_residual=iso_res, use_isotonic=isotonic)
    if robust:
        h0, h1, hres = fit_huber_irls(nus, ts)
        calib.robust = {"a0": h0, "a1": h1, "residual": hres}
        calib.method = "huber"
    return calib


# ---------------------------------------------------------------------------
# datasets

def field_to_case(fld: SpaceTimeField, nu: float, source_path: str = "") -> CaseRecord:
    X, T = np.meshgrid(fld.x, fld.t)
    zone = ZoneGrid(fld.x.size, fld.t.size, {"X": X.ravel(), "T": T.ravel(), "U": fld.u.ravel()},
                    title=f"nu={nu!r}")
    return CaseRecord([zone], nu, ConditionKind.viscosity, source_path, title="viscous Burgers")


def case_to_field(case: CaseRecord) -> SpaceTimeField:
    z = case.zones[0]
    return SpaceTimeField(z.as_grid("X")[0], z.as_grid("T")[:, 0], z.as_grid("U"))


def default_nu_sets(base: float = NU_BASE) -> dict[str, list[float]]:
    return {
        "train": [f * base for f in TRAIN_NU_FACTORS],
        "interp": [INTERP_NU_FACTOR * base],
        "extrap": [EXTRAP_NU_FACTOR * base],
    }


def generate_burgers_dataset(nu_list, cfg: BurgersConfig, out_dir, roles=None,
                             manifest_name: str = "manifest.json") -> list[Path]:
    """Solve for every viscosity, write one field file each plus a manifest.

    ``roles`` optionally gives a manifest role per viscosity ("train",
    "test", ...).  Returns the written field-file paths.
    """
    nu_list = [float(v) for v in nu_list]
    if not nu_list:
        raise ValueError("nu_list must be non-empty")
    if any(not v > 0 for v in nu_list):
        raise ValueError("all viscosities must be positive")
    roles = list(roles) if roles is not None else ["train"] * len(nu_list)
    out_dir = Path(out_dir)
    entries, paths = {}, []
    for k, (nu, role) in enumerate(zip(nu_list, roles)):
        run_cfg = BurgersConfig(**{**asdict(cfg), "nu": nu})
        log.info("solving Burgers for nu=%.6g", nu)
        case = field_to_case(solve_burgers(run_cfg), nu)
        name = f"burgers_{k:02d}_nu{nu:.6e}.dat"
        paths.append(write_case(case, out_dir / name))
        entries[name] = {"condition": nu, "condition_kind": ConditionKind.viscosity.value, "role": role}
    save_manifest(entries, out_dir / manifest_name)
    return paths
