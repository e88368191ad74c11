"""Shock-aligned trunk features, shock-station calibration and sample weights.

The trunk sees each grid point in a frame anchored at the predicted shock
station ``x_s(c) = a0 + a1 * c``::

    [x, y, d, s, |d|, d**2, phi_3, phi_7, phi_12] (+ wall distance)

with ``d = x - x_s``, a soft upstream indicator ``s`` and Gaussian envelopes of
``d`` at widths ``{3, 7, 12} * dx``.  For the Burgers problem the shock axis
is time, so ``d`` becomes the time-to-shock ``t - t_shock(nu)``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoGradientSignal, RankDeficient
from .field_io import CaseRecord, ZoneGrid, median_row_spacing, second_axis

SIGMA_MULTIPLES = (3.0, 7.0, 12.0)
DISTANCE_WEIGHT_MULTIPLE = 7.0


# ---------------------------------------------------------------------------
# calibration

@dataclass
class ShockCalibration:
    """Affine map from the branch condition to the shock station."""

    a0: float
    a1: float
    residual: float
    conditions: list[float] = field(default_factory=list)
    locations: list[float] = field(default_factory=list)
    axis: str = "X"
    method: str = "lstsq"
    robust: dict | None = None

    def station(self, condition):
        if self.method == "huber" and self.robust is not None:
            return self.robust["a0"] + self.robust["a1"] * np.asarray(condition, dtype=float)
        return self.a0 + self.a1 * np.asarray(condition, dtype=float)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_case"] = [{"condition": c, "location": x} for c, x in zip(self.conditions, self.locations)]
        del d["conditions"], d["locations"]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ShockCalibration":
        d = dict(d)
        per_case = d.pop("per_case", [])
        d["conditions"] = [p["condition"] for p in per_case]
        d["locations"] = [p["location"] for p in per_case]
        if d.get("kind") == "t_shock":
            from .burgers import ShockTimeCalibration
            d.pop("kind")
            return ShockTimeCalibration(**d)
        d.pop("kind", None)
        return cls(**d)

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "ShockCalibration":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fit_affine(conditions, locations):
    """Least-squares ``loc = a0 + a1 * c``; returns ``(a0, a1, rms_residual)``."""
    c = np.asarray(conditions, dtype=float)
    y = np.asarray(locations, dtype=float)
    if np.unique(c).size < 2:
        raise RankDeficient("affine calibration needs at least two distinct conditions")
    A = np.column_stack([np.ones_like(c), c])
    (a0, a1), *_ = np.linalg.lstsq(A, y, rcond=None)
    res = y - (a0 + a1 * c)
    return float(a0), float(a1), float(np.sqrt(np.mean(res ** 2)))


def fit_huber_irls(conditions, locations, epsilon: float = 1.35, max_iter: int = 100, tol: float = 1e-12):
    """Robust affine fit by iteratively reweighted least squares on the Huber loss.

    The residual scale is re-estimated each pass from the median absolute
    deviation; ``epsilon`` is the threshold in units of that scale.
    """
    c = np.asarray(conditions, dtype=float)
    y = np.asarray(locations, dtype=float)
    a0, a1, _ = fit_affine(c, y)
    A = np.column_stack([np.ones_like(c), c])
    for _ in range(max_iter):
        r = y - (a0 + a1 * c)
        scale = 1.4826 * np.median(np.abs(r - np.median(r)))
        if scale <= 0:
            break
        u = np.abs(r) / scale
        w = np.where(u <= epsilon, 1.0, epsilon / np.maximum(u, 1e-300))
        sw = np.sqrt(w)
        (n0, n1), *_ = np.linalg.lstsq(A * sw[:, None], y * sw, rcond=None)
        done = abs(n0 - a0) + abs(n1 - a1) < tol
        a0, a1 = float(n0), float(n1)
        if done:
            break
    res = y - (a0 + a1 * c)
    return a0, a1, float(np.sqrt(np.mean(res ** 2)))


def row_gradient(zone: ZoneGrid, column: str = "U", along: str = "X") -> np.ndarray:
    """``dU/dx`` along the structured I-rows; one-sided at the row ends.

    Returned with shape ``(J, I)``.  Zero-width intervals give zero gradient.
    """
    u = zone.as_grid(column)
    x = zone.as_grid(along)
    g = np.zeros_like(u)
    if zone.i_count < 2:
        return g
    num = np.empty_like(u)
    den = np.empty_like(u)
    num[:, 1:-1] = u[:, 2:] - u[:, :-2]
    den[:, 1:-1] = x[:, 2:] - x[:, :-2]
    num[:, 0], den[:, 0] = u[:, 1] - u[:, 0], x[:, 1] - x[:, 0]
    num[:, -1], den[:, -1] = u[:, -1] - u[:, -2], x[:, -1] - x[:, -2]
    np.divide(num, den, out=g, where=den != 0)
    return g


def shock_location(case: CaseRecord, column: str = "U") -> float:
    """x of the largest row-median ``|dU/dx|`` over all zones (smallest x on ties)."""
    best_g, best_x = -np.inf, np.inf
    for z in case.zones:
        g = np.median(np.abs(row_gradient(z, column)), axis=0)
        xs = np.median(z.as_grid("X"), axis=0)
        gmax = g.max()
        x_at = xs[g == gmax].min()
        if gmax > best_g or (gmax == best_g and x_at < best_x):
            best_g, best_x = gmax, x_at
    tiny = np.finfo(float).eps * max(1.0, float(np.max(np.abs(case.column(column)))))
    if not best_g > tiny:
        raise NoGradientSignal(f"no streamwise gradient in {case.source_path or 'case'}")
    return float(best_x)


def calibrate_shock_station(cases, robust: bool = False, column: str = "U") -> ShockCalibration:
    """Fit ``x_s = a0 + a1 * c`` to the max-gradient station of each case.

    With ``robust=True`` a Huber IRLS refit is stored alongside and used by
    :meth:`ShockCalibration.station`.
    """
    conds = [float(c.condition) for c in cases]
    if len(set(conds)) < 2:
        raise RankDeficient("need cases with at least two distinct conditions")
    locs = [shock_location(c, column) for c in cases]
    a0, a1, res = fit_affine(conds, locs)
    calib = ShockCalibration(a0, a1, res, conds, locs, axis="X")
    if robust:
        h0, h1, hres = fit_huber_irls(conds, locs)
        calib.robust = {"a0": h0, "a1": h1, "residual": hres}
        calib.method = "huber"
    return calib


# ---------------------------------------------------------------------------
# pointwise features

def signed_distance(x, condition, calib: ShockCalibration):
    """``x - x_s(condition)``: negative upstream, positive downstream."""
    return np.asarray(x, dtype=float) - calib.station(condition)


def logistic(z):
    """Overflow-free ``1 / (1 + exp(-z))``."""
    z = np.asarray(z, dtype=float)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out if out.ndim else float(out)


def soft_indicator(x, condition, calib: ShockCalibration, k: float, length_scale: float = 1.0,
                   form: str = "logistic"):
    """Upstream indicator ``1 / (1 + exp(-k (x_s - x) / L))``.

    ``form="tanh"`` uses ``(1 + tanh(kappa (x_s - x) / L)) / 2`` with
    ``kappa = k / 2``, which is the same curve evaluated through tanh.
    """
    if not k > 0:
        raise ValueError("sigmoid steepness k must be positive")
    z = -signed_distance(x, condition, calib) / length_scale
    if form == "tanh":
        return 0.5 * (1.0 + np.tanh(0.5 * k * z))
    return logistic(k * z)


def rbf_envelopes(d, dx: float, floor: float = 0.0):
    """Gaussian envelopes of ``d`` at widths 3, 7 and 12 times ``dx``."""
    if not np.all(np.asarray(dx) > 0):
        raise ValueError("dx must be positive")
    d = np.asarray(d, dtype=float)
    phis = tuple(np.exp(-d ** 2 / (2.0 * (m * dx) ** 2)) for m in SIGMA_MULTIPLES)
    if floor > 0:
        phis = tuple(np.clip(p, floor, 1.0) for p in phis)
    return phis


def distance_weight(x, condition, calib: ShockCalibration, alpha: float, dx: float):
    """``W_d = 1 + alpha * exp(-d**2 / (2 (7 dx)**2))``."""
    if not alpha > 0 or not np.all(np.asarray(dx) > 0):
        raise ValueError("alpha and dx must be positive")
    d = signed_distance(x, condition, calib)
    return 1.0 + alpha * np.exp(-d ** 2 / (2.0 * (DISTANCE_WEIGHT_MULTIPLE * dx) ** 2))


def combine_weights(w_dist, w_grad, lam: float):
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    return lam * np.asarray(w_dist, dtype=float) + (1.0 - lam) * np.asarray(w_grad, dtype=float)


def gradient_weight_field(zone: ZoneGrid, beta: float, q_clip: float = 95.0, column: str = "U"):
    """``1 + beta * clip(g / q, 0, 1)`` with ``g = |dU/dx|`` and ``q`` its percentile.

    Flat in POINT order.  A zone without gradient returns all ones.
    """
    g = np.abs(row_gradient(zone, column)).reshape(-1)
    q = np.percentile(g, q_clip)
    if not q > 0:
        gmax = g.max()
        if not gmax > 0:
            return np.ones_like(g)
        q = gmax
    return 1.0 + beta * np.clip(g / q, 0.0, 1.0)


def relative_weight_field(zone: ZoneGrid, gamma: float, eps_rel: float = 1e-6, column: str = "U"):
    """``1 + gamma * (1 - |U| / max|U|)``, favouring low-speed points."""
    u = np.abs(zone[column])
    return 1.0 + gamma * (1.0 - u / max(float(u.max()), eps_rel))


def wall_distance(zone: ZoneGrid, walls=("j_min",)) -> np.ndarray:
    """Distance to the wall polylines normalized by its maximum over the zone.

    Walls are structured boundary rows of the zone (``j_min``/``j_max``).
    """
    x, y = zone.as_grid("X"), zone.as_grid(second_axis(zone))
    pts = np.column_stack([x.ravel(), y.ravel()])
    best = np.full(pts.shape[0], np.inf)
    for w in walls:
        row = {"j_min": 0, "j_max": -1}[w]
        poly = np.column_stack([x[row], y[row]])
        if poly.shape[0] == 1:
            best = np.minimum(best, np.hypot(*(pts - poly[0]).T))
            continue
        a, b = poly[:-1], poly[1:]
        ab = b - a
        L2 = np.einsum("ij,ij->i", ab, ab)
        ap = pts[:, None, :] - a[None, :, :]
        t = np.divide(np.einsum("nij,ij->ni", ap, ab), L2, out=np.zeros((pts.shape[0], ab.shape[0])),
                      where=L2 > 0)
        t = np.clip(t, 0.0, 1.0)
        proj = a[None] + t[..., None] * ab[None]
        dist = np.sqrt(((pts[:, None, :] - proj) ** 2).sum(-1)).min(axis=1)
        best = np.minimum(best, dist)
    top = best.max()
    return best / top if top > 0 else np.zeros_like(best)


# ---------------------------------------------------------------------------
# assembled trunk input

@dataclass
class FeatureParams:
    """How trunk features and sample weights are built for one dataset.

    ``axis`` names the coordinate the shock station lives on ("X" for nozzle
    files, "T" for Burgers time-to-shock).  ``mode`` is "shock" for the full
    physics-guided vector or "raw" for plain coordinates.
    """

    mode: str = "shock"
    axis: str = "X"
    k: float = 1.8e3
    length_scale: float = 1.0
    indicator: str = "logistic"
    envelope_floor: float = 0.0
    wall_distance: bool = False
    walls: tuple = ("j_min",)
    dx_min: float = 1e-12
    # sample weights
    alpha: float = 2.0
    beta: float = 0.8
    gamma: float = 0.5
    eps_rel: float = 1e-6
    q_clip: float = 95.0
    use_rel_weight: bool = False

    @property
    def width(self) -> int:
        if self.mode == "raw":
            return 2
        return 10 if self.wall_distance else 9

    def to_dict(self) -> dict:
        d = asdict(self)
        d["walls"] = list(self.walls)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureParams":
        d = dict(d)
        if "walls" in d:
            d["walls"] = tuple(d["walls"])
        return cls(**d)


def axis_spacing(zone: ZoneGrid, params: FeatureParams) -> float:
    """Robust spacing along the shock axis (``dx`` or the Burgers ``dt``)."""
    return median_row_spacing(zone, along=params.axis, dx_min=params.dx_min)


def trunk_features_from_arrays(x, y, condition, calib, params: FeatureParams, dx: float, wall=None):
    """Feature matrix for raw coordinate arrays (used after x-jitter too)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if params.mode == "raw":
        return np.column_stack([x, y])
    pos = x if params.axis == "X" else y
    d = signed_distance(pos, condition, calib)
    s = soft_indicator(pos, condition, calib, params.k, params.length_scale, params.indicator)
    phis = rbf_envelopes(d, dx, params.envelope_floor)
    cols = [x, y, d, s, np.abs(d), d ** 2, *phis]
    if params.wall_distance:
        if wall is None:
            raise ValueError("wall distance requested but not supplied")
        cols.append(np.asarray(wall, dtype=float))
    return np.column_stack(cols)


def build_trunk_features(zone: ZoneGrid, condition, calib, params: FeatureParams, dx: float | None = None):
    """Trunk feature matrix for every point of ``zone`` in POINT order."""
    if dx is None:
        dx = axis_spacing(zone, params)
    wall = wall_distance(zone, params.walls) if params.wall_distance and params.mode != "raw" else None
    return trunk_features_from_arrays(zone["X"], zone[second_axis(zone)], condition, calib, params, dx, wall)


def sample_weights(zone: ZoneGrid, condition, calib, params: FeatureParams, lam: float,
                   dx: float | None = None, parts: dict | None = None) -> np.ndarray:
    """Curriculum weight ``lam * W_d + (1 - lam) * W_g`` (times ``w_rel`` if enabled).

    If ``parts`` is a dict it receives the individual factors.
    """
    if dx is None:
        dx = axis_spacing(zone, params)
    pos = zone["X"] if params.axis == "X" else zone[second_axis(zone)]
    w_d = distance_weight(pos, condition, calib, params.alpha, dx)
    w_g = gradient_weight_field(zone, params.beta, params.q_clip)
    w = combine_weights(w_d, w_g, lam)
    w_rel = relative_weight_field(zone, params.gamma, params.eps_rel) if params.use_rel_weight \
        else np.ones_like(w)
    if parts is not None:
        parts.update(W_d=w_d, W_g=w_g, w_rel=w_rel)
    return w * w_rel
