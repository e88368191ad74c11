"""NumPy operator network with hand-written reverse mode.

Every hidden block is ``Dense -> LayerNorm -> Swish -> Dropout``.  Two
couplings are supported:

* ``hadamard_fusion``: ``z = b(c) * g(t)`` elementwise, then an MLP decoder.
* ``dot_product``: classical DeepONet; the width-``d`` embeddings are split
  into ``out_dim`` contiguous groups and each output channel is the inner
  product of its group plus a bias.
"""

from __future__ import annotations

import io
import json
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import NoStochasticLayers, ShapeMismatch, StaleCache

FORMAT_VERSION = 1
LN_EPS = 1e-12


@dataclass
class BlockSpec:
    in_dim: int
    out_dim: int
    dropout_rate: float = 0.0
    has_layernorm: bool = True
    activation: str = "swish"

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("block dimensions must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")
        if self.activation not in ("swish", "identity"):
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class ArchitectureSpec:
    variant: str
    branch_blocks: list[BlockSpec]
    trunk_blocks: list[BlockSpec]
    fusion_dim: int
    decoder_blocks: list[BlockSpec] = field(default_factory=list)
    out_dim: int = 2
    input_noise: float = 0.0

    def __post_init__(self):
        self.branch_blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.branch_blocks]
        self.trunk_blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.trunk_blocks]
        self.decoder_blocks = [b if isinstance(b, BlockSpec) else BlockSpec(**b) for b in self.decoder_blocks]
        if self.variant not in ("hadamard_fusion", "dot_product"):
            raise ValueError(f"unknown variant {self.variant!r}")
        for name, blocks in (("branch", self.branch_blocks), ("trunk", self.trunk_blocks)):
            if not blocks:
                raise ValueError(f"{name} needs at least one block")
            if blocks[-1].out_dim != self.fusion_dim:
                raise ValueError(f"last {name} width must equal fusion_dim={self.fusion_dim}")
            for a, b in zip(blocks, blocks[1:]):
                if a.out_dim != b.in_dim:
                    raise ValueError(f"{name} blocks do not chain: {a.out_dim} -> {b.in_dim}")
        if self.variant == "hadamard_fusion":
            dec = self.decoder_blocks
            if not dec or dec[0].in_dim != self.fusion_dim or dec[-1].out_dim != self.out_dim:
                raise ValueError("decoder must map fusion_dim to out_dim")
            for a, b in zip(dec, dec[1:]):
                if a.out_dim != b.in_dim:
                    raise ValueError("decoder blocks do not chain")
        else:
            if self.decoder_blocks:
                raise ValueError("dot_product variant has no decoder")
            if self.fusion_dim % self.out_dim:
                raise ValueError("fusion_dim must be divisible by out_dim for dot_product")

    @property
    def branch_dim(self) -> int:
        return self.branch_blocks[0].in_dim

    @property
    def trunk_dim(self) -> int:
        return self.trunk_blocks[0].in_dim

    @property
    def streams(self):
        s = [("branch", self.branch_blocks), ("trunk", self.trunk_blocks)]
        if self.variant == "hadamard_fusion":
            s.append(("decoder", self.decoder_blocks))
        return s

    @property
    def has_dropout(self) -> bool:
        return any(b.dropout_rate > 0 for _, blocks in self.streams for b in blocks)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ArchitectureSpec":
        return cls(**d)


def make_architecture(variant="hadamard_fusion", branch_dim=1, trunk_dim=9, out_dim=2,
                      hidden=(64, 96), fusion_dim=128, decoder=(128, 128), dropout=0.35,
                      input_noise=0.03) -> ArchitectureSpec:
    """Stack of identical hidden blocks per stream plus a linear output head."""
    def chain(n_in, widths):
        dims = [n_in, *widths]
        return [BlockSpec(a, b, dropout) for a, b in zip(dims, dims[1:])]

    branch = chain(branch_dim, [*hidden, fusion_dim])
    trunk = chain(trunk_dim, [*hidden, fusion_dim])
    dec = []
    if variant == "hadamard_fusion":
        dec = chain(fusion_dim, list(decoder))
        dec.append(BlockSpec(dec[-1].out_dim if dec else fusion_dim, out_dim, 0.0, False, "identity"))
    return ArchitectureSpec(variant, branch, trunk, fusion_dim, dec, out_dim, input_noise)


# ---------------------------------------------------------------------------
# standardization

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    FLOOR = 1e-8

    @classmethod
    def fit(cls, data) -> "Standardizer":
        data = np.asarray(data, dtype=np.float64)
        if data.ndim == 1:
            data = data[:, None]
        if data.shape[0] < 2:
            raise ValueError("standardizer needs at least two rows")
        return cls(data.mean(axis=0), np.maximum(data.std(axis=0), cls.FLOOR))

    def apply(self, data):
        return (np.asarray(data, dtype=np.float64) - self.mean) / self.std

    def invert(self, data):
        return np.asarray(data, dtype=np.float64) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}


# ---------------------------------------------------------------------------
# model

def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class FusionModel:
    """Parameters, standardizers and architecture of one operator network."""

    def __init__(self, spec: ArchitectureSpec, seed: int = 0, params=None, dtype=np.float64):
        self.spec = spec
        self.seed = int(seed)
        self.version = 0
        self.dtype = np.dtype(dtype)
        if params is None:
            params = self._init_params(np.random.default_rng(seed))
        self.params = {k: np.array(v, dtype=self.dtype) for k, v in params.items()}
        self.branch_scaler: Standardizer | None = None
        self.trunk_scaler: Standardizer | None = None
        self.output_scaler: Standardizer | None = None
        self.meta: dict = {}

    def _init_params(self, rng):
        params = {}
        for stream, blocks in self.spec.streams:
            for i, b in enumerate(blocks):
                limit = np.sqrt(6.0 / (b.in_dim + b.out_dim))
                params[f"{stream}.{i}.W"] = rng.uniform(-limit, limit, (b.in_dim, b.out_dim))
                params[f"{stream}.{i}.b"] = np.zeros(b.out_dim)
                if b.has_layernorm:
                    params[f"{stream}.{i}.gain"] = np.ones(b.out_dim)
                    params[f"{stream}.{i}.offset"] = np.zeros(b.out_dim)
        if self.spec.variant == "dot_product":
            params["out.bias"] = np.zeros(self.spec.out_dim)
        return params

    def n_parameters(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def copy_params(self):
        return {k: v.copy() for k, v in self.params.items()}

    def set_params(self, params):
        self.params = {k: np.array(v, dtype=self.dtype) for k, v in params.items()}
        self.version += 1

    def astype(self, dtype) -> "FusionModel":
        """Copy with parameters held (and computed) in ``dtype``."""
        other = FusionModel(self.spec, self.seed, self.params, dtype)
        other.branch_scaler, other.trunk_scaler = self.branch_scaler, self.trunk_scaler
        other.output_scaler, other.meta = self.output_scaler, dict(self.meta)
        return other

    def predict(self, branch_x, trunk_x, batch_size: int = 8192):
        """Deterministic prediction in physical units from raw inputs."""
        b = self.branch_scaler.apply(branch_x)
        t = self.trunk_scaler.apply(trunk_x)
        outs = []
        for s in range(0, t.shape[0], batch_size):
            y, _ = forward(self, b[s:s + batch_size], t[s:s + batch_size], "infer")
            outs.append(y)
        y = np.concatenate(outs) if outs else np.empty((0, self.spec.out_dim))
        return self.output_scaler.invert(y)


def _block_forward(params, prefix, spec: BlockSpec, x, train, rng):
    W, bias = params[prefix + ".W"], params[prefix + ".b"]
    h = x @ W + bias
    c = {"x": x}
    y = h
    if spec.has_layernorm:
        mu = h.mean(axis=1, keepdims=True)
        hc = h - mu
        inv = 1.0 / np.sqrt((hc * hc).mean(axis=1, keepdims=True) + LN_EPS)
        n = hc * inv
        c["n"], c["inv"] = n, inv
        y = n * params[prefix + ".gain"] + params[prefix + ".offset"]
    if spec.activation == "swish":
        sg = _sigmoid(y)
        c["y"], c["sg"] = y, sg
        y = y * sg
    if train and spec.dropout_rate > 0:
        keep = 1.0 - spec.dropout_rate
        mask = (rng.random(y.shape, dtype=y.dtype) < keep) * y.dtype.type(1.0 / keep)
        c["mask"] = mask
        y = y * mask
    return y, c


def _block_backward(params, prefix, spec: BlockSpec, c, dy, grads):
    if "mask" in c:
        dy = dy * c["mask"]
    if spec.activation == "swish":
        y, sg = c["y"], c["sg"]
        dy = dy * (sg + y * sg * (1.0 - sg))
    if spec.has_layernorm:
        n = c["n"]
        grads[prefix + ".gain"] = (dy * n).sum(axis=0)
        grads[prefix + ".offset"] = dy.sum(axis=0)
        dn = dy * params[prefix + ".gain"]
        dy = c["inv"] * (dn - dn.mean(axis=1, keepdims=True) - n * (dn * n).mean(axis=1, keepdims=True))
    grads[prefix + ".W"] = c["x"].T @ dy
    grads[prefix + ".b"] = dy.sum(axis=0)
    return dy @ params[prefix + ".W"].T


def _stream_forward(model, stream, blocks, x, train, rng):
    caches = []
    for i, b in enumerate(blocks):
        x, c = _block_forward(model.params, f"{stream}.{i}", b, x, train, rng)
        caches.append(c)
    return x, caches


def _stream_backward(model, stream, blocks, caches, dy, grads):
    for i in reversed(range(len(blocks))):
        dy = _block_backward(model.params, f"{stream}.{i}", blocks[i], caches[i], dy, grads)
    return dy


def forward(model: FusionModel, branch_x, trunk_x, mode: str = "infer", rng=None):
    """Network output on standardized inputs.

    ``mode`` is ``"train"`` (dropout and trunk input noise, needs ``rng``),
    ``"mc"`` (dropout only) or ``"infer"`` (deterministic).  Returns
    ``(output, cache)``; the cache feeds :func:`backward`.
    """
    spec = model.spec
    branch_x = np.asarray(branch_x, dtype=model.dtype)
    trunk_x = np.asarray(trunk_x, dtype=model.dtype)
    if branch_x.ndim == 1:
        branch_x = branch_x[:, None]
    if branch_x.shape[1] != spec.branch_dim or trunk_x.ndim != 2 or trunk_x.shape[1] != spec.trunk_dim:
        raise ShapeMismatch(
            f"expected branch width {spec.branch_dim} and trunk width {spec.trunk_dim}, "
            f"got {branch_x.shape} and {trunk_x.shape}")
    if branch_x.shape[0] != trunk_x.shape[0]:
        raise ShapeMismatch("branch and trunk batches differ in length")
    if mode not in ("train", "mc", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    stochastic = mode in ("train", "mc")
    if stochastic and rng is None:
        raise ValueError(f"mode {mode!r} needs an rng")
    if mode == "train" and spec.input_noise > 0:
        trunk_x = trunk_x + model.dtype.type(spec.input_noise) * rng.standard_normal(trunk_x.shape, dtype=model.dtype)

    # the branch sees one condition per case, so run it once per distinct row
    uniq, inverse = np.unique(branch_x, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    bu, cb = _stream_forward(model, "branch", spec.branch_blocks, uniq, stochastic, rng)
    b = bu[inverse]
    g, ct = _stream_forward(model, "trunk", spec.trunk_blocks, trunk_x, stochastic, rng)
    cache = {"version": model.version, "b": b, "g": g, "branch": cb, "trunk": ct, "id": id(model),
             "inverse": inverse, "n_unique": uniq.shape[0]}
    if spec.variant == "hadamard_fusion":
        z = b * g
        out, cd = _stream_forward(model, "decoder", spec.decoder_blocks, z, stochastic, rng)
        cache["decoder"] = cd
    else:
        n = b.shape[0]
        p = spec.fusion_dim // spec.out_dim
        out = (b * g).reshape(n, spec.out_dim, p).sum(axis=2) + model.params["out.bias"]
    return out, cache


def backward(model: FusionModel, cache, output_grads):
    """Parameter gradients of ``sum(output * output_grads)`` (sum reduction)."""
    if cache.get("id") != id(model) or cache.get("version") != model.version:
        raise StaleCache("cache was produced before the latest parameter update")
    spec = model.spec
    dout = np.asarray(output_grads, dtype=model.dtype)
    b, g = cache["b"], cache["g"]
    if dout.shape != (b.shape[0], spec.out_dim):
        raise ShapeMismatch(f"output grads shape {dout.shape} != {(b.shape[0], spec.out_dim)}")
    grads = {}
    if spec.variant == "hadamard_fusion":
        dz = _stream_backward(model, "decoder", spec.decoder_blocks, cache["decoder"], dout, grads)
    else:
        grads["out.bias"] = dout.sum(axis=0)
        p = spec.fusion_dim // spec.out_dim
        dz = np.repeat(dout, p, axis=1)
    db = dz * g
    scatter = np.zeros((cache["n_unique"], db.shape[0]), dtype=db.dtype)
    scatter[cache["inverse"], np.arange(db.shape[0])] = 1.0
    _stream_backward(model, "branch", spec.branch_blocks, cache["branch"], scatter @ db, grads)
    _stream_backward(model, "trunk", spec.trunk_blocks, cache["trunk"], dz * b, grads)
    return grads


# ---------------------------------------------------------------------------
# optimizer

@dataclass
class OptimizerState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 3e-4
    clipnorm: float | None = 1.0
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def global_norm(grads) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))


def clip_by_global_norm(grads, clipnorm):
    if clipnorm is None:
        return grads, 1.0
    norm = global_norm(grads)
    if norm <= clipnorm or norm == 0:
        return grads, 1.0
    scale = clipnorm / norm
    return {k: g * scale for k, g in grads.items()}, scale


def adamw_step(params, grads, state: OptimizerState):
    """One AdamW update with global-norm clipping; updates ``params`` in place.

    Weight decay is decoupled: ``theta -= lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    """
    grads, _ = clip_by_global_norm(grads, state.clipnorm)
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    for k, g in grads.items():
        p = params[k]
        if g.shape != p.shape:
            raise ShapeMismatch(f"gradient {k} has shape {g.shape}, parameter {p.shape}")
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(p)
            state.v[k] = np.zeros_like(p)
        v = state.v[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.lr * ((m / c1) / (np.sqrt(v / c2) + state.eps) + state.weight_decay * p)
    return params, state


# ---------------------------------------------------------------------------
# uncertainty

def mc_dropout_predict(model: FusionModel, branch_x, trunk_x, n_samples: int, rng, batch_size: int = 8192):
    """Mean and sample standard deviation over stochastic dropout passes.

    Inputs are raw (unstandardized); outputs are in physical units.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    if not model.spec.has_dropout:
        raise NoStochasticLayers("all dropout rates are zero; MC sigma would be identically 0")
    b = model.branch_scaler.apply(branch_x)
    t = model.trunk_scaler.apply(trunk_x)
    n = t.shape[0]
    mean = np.zeros((n, model.spec.out_dim))
    m2 = np.zeros_like(mean)
    # Welford running moments
    for k in range(1, n_samples + 1):
        parts = [forward(model, b[s:s + batch_size], t[s:s + batch_size], "mc", rng)[0]
                 for s in range(0, n, batch_size)]
        y = model.output_scaler.invert(np.concatenate(parts))
        delta = y - mean
        mean += delta / k
        m2 += delta * (y - mean)
    var = np.maximum(m2, 0.0) / (n_samples - 1)
    return mean, np.sqrt(var)


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: FusionModel, path, summary: dict | None = None) -> Path:
    """Write a self-describing ``.npz`` checkpoint and a JSON sidecar summary.

    All arrays are stored as little-endian float64; the file bytes depend only
    on the model contents.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    meta = {
        "format_version": FORMAT_VERSION,
        "spec": model.spec.to_dict(),
        "seed": model.seed,
        "param_names": sorted(model.params),
        "meta": model.meta,
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)}
    for k in sorted(model.params):
        arrays["param/" + k] = model.params[k].astype("<f8")
    for name in ("branch", "trunk", "output"):
        sc = getattr(model, f"{name}_scaler")
        if sc is not None:
            arrays[f"scaler/{name}/mean"] = np.asarray(sc.mean, dtype="<f8")
            arrays[f"scaler/{name}/std"] = np.asarray(sc.std, dtype="<f8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    path.write_bytes(buf.getvalue())
    side = {
        "format_version": FORMAT_VERSION,
        "variant": model.spec.variant,
        "n_parameters": model.n_parameters(),
        "trunk_dim": model.spec.trunk_dim,
        "branch_dim": model.spec.branch_dim,
        "out_dim": model.spec.out_dim,
        "seed": model.seed,
        "crc32": zlib.crc32(buf.getvalue()),
        **(summary or {}),
    }
    path.with_suffix(".json").write_text(json.dumps(side, indent=2, sort_keys=True, default=str) + "\n")
    return path


def load_model(path) -> FusionModel:
    with np.load(Path(path), allow_pickle=False) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format {meta.get('format_version')}")
        params = {k: np.array(data["param/" + k], dtype=np.float64) for k in meta["param_names"]}
        model = FusionModel(ArchitectureSpec.from_dict(meta["spec"]), meta["seed"], params)
        for name in ("branch", "trunk", "output"):
            key = f"scaler/{name}/mean"
            if key in data.files:
                setattr(model, f"{name}_scaler",
                        Standardizer(np.array(data[key]), np.array(data[f"scaler/{name}/std"])))
        model.meta = meta.get("meta", {})
    return model
