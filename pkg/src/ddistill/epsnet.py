"""Time-conditioned noise-prediction MLP shared by teacher and student.

The network maps a batch of points plus a sinusoidal timestep embedding
through `depth` dense layers with SiLU activations. Parameters are
immutable once built; optimizer and EMA updates construct new values.
The module also owns the bit-exact checkpoint format (magic "DSTU") and
the sampling-time network-evaluation counter.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass

import numpy as np

from . import binio, gradcore
from .gradcore import Tensor
from .schedule import NoiseSchedule, schedule_from_parts

CHECKPOINT_MAGIC = b"DSTU"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetDims:
    data_dim: int
    hidden: int
    depth: int
    embed_dim: int

    def __post_init__(self):
        for name in ("data_dim", "hidden", "depth", "embed_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.embed_dim % 2 != 0:
            raise ValueError(f"embed_dim must be even, got {self.embed_dim}")

    def layer_shapes(self) -> list[tuple[int, int]]:
        """(fan_in, fan_out) per dense layer; first consumes data plus
        embedding, last emits the data dimension."""
        ins = [self.data_dim + self.embed_dim] + [self.hidden] * (self.depth - 1)
        outs = [self.hidden] * (self.depth - 1) + [self.data_dim]
        return list(zip(ins, outs))


@dataclass
class EpsNetParams:
    dims: NetDims
    layers: list[tuple[Tensor, Tensor]]  # (weight fan_in x fan_out, bias fan_out)


class EvalCounter:
    """Counts sampler-side network evaluations (one per forward call,
    regardless of batch width)."""

    def __init__(self):
        self._lock = threading.Lock()
        self._count = 0

    def bump(self, n: int = 1):
        with self._lock:
            self._count += n

    @property
    def value(self) -> int:
        with self._lock:
            return self._count


network_evals = EvalCounter()


def init_params(seed: int, dims: NetDims) -> EpsNetParams:
    """Seeded uniform fan-in init: weights in +-sqrt(6/(fan_in+fan_out)),
    biases zero. Same seed gives bit-identical parameters."""
    rng = np.random.default_rng(seed)
    layers = []
    for fan_in, fan_out in dims.layer_shapes():
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        w = rng.uniform(-bound, bound, size=(fan_in, fan_out))
        layers.append((Tensor(w), Tensor(np.zeros(fan_out))))
    return EpsNetParams(dims=dims, layers=layers)


def clone_params(params: EpsNetParams) -> EpsNetParams:
    layers = [(Tensor(w.data.copy()), Tensor(b.data.copy())) for w, b in params.layers]
    return EpsNetParams(dims=params.dims, layers=layers)


def _sin_cos(t: float, dim: int) -> np.ndarray:
    k = np.arange(dim // 2)
    omega = 10000.0 ** (-2.0 * k / dim)
    angles = t * omega
    return np.concatenate([np.sin(angles), np.cos(angles)])


def time_embed(t: int, total_steps: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding [sin(t*w_k)..., cos(t*w_k)...] with
    w_k = 10000^(-2k/dim). t = 0 is allowed for tests only."""
    if dim % 2 != 0:
        raise ValueError(f"embedding dim must be even, got {dim}")
    if not 0 <= t <= total_steps:
        raise ValueError(f"timestep {t} outside [0, {total_steps}]")
    return _sin_cos(float(t), dim)


def embed_batch(ts: np.ndarray, dim: int) -> np.ndarray:
    """Embedding rows for a vector of timesteps; row i equals
    time_embed(ts[i])."""
    return np.stack([_sin_cos(float(t), dim) for t in ts])


def forward_embedded(params: EpsNetParams, x, emb) -> Tensor:
    """MLP over concat(x, emb) with per-row embeddings already built.
    Records on the active gradcore tape, if any."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    emb = emb if isinstance(emb, Tensor) else Tensor(emb)
    d, e = params.dims.data_dim, params.dims.embed_dim
    if x.data.ndim != 2 or x.shape[1] != d:
        raise ValueError(f"input shape {x.shape} does not match data_dim {d}")
    if emb.data.ndim != 2 or emb.shape != (x.shape[0], e):
        raise ValueError(f"embedding shape {emb.shape} does not match ({x.shape[0]}, {e})")
    h = gradcore.concat_lastdim(x, emb)
    last = len(params.layers) - 1
    for i, (w, b) in enumerate(params.layers):
        h = gradcore.add_broadcast(gradcore.matmul(h, w), b)
        if i != last:
            h = gradcore.silu(h)
    return h


def forward(params: EpsNetParams, x, t: int) -> Tensor:
    """Predicted noise for a batch at one timestep: MLP(concat(x, embed(t))).

    Pure in (params, x, t); range-checking t against a schedule is the
    caller's job since the network itself has no step count.
    """
    if t < 0:
        raise ValueError(f"timestep must be >= 0, got {t}")
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2:
        raise ValueError(f"expected batch x dim input, got shape {x.shape}")
    row = _sin_cos(float(t), params.dims.embed_dim)
    emb = np.tile(row, (x.shape[0], 1))
    return forward_embedded(params, x, emb)


@dataclass
class EmaState:
    shadow: EpsNetParams
    decay: float


def ema_init(params: EpsNetParams, decay: float) -> EmaState:
    if not 0.0 <= decay < 1.0:
        raise ValueError(f"EMA decay must be in [0, 1), got {decay}")
    return EmaState(shadow=clone_params(params), decay=decay)


def ema_update(ema: EmaState, params: EpsNetParams) -> EmaState:
    """shadow <- decay*shadow + (1-decay)*params, elementwise; functional."""
    d = ema.decay
    layers = []
    for (sw, sb), (w, b) in zip(ema.shadow.layers, params.layers):
        if sw.shape != w.shape or sb.shape != b.shape:
            raise ValueError(
                f"EMA shape mismatch: shadow {sw.shape}/{sb.shape} vs {w.shape}/{b.shape}")
        layers.append((Tensor(d * sw.data + (1.0 - d) * w.data),
                       Tensor(d * sb.data + (1.0 - d) * b.data)))
    return EmaState(shadow=EpsNetParams(dims=params.dims, layers=layers), decay=d)


def save_checkpoint(path, params: EpsNetParams, sched: NoiseSchedule) -> None:
    """Write weights and their noise schedule as one framed binary file.

    Storing the schedule next to the weights means a sampler can never
    be run against a mismatched schedule.
    """
    body = bytearray()
    body += binio.pack_u32(sched.steps)
    body += binio.pack_f64(float(sched.beta[0]))
    body += binio.pack_f64(float(sched.beta[-1]))
    body += binio.pack_f64_array(sched.alpha)
    dims = params.dims
    for v in (dims.data_dim, dims.hidden, dims.depth, dims.embed_dim):
        body += binio.pack_u32(v)
    for w, b in params.layers:
        body += binio.pack_f64_array(w.data)
        body += binio.pack_f64_array(b.data)
    binio.write_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION, bytes(body))


def load_checkpoint(path) -> tuple[EpsNetParams, NoiseSchedule]:
    r = binio.read_framed(path, CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    steps = r.u32()
    beta_min, beta_max = r.f64(), r.f64()
    alpha = r.f64_array(steps)
    sched = schedule_from_parts(steps, beta_min, beta_max, alpha)
    dims = NetDims(data_dim=r.u32(), hidden=r.u32(), depth=r.u32(), embed_dim=r.u32())
    layers = []
    for fan_in, fan_out in dims.layer_shapes():
        w = r.f64_array(fan_in * fan_out, shape=(fan_in, fan_out))
        b = r.f64_array(fan_out)
        layers.append((Tensor(w), Tensor(b)))
    return EpsNetParams(dims=dims, layers=layers), sched
