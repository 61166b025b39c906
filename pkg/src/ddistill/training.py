"""Shared training machinery: Adam with linear warmup, EMA shadowing,
held-out early stopping, and bit-exact resumable state.

Both training loops (noise-prediction teacher and one-step student) run
through `run_training`; they differ only in how a batch loss and the
held-out loss are computed.
"""

from __future__ import annotations

import math
import pickle
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from . import gradcore
from .epsnet import EmaState, EpsNetParams, Tensor, ema_init, ema_update


class NumericalAbort(RuntimeError):
    """Raised when a loss or gradient goes non-finite; names the step."""


def derived_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for (seed, key...); the per-index stream
    contract that keeps parallel work schedule-independent."""
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.default_rng(ss)


@dataclass
class TrainConfig:
    base_lr: float = 2e-4
    warmup_steps: int = 500
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    adam_eps: float = 1e-8
    ema_decay: float = 0.995
    batch_size: int = 256
    max_iters: int = 20000
    loss_kind: str = "l2"
    grad_clip: Optional[float] = None
    heldout_fraction: float = 0.1
    early_stop_patience: int = 10
    eval_interval: int = 250

    def __post_init__(self):
        self.loss_kind = self.loss_kind.lower()
        if not (0.0 <= self.adam_beta1 < 1.0 and 0.0 <= self.adam_beta2 < 1.0):
            raise ValueError("adam betas must lie in [0, 1)")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if not 0.0 < self.heldout_fraction <= 0.5:
            raise ValueError("heldout_fraction must lie in (0, 0.5]")
        if self.loss_kind not in ("l2", "l1"):
            raise ValueError(f"loss_kind must be 'l2' or 'l1', got {self.loss_kind!r}")
        if self.batch_size < 1 or self.max_iters < 0:
            raise ValueError("batch_size must be >= 1 and max_iters >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")
        if self.early_stop_patience < 1 or self.eval_interval < 1:
            raise ValueError("early_stop_patience and eval_interval must be >= 1")


def lr_at(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear warmup then flat: base_lr * min(1, (step+1)/warmup_steps)."""
    if step < 0:
        raise ValueError(f"step must be >= 0, got {step}")
    return base_lr * min(1.0, (step + 1) / warmup_steps)


def _param_tensors(params: EpsNetParams) -> list[Tensor]:
    out = []
    for w, b in params.layers:
        out.extend((w, b))
    return out


def _rebuild(params: EpsNetParams, datas: list[np.ndarray]) -> EpsNetParams:
    layers = [(Tensor(datas[2 * i]), Tensor(datas[2 * i + 1]))
              for i in range(len(params.layers))]
    return EpsNetParams(dims=params.dims, layers=layers)


@dataclass
class TrainState:
    """Optimizer moments, EMA shadow, RNG and epoch position, early-stop
    bookkeeping. Picklable; resuming reproduces the run bit-exactly."""

    step: int
    m: list[np.ndarray]
    v: list[np.ndarray]
    ema: EmaState
    rng_state: dict
    best_heldout: float
    patience_used: int
    perm: np.ndarray
    perm_pos: int


def init_state(params: EpsNetParams, config: TrainConfig, rng: np.random.Generator) -> TrainState:
    tensors = _param_tensors(params)
    return TrainState(
        step=0,
        m=[np.zeros_like(t.data) for t in tensors],
        v=[np.zeros_like(t.data) for t in tensors],
        ema=ema_init(params, config.ema_decay),
        rng_state=rng.bit_generator.state,
        best_heldout=math.inf,
        patience_used=0,
        perm=np.empty(0, dtype=np.int64),
        perm_pos=0,
    )


def adam_step(state: TrainState, grads: list[np.ndarray], params: EpsNetParams,
              config: TrainConfig) -> tuple[TrainState, EpsNetParams]:
    """One bias-corrected Adam update (with optional global-norm clip).

    Produces new parameter values; moments are updated in place on the
    state. The learning rate follows lr_at(state.step).
    """
    tensors = _param_tensors(params)
    if len(grads) != len(tensors):
        raise ValueError(f"got {len(grads)} gradients for {len(tensors)} parameters")
    for g, t in zip(grads, tensors):
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {t.shape}")
        if not np.all(np.isfinite(g)):
            raise NumericalAbort(f"non-finite gradient at step {state.step}")

    if config.grad_clip is not None:
        total = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if total > config.grad_clip:
            factor = config.grad_clip / total
            grads = [g * factor for g in grads]

    lr = lr_at(state.step, config.base_lr, config.warmup_steps)
    b1, b2 = config.adam_beta1, config.adam_beta2
    t = state.step + 1
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_datas = []
    for i, (g, p) in enumerate(zip(grads, tensors)):
        state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        state.v[i] = b2 * state.v[i] + (1.0 - b2) * (g * g)
        m_hat = state.m[i] / c1
        v_hat = state.v[i] / c2
        new_datas.append(p.data - lr * m_hat / (np.sqrt(v_hat) + config.adam_eps))
    state.step = t
    return state, _rebuild(params, new_datas)


@dataclass
class TrainResult:
    params: EpsNetParams          # final raw weights
    ema: EmaState                 # shadow weights (what checkpoints hold)
    log: list = field(default_factory=list)  # (step, lr, train_loss, heldout_loss)
    steps_run: int = 0
    stopped_early: bool = False
    heldout_first: float = math.nan
    heldout_final: float = math.nan  # on EMA shadow, after training
    state: Optional[TrainState] = None


def run_training(params: EpsNetParams, config: TrainConfig, seed: int,
                 n_train: int,
                 batch_loss: Callable[[EpsNetParams, np.ndarray, np.random.Generator],
                                      gradcore.Tensor],
                 heldout_loss: Callable[[EpsNetParams], float],
                 resume: Optional[tuple[EpsNetParams, TrainState]] = None) -> TrainResult:
    """Drive shuffled-epoch minibatch training with periodic held-out
    evaluation and patience-based early stopping.

    `batch_loss` must build a scalar loss on the active tape from the
    given example indices; `heldout_loss` must be deterministic in the
    parameters (any noise draws fixed up front by the caller).
    """
    if n_train < config.batch_size:
        raise ValueError(f"need at least batch_size={config.batch_size} training "
                         f"examples, got {n_train}")
    if resume is not None:
        params, state = resume
        rng = np.random.default_rng()
        rng.bit_generator.state = state.rng_state
    else:
        rng = derived_rng(seed, 0)
        state = init_state(params, config, rng)

    result = TrainResult(params=params, ema=state.ema)

    def next_batch() -> np.ndarray:
        # Reshuffle when the current permutation runs dry; partial final
        # batches are folded into the next epoch.
        if state.perm_pos + config.batch_size > len(state.perm):
            state.perm = rng.permutation(n_train)
            state.perm_pos = 0
        idx = state.perm[state.perm_pos:state.perm_pos + config.batch_size]
        state.perm_pos += config.batch_size
        return idx

    last_train = math.nan
    while state.step < config.max_iters:
        if state.step % config.eval_interval == 0:
            held = heldout_loss(params)
            result.log.append((state.step, lr_at(state.step, config.base_lr,
                                                 config.warmup_steps), last_train, held))
            if math.isnan(result.heldout_first):
                result.heldout_first = held
            if held < state.best_heldout:
                state.best_heldout = held
                state.patience_used = 0
            else:
                state.patience_used += 1
                if state.patience_used >= config.early_stop_patience:
                    result.stopped_early = True
                    break

        idx = next_batch()
        tape = gradcore.Tape()
        with tape:
            loss = batch_loss(params, idx, rng)
        last_train = loss.item()
        if not math.isfinite(last_train):
            raise NumericalAbort(f"non-finite loss at step {state.step}")
        gradcore.backward(loss, tape)
        grads = [tape.gradient(p).data for p in _param_tensors(params)]
        state, params = adam_step(state, grads, params, config)
        state.ema = ema_update(state.ema, params)
        state.rng_state = rng.bit_generator.state

    result.params = params
    result.ema = state.ema
    result.steps_run = state.step
    final_held = heldout_loss(state.ema.shadow)
    result.heldout_final = final_held
    if math.isnan(result.heldout_first):
        result.heldout_first = heldout_loss(params) if state.step == 0 else final_held
    result.log.append((state.step, lr_at(max(state.step - 1, 0), config.base_lr,
                                         config.warmup_steps), last_train, final_held))
    result.state = state
    return result


def save_state(path, params: EpsNetParams, state: TrainState) -> None:
    blob = {
        "dims": params.dims,
        "layers": [(w.data, b.data) for w, b in params.layers],
        "state": {
            "step": state.step, "m": state.m, "v": state.v,
            "ema_decay": state.ema.decay,
            "ema_layers": [(w.data, b.data) for w, b in state.ema.shadow.layers],
            "rng_state": state.rng_state,
            "best_heldout": state.best_heldout,
            "patience_used": state.patience_used,
            "perm": state.perm, "perm_pos": state.perm_pos,
        },
    }
    with open(path, "wb") as fh:
        pickle.dump(blob, fh)


def load_state(path) -> tuple[EpsNetParams, TrainState]:
    with open(path, "rb") as fh:
        blob = pickle.load(fh)
    params = EpsNetParams(dims=blob["dims"],
                          layers=[(Tensor(w), Tensor(b)) for w, b in blob["layers"]])
    s = blob["state"]
    shadow = EpsNetParams(dims=blob["dims"],
                          layers=[(Tensor(w), Tensor(b)) for w, b in s["ema_layers"]])
    state = TrainState(step=s["step"], m=s["m"], v=s["v"],
                       ema=EmaState(shadow=shadow, decay=s["ema_decay"]),
                       rng_state=s["rng_state"], best_heldout=s["best_heldout"],
                       patience_used=s["patience_used"], perm=s["perm"],
                       perm_pos=s["perm_pos"])
    return params, state
