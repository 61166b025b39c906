"""Forward noising process, noise-prediction objective, and the
deterministic multi-step sampler.

Everything here is a pure function of its inputs plus an explicit RNG;
the sampler in particular evaluates the network exactly once per
subsequence step and depends only on the initial latent.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np

from . import epsnet, gradcore, training
from .epsnet import EpsNetParams, NetDims, network_evals
from .gradcore import Tensor
from .schedule import (NoiseSchedule, build_linear_schedule,  # noqa: F401
                       uniform_subsequence, validate_subsequence)

EpsModel = Union[EpsNetParams, Callable[[np.ndarray, int], np.ndarray]]


def _as_batch(x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    if x.ndim == 2:
        return x, False
    raise ValueError(f"expected a point or batch of points, got shape {x.shape}")


def forward_marginal(x0, t: int, eps, sched: NoiseSchedule):
    """Noised sample x_t = sqrt(a_t)*x0 + sqrt(1-a_t)*eps."""
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 shape {x0.shape} does not match eps shape {eps.shape}")
    if not 1 <= t <= sched.steps:
        raise ValueError(f"timestep {t} outside [1, {sched.steps}]")
    a = sched.alpha_bar(t)
    return np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps


def predict_x0(x_t, eps_hat, t: int, sched: NoiseSchedule):
    """Network-implied clean point: (x_t - sqrt(1-a_t)*eps_hat)/sqrt(a_t)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    if x_t.shape != eps_hat.shape:
        raise ValueError(f"x_t shape {x_t.shape} does not match eps_hat shape {eps_hat.shape}")
    if not 1 <= t <= sched.steps:
        raise ValueError(f"timestep {t} outside [1, {sched.steps}]")
    a = sched.alpha_bar(t)
    return (x_t - np.sqrt(1.0 - a) * eps_hat) * (1.0 / np.sqrt(a))


def posterior_mean(x_t, x0, t: int, sched: NoiseSchedule):
    """Mean of the deterministic reverse-transition given (x_t, x0):
    sqrt(a_{t-1})*x0 + sqrt((1-a_{t-1})/(1-a_t))*(x_t - sqrt(a_t)*x0)."""
    x_t = np.asarray(x_t, dtype=np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    if x_t.shape != x0.shape:
        raise ValueError(f"x_t shape {x_t.shape} does not match x0 shape {x0.shape}")
    if not 2 <= t <= sched.steps:
        raise ValueError(f"posterior_mean needs 2 <= t <= {sched.steps}, got {t} "
                         "(the t=1 transition maps straight to the clean prediction)")
    a_t = sched.alpha_bar(t)
    a_prev = sched.alpha_bar(t - 1)
    return np.sqrt(a_prev) * x0 + np.sqrt((1.0 - a_prev) / (1.0 - a_t)) * (
        x_t - np.sqrt(a_t) * x0)


def ddim_step(x_t, eps_hat, t: int, t_prev: int, sched: NoiseSchedule):
    """One deterministic reverse hop from step t to t_prev < t.

    Implemented as predict-then-renoise, which at t_prev = 0 (alpha = 1)
    reduces to the clean prediction itself with no special branch.
    """
    if not 0 <= t_prev < t <= sched.steps:
        raise ValueError(f"need 0 <= t_prev < t <= {sched.steps}, got ({t}, {t_prev})")
    x0_pred = predict_x0(x_t, eps_hat, t, sched)
    a_prev = sched.alpha_bar(t_prev)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    return np.sqrt(a_prev) * x0_pred + np.sqrt(1.0 - a_prev) * eps_hat


def _eval_net(net: EpsModel, x: np.ndarray, t: int) -> np.ndarray:
    network_evals.bump()
    if callable(net):
        out = np.asarray(net(x, t), dtype=np.float64)
        if out.shape != x.shape:
            raise ValueError(f"noise model returned shape {out.shape} for input {x.shape}")
        return out
    return epsnet.forward(net, x, t).data


def ddim_sample(net: EpsModel, sched: NoiseSchedule, tau, x_T,
                keep_trajectory: bool = False):
    """Deterministic rollout of the reverse recursion down the timestep
    subsequence, finishing at the clean prediction (step 0).

    `net` is either network parameters or a callable (x, t) -> noise,
    which lets tests substitute an oracle. Exactly len(tau) network
    evaluations are performed. With keep_trajectory=True, returns
    (x_0, [(t, state), ...]) from the initial latent down to step 0.
    """
    tau = validate_subsequence(tau, sched.steps)
    x, squeeze = _as_batch(x_T)
    if not np.all(np.isfinite(x)):
        raise ValueError("ddim_sample: non-finite initial latent rejected")
    trajectory = [(sched.steps, x[0].copy() if squeeze else x.copy())] if keep_trajectory else None
    descending = list(reversed(tau))
    for t, t_prev in zip(descending, descending[1:] + [0]):
        eps_hat = _eval_net(net, x, t)
        x = ddim_step(x, eps_hat, t, t_prev, sched)
        if keep_trajectory:
            trajectory.append((t_prev, x[0] if squeeze else x.copy()))
    out = x[0] if squeeze else x
    if keep_trajectory:
        return out, trajectory
    return out


def write_trajectory_csv(path, trajectory, dim: int) -> None:
    """Trajectory dump: one row per state, columns t then coordinates."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["t"] + [f"x{i}" for i in range(dim)])
        for t, state in trajectory:
            writer.writerow([t] + [repr(float(v)) for v in np.atleast_1d(state)])


def epsilon_loss_given(net: EpsNetParams, x0: np.ndarray, t_vec: np.ndarray,
                       eps: np.ndarray, sched: NoiseSchedule) -> Tensor:
    """Noise-prediction loss for fixed draws: mean over the batch of
    ||eps - net(x_t, t)||^2. Records on the active tape if one exists."""
    n, d = x0.shape
    a = sched.alpha[np.asarray(t_vec) - 1][:, None]
    x_t = np.sqrt(a) * x0 + np.sqrt(1.0 - a) * eps
    emb = epsnet.embed_batch(t_vec, net.dims.embed_dim)
    pred = epsnet.forward_embedded(net, x_t, emb)
    return gradcore.scale(gradcore.sq_diff_mean(pred, Tensor(eps)), float(d))


def epsilon_loss(net: EpsNetParams, x0_batch: np.ndarray, sched: NoiseSchedule,
                 rng: np.random.Generator) -> Tensor:
    """Monte-Carlo noise-prediction objective: per example, a uniform
    timestep in [1, T] and a fresh standard-normal noise draw."""
    x0 = np.asarray(x0_batch, dtype=np.float64)
    if x0.ndim != 2 or x0.shape[0] < 1:
        raise ValueError(f"x0 batch must be nonempty and 2-D, got shape {x0.shape}")
    n, d = x0.shape
    t_vec = rng.integers(1, sched.steps + 1, size=n)
    eps = rng.standard_normal((n, d))
    return epsilon_loss_given(net, x0, t_vec, eps, sched)


@dataclass
class TeacherRun:
    params: EpsNetParams   # EMA weights, as checkpointed
    raw_params: EpsNetParams
    sched: NoiseSchedule
    result: training.TrainResult


def train_teacher(dataset: np.ndarray, sched: NoiseSchedule, dims: NetDims,
                  config: training.TrainConfig, seed: int,
                  ckpt_path=None, log_path=None) -> TeacherRun:
    """Fit the noise-prediction network to a dataset of clean points.

    Splits off a held-out slice whose (t, eps) draws are frozen up
    front, so the early-stopping metric is deterministic in the weights.
    The saved checkpoint holds the EMA shadow.
    """
    data = np.asarray(dataset, dtype=np.float64)
    if data.ndim != 2 or data.shape[0] < 2:
        raise ValueError(f"dataset must be a nonempty n x d array, got {data.shape}")
    if data.shape[1] != dims.data_dim:
        raise ValueError(f"dataset dim {data.shape[1]} does not match net dim {dims.data_dim}")

    split_rng = training.derived_rng(seed, 1)
    perm = split_rng.permutation(data.shape[0])
    n_held = max(1, int(round(data.shape[0] * config.heldout_fraction)))
    held, train = data[perm[:n_held]], data[perm[n_held:]]

    eval_rng = training.derived_rng(seed, 2)
    held_t = eval_rng.integers(1, sched.steps + 1, size=held.shape[0])
    held_eps = eval_rng.standard_normal(held.shape)

    def batch_loss(params, idx, rng):
        return epsilon_loss(params, train[idx], sched, rng)

    def heldout_loss(params):
        return epsilon_loss_given(params, held, held_t, held_eps, sched).item()

    params = epsnet.init_params(seed, dims)
    result = training.run_training(params, config, seed, train.shape[0],
                                   batch_loss, heldout_loss)
    if log_path is not None:
        write_training_log(log_path, result.log)
    if ckpt_path is not None:
        epsnet.save_checkpoint(ckpt_path, result.ema.shadow, sched)
    return TeacherRun(params=result.ema.shadow, raw_params=result.params,
                      sched=sched, result=result)


def write_training_log(path, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "train_loss", "heldout_loss"])
        for step, lr, train_loss, held in rows:
            writer.writerow([step, repr(float(lr)), repr(float(train_loss)),
                             repr(float(held))])
