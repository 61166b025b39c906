"""Distribution-level and fidelity metrics for trained models: the
student-teacher gap, energy distance against ground truth, histogram KL,
latent interpolation, nearest-neighbor memorization check, and the
steps-versus-wall-clock benchmark.

All metrics are brute force by design at this scale; each is cheap
enough that the definition doubles as the implementation.
"""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import toydata
from .diffusion import ddim_sample
from .distill import student_predict
from .epsnet import EpsNetParams, network_evals
from .schedule import NoiseSchedule, validate_subsequence
from .training import derived_rng


def distill_gap(student: EpsNetParams, teacher: EpsNetParams, sched: NoiseSchedule,
                tau, n: int, seed: int, head: str = "f_theta") -> tuple[float, float]:
    """(mean, max) squared distance between one-step student outputs and
    full teacher rollouts over n fresh prior draws."""
    if student.dims != teacher.dims:
        raise ValueError(f"student dims {student.dims} do not match teacher {teacher.dims}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    rng = derived_rng(seed, 10)
    x_T = rng.standard_normal((n, teacher.dims.data_dim))
    teacher_out = ddim_sample(teacher, sched, tau, x_T)
    student_out = student_predict(student, x_T, sched, head)
    sq = np.sum((student_out - teacher_out) ** 2, axis=1)
    return float(sq.mean()), float(sq.max())


def _sum_pairwise(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, a.shape[0], chunk):
        block = a[start:start + chunk]
        d2 = np.sum((block[:, None, :] - b[None, :, :]) ** 2, axis=-1)
        total += float(np.sqrt(d2).sum())
    return total


def energy_distance(a: np.ndarray, b: np.ndarray) -> float:
    """2 E||a-b|| - E||a-a'|| - E||b-b'|| over all pairs (diagonal
    included), which makes the statistic exactly zero for A == B."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[0] < 1 or b.shape[0] < 1:
        raise ValueError("energy_distance expects two nonempty n x d arrays")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dim mismatch: {a.shape[1]} vs {b.shape[1]}")
    na, nb = a.shape[0], b.shape[0]
    cross = _sum_pairwise(a, b) / (na * nb)
    within_a = _sum_pairwise(a, a) / (na * na)
    within_b = _sum_pairwise(b, b) / (nb * nb)
    return 2.0 * cross - within_a - within_b


@dataclass(frozen=True)
class HistKL:
    kl: float
    clamped_a: int
    clamped_b: int


def hist_kl(a: np.ndarray, b: np.ndarray, bins: int = 40,
            value_range: tuple[float, float] = (-3.0, 3.0)) -> HistKL:
    """KL(P_a || P_b) over 2-D histograms with +1 smoothing per cell.

    Points outside the range are clamped to the edge bins and counted in
    the result rather than dropped.
    """
    if bins < 2:
        raise ValueError(f"bins must be >= 2, got {bins}")
    lo, hi = value_range

    def counts(pts):
        pts = np.asarray(pts, dtype=np.float64)
        clamped = int(np.sum(np.any((pts < lo) | (pts > hi), axis=1)))
        clipped = np.clip(pts, lo, hi)
        h, _, _ = np.histogram2d(clipped[:, 0], clipped[:, 1], bins=bins,
                                 range=[[lo, hi], [lo, hi]])
        return h + 1.0, clamped

    ha, ca = counts(a)
    hb, cb = counts(b)
    p = ha / ha.sum()
    q = hb / hb.sum()
    return HistKL(kl=float(np.sum(p * np.log(p / q))), clamped_a=ca, clamped_b=cb)


def slerp(a: np.ndarray, b: np.ndarray, t: float) -> np.ndarray:
    """Great-circle interpolation (sin((1-t)W)a + sin(tW)b)/sin(W); falls
    back to linear blending for nearly parallel inputs and rejects
    antiparallel ones, whose great circle is ill-defined."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if not 0.0 <= t <= 1.0:
        raise ValueError(f"t must lie in [0, 1], got {t}")
    na, nb = float(np.linalg.norm(a)), float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        raise ValueError("slerp endpoints must be nonzero")
    omega = math.acos(min(1.0, max(-1.0, float(np.dot(a, b)) / (na * nb))))
    if omega > math.pi - 1e-6:
        raise ValueError("slerp endpoints are antiparallel; interpolation undefined")
    if omega < 1e-6:
        return (1.0 - t) * a + t * b
    s = math.sin(omega)
    return (math.sin((1.0 - t) * omega) / s) * a + (math.sin(t * omega) / s) * b


@dataclass
class InterpolationGrid:
    latents: np.ndarray
    decoded: np.ndarray
    hops: np.ndarray          # consecutive decoded displacements
    hop_ratio: float          # max hop / median hop


def interpolation_grid(decode: Callable[[np.ndarray], np.ndarray], a: np.ndarray,
                       b: np.ndarray, n_steps: int,
                       csv_path=None) -> InterpolationGrid:
    """Decode the spherical path between two latents at n_steps points.

    `decode` maps a batch of latents to data points (student one-step
    head or a teacher rollout). The hop ratio is a smoothness proxy:
    large single jumps relative to the median hop indicate a tear."""
    if n_steps < 2:
        raise ValueError(f"n_steps must be >= 2, got {n_steps}")
    fracs = [i / (n_steps - 1) for i in range(n_steps)]
    latents = np.stack([slerp(a, b, t) for t in fracs])
    decoded = np.asarray(decode(latents), dtype=np.float64)
    hops = np.linalg.norm(np.diff(decoded, axis=0), axis=1)
    med = float(np.median(hops))
    ratio = float(hops.max() / med) if med > 0 else math.inf
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            import csv as _csv
            writer = _csv.writer(fh)
            dim = decoded.shape[1]
            writer.writerow(["i", "t"] + [f"z{j}" for j in range(latents.shape[1])]
                            + [f"x{j}" for j in range(dim)])
            for i, t in enumerate(fracs):
                writer.writerow([i, repr(t)] + [repr(float(v)) for v in latents[i]]
                                + [repr(float(v)) for v in decoded[i]])
    return InterpolationGrid(latents=latents, decoded=decoded, hops=hops,
                             hop_ratio=ratio)


def nearest_neighbors(samples: np.ndarray, train_data: np.ndarray,
                      k: int = 1, chunk: int = 512) -> tuple[np.ndarray, np.ndarray]:
    """Exact brute-force k-NN of each sample within train_data; returns
    (indices, distances), each n x k, sorted by distance."""
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    train_data = np.asarray(train_data, dtype=np.float64)
    if train_data.ndim != 2 or train_data.shape[0] < 1:
        raise ValueError("train_data must be a nonempty n x d array")
    if not 1 <= k <= train_data.shape[0]:
        raise ValueError(f"k must lie in [1, {train_data.shape[0]}], got {k}")
    idx_out = np.empty((samples.shape[0], k), dtype=np.int64)
    dist_out = np.empty((samples.shape[0], k))
    for start in range(0, samples.shape[0], chunk):
        block = samples[start:start + chunk]
        d2 = np.sum((block[:, None, :] - train_data[None, :, :]) ** 2, axis=-1)
        order = np.argsort(d2, axis=1, kind="stable")[:, :k]
        idx_out[start:start + chunk] = order
        dist_out[start:start + chunk] = np.sqrt(np.take_along_axis(d2, order, axis=1))
    return idx_out, dist_out


@dataclass
class BenchRow:
    label: str
    evals_per_sample: int
    seconds_per_10k: float


def bench_sampling(teacher: EpsNetParams, sched: NoiseSchedule, tau_list,
                   student: EpsNetParams, n: int = 10000, repetitions: int = 5,
                   seed: int = 0, head: str = "f_theta") -> list[BenchRow]:
    """Wall-clock cost per sample for each teacher subsequence and for
    the one-step student, plus exact network-evaluation counts.

    Monotonic clock, one discarded warm-up pass, median over
    repetitions. The caller is responsible for keeping the process
    single-threaded for the measurement.
    """
    if n < 1000:
        raise ValueError(f"n must be >= 1000 for stable timing, got {n}")
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    rng = derived_rng(seed, 20)
    latents = rng.standard_normal((n, teacher.dims.data_dim))
    resolution = time.get_clock_info("perf_counter").resolution

    def timed(fn) -> tuple[float, int]:
        fn()  # warm-up, discarded
        durations = []
        before = network_evals.value
        fn()
        calls = network_evals.value - before
        durations.append(None)  # placeholder: the counted pass is also timed below
        durations = []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            fn()
            durations.append(time.perf_counter() - t0)
        med = float(np.median(durations))
        if med < 1000.0 * resolution:
            raise ValueError(
                f"measured duration {med:.3e}s is too close to timer resolution "
                f"{resolution:.1e}s; raise n")
        return med, calls

    rows = []
    for tau in tau_list:
        tau = validate_subsequence(tau, sched.steps)
        med, calls = timed(lambda: ddim_sample(teacher, sched, tau, latents))
        rows.append(BenchRow(label=f"teacher_{len(tau)}step",
                             evals_per_sample=calls,
                             seconds_per_10k=med / n * 1e4))
    med, calls = timed(lambda: student_predict(student, latents, sched, head))
    rows.append(BenchRow(label="student_1step", evals_per_sample=calls,
                         seconds_per_10k=med / n * 1e4))
    return rows


@dataclass
class EvalReport:
    """Desk-scale analog of the paper-style results tables, with every
    input seed recorded so the numbers can be recomputed exactly."""

    distill_gap_mean: float
    distill_gap_max: float
    energy_distance_teacher: float
    energy_distance_student: float
    energy_distance_baseline: float
    hist_kl_teacher: float
    hist_kl_student: float
    interpolation_hop_ratio: float
    nn_student_mean: float
    nn_heldout_mean: float
    nn_ratio: float
    data_rms: float
    rms_gap: float
    rms_gap_over_data_rms: float
    seeds: dict = field(default_factory=dict)
    dataset_id: str = ""
    timing: Optional[list] = None   # BenchRows; never part of reproducibility

    def metrics_dict(self) -> dict:
        d = {k: v for k, v in self.__dict__.items() if k != "timing"}
        return d

    def to_json(self) -> str:
        doc = self.metrics_dict()
        if self.timing is not None:
            doc["timing"] = [row.__dict__ for row in self.timing]
        return json.dumps(doc, sort_keys=True, indent=2) + "\n"


def build_report(teacher: EpsNetParams, student: EpsNetParams, sched: NoiseSchedule,
                 tau, data_spec: toydata.ToySpec, seed: int,
                 n_gap: int = 4096, n_dist: int = 10000, bins: int = 40,
                 hist_range: tuple[float, float] = (-3.0, 3.0),
                 interp_steps: int = 33, n_heldout_real: int = 2048,
                 head: str = "f_theta", out_dir=None) -> EvalReport:
    """Compute every evaluation metric from scratch, deterministically in
    `seed`. Optionally writes sample / interpolation CSVs to out_dir."""
    rng = derived_rng(seed, 30)
    d = teacher.dims.data_dim

    gap_mean, gap_max = distill_gap(student, teacher, sched, tau, n_gap, seed, head)

    substrate = toydata.make_dataset(data_spec)
    gt_spec = toydata.ToySpec(kind=data_spec.kind, n=n_dist, seed=seed + 1,
                              modes=data_spec.modes, radius=data_spec.radius,
                              sigma=data_spec.sigma)
    gt = toydata.make_dataset(gt_spec)

    latents = rng.standard_normal((n_dist, d))
    teacher_samples = ddim_sample(teacher, sched, tau, latents)
    student_samples = student_predict(student, latents, sched, head)
    baseline = rng.standard_normal((n_dist, d))

    ed_teacher = energy_distance(teacher_samples, gt)
    ed_student = energy_distance(student_samples, gt)
    ed_baseline = energy_distance(baseline, gt)
    hk_teacher = hist_kl(teacher_samples, gt, bins, hist_range)
    hk_student = hist_kl(student_samples, gt, bins, hist_range)

    held_spec = toydata.ToySpec(kind=data_spec.kind, n=n_heldout_real, seed=seed + 2,
                                modes=data_spec.modes, radius=data_spec.radius,
                                sigma=data_spec.sigma)
    held_real = toydata.make_dataset(held_spec)
    _, nn_student = nearest_neighbors(student_samples[:n_heldout_real], substrate, k=1)
    _, nn_held = nearest_neighbors(held_real, substrate, k=1)
    nn_student_mean = float(nn_student.mean())
    nn_held_mean = float(nn_held.mean())

    a, b = rng.standard_normal(d), rng.standard_normal(d)
    grid = interpolation_grid(
        lambda z: student_predict(student, z, sched, head), a, b, interp_steps,
        csv_path=None if out_dir is None else f"{out_dir}/interpolation.csv")

    data_rms = float(np.sqrt(np.mean(np.sum(gt ** 2, axis=1))))
    rms_gap = float(np.sqrt(gap_mean))

    if out_dir is not None:
        toydata.write_points_csv(f"{out_dir}/teacher_samples.csv", teacher_samples)
        toydata.write_points_csv(f"{out_dir}/student_samples.csv", student_samples)
        toydata.write_points_csv(f"{out_dir}/ground_truth.csv", gt)

    return EvalReport(
        distill_gap_mean=gap_mean,
        distill_gap_max=gap_max,
        energy_distance_teacher=ed_teacher,
        energy_distance_student=ed_student,
        energy_distance_baseline=ed_baseline,
        hist_kl_teacher=hk_teacher.kl,
        hist_kl_student=hk_student.kl,
        interpolation_hop_ratio=grid.hop_ratio,
        nn_student_mean=nn_student_mean,
        nn_heldout_mean=nn_held_mean,
        nn_ratio=nn_student_mean / nn_held_mean,
        data_rms=data_rms,
        rms_gap=rms_gap,
        rms_gap_over_data_rms=rms_gap / data_rms,
        seeds={"eval": seed, "data": data_spec.seed},
        dataset_id=f"{data_spec.kind}(n={data_spec.n},modes={data_spec.modes},"
                   f"r={data_spec.radius},sigma={data_spec.sigma},seed={data_spec.seed})",
    )
