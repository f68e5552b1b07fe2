"""Noise-level bookkeeping for multi-resolution trajectories.

Everything here is arithmetic on three equivalent coordinates of the
rectified-flow interpolation ``x_t = (1 - sigma) * x0 + sigma * eps``:

* ``sigma`` in [0, 1], the noise fraction,
* ``logsnr = 2 ln((1 - sigma) / sigma)``, the log signal-to-noise ratio,
* ``t = sigma * t_max``, the timestep used for display and conditioning.

A :class:`TrajectoryPartition` splits [0, t_max] into K resolution stages
at logSNR thresholds; each stage also carries the image of its interval
under the resolution-induced logSNR shift. Timesteps stay continuous
internally; rounding to integers happens only when printing.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

__all__ = [
    "logsnr_to_sigma",
    "sigma_to_logsnr",
    "shift_logsnr",
    "shifted_sigma",
    "unshift_sigma",
    "apply_flow_shift",
    "ResolutionStage",
    "TrajectoryPartition",
    "build_partition",
    "map_timestep",
    "ScheduleStep",
    "inference_schedule",
]


def logsnr_to_sigma(logsnr: float) -> float:
    """Noise fraction at a given logSNR: 1 / (1 + exp(logsnr / 2))."""
    if not math.isfinite(logsnr):
        raise ValueError(f"logsnr must be finite, got {logsnr}")
    return 1.0 / (1.0 + math.exp(logsnr / 2.0))


def sigma_to_logsnr(sigma: float) -> float:
    """Inverse of `logsnr_to_sigma`; rejects the singular endpoints 0 and 1."""
    if not 0.0 < sigma < 1.0:
        raise ValueError(f"sigma must lie strictly inside (0, 1), got {sigma}")
    return 2.0 * math.log((1.0 - sigma) / sigma)


def shift_logsnr(logsnr: float, res: int, final_res: int) -> float:
    """Resolution-compensated logSNR: add 2 ln(res / final_res).

    Moving to a lower resolution lowers the logSNR (raises sigma), so a
    low-resolution stage sees more noise at the matched corruption state.
    Identity when res == final_res.
    """
    if res <= 0 or final_res <= 0:
        raise ValueError("resolutions must be positive")
    return logsnr + 2.0 * math.log(res / final_res)


def shifted_sigma(sigma: float, res: int, final_res: int) -> float:
    """Sigma after the resolution shift of `shift_logsnr`.

    Algebraically identical to sigma -> logsnr -> shift -> sigma on (0, 1)
    but written in the closed form sigma / (sigma + rho * (1 - sigma)),
    rho = res / final_res, which the endpoints 0 and 1 pass through
    unchanged (they are fixed points of the shift).
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma}")
    rho = res / final_res
    return sigma / (sigma + rho * (1.0 - sigma))


def unshift_sigma(sigma_shifted: float, res: int, final_res: int) -> float:
    """Inverse of `shifted_sigma`: recover the teacher-space sigma."""
    if not 0.0 <= sigma_shifted <= 1.0:
        raise ValueError(f"sigma must lie in [0, 1], got {sigma_shifted}")
    rho = res / final_res
    return rho * sigma_shifted / (1.0 - sigma_shifted * (1.0 - rho))


def apply_flow_shift(u: float, shift: float) -> float:
    """Monotone reparameterization shift*u / (1 + (shift-1)*u) of a step fraction."""
    if not 0.0 <= u <= 1.0:
        raise ValueError(f"u must lie in [0, 1], got {u}")
    if shift < 1.0:
        raise ValueError(f"flow shift must be >= 1, got {shift}")
    return shift * u / (1.0 + (shift - 1.0) * u)


@dataclass(frozen=True)
class ResolutionStage:
    """One resolution segment of the trajectory.

    Intervals are (low, high) timestep pairs; ``teacher_interval`` lives on
    the teacher's [0, t_max] axis and ``shifted_interval`` is its image
    under the resolution shift.
    """

    index: int  # 1-based
    resolution: int
    teacher_interval: tuple[float, float]
    shifted_interval: tuple[float, float]


@dataclass(frozen=True)
class TrajectoryPartition:
    stages: tuple[ResolutionStage, ...]
    thresholds: tuple[float, ...]  # logSNR, strictly increasing
    flow_shift: float
    t_max: float

    @property
    def num_stages(self) -> int:
        return len(self.stages)

    @property
    def final_resolution(self) -> int:
        return self.stages[-1].resolution

    def stage_of(self, t: float) -> ResolutionStage:
        """Stage owning teacher timestep t.

        A timestep exactly on a boundary belongs to the earlier
        (higher-noise) stage, so Algorithm-style membership tests on the
        next step fire each transition exactly once.
        """
        if not 0.0 <= t <= self.t_max:
            raise ValueError(f"timestep {t} outside [0, {self.t_max}]")
        index = 1
        for stage in self.stages[:-1]:
            if t >= stage.teacher_interval[0]:
                break
            index += 1
        return self.stages[index - 1]


def build_partition(
    thresholds: list[float],
    resolutions: list[int],
    flow_shift: float = 1.0,
    t_max: float = 1000.0,
) -> TrajectoryPartition:
    """Stage layout from logSNR thresholds and per-stage resolutions.

    ``len(resolutions) == len(thresholds) + 1``; thresholds must increase
    strictly in logSNR and resolutions strictly in size, and the last
    resolution is the teacher's. Each threshold maps to a boundary
    timestep via `logsnr_to_sigma`.
    """
    thresholds = [float(v) for v in thresholds]
    resolutions = [int(r) for r in resolutions]
    if len(resolutions) != len(thresholds) + 1:
        raise ValueError(
            f"need len(resolutions) == len(thresholds) + 1, got {len(resolutions)} and {len(thresholds)}"
        )
    if any(b <= a for a, b in zip(thresholds, thresholds[1:])):
        raise ValueError(f"thresholds must be strictly increasing, got {thresholds}")
    if any(b <= a for a, b in zip(resolutions, resolutions[1:])):
        raise ValueError(f"resolutions must be strictly increasing, got {resolutions}")
    if flow_shift < 1.0:
        raise ValueError(f"flow shift must be >= 1, got {flow_shift}")
    if t_max <= 0:
        raise ValueError("t_max must be positive")

    final_res = resolutions[-1]
    # Boundary timesteps, descending from t_max to 0: ascending logSNR
    # thresholds map to descending boundary sigmas, and threshold k sits
    # between stage k and stage k+1.
    bounds = [t_max] + [t_max * logsnr_to_sigma(v) for v in thresholds] + [0.0]
    stages = []
    for i, res in enumerate(resolutions, start=1):
        lo, hi = bounds[i], bounds[i - 1]
        shifted = (
            t_max * shifted_sigma(lo / t_max, res, final_res),
            t_max * shifted_sigma(hi / t_max, res, final_res),
        )
        stages.append(
            ResolutionStage(
                index=i,
                resolution=res,
                teacher_interval=(lo, hi),
                shifted_interval=shifted,
            )
        )
    return TrajectoryPartition(
        stages=tuple(stages),
        thresholds=tuple(thresholds),
        flow_shift=float(flow_shift),
        t_max=float(t_max),
    )


def map_timestep(t: float, partition: TrajectoryPartition) -> tuple[int, float]:
    """Locate the stage owning teacher timestep t and shift t onto it."""
    stage = partition.stage_of(t)
    sigma = t / partition.t_max
    shifted = partition.t_max * shifted_sigma(sigma, stage.resolution, partition.final_resolution)
    return stage.index, shifted


@dataclass(frozen=True)
class ScheduleStep:
    """One row of an inference schedule (continuous timesteps)."""

    step: int
    stage: int
    resolution: int
    teacher_t: float
    teacher_sigma: float
    shifted_t: float
    shifted_sigma: float


def inference_schedule(n_steps: int, partition: TrajectoryPartition) -> list[ScheduleStep]:
    """The N-step grid: uniform fractions, flow shift, then stage mapping.

    Step j uses fraction u_j = 1 - j/N; the teacher sigma is the
    flow-shifted fraction and the row carries both the teacher timestep
    and its resolution-shifted image on the owning stage.
    """
    k = partition.num_stages
    if n_steps < k:
        raise ValueError(f"need at least one step per stage: N={n_steps} < K={k}")
    rows = []
    for j in range(n_steps):
        u = 1.0 - j / n_steps
        sigma = apply_flow_shift(u, partition.flow_shift)
        teacher_t = sigma * partition.t_max
        stage_index, shifted_t = map_timestep(teacher_t, partition)
        stage = partition.stages[stage_index - 1]
        rows.append(
            ScheduleStep(
                step=j,
                stage=stage_index,
                resolution=stage.resolution,
                teacher_t=teacher_t,
                teacher_sigma=sigma,
                shifted_t=shifted_t,
                shifted_sigma=shifted_t / partition.t_max,
            )
        )
    return rows
