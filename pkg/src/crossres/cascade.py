"""Multi-resolution cascaded few-step inference.

One state machine drives both user-facing sampling and the recorded
trajectories that distillation differentiates through. Within a stage the
sampler takes Euler steps at the stage's shifted noise levels; when the
next timestep belongs to the following stage it recovers the clean
estimate, upsamples it, and re-injects noise at the next shifted level.

The re-injected noise is a mix of the model-implied noise (the clean
estimate plus the predicted velocity, which continues the current
trajectory) and a fresh Gaussian draw, weighted alpha / sqrt(1 - alpha^2).
With alpha = 0 the transition is a pure stochastic re-noising; with
alpha = 1 it continues the trajectory exactly.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import net as nets
from .grid import ImageGrid, SeededRng, bilinear_upsample
from .schedule import ScheduleStep, TrajectoryPartition, inference_schedule

__all__ = [
    "CascadeParams",
    "CascadeError",
    "TraceRecord",
    "InferenceTrace",
    "StepTape",
    "CascadeRun",
    "mix_noise",
    "implied_noise",
    "run_cascade",
    "infer",
    "naive_cascade_infer",
]


class CascadeError(RuntimeError):
    """Schedule/partition inconsistency detected while running the cascade."""


def mix_noise(predicted: ImageGrid, gaussian: ImageGrid, alpha: float) -> ImageGrid:
    """alpha * predicted + sqrt(1 - alpha^2) * gaussian.

    The weights satisfy alpha^2 + beta^2 = 1, so two independent
    unit-variance inputs mix to unit variance.
    """
    if np.shape(predicted) != np.shape(gaussian):
        raise ValueError(f"shape mismatch {np.shape(predicted)} vs {np.shape(gaussian)}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    beta = np.sqrt(1.0 - alpha * alpha)
    return alpha * np.asarray(predicted) + beta * np.asarray(gaussian)


def implied_noise(x: ImageGrid, v: ImageGrid, sigma: float) -> ImageGrid:
    """Model-implied noise of a state: x + (1 - sigma) * v = x0_hat + v."""
    return np.asarray(x) + (1.0 - sigma) * np.asarray(v)


@dataclass(frozen=True)
class CascadeParams:
    partition: TrajectoryPartition
    n_steps: int
    alpha_inference: float = 1.0
    class_id: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.n_steps < self.partition.num_stages:
            raise ValueError(
                f"n_steps={self.n_steps} < num_stages={self.partition.num_stages}"
            )
        if not 0.0 <= self.alpha_inference <= 1.0:
            raise ValueError(f"alpha_inference must lie in [0, 1], got {self.alpha_inference}")


@dataclass(frozen=True)
class TraceRecord:
    step: int
    stage: int
    teacher_t: float
    shifted_t: float
    sigma: float
    resolution: int
    transition: bool


@dataclass
class InferenceTrace:
    records: list[TraceRecord]

    def transitions(self) -> int:
        return sum(r.transition for r in self.records)

    def validate(self, partition: TrajectoryPartition) -> None:
        k = partition.num_stages
        if self.transitions() != k - 1:
            raise CascadeError(f"expected {k - 1} transitions, got {self.transitions()}")
        resolutions = [r.resolution for r in self.records]
        if any(b < a for a, b in zip(resolutions, resolutions[1:])):
            raise CascadeError("resolutions must be non-decreasing along the trace")
        if resolutions[-1] != partition.final_resolution:
            raise CascadeError("trace must end at the final resolution")
        for a, b in zip(self.records, self.records[1:]):
            if (a.resolution != b.resolution) != a.transition:
                raise CascadeError("resolution must change exactly at transition steps")
        sigmas = [r.teacher_t / partition.t_max for r in self.records]
        if any(b >= a for a, b in zip(sigmas, sigmas[1:])):
            raise CascadeError("teacher-equivalent logSNR must increase strictly")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(
                ["step", "stage", "teacher_t", "shifted_t", "sigma", "resolution", "transition"]
            )
            for r in self.records:
                writer.writerow(
                    [r.step, r.stage, repr(r.teacher_t), repr(r.shifted_t), repr(r.sigma),
                     r.resolution, int(r.transition)]
                )


@dataclass
class StepTape:
    """Everything the distillation backward pass needs about one step."""

    kind: str  # "euler" or "transition"
    x_in: ImageGrid  # state before the step (the recorded cascade state)
    sigma_in: float  # shifted sigma conditioning the prediction
    sigma_next: float  # shifted sigma of the successor state
    stage: int
    resolution: int
    next_resolution: int
    velocity: ImageGrid
    eps: ImageGrid | None = None  # fresh transition noise, if any


@dataclass
class CascadeRun:
    final: ImageGrid
    trace: InferenceTrace
    schedule: list[ScheduleStep]
    tape: list[StepTape] = field(default_factory=list)

    def state_before(self, step: int) -> StepTape:
        return self.tape[step]


def run_cascade(
    net: nets.DenoiserNet,
    params: CascadeParams,
    rng: SeededRng | None = None,
    keep_tape: bool = False,
    channels: int = 1,
) -> CascadeRun:
    """Execute the cascade; optionally keep the per-step tape.

    The noise stream draws, in order: the base noise at the first stage's
    resolution, then one fresh Gaussian per transition. With a fixed seed
    the run is bitwise deterministic.
    """
    p = params.partition
    rng = rng if rng is not None else SeededRng(params.seed)
    rows = inference_schedule(params.n_steps, p)
    stages_seen = sorted({r.stage for r in rows})
    if stages_seen != list(range(1, p.num_stages + 1)):
        raise CascadeError(
            f"schedule visits stages {stages_seen}; every stage of 1..{p.num_stages} "
            "needs at least one step"
        )
    # terminal landing point: sigma = 0 in the final stage
    next_stage = [r.stage for r in rows[1:]] + [p.num_stages]
    next_sigma = [r.shifted_sigma for r in rows[1:]] + [0.0]

    res0 = p.stages[rows[0].stage - 1].resolution
    x = rng.normal((channels, res0, res0))
    tape: list[StepTape] = []
    records: list[TraceRecord] = []
    for j, row in enumerate(rows):
        if next_stage[j] not in (row.stage, row.stage + 1):
            raise CascadeError(
                f"step {j}: stage jumps from {row.stage} to {next_stage[j]}; "
                "the cascade only advances one stage at a time"
            )
        v = nets.forward(net, x, row.shifted_sigma, params.class_id)
        is_transition = next_stage[j] != row.stage
        eps = None
        if not is_transition:
            x_next = x - (row.shifted_sigma - next_sigma[j]) * v
        else:
            next_res = p.stages[next_stage[j] - 1].resolution
            x0_hat = x - row.shifted_sigma * v
            eps = rng.normal((channels, next_res, next_res))
            predicted = bilinear_upsample(implied_noise(x, v, row.shifted_sigma), next_res, next_res)
            mixed = mix_noise(predicted, eps, params.alpha_inference)
            x_next = (1.0 - next_sigma[j]) * bilinear_upsample(x0_hat, next_res, next_res) \
                + next_sigma[j] * mixed
        if keep_tape:
            tape.append(
                StepTape(
                    kind="transition" if is_transition else "euler",
                    x_in=x,
                    sigma_in=row.shifted_sigma,
                    sigma_next=next_sigma[j],
                    stage=row.stage,
                    resolution=row.resolution,
                    next_resolution=p.stages[next_stage[j] - 1].resolution,
                    velocity=v,
                    eps=eps,
                )
            )
        records.append(
            TraceRecord(
                step=j,
                stage=row.stage,
                teacher_t=row.teacher_t,
                shifted_t=row.shifted_t,
                sigma=row.shifted_sigma,
                resolution=row.resolution,
                transition=is_transition,
            )
        )
        x = x_next
    trace = InferenceTrace(records)
    trace.validate(p)
    return CascadeRun(final=x, trace=trace, schedule=rows, tape=tape)


def infer(net: nets.DenoiserNet, params: CascadeParams) -> tuple[ImageGrid, InferenceTrace]:
    """Cascaded few-step sampling; returns the clean sample and its trace."""
    run = run_cascade(net, params)
    return run.final, run.trace


def naive_cascade_infer(
    teacher_net: nets.DenoiserNet, params: CascadeParams
) -> tuple[ImageGrid, InferenceTrace]:
    """The ablation control: the identical state machine driven by the
    undistilled teacher."""
    return infer(teacher_net, params)
