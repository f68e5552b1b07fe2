"""The distillation engine.

Compresses a multi-step teacher into a few-step cascaded generator by
matching distributions in the teacher's (high-resolution) space:

1. run the generator's own cascade and record every intermediate state,
2. draw one (stage, timestep) pair per batch, warm-up gated to the
   high-noise stages,
3. project the selected state to the final resolution: denoise to a clean
   estimate, upsample, and re-noise at the drawn teacher level with an
   alpha-mix of model-implied and fresh Gaussian noise,
4. update the fake score on a weighted denoising objective toward the
   projected clean estimate, then update the generator on the
   pseudo-Huber score-difference objective, with gradients flowing
   through the projection and the recorded cascade.

All gradients are exact; the whole chain is validated against finite
differences in the test suite.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import net as nets
from .cascade import (  # noqa: F401  (mix_noise/implied_noise are part of this surface)
    CascadeParams,
    CascadeRun,
    implied_noise,
    mix_noise,
    run_cascade,
)
from .diffusion import TeacherModel
from .grid import ImageGrid, SeededRng, bilinear_upsample, bilinear_upsample_t
from .schedule import TrajectoryPartition, build_partition, unshift_sigma

PHASE_WARMUP = "warmup"
PHASE_FULL = "full"


@dataclass(frozen=True)
class DistillConfig:
    """Hyperparameters of one distillation run.

    ``alpha`` is the training-time noise-mix weight of the projection;
    ``alpha_inference`` drives transitions of the generated cascades and
    of later sampling. ``rm_enabled=False`` is the ablation arm: the
    generator trains on single-resolution (final-stage) states only,
    i.e. plain distribution matching at the target resolution.
    """

    thresholds: tuple[float, ...] = ()
    resolutions: tuple[int, ...] = (16,)
    flow_shift: float = 1.0
    t_max: float = 1000.0
    n_steps: int = 4
    alpha: float = 0.2
    alpha_inference: float = 1.0
    lambda_stage: tuple[float, ...] | None = None
    stage_weights: tuple[float, ...] | None = None
    snr_clamp: tuple[float, float] = (1e-4, 1e4)
    warmup_steps: int = 100
    steps: int = 800
    batch_size: int = 8
    lr_generator: float = 2e-4
    lr_fake: float = 1e-3
    lr_final_fraction: float = 0.05  # linear decay floor; 1.0 = constant
    clip_norm: float = 1.0
    pseudo_huber_scale: float = 0.00054
    rm_enabled: bool = True
    log_every: int = 25

    def validate(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"distill.alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.alpha_inference <= 1.0:
            raise ValueError(f"distill.alpha_inference must lie in [0, 1], got {self.alpha_inference}")
        if self.lambda_stage is not None and any(w <= 0 for w in self.lambda_stage):
            raise ValueError("distill.lambda_stage entries must be positive")
        if self.warmup_steps < 0 or self.steps < 0:
            raise ValueError("step budgets must be non-negative")
        if not 0.0 < self.lr_final_fraction <= 1.0:
            raise ValueError("distill.lr_final_fraction must lie in (0, 1]")

    def lr_scale(self, step: int) -> float:
        """Linear decay from 1 at step 0 to lr_final_fraction at the last step.

        Applied to the generator only; the fake score keeps its full rate
        so its tracking of the (slowing) generator tightens over training.
        """
        if self.steps <= 1:
            return 1.0
        frac = min(step / (self.steps - 1), 1.0)
        return 1.0 - (1.0 - self.lr_final_fraction) * frac

    def partition(self) -> TrajectoryPartition:
        if self.rm_enabled:
            return build_partition(
                list(self.thresholds), list(self.resolutions), self.flow_shift, self.t_max
            )
        return build_partition([], [self.resolutions[-1]], self.flow_shift, self.t_max)

    def stage_lambda(self, stage: int) -> float:
        if self.lambda_stage is None:
            return 1.0
        return self.lambda_stage[min(stage, len(self.lambda_stage)) - 1]


@dataclass
class DistillState:
    generator: nets.DenoiserNet
    fake: nets.DenoiserNet
    opt_generator: nets.AdamW
    opt_fake: nets.AdamW
    step: int
    warmup_steps: int

    @property
    def phase(self) -> str:
        return PHASE_WARMUP if self.step < self.warmup_steps else PHASE_FULL


def init_distill_state(teacher: TeacherModel, config: DistillConfig) -> DistillState:
    """Generator and fake score both start as copies of the teacher."""
    return DistillState(
        generator=teacher.net.with_params(teacher.net.params),
        fake=teacher.net.with_params(teacher.net.params),
        opt_generator=nets.AdamW(lr=config.lr_generator, clip_norm=config.clip_norm),
        opt_fake=nets.AdamW(lr=config.lr_fake, clip_norm=config.clip_norm),
        step=0,
        warmup_steps=config.warmup_steps,
    )


def pseudo_huber(residual: np.ndarray, c: float) -> tuple[float, np.ndarray]:
    """sqrt(||r||^2 + c^2) - c and its gradient in r.

    Quadratic ~ ||r||^2 / 2c for small residuals, slope-1 linear for large.
    """
    if c <= 0:
        raise ValueError("pseudo-Huber constant must be positive")
    root = float(np.sqrt(np.sum(residual * residual) + c * c))
    return root - c, residual / root


def pseudo_huber_constant(d: int, scale: float = 0.00054) -> float:
    """The dimension rule c = scale * sqrt(d), d = number of entries."""
    return scale * float(np.sqrt(d))


def snr_weight(sigma_stage: float, clamp: tuple[float, float]) -> float:
    """((1 - sigma) / sigma)^2 clamped; diverges at sigma -> 0, hence the clamp."""
    lo, hi = clamp
    if sigma_stage <= 0.0:
        return hi
    if sigma_stage >= 1.0:
        return lo
    raw = ((1.0 - sigma_stage) / sigma_stage) ** 2
    return float(np.clip(raw, lo, hi))


def warmup_stage_count(num_stages: int) -> int:
    # floor(K / 2) high-noise stages, but never fewer than one
    return max(1, num_stages // 2)


def sample_stage_and_timestep(
    partition: TrajectoryPartition,
    phase: str,
    rng: SeededRng,
    stage_weights: tuple[float, ...] | None = None,
) -> tuple[int, float, float]:
    """One Monte-Carlo (stage, timestep) draw.

    During warm-up only the first floor(K/2) (high-noise, low-resolution)
    stages are eligible. The timestep is uniform on the stage's shifted
    interval; the teacher-space timestep comes back through the shift
    inverse. Returns (stage index, shifted t, teacher t).
    """
    k = partition.num_stages
    limit = warmup_stage_count(k) if phase == PHASE_WARMUP else k
    weights = np.ones(limit) if stage_weights is None else np.asarray(stage_weights[:limit], dtype=np.float64)
    stage_index = 1 + rng.choice_index(weights)
    stage = partition.stages[stage_index - 1]
    lo, hi = stage.shifted_interval
    shifted_t = float(rng.uniform(lo, hi))
    teacher_sigma = unshift_sigma(
        shifted_t / partition.t_max, stage.resolution, partition.final_resolution
    )
    return stage_index, shifted_t, teacher_sigma * partition.t_max


def generate_cascade_states(
    generator: nets.DenoiserNet,
    class_id: int | None,
    partition: TrajectoryPartition,
    n_steps: int,
    rng: SeededRng,
    alpha_inference: float = 1.0,
) -> CascadeRun:
    """Run the generator's own cascade, recording every pre-step state."""
    params = CascadeParams(
        partition=partition,
        n_steps=n_steps,
        alpha_inference=alpha_inference,
        class_id=class_id,
        seed=rng.seed,
    )
    return run_cascade(generator, params, rng=rng, keep_tape=True)


def select_state_index(run: CascadeRun, stage: int, shifted_t: float, t_max: float) -> int:
    """The recorded state of `stage` nearest the sampled shifted timestep.

    Ties resolve toward the earlier (noisier) step.
    """
    best, best_dist = None, None
    for j, tape in enumerate(run.tape):
        if tape.stage != stage:
            continue
        dist = abs(tape.sigma_in * t_max - shifted_t)
        if best is None or dist < best_dist:
            best, best_dist = j, dist
    if best is None:
        raise ValueError(f"no recorded state for stage {stage}")
    return best


@dataclass
class TransformTape:
    """Forward record of one projection to the final resolution."""

    x_in: ImageGrid
    sigma_in: float  # shifted sigma of the source state
    velocity: ImageGrid
    sigma_target: float  # teacher sigma of the projection
    alpha: float
    eps: ImageGrid
    clean_up: ImageGrid  # U(x0_hat): the fake score's clean target
    x_high: ImageGrid


def upsample_transform(
    generator: nets.DenoiserNet,
    x: ImageGrid,
    sigma_state: float,
    class_id: int | None,
    sigma_target: float,
    alpha: float,
    final_res: int,
    rng: SeededRng,
) -> TransformTape:
    """Project a cascade state into the teacher space at sigma_target.

    Denoise to the clean estimate x0 = x - sigma * v, upsample, and
    re-noise with the alpha-mix of the upsampled model-implied noise
    (x0 + v) and a fresh Gaussian. Differentiable end to end via
    `backward_transform`.
    """
    v = nets.forward(generator, x, sigma_state, class_id)
    x0_hat = x - sigma_state * v
    clean_up = bilinear_upsample(x0_hat, final_res, final_res)
    predicted = bilinear_upsample(implied_noise(x, v, sigma_state), final_res, final_res)
    eps = rng.normal(clean_up.shape)
    x_high = (1.0 - sigma_target) * clean_up + sigma_target * mix_noise(predicted, eps, alpha)
    return TransformTape(
        x_in=x,
        sigma_in=sigma_state,
        velocity=v,
        sigma_target=sigma_target,
        alpha=alpha,
        eps=eps,
        clean_up=clean_up,
        x_high=x_high,
    )


def backward_transform(
    generator: nets.DenoiserNet,
    tape: TransformTape,
    class_id: int | None,
    d_x_high: ImageGrid,
) -> tuple[np.ndarray, ImageGrid]:
    """Gradients of the projection: returns (param grads, grad at x_in)."""
    src_h, src_w = tape.x_in.shape[1:]
    st, a = tape.sigma_target, tape.alpha
    d_x0 = bilinear_upsample_t(((1.0 - st) + st * a) * d_x_high, src_h, src_w)
    d_v = bilinear_upsample_t(st * a * d_x_high, src_h, src_w) - tape.sigma_in * d_x0
    grads, gx = nets.backward(generator, tape.x_in, tape.sigma_in, class_id, d_v)
    return grads, d_x0 + gx


def cascade_chain_backward(
    generator: nets.DenoiserNet,
    run: CascadeRun,
    sel_index: int,
    class_id: int | None,
    alpha_inference: float,
    d_state: ImageGrid,
) -> np.ndarray:
    """Backpropagate a gradient at the selected recorded state through the
    cascade steps that produced it (steps sel_index-1 down to 0)."""
    grads = np.zeros_like(generator.params)
    d = d_state
    for j in reversed(range(sel_index)):
        tape = run.tape[j]
        if tape.kind == "euler":
            d_v = -(tape.sigma_in - tape.sigma_next) * d
            gp, gx = nets.backward(generator, tape.x_in, tape.sigma_in, class_id, d_v)
            d = d + gx
        else:
            src_h, src_w = tape.x_in.shape[1:]
            sn, a = tape.sigma_next, alpha_inference
            d_x0 = bilinear_upsample_t(((1.0 - sn) + sn * a) * d, src_h, src_w)
            d_v = bilinear_upsample_t(sn * a * d, src_h, src_w) - tape.sigma_in * d_x0
            gp, gx = nets.backward(generator, tape.x_in, tape.sigma_in, class_id, d_v)
            d = d_x0 + gx
        grads += gp
    return grads


def generator_loss(
    x_high: ImageGrid,
    sigma_target: float,
    fake: nets.DenoiserNet,
    teacher: nets.DenoiserNet,
    class_id: int | None,
    huber_scale: float = 0.00054,
) -> tuple[float, ImageGrid]:
    """Pseudo-Huber distance to the stop-gradient score-difference target.

    The score surrogate is the denoising displacement, so the difference
    of fake and teacher scores reduces to the difference of their clean
    estimates at (x_high, sigma). The frozen target is
    y = sg(x_high + x0_teacher - x0_fake): descending the loss moves the
    sample along the teacher's denoising direction relative to the fake's,
    which realizes the reverse-KL score-difference gradient. Only x_high
    carries gradient; the returned upstream is d loss / d x_high.
    """
    v_fake = nets.forward(fake, x_high, sigma_target, class_id)
    v_teacher = nets.forward(teacher, x_high, sigma_target, class_id)
    x0_fake = x_high - sigma_target * v_fake
    x0_teacher = x_high - sigma_target * v_teacher
    residual = x0_fake - x0_teacher  # x_high - y
    c = pseudo_huber_constant(x_high.size, huber_scale)
    loss, d_residual = pseudo_huber(residual, c)
    return loss, d_residual


def fake_score_loss(
    fake: nets.DenoiserNet,
    x_high: ImageGrid,
    sigma_target: float,
    clean_target: ImageGrid,
    sigma_stage: float,
    class_id: int | None,
    snr_clamp: tuple[float, float] = (1e-4, 1e4),
) -> tuple[float, np.ndarray]:
    """SNR-weighted denoising objective tying the fake score to the
    generator's own clean estimates; clean_target must already be
    detached from the generator."""
    lam = snr_weight(sigma_stage, snr_clamp)
    v = nets.forward(fake, x_high, sigma_target, class_id)
    x0_pred = x_high - sigma_target * v
    residual = x0_pred - clean_target
    d = residual.size
    loss = lam * float(np.mean(residual * residual))
    upstream_v = lam * (2.0 / d) * residual * (-sigma_target)
    grads, _ = nets.backward(fake, x_high, sigma_target, class_id, upstream_v)
    return loss, grads


@dataclass
class TrainStepRecord:
    step: int
    phase: str
    stage: int
    teacher_t: float
    generator_loss: float
    fake_loss: float
    generator_grad_norm: float
    fake_grad_norm: float


def _abort_if_bad(value: float, what: str, ref: np.ndarray) -> None:
    if not np.isfinite(value):
        raise RuntimeError(
            f"non-finite {what}: {value}; tensor stats mean={np.nanmean(ref):.4g} "
            f"std={np.nanstd(ref):.4g} min={np.nanmin(ref):.4g} max={np.nanmax(ref):.4g}"
        )


def train_step(
    state: DistillState,
    teacher: nets.DenoiserNet,
    partition: TrajectoryPartition,
    config: DistillConfig,
    class_ids: list[int | None],
    rng: SeededRng,
) -> TrainStepRecord:
    """One full update: fake score first, then generator (shared draw)."""
    phase = state.phase
    state.opt_generator.lr = config.lr_generator * config.lr_scale(state.step)
    stage, shifted_t, teacher_t = sample_stage_and_timestep(
        partition, phase, rng.derive(f"draw:{state.step}"), config.stage_weights
    )
    sigma_target = teacher_t / partition.t_max
    sigma_stage = shifted_t / partition.t_max
    final_res = partition.final_resolution

    runs, selections, transforms = [], [], []
    for i, class_id in enumerate(class_ids):
        run = generate_cascade_states(
            state.generator, class_id, partition, config.n_steps,
            rng.derive(f"cascade:{state.step}:{i}"), config.alpha_inference,
        )
        sel = select_state_index(run, stage, shifted_t, partition.t_max)
        src = run.tape[sel]
        tape = upsample_transform(
            state.generator, src.x_in, src.sigma_in, class_id,
            sigma_target, config.alpha, final_res,
            rng.derive(f"transform:{state.step}:{i}"),
        )
        runs.append(run)
        selections.append(sel)
        transforms.append(tape)

    # fake score update (clean targets and states are detached values)
    fake_grads = np.zeros_like(state.fake.params)
    fake_loss = 0.0
    for class_id, tape in zip(class_ids, transforms):
        loss, grads = fake_score_loss(
            state.fake, tape.x_high, sigma_target, tape.clean_up,
            sigma_stage, class_id, config.snr_clamp,
        )
        fake_loss += loss
        fake_grads += grads
    fake_loss /= len(class_ids)
    fake_grads /= len(class_ids)
    _abort_if_bad(fake_loss, "fake-score loss", transforms[0].x_high)
    state.fake.params, _ = state.opt_fake.step(state.fake.params, fake_grads)

    # generator update against the just-updated fake score
    lam = config.stage_lambda(stage)
    gen_grads = np.zeros_like(state.generator.params)
    gen_loss = 0.0
    for class_id, run, sel, tape in zip(class_ids, runs, selections, transforms):
        loss, upstream = generator_loss(
            tape.x_high, sigma_target, state.fake, teacher, class_id,
            config.pseudo_huber_scale,
        )
        gen_loss += lam * loss
        gp, d_state = backward_transform(state.generator, tape, class_id, lam * upstream)
        gp = gp + cascade_chain_backward(
            state.generator, run, sel, class_id, config.alpha_inference, d_state
        )
        gen_grads += gp
    gen_loss /= len(class_ids)
    gen_grads /= len(class_ids)
    _abort_if_bad(gen_loss, "generator loss", transforms[0].x_high)
    state.generator.params, _ = state.opt_generator.step(state.generator.params, gen_grads)

    record = TrainStepRecord(
        step=state.step,
        phase=phase,
        stage=stage,
        teacher_t=teacher_t,
        generator_loss=gen_loss,
        fake_loss=fake_loss,
        generator_grad_norm=float(np.linalg.norm(gen_grads)),
        fake_grad_norm=float(np.linalg.norm(fake_grads)),
    )
    state.step += 1
    return record


LOG_COLUMNS = [
    "step", "phase", "stage", "teacher_t",
    "generator_loss", "fake_loss", "generator_grad_norm", "fake_grad_norm",
]


def train(
    teacher: TeacherModel,
    config: DistillConfig,
    rng: SeededRng,
    n_classes: int,
    log_path=None,
    ckpt_dir=None,
    ckpt_every: int = 0,
) -> tuple[DistillState, list[TrainStepRecord]]:
    """Drive the full distillation run; emits a CSV log and checkpoints."""
    config.validate()
    partition = config.partition()
    state = init_distill_state(teacher, config)
    records: list[TrainStepRecord] = []
    writer = None
    log_file = None
    if log_path is not None:
        log_file = open(log_path, "w", newline="")
        writer = csv.writer(log_file)
        writer.writerow(LOG_COLUMNS)
    try:
        batch_rng = rng.derive("batches")
        for step in range(config.steps):
            if n_classes > 0:
                class_ids = [int(batch_rng.integers(0, n_classes)) for _ in range(config.batch_size)]
            else:
                class_ids = [None] * config.batch_size
            rec = train_step(state, teacher.net, partition, config, class_ids, rng)
            records.append(rec)
            if writer is not None:
                writer.writerow(
                    [rec.step, rec.phase, rec.stage, repr(rec.teacher_t),
                     repr(rec.generator_loss), repr(rec.fake_loss),
                     repr(rec.generator_grad_norm), repr(rec.fake_grad_norm)]
                )
            if ckpt_dir is not None and ckpt_every and (step + 1) % ckpt_every == 0:
                _write_ckpts(ckpt_dir, state, step + 1)
        if ckpt_dir is not None:
            _write_ckpts(ckpt_dir, state, None)
    finally:
        if log_file is not None:
            log_file.close()
    return state, records


def _write_ckpts(ckpt_dir, state: DistillState, step: int | None) -> None:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    tag = "final" if step is None else f"{step:06d}"
    nets.save_checkpoint(ckpt_dir / f"generator-{tag}.ckpt", state.generator)
    nets.save_checkpoint(ckpt_dir / f"fake-{tag}.ckpt", state.fake)


def rm_disabled_config(config: DistillConfig) -> DistillConfig:
    """The ablation arm: identical budgets, single-resolution matching."""
    return replace(config, rm_enabled=False, warmup_steps=0)
