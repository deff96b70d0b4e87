"""End-to-end optimization: SGD with momentum and weight decay, the poly
learning-rate policy, truncated-history BPTT through the forecaster, flow
pretraining on synthetic ground truth, evaluation, and checkpoint plumbing.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .autodiff import Tensor, add, no_grad, scale, zero_grads
from .checkpoint import Checkpoint, save_checkpoint
from .errors import ConfigError, DivergenceError, FormatError, UsageError
from .flownet import downscale_flow
from .convlstm import aggregate
from .forecaster import (
    ForecastModel,
    ForecastRequest,
    baseline_copy_last,
    baseline_warp_last,
    default_sub_step,
    forecast,
    history_pairs,
    predicted_labels,
)
from .losses import LossWeights, default_weights, rgb_loss, seg_loss, total_loss
from .metrics import IoUReport, endpoint_error, iou_counts
from .scenes import SceneSequence, gt_step, sampling_flow
from .warp import VOID, warp

# frames are stored in [0, 1]; the auxiliary reconstruction term measures
# differences in 8-bit intensity units so its robust-loss knee (|d| = 1)
# corresponds to one gray level rather than the full dynamic range
RGB_UNIT = 255.0


@dataclass
class TrainConfig:
    base_lr: float = 0.001
    power: float = 0.9
    weight_decay: float = 0.0005
    momentum: float = 0.9
    batch_size: int = 1
    max_iterations: int = 5000
    unroll_pairs: int = 4
    step_size: int = 1
    future_jump: int = 3
    seed: int = 0
    loss_weights: Optional[LossWeights] = None
    # model construction
    channels: int = 16
    seg_mode: str = "oracle"
    seg_width: int = 16
    fuse_variant: str = "warp"
    use_lstm: bool = True
    # training behaviour
    grad_clip: float = 10.0
    train_seg: bool = False
    recurrent_fine_tune: bool = False
    sub_step: Optional[int] = None
    flow_weight: float = 0.0  # optional direct flow supervision during training
    log_every: int = 50
    checkpoint_every: int = 1000

    def __post_init__(self):
        if self.base_lr <= 0:
            raise ConfigError(f"base_lr must be > 0, got {self.base_lr}")
        if not (0 <= self.momentum < 1):
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")
        if self.max_iterations <= 0:
            raise ConfigError(f"max_iterations must be > 0, got {self.max_iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        for name in ("unroll_pairs", "step_size", "future_jump"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")

    def weights(self) -> LossWeights:
        return self.loss_weights or default_weights(self.max_iterations)


@dataclass
class TrainResult:
    model: ForecastModel
    checkpoint: Checkpoint
    log: list = field(default_factory=list)


def poly_lr(iteration: int, config: TrainConfig) -> float:
    """base_lr * (1 - iter/max_iter)^power, clamped to 0 past the end."""
    if iteration < 0:
        raise UsageError(f"iteration must be >= 0, got {iteration}")
    frac = 1.0 - iteration / config.max_iterations
    if frac <= 0:
        return 0.0
    return config.base_lr * frac**config.power


def clip_gradients(params: dict, max_norm: float, iteration: int = 0) -> float:
    """Scale all gradients so their global norm is at most ``max_norm``."""
    total = 0.0
    for p in params.values():
        g = p.grad
        if g is not None:
            total += float((g.astype(np.float64) ** 2).sum())
    norm = float(np.sqrt(total))
    if not np.isfinite(norm):
        raise DivergenceError("non-finite gradient norm", iteration)
    if max_norm and norm > max_norm:
        factor = max_norm / norm
        for p in params.values():
            if p._grad is not None:
                p._grad = p._grad * factor
    return norm


def sgd_step(params: dict, velocity: dict, lr: float, config: TrainConfig, iteration: int = 0):
    """v <- momentum*v + grad + weight_decay*param; param <- param - lr*v."""
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name!r}", iteration)
        v = velocity[name]
        v *= config.momentum
        v += g.astype(v.dtype) + config.weight_decay * p.data
        p.data -= (lr * v).astype(p.data.dtype)


# ---------------------------------------------------------------------------
# checkpoint glue

def model_state(model: ForecastModel) -> dict:
    return {name: p.data.copy() for name, p in model.params().items()}


def load_model_state(model: ForecastModel, params: dict) -> None:
    mine = model.params()
    missing, extra = set(mine) - set(params), set(params) - set(mine)
    if missing or extra:
        raise FormatError(
            f"checkpoint does not match model: missing {sorted(missing)}, extra {sorted(extra)}"
        )
    for name, p in mine.items():
        arr = params[name]
        if arr.shape != p.data.shape:
            raise FormatError(
                f"checkpoint entry {name!r} has shape {arr.shape}, model expects {p.data.shape}"
            )
        p.data[...] = arr.astype(p.data.dtype, copy=False)


def load_param_group(model: ForecastModel, params: dict, prefix: str) -> int:
    """Copy only the entries under ``prefix`` (e.g. pretrained encoder weights)."""
    mine = model.params()
    names = [n for n in params if n.startswith(prefix)]
    if not names:
        raise FormatError(f"checkpoint holds no {prefix}* entries")
    for name in names:
        if name not in mine:
            raise FormatError(f"checkpoint entry {name!r} does not exist in this model")
        arr = params[name]
        if arr.shape != mine[name].data.shape:
            raise FormatError(
                f"checkpoint entry {name!r} has shape {arr.shape}, model expects {mine[name].data.shape}"
            )
        mine[name].data[...] = arr.astype(mine[name].data.dtype, copy=False)
    return len(names)


def _make_checkpoint(velocity: dict, model: ForecastModel, iteration: int, config_text: str) -> Checkpoint:
    return Checkpoint(
        params=model_state(model),
        velocity={k: v.copy() for k, v in velocity.items()},
        iteration=iteration,
        config_text=config_text,
    )


def build_model(config: TrainConfig, num_classes: int) -> ForecastModel:
    return ForecastModel(
        num_classes,
        channels=config.channels,
        seg_mode=config.seg_mode,
        seg_width=config.seg_width,
        fuse_variant=config.fuse_variant,
        use_lstm=config.use_lstm,
        step_size=config.step_size,
        future_jump=config.future_jump,
        seed=config.seed,
    )


def _trainable_params(model: ForecastModel, config: TrainConfig) -> dict:
    out = {}
    for name, p in model.params().items():
        if name.startswith("seg.") and not config.train_seg:
            p.requires_grad = False  # frozen backbone: no graph work, no update
            continue
        out[name] = p
    return out


# ---------------------------------------------------------------------------
# training

def _log_line(iteration: int, total: float, seg: float, rgb: float, lr: float) -> str:
    return f"iter {iteration} loss {total:.6g} seg {seg:.6g} rgb {rgb:.6g} lr {lr:.6g}"


def _sample_range(config: TrainConfig, mode_stride: int, num_frames: int):
    t_min = mode_stride * config.unroll_pairs
    t_max = num_frames - 1 - config.future_jump
    if t_min > t_max:
        raise UsageError(
            f"sequences of {num_frames} frames are too short for {config.unroll_pairs} "
            f"pairs at stride {mode_stride} plus jump {config.future_jump}"
        )
    return t_min, t_max


def _training_loss(model: ForecastModel, seq: SceneSequence, t: int, config: TrainConfig, weights: LossWeights, iteration: int):
    recurrent = config.recurrent_fine_tune and config.future_jump > 1
    req = ForecastRequest(
        seq,
        t=t,
        s=config.future_jump,
        mode="auto_regressive" if recurrent else "single_step",
        step_size=config.step_size,
        sub_step=config.sub_step,
        max_pairs=config.unroll_pairs,
    )
    res = forecast(model, req)

    gt = seq.labels[t + config.future_jump].copy()
    gt[res.mask[0, 0] > 0] = VOID  # nothing was warped there; do not supervise
    seg = seg_loss(res.probs, gt[None])

    if recurrent:
        # the last sub-step flow spans only part of the jump; the RGB target
        # for it does not exist as a frame, so the auxiliary term is dropped
        rgb = Tensor(np.zeros((), dtype=np.float64))
    else:
        frame_t = Tensor(seq.frames[t][None].astype(model.dtype))
        frame_future = seq.frames[t + config.future_jump][None].astype(model.dtype)
        rgb_pred, _ = warp(frame_t, res.flow)
        # distances in 8-bit intensity units: reconstruction error of a
        # misplaced object then sits in the robust-linear branch of the loss
        # and is comparable to the CE term, which is what makes the annealed
        # lambda2 schedule meaningful
        rgb = rgb_loss(scale(rgb_pred, RGB_UNIT), RGB_UNIT * frame_future)

    total = total_loss(seg, rgb, weights, iteration)
    if config.flow_weight > 0 and not recurrent:
        target = sampling_flow(gt_step(seq, t, config.future_jump)[0])
        flow_term = rgb_loss(res.flow, Tensor(target[None].astype(model.dtype)))
        total = add(total, scale(flow_term, config.flow_weight))
    return total, float(seg.data), float(rgb.data)


def train(
    train_seqs,
    config: TrainConfig,
    model: Optional[ForecastModel] = None,
    out_dir=None,
    log_fn=None,
    config_text: str = "",
    resume: Optional[Checkpoint] = None,
) -> TrainResult:
    """BPTT training of the full forecaster; returns the final checkpoint.

    A non-finite loss or gradient aborts with :class:`DivergenceError`; the
    exception carries the last finite checkpoint as ``.checkpoint`` (also
    written to ``out_dir`` when one is given).
    """
    if not train_seqs:
        raise UsageError("training needs at least one sequence")
    rng = np.random.default_rng(config.seed)
    num_classes = len(train_seqs[0].spec.classes)
    if model is None:
        model = build_model(config, num_classes)
    trainable = _trainable_params(model, config)
    velocity = {name: np.zeros_like(p.data) for name, p in trainable.items()}
    start = 0
    if resume is not None:
        load_model_state(model, resume.params)
        for name, v in resume.velocity.items():
            if name in velocity:
                velocity[name][...] = v
        start = resume.iteration
    weights = config.weights()

    stride = config.step_size
    if config.recurrent_fine_tune and config.future_jump > 1:
        stride = config.sub_step or default_sub_step(config.future_jump)

    log = []

    def emit(line: str):
        log.append(line)
        if log_fn is not None:
            log_fn(line)

    def checkpoint_at(iteration: int) -> Checkpoint:
        return _make_checkpoint(velocity, model, iteration, config_text)

    def persist(ck: Checkpoint):
        if out_dir is not None:
            save_checkpoint(f"{out_dir}/checkpoint.fckp", ck)

    last_good = checkpoint_at(start)
    for it in range(start, config.max_iterations):
        lr = poly_lr(it, config)
        totals = []
        zero_grads(trainable.values())
        for _ in range(config.batch_size):
            seq = train_seqs[int(rng.integers(len(train_seqs)))]
            t_min, t_max = _sample_range(config, stride, len(seq.frames))
            t = int(rng.integers(t_min, t_max + 1))
            total, seg_v, rgb_v = _training_loss(model, seq, t, config, weights, it)
            if not np.isfinite(total.data).all():
                persist(last_good)
                err = DivergenceError("non-finite loss", it)
                err.checkpoint = last_good
                raise err
            sample_total = float(total.data)
            if config.batch_size > 1:
                total = scale(total, 1.0 / config.batch_size)
            total.backward()
            totals.append((sample_total, seg_v, rgb_v))
        try:
            clip_gradients(trainable, config.grad_clip, it)
            sgd_step(trainable, velocity, lr, config, it)
        except DivergenceError as err:
            persist(last_good)
            err.checkpoint = last_good
            raise
        last_good = checkpoint_at(it + 1)
        if it % config.log_every == 0 or it == config.max_iterations - 1:
            mean = [float(np.mean([row[i] for row in totals])) for i in range(3)]
            emit(_log_line(it, mean[0], mean[1], mean[2], lr))
        if config.checkpoint_every and (it + 1) % config.checkpoint_every == 0:
            persist(last_good)

    final = checkpoint_at(max(start, config.max_iterations))
    persist(final)
    return TrainResult(model, final, log)


# ---------------------------------------------------------------------------
# flow pretraining on synthetic ground truth

def adam_step(params: dict, moments: dict, lr: float, step: int, iteration: int = 0):
    """Adam update (beta1 0.9, beta2 0.999); ``step`` is 1-based for bias correction.

    ``moments`` maps each name to a [m1, m2] pair and is mutated in place.
    """
    bc1 = 1.0 - 0.9**step
    bc2 = 1.0 - 0.999**step
    for name, p in params.items():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if not np.isfinite(g).all():
            raise DivergenceError(f"non-finite gradient in {name!r}", iteration)
        m1, m2 = moments[name]
        m1 *= 0.9
        m1 += 0.1 * g
        m2 *= 0.999
        m2 += 0.001 * g * g
        p.data -= (lr * (m1 / bc1) / (np.sqrt(m2 / bc2) + 1e-8)).astype(p.data.dtype)


def pretrain_flow(
    train_seqs,
    config: TrainConfig,
    model: Optional[ForecastModel] = None,
    out_dir=None,
    log_fn=None,
    config_text: str = "",
) -> TrainResult:
    """Supervised pretraining of the whole flow branch on exact synthetic flow.

    Two phases, both against targets in the sampling convention:

    1. pair phase (first two thirds of the iterations) — the encoder's own
       quarter-resolution head against the block-averaged, /4-scaled flow of
       a consecutive pair, training the pair matcher itself;
    2. aggregate phase (remainder) — the recurrent path (encoder features
       through the LSTM and future-flow head, encoder frozen) against the
       composed ground-truth flow for the configured future jump.

    Dense segmentation and photometric losses are informative only within
    about a pixel of the current estimate, so the extrapolation path needs
    this metric anchor before end-to-end training can refine it.

    Updates use Adam with ``base_lr`` as the step size: the supervised
    regression starts from a zero flow head whose raw gradients are far too
    small for plain momentum SGD to escape in any desk-scale budget.
    """
    if not train_seqs:
        raise UsageError("pretraining needs at least one sequence")
    rng = np.random.default_rng(config.seed)
    num_classes = len(train_seqs[0].spec.classes)
    if model is None:
        model = build_model(config, num_classes)
    pair_trainable = {f"flow.{k}": p for k, p in model.flow_net.params().items()}
    agg_trainable = {}
    if model.use_lstm:
        agg_trainable.update({f"lstm.{k}": p for k, p in model.lstm.params().items()})
    agg_trainable.update({f"head.{k}": p for k, p in model.head.params().items()})
    pair_iterations = (2 * config.max_iterations + 2) // 3

    log = []

    def emit(line: str):
        log.append(line)
        if log_fn is not None:
            log_fn(line)

    def checkpoint_at(iteration: int) -> Checkpoint:
        velocity = {name: m1.copy() for name, (m1, _) in moments.items()}
        return _make_checkpoint(velocity, model, iteration, config_text)

    def persist(ck: Checkpoint):
        if out_dir is not None:
            save_checkpoint(f"{out_dir}/checkpoint.fckp", ck)

    trainable = pair_trainable
    moments = {k: [np.zeros_like(p.data), np.zeros_like(p.data)] for k, p in trainable.items()}
    phase_start = 0
    last_good = checkpoint_at(0)
    for it in range(config.max_iterations):
        if it == pair_iterations and agg_trainable:
            trainable = agg_trainable
            moments = {
                k: [np.zeros_like(p.data), np.zeros_like(p.data)] for k, p in trainable.items()
            }
            phase_start = it
        zero_grads(trainable.values())
        seq = train_seqs[int(rng.integers(len(train_seqs)))]
        if it < pair_iterations or not agg_trainable:  # pair phase
            t = int(rng.integers(0, len(seq.frames) - 1))
            target = downscale_flow(sampling_flow(seq.flows[t]), 4)[None].astype(model.dtype)
            _, flow_q = model.flow_net.forward(
                Tensor(seq.frames[t][None].astype(model.dtype)),
                Tensor(seq.frames[t + 1][None].astype(model.dtype)),
            )
            # quarter-grid flow values are stored /4; measure the error in
            # full-resolution pixel units so typical displacements reach the
            # robust-linear branch of the loss instead of its flat center
            loss = rgb_loss(scale(flow_q, 4.0), Tensor(4.0 * target))
        else:  # aggregate phase
            t_min, t_max = _sample_range(config, config.step_size, len(seq.frames))
            t = int(rng.integers(t_min, t_max + 1))
            pairs = history_pairs(seq, t, config.step_size, config.unroll_pairs, model.dtype)
            flow, _ = aggregate(
                model.flow_net, model.lstm, model.head, pairs, use_lstm=model.use_lstm
            )
            target_full = sampling_flow(gt_step(seq, t, config.future_jump)[0])
            loss = rgb_loss(flow, Tensor(target_full[None].astype(model.dtype)))
        if not np.isfinite(loss.data).all():
            persist(last_good)
            err = DivergenceError("non-finite loss", it)
            err.checkpoint = last_good
            raise err
        loss.backward()
        try:
            clip_gradients(trainable, config.grad_clip, it)
            adam_step(trainable, moments, config.base_lr, it - phase_start + 1, it)
        except DivergenceError as err:
            persist(last_good)
            err.checkpoint = last_good
            raise
        last_good = checkpoint_at(it + 1)
        v = float(loss.data)
        if it % config.log_every == 0 or it == config.max_iterations - 1:
            emit(_log_line(it, v, 0.0, v, config.base_lr))

    final = checkpoint_at(config.max_iterations)
    persist(final)
    return TrainResult(model, final, log)


# ---------------------------------------------------------------------------
# evaluation

def evaluate_flow(model: ForecastModel, seqs, max_pairs_per_seq: Optional[int] = None) -> float:
    """Mean endpoint error of the pair encoder on consecutive-frame pairs,
    measured at quarter resolution against downscaled ground truth."""
    errors = []
    with no_grad():
        for seq in seqs:
            ts = range(len(seq.frames) - 1)
            if max_pairs_per_seq is not None:
                ts = list(ts)[:max_pairs_per_seq]
            for t in ts:
                a = Tensor(seq.frames[t][None].astype(model.dtype))
                b = Tensor(seq.frames[t + 1][None].astype(model.dtype))
                _, flow_q = model.flow_net.forward(a, b)
                target = downscale_flow(sampling_flow(seq.flows[t]), 4)
                errors.append(endpoint_error(flow_q.data[0], target))
    return float(np.mean(errors))


def evaluate_forecasts(
    model: ForecastModel,
    seqs,
    s: int,
    mode: str = "single_step",
    step_size: Optional[int] = None,
    sub_step: Optional[int] = None,
    inpaint: bool = False,
    baseline: Optional[str] = None,
    max_pairs: int = 4,
) -> IoUReport:
    """One forecast per sequence (latest valid target frame), merged IoU."""
    if not seqs:
        raise UsageError("evaluation needs at least one sequence")
    counts = None
    for seq in seqs:
        t = len(seq.frames) - 1 - s
        req = ForecastRequest(
            seq, t=t, s=s, mode=mode, step_size=step_size, sub_step=sub_step,
            max_pairs=max_pairs, inpaint=inpaint,
        )
        with no_grad():
            if baseline == "copy-last":
                res = baseline_copy_last(model, req)
            elif baseline == "warp-last":
                res = baseline_warp_last(model, req)
            elif baseline is None:
                res = forecast(model, req)
            else:
                raise UsageError(f"unknown baseline {baseline!r}")
        pred = predicted_labels(res)[0]
        c = iou_counts(pred, seq.labels[t + s], len(seq.spec.classes))
        counts = c if counts is None else counts + c
    return IoUReport(counts, tuple(seqs[0].spec.moving_classes))


def validation_seg_loss(model: ForecastModel, seqs, config: TrainConfig) -> float:
    """Mean forecast cross-entropy on the latest valid target of each sequence."""
    values = []
    with no_grad():
        for seq in seqs:
            t = len(seq.frames) - 1 - config.future_jump
            req = ForecastRequest(
                seq, t=t, s=config.future_jump, step_size=config.step_size,
                max_pairs=config.unroll_pairs,
            )
            res = forecast(model, req)
            gt = seq.labels[t + config.future_jump].copy()
            gt[res.mask[0, 0] > 0] = VOID
            values.append(float(seg_loss(res.probs, gt[None]).data))
    return float(np.mean(values))
