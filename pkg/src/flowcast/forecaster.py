"""Future-segmentation forecasting: single-step, auto-regressive, inpainting,
non-learned baselines, and the fusion ablations that replace the warp.

Flow everywhere in this module is in the sampling convention the warp layer
consumes: ``warp(current, flow)`` is the prediction for the future frame. The
pair encoder is trained against targets in the same convention, so predicted
flow drops straight into the warp with no sign handling here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .autodiff import (
    Tensor,
    add,
    concat_channels,
    conv2d,
    no_grad,
    relu,
    scale,
    softmax_channels,
    uniform_init,
    upsample_bilinear,
    zeros_param,
)
from .convlstm import ConvLSTM, FlowHead, aggregate
from .errors import ConfigError, UsageError
from .flownet import FlowCNN
from .scenes import SceneSequence
from .segnet import OracleSeg, SegCNN
from .warp import VOID, flow_magnitude, warp

FUSE_VARIANTS = ("warp", "concat", "add")
EPS_OCC = 0.05  # flow below this max-norm counts as "predicted zero"


class FuseConcat:
    """Concatenate upsampled flow features with seg probs; 2 convs to C."""

    def __init__(self, num_classes: int, channels: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        c_in = num_classes + channels
        self.conv1 = (
            uniform_init(rng, (channels, c_in, 3, 3), fan_in=c_in * 9, dtype=dtype, gain=np.sqrt(6.0)),
            zeros_param((channels,), dtype=dtype),
        )
        self.conv2 = (
            uniform_init(rng, (num_classes, channels, 3, 3), fan_in=channels * 9, dtype=dtype),
            zeros_param((num_classes,), dtype=dtype),
        )

    def params(self) -> dict:
        return {
            "conv1.w": self.conv1[0],
            "conv1.b": self.conv1[1],
            "conv2.w": self.conv2[0],
            "conv2.b": self.conv2[1],
        }

    def __call__(self, seg: Tensor, feat: Tensor) -> Tensor:
        x = relu(conv2d(concat_channels([seg, feat]), *self.conv1, pad=1))
        return softmax_channels(conv2d(x, *self.conv2, pad=1))


class FuseAdd:
    """1x1-project flow features to C channels, add to seg probs, 1 conv."""

    def __init__(self, num_classes: int, channels: int, seed: int = 0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        self.proj = (
            uniform_init(rng, (num_classes, channels, 1, 1), fan_in=channels, dtype=dtype),
            zeros_param((num_classes,), dtype=dtype),
        )
        self.conv = (
            uniform_init(rng, (num_classes, num_classes, 3, 3), fan_in=num_classes * 9, dtype=dtype),
            zeros_param((num_classes,), dtype=dtype),
        )

    def params(self) -> dict:
        return {
            "proj.w": self.proj[0],
            "proj.b": self.proj[1],
            "conv.w": self.conv[0],
            "conv.b": self.conv[1],
        }

    def __call__(self, seg: Tensor, feat: Tensor) -> Tensor:
        x = add(seg, conv2d(feat, *self.proj, pad=0))
        return softmax_channels(conv2d(x, *self.conv, pad=1))


class ForecastModel:
    """Container for the pair encoder, recurrent core, heads, and backbone."""

    def __init__(
        self,
        num_classes: int,
        channels: int = 16,
        seg_mode: str = "oracle",
        seg_width: int = 16,
        fuse_variant: str = "warp",
        use_lstm: bool = True,
        step_size: int = 1,
        future_jump: int = 3,
        seed: int = 0,
        dtype=np.float32,
    ):
        if fuse_variant not in FUSE_VARIANTS:
            raise ConfigError(f"fuse_variant must be one of {FUSE_VARIANTS}, got {fuse_variant!r}")
        if seg_mode not in ("oracle", "learned"):
            raise ConfigError(f"seg_mode must be 'oracle' or 'learned', got {seg_mode!r}")
        if fuse_variant != "warp" and not use_lstm:
            raise ConfigError("fusion variants read the recurrent state and need use_lstm=True")
        if step_size < 1 or future_jump < 1:
            raise ConfigError(
                f"temporal calibration needs positive step_size and future_jump, "
                f"got {step_size} and {future_jump}"
            )
        self.num_classes = num_classes
        self.channels = channels
        self.fuse_variant = fuse_variant
        self.use_lstm = use_lstm
        self.seg_mode = seg_mode
        # temporal calibration of the future-flow head: it is trained on input
        # pairs `step_size` frames apart against a flow `future_jump` frames
        # ahead, so its output is meaningful only relative to these two numbers
        self.step_size = step_size
        self.future_jump = future_jump
        self.dtype = dtype
        self.flow_net = FlowCNN(channels=channels, seed=seed, dtype=dtype)
        self.lstm = ConvLSTM(channels=channels, seed=seed + 1, dtype=dtype)
        self.head = FlowHead(channels=channels, dtype=dtype)
        if seg_mode == "oracle":
            self.seg = OracleSeg(num_classes, dtype=dtype)
        else:
            self.seg = SegCNN(num_classes, width=seg_width, seed=seed + 2, dtype=dtype)
        if fuse_variant == "concat":
            self.fuse = FuseConcat(num_classes, channels, seed=seed + 3, dtype=dtype)
        elif fuse_variant == "add":
            self.fuse = FuseAdd(num_classes, channels, seed=seed + 3, dtype=dtype)
        else:
            self.fuse = None

    def params(self) -> dict:
        out = {}
        groups = [("flow", self.flow_net), ("lstm", self.lstm), ("head", self.head), ("seg", self.seg)]
        if self.fuse is not None:
            groups.append(("fuse", self.fuse))
        for prefix, part in groups:
            for name, tensor in part.params().items():
                out[f"{prefix}.{name}"] = tensor
        return out

    def segment(self, frame: Tensor, labels=None) -> Tensor:
        return self.seg.segment(frame, labels)


@dataclass
class ForecastRequest:
    sequence: SceneSequence
    t: int  # index of the last observed frame
    s: int  # future jump in frames
    mode: str = "single_step"
    step_size: Optional[int] = None  # stride of input pairs; defaults to s
    sub_step: Optional[int] = None  # auto-regressive per-step jump
    max_pairs: int = 4  # history pairs fed to the aggregator
    inpaint: bool = False

    def __post_init__(self):
        n = len(self.sequence.frames)
        if self.s < 1:
            raise UsageError(f"future jump must be >= 1, got {self.s}")
        if not (0 <= self.t and self.t + self.s < n):
            raise UsageError(
                f"last observed frame {self.t} plus jump {self.s} leaves the {n}-frame sequence"
            )
        if self.mode not in ("single_step", "auto_regressive"):
            raise UsageError(f"unknown mode {self.mode!r}")


@dataclass
class ForecastResult:
    probs: Tensor  # (N, C, H, W) class probabilities at t+s
    mask: np.ndarray  # (N, 1, H, W) uint8, pixels with no valid source
    flow: Optional[Tensor]  # full-resolution sampling flow (last step's, in AR mode)
    state: object = None  # final recurrent state, when one exists


def default_sub_step(s: int) -> int:
    """Half the jump when even (the paper's 10 = 5+5); otherwise the largest
    proper divisor, so odd jumps unroll evenly (9 -> 3, primes -> 1)."""
    if s % 2 == 0:
        return s // 2
    for d in range(s // 2, 0, -1):
        if s % d == 0:
            return d
    return 1


def _frame_tensor(seq: SceneSequence, t: int, dtype) -> Tensor:
    return Tensor(seq.frames[t][None].astype(dtype))


def history_pairs(seq: SceneSequence, t: int, stride: int, max_pairs: int, dtype=np.float32):
    """Chronological (X_{k-stride}, X_k) pairs ending at t, newest last."""
    if stride < 1:
        raise UsageError(f"pair stride must be >= 1, got {stride}")
    if t - stride < 0:
        raise UsageError(
            f"single pair at stride {stride} needs {stride + 1} frames of history, "
            f"have {t + 1} (frames 0..{t})"
        )
    ks = []
    k = t
    while k - stride >= 0 and len(ks) < max_pairs:
        ks.append(k)
        k -= stride
    pairs = [
        (_frame_tensor(seq, k - stride, dtype), _frame_tensor(seq, k, dtype))
        for k in reversed(ks)
    ]
    return pairs


def _labels_for(model: ForecastModel, seq: SceneSequence, t: int):
    return seq.labels[t][None] if model.seg_mode == "oracle" else None


def _as_flow_tensor(flow, dtype) -> Tensor:
    if isinstance(flow, Tensor):
        return flow
    arr = np.asarray(flow, dtype=dtype)
    if arr.ndim == 3:
        arr = arr[None]
    return Tensor(arr)


def _calibrated(model: ForecastModel, flow: Tensor, hop: int, stride: int) -> Tensor:
    """Rescale a predicted flow to span ``hop`` frames.

    The future-flow head is a displacement multiplier: trained on pairs
    ``model.step_size`` frames apart against a target ``model.future_jump``
    frames ahead, it emits ``future_jump / step_size`` times the displacement
    it observes. Feeding it pairs ``stride`` frames apart and asking for a
    ``hop``-frame flow therefore calls for a linear-in-time rescale; at the
    trained operating point the factor is exactly 1.
    """
    factor = (hop * model.step_size) / (stride * model.future_jump)
    return flow if factor == 1.0 else scale(flow, factor)


def forecast_single_step(model: ForecastModel, req: ForecastRequest, flow_override=None) -> ForecastResult:
    """Aggregate history pairs into one future flow and warp the current seg."""
    stride = req.step_size or req.s
    pairs = history_pairs(req.sequence, req.t, stride, req.max_pairs, model.dtype)
    flow, state = aggregate(
        model.flow_net, model.lstm, model.head, pairs, use_lstm=model.use_lstm
    )
    flow = _calibrated(model, flow, req.s, stride)
    if flow_override is not None:
        flow = _as_flow_tensor(flow_override, model.dtype)

    frame_t = _frame_tensor(req.sequence, req.t, model.dtype)
    seg = model.segment(frame_t, _labels_for(model, req.sequence, req.t))

    if model.fuse_variant == "warp":
        pred, mask = warp(seg, flow)
    else:
        feat = upsample_bilinear(state[0], 4)
        pred = model.fuse(seg, feat)
        mask = np.zeros((pred.data.shape[0], 1) + pred.data.shape[2:], dtype=np.uint8)
    if req.inpaint:
        pred = inpaint(pred, mask, seg, flow=flow.data)
    return ForecastResult(pred, mask, flow, state)


def _head_flow(model: ForecastModel, hidden: Tensor) -> Tensor:
    return scale(upsample_bilinear(model.head(hidden), 4), 4.0)


def _propagate_mask(mask: np.ndarray, flow: Tensor) -> np.ndarray:
    """Carry already-invalid pixels through one more warp step."""
    with no_grad():
        moved, new = warp(Tensor(mask.astype(np.float64)), Tensor(flow.data.astype(np.float64)))
    return ((moved.data > 1e-6) | (new > 0)).astype(np.uint8)


def forecast_auto_regressive(model: ForecastModel, req: ForecastRequest, flow_override=None) -> ForecastResult:
    """Walk to t+s in sub-steps, feeding warped RGB back into the encoder.

    Each round warps the running segmentation features and the running RGB
    frame by the predicted sub-step flow; the next round's input pair is the
    two newest RGB frames (the last real one, then imagined ones).
    """
    sub = req.sub_step or default_sub_step(req.s)
    if req.s % sub:
        raise UsageError(f"sub-step {sub} does not divide jump {req.s}")
    steps = req.s // sub
    if flow_override is not None and len(flow_override) != steps:
        raise UsageError(f"need {steps} override flows, got {len(flow_override)}")

    pairs = history_pairs(req.sequence, req.t, sub, req.max_pairs, model.dtype)
    flow, state = aggregate(model.flow_net, model.lstm, model.head, pairs)
    flow = _calibrated(model, flow, sub, sub)

    frame_t = _frame_tensor(req.sequence, req.t, model.dtype)
    seg = model.segment(frame_t, _labels_for(model, req.sequence, req.t))
    rgb_prev, rgb_cur = None, frame_t  # prev is only read after the first swap

    mask_acc = np.zeros((seg.data.shape[0], 1) + seg.data.shape[2:], dtype=np.uint8)
    for i in range(steps):
        if i > 0:
            features, _ = model.flow_net.forward(rgb_prev, rgb_cur)
            state = model.lstm.step(features, state)
            flow = _calibrated(model, _head_flow(model, state[0]), sub, sub)
        if flow_override is not None:
            flow = _as_flow_tensor(flow_override[i], model.dtype)
        seg, step_mask = warp(seg, flow)
        rgb_next, _ = warp(rgb_cur, flow)
        mask_acc = _propagate_mask(mask_acc, flow) | step_mask
        rgb_prev, rgb_cur = rgb_cur, rgb_next

    if req.inpaint:
        current = model.segment(frame_t, _labels_for(model, req.sequence, req.t))
        seg = inpaint(seg, mask_acc, current, flow=flow.data)
    return ForecastResult(seg, mask_acc, flow, state)


def forecast(model: ForecastModel, req: ForecastRequest, flow_override=None) -> ForecastResult:
    if req.mode == "auto_regressive":
        return forecast_auto_regressive(model, req, flow_override)
    return forecast_single_step(model, req, flow_override)


def inpaint(pred, mask: np.ndarray, current, flow=None, eps_occ: float = EPS_OCC):
    """Copy current-frame values where the prediction has no support.

    Pixels replaced: mask=1, plus (when a flow is given) pixels whose
    predicted flow is smaller than ``eps_occ`` in max-norm — the "predicted
    zero for flow" occlusion signal.
    """
    pred_data = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    cur_data = current.data if isinstance(current, Tensor) else np.asarray(current)
    if pred_data.shape != cur_data.shape:
        raise UsageError(f"pred {pred_data.shape} and current {cur_data.shape} differ")
    replace = mask.astype(bool)
    if flow is not None:
        flow_data = flow.data if isinstance(flow, Tensor) else np.asarray(flow)
        replace = replace | (flow_magnitude(flow_data) < eps_occ)
    return Tensor(np.where(replace, cur_data, pred_data))


def baseline_copy_last(model: ForecastModel, req: ForecastRequest) -> ForecastResult:
    """The current segmentation, verbatim, as the future prediction."""
    frame_t = _frame_tensor(req.sequence, req.t, model.dtype)
    seg = model.segment(frame_t, _labels_for(model, req.sequence, req.t))
    mask = np.zeros((seg.data.shape[0], 1) + seg.data.shape[2:], dtype=np.uint8)
    return ForecastResult(seg, mask, None)


def baseline_warp_last(model: ForecastModel, req: ForecastRequest) -> ForecastResult:
    """Estimate backward flow on the reversed last pair, negate, warp.

    Assumes motion continues: the flow from t to t-s, sign-flipped, stands in
    for the unknown flow from t to t+s.
    """
    if req.t - req.s < 0:
        raise UsageError(
            f"warp-last at jump {req.s} needs frame {req.t - req.s}, history starts at 0"
        )
    frame_t = _frame_tensor(req.sequence, req.t, model.dtype)
    frame_past = _frame_tensor(req.sequence, req.t - req.s, model.dtype)
    _, back_quarter = model.flow_net.forward(frame_t, frame_past)
    flow = scale(scale(upsample_bilinear(back_quarter, 4), 4.0), -1.0)
    seg = model.segment(frame_t, _labels_for(model, req.sequence, req.t))
    pred, mask = warp(seg, flow)
    if req.inpaint:
        pred = inpaint(pred, mask, seg, flow=flow.data)
    return ForecastResult(pred, mask, flow)


def predicted_labels(result: ForecastResult) -> np.ndarray:
    """Hard labels from a forecast: argmax, VOID where nothing was warped in."""
    labels = result.probs.data.argmax(axis=1).astype(np.uint8)
    labels[result.mask[:, 0] > 0] = VOID
    return labels
