"""Command-line surface: dataset generation, pretraining, training,
evaluation, ablation sweeps, and single-sequence prediction.

Exit codes: 0 success, 1 usage/config error, 2 data/format error,
3 numerical failure (training divergence).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .autodiff import no_grad
from .checkpoint import load_checkpoint
from .config import RunConfig
from .errors import DivergenceError, FormatError, UsageError
from .fileio import write_flo, write_pgm, write_ppm
from .forecaster import ForecastRequest, default_sub_step, forecast, predicted_labels
from .metrics import format_report, iou
from .scenes import class_color, generate_dataset, read_dataset_index, read_sequence, validate_spec
from .trainer import (
    build_model,
    evaluate_flow,
    evaluate_forecasts,
    load_model_state,
    load_param_group,
    pretrain_flow,
    train,
)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad usage; the contract here is 1."""

    def error(self, message):
        raise UsageError(message)


def _add_globals(parser, suppress: bool):
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, metavar="PATH", help="key=value config file")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument(
        "--deterministic",
        action="store_true",
        default=argparse.SUPPRESS if suppress else False,
        help="fully reproducible single-thread mode",
    )
    parser.add_argument("--out", default=d, metavar="DIR", help="output directory")


def _build_parser() -> _Parser:
    parser = _Parser(prog="flowcast", description=__doc__)
    _add_globals(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def command(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _add_globals(p, suppress=True)
        return p

    command("gen-data", "render a synthetic train/val dataset to --out")

    p = command("pretrain-flow", "supervise the pair encoder on ground-truth flow")
    p.add_argument("--data", required=True, metavar="DIR", help="dataset directory")

    p = command("train", "train the forecaster end to end")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--flow-init", metavar="CKPT", help="load pretrained encoder weights")
    p.add_argument("--resume", metavar="CKPT", help="continue from a full checkpoint")

    p = command("eval", "report forecast IoU on a dataset split")
    p.add_argument("--checkpoint", metavar="CKPT", help="trained model (not needed for copy-last)")
    p.add_argument("--data", required=True, metavar="DIR")
    p.add_argument("--split", choices=("train", "val"), default="val")
    p.add_argument("--mode", choices=("single_step", "auto_regressive"), default="single_step")
    p.add_argument("--s", type=int, default=None, help="future jump (default: config)")
    p.add_argument("--step-size", type=int, default=None, help="input pair stride")
    p.add_argument("--sub-step", type=int, default=None, help="auto-regressive sub-step")
    p.add_argument("--inpaint", action="store_true", help="fill unreachable pixels from the current frame")
    p.add_argument("--baseline", choices=("copy-last", "warp-last"), default=None)

    p = command("ablate", "run the fusion/recurrence/step-size/horizon grids")
    p.add_argument("--data", required=True, metavar="DIR")

    p = command("predict", "forecast one sequence and write label/flow/visualization files")
    p.add_argument("--checkpoint", metavar="CKPT", help="trained model (untrained model if omitted)")
    p.add_argument("--sequence", required=True, metavar="DIR", help="a single written sequence")
    p.add_argument("--t", type=int, default=None, help="last observed frame (default: latest valid)")
    p.add_argument("--s", type=int, default=None, help="future jump (default: config)")
    p.add_argument("--mode", choices=("single_step", "auto_regressive"), default="single_step")
    p.add_argument("--sub-step", type=int, default=None)
    p.add_argument("--inpaint", action="store_true")
    return parser


def _merge_config(args) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    if getattr(args, "deterministic", False):
        cfg.set("deterministic", True)
    return cfg


def _require_out(args) -> Path:
    if not args.out:
        raise UsageError(f"{args.command} needs --out DIR")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _echo_config(cfg: RunConfig, out: Path):
    (out / "config.txt").write_text(cfg.to_text(), encoding="utf-8")


def _load_split(data_dir, split: str):
    root = Path(data_dir)
    index = read_dataset_index(root)
    return [read_sequence(root / rel) for rel in index[split]]


def _write_log(out: Path, lines):
    (out / "log.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")


def _model_from_checkpoint(cfg: RunConfig, checkpoint_path, num_classes: int) -> tuple:
    """Build the model a checkpoint describes and load its weights."""
    ck = load_checkpoint(checkpoint_path)
    model_cfg = RunConfig.from_text(ck.config_text) if ck.config_text else cfg
    model = build_model(model_cfg.train_config(), num_classes)
    load_model_state(model, ck.params)
    return model, model_cfg, ck


def _load_flow_branch(model, params: dict) -> int:
    """Copy the pretrained flow branch (pair encoder, aggregator, future head)
    into ``model``, skipping groups either side lacks (e.g. a recurrence-free
    model takes no aggregator weights)."""
    mine = model.params()
    loaded = 0
    for prefix in ("flow.", "lstm.", "head."):
        if any(n.startswith(prefix) for n in params) and any(
            n.startswith(prefix) for n in mine
        ):
            loaded += load_param_group(model, params, prefix)
    if not loaded:
        raise FormatError("checkpoint holds no flow-branch entries")
    return loaded


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    validate_spec(cfg.scene_spec())  # fail before writing any file
    stats = generate_dataset(out, cfg.scene_spec(), cfg.num_train, cfg.num_val)
    _echo_config(cfg, out)
    print(f"wrote {stats['train']} train / {stats['val']} val sequences to {out}")
    return 0


def cmd_pretrain_flow(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    train_seqs = _load_split(args.data, "train")
    val_seqs = _load_split(args.data, "val")
    result = pretrain_flow(
        train_seqs, cfg.train_config(), out_dir=out, log_fn=print, config_text=cfg.to_text()
    )
    _write_log(out, result.log)
    _echo_config(cfg, out)
    epe = evaluate_flow(result.model, val_seqs, max_pairs_per_seq=4)
    (out / "endpoint_error.txt").write_text(f"val_endpoint_error {epe:.6f}\n", encoding="utf-8")
    print(f"val endpoint error {epe:.6f} px (quarter resolution)")
    return 0


def cmd_train(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    train_seqs = _load_split(args.data, "train")
    val_seqs = _load_split(args.data, "val")
    tc = cfg.train_config()
    model = build_model(tc, len(train_seqs[0].spec.classes))
    resume = None
    if args.flow_init:
        loaded = _load_flow_branch(model, load_checkpoint(args.flow_init).params)
        print(f"initialized {loaded} flow-branch tensors from {args.flow_init}")
    if args.resume:
        resume = load_checkpoint(args.resume)
    result = train(
        train_seqs, tc, model=model, out_dir=out, log_fn=print,
        config_text=cfg.to_text(), resume=resume,
    )
    _write_log(out, result.log)
    _echo_config(cfg, out)
    report = evaluate_forecasts(result.model, val_seqs, s=tc.future_jump, step_size=tc.step_size)
    (out / "report.txt").write_text(format_report(report) + "\n", encoding="utf-8")
    print(format_report(report))
    return 0


def cmd_eval(cfg: RunConfig, args) -> int:
    seqs = _load_split(args.data, args.split)
    num_classes = len(seqs[0].spec.classes)
    if args.baseline == "copy-last":
        model = build_model(cfg.train_config(), num_classes)
        model_cfg = cfg
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint (only --baseline copy-last runs without)")
        model, model_cfg, _ = _model_from_checkpoint(cfg, args.checkpoint, num_classes)
    s = args.s if args.s is not None else model_cfg.future_jump
    step_size = args.step_size if args.step_size is not None else model_cfg.step_size
    report = evaluate_forecasts(
        model, seqs, s=s, mode=args.mode, step_size=step_size, sub_step=args.sub_step,
        inpaint=args.inpaint, baseline=args.baseline, max_pairs=model_cfg.unroll_pairs,
    )
    text = format_report(report)
    print(text)
    if args.out:
        out = _require_out(args)
        tag = args.baseline or args.mode
        (out / f"report_{tag}_s{s}.txt").write_text(text + "\n", encoding="utf-8")
        _echo_config(cfg, out)
    return 0


def _colorize(labels: np.ndarray, num_classes: int) -> np.ndarray:
    lut = np.zeros((256, 3), dtype=np.float64)
    for cid in range(num_classes):
        lut[cid] = class_color(cid)
    out = lut[labels]  # VOID stays black
    return out.transpose(2, 0, 1) / 255.0


def cmd_predict(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    seq = read_sequence(args.sequence)
    num_classes = len(seq.spec.classes)
    if args.checkpoint:
        model, model_cfg, _ = _model_from_checkpoint(cfg, args.checkpoint, num_classes)
    else:
        model, model_cfg = build_model(cfg.train_config(), num_classes), cfg
    s = args.s if args.s is not None else model_cfg.future_jump
    t = args.t if args.t is not None else len(seq.frames) - 1 - s
    req = ForecastRequest(
        seq, t=t, s=s, mode=args.mode, step_size=model_cfg.step_size,
        sub_step=args.sub_step, max_pairs=model_cfg.unroll_pairs, inpaint=args.inpaint,
    )
    with no_grad():
        res = forecast(model, req)
    labels = predicted_labels(res)[0]
    write_pgm(out / "prediction.pgm", labels)
    # .flo files hold forward flow; the sampling field is its negation
    write_flo(out / "prediction_flow.flo", -res.flow.data[0])
    vis = np.concatenate(
        [
            seq.frames[t],
            _colorize(labels, num_classes),
            _colorize(seq.labels[t + s], num_classes),
        ],
        axis=2,
    )
    write_ppm(out / "prediction_vis.ppm", vis)
    report = iou(labels, seq.labels[t + s], num_classes, seq.spec.moving_classes)
    text = format_report(report)
    (out / "prediction_report.txt").write_text(text + "\n", encoding="utf-8")
    _echo_config(cfg, out)
    print(f"wrote prediction for frame {t}+{s} to {out}")
    print(text)
    return 0


def cmd_ablate(cfg: RunConfig, args) -> int:
    out = _require_out(args)
    train_seqs = _load_split(args.data, "train")
    val_seqs = _load_split(args.data, "val")
    budget = cfg.ablate_iterations
    quiet = {"log_every": max(budget // 4, 1), "checkpoint_every": 0, "max_iterations": budget}

    print(f"pretraining shared flow branch ({budget} iterations)")
    shared = pretrain_flow(train_seqs, cfg.train_config(**quiet))
    branch_params = {
        k: v
        for k, v in shared.checkpoint.params.items()
        if k.startswith(("flow.", "lstm.", "head."))
    }
    # the recurrence-free cell needs a future head calibrated to raw encoder
    # features rather than recurrent state; its pair phase is identical (same
    # seed, same draws), so the pair encoder stays shared across the grid
    shared_nl = pretrain_flow(train_seqs, cfg.train_config(use_lstm=False, **quiet))
    branch_no_lstm = {
        k: v
        for k, v in shared_nl.checkpoint.params.items()
        if k.startswith(("flow.", "head."))
    }

    def run_cell(name: str, branch=branch_params, **overrides):
        tc = cfg.train_config(**quiet, **overrides)
        model = build_model(tc, len(train_seqs[0].spec.classes))
        _load_flow_branch(model, branch)
        print(f"training cell {name}")
        train(train_seqs, tc, model=model)
        return model, tc

    def iou_of(model, tc, **eval_kw):
        eval_kw.setdefault("s", tc.future_jump)
        eval_kw.setdefault("step_size", tc.step_size)
        report = evaluate_forecasts(model, val_seqs, max_pairs=tc.unroll_pairs, **eval_kw)
        return report.mean_iou

    tables = {}

    # fusion mechanism comparison: the warp should win
    cells = {v: run_cell(f"fuse={v}", fuse_variant=v) for v in ("warp", "concat", "add")}
    scores = {v: iou_of(m, tc) for v, (m, tc) in cells.items()}
    verdict = "PASS" if scores["warp"] >= max(scores.values()) else "FAIL: warp is not the best"
    tables["fusion"] = [f"{v} {s:.4f}" for v, s in scores.items()] + [verdict]

    # recurrence: aggregating history should beat the last pair alone
    no_lstm_model, no_lstm_tc = run_cell("no-lstm", branch=branch_no_lstm, use_lstm=False)
    lstm_score, no_lstm_score = scores["warp"], iou_of(no_lstm_model, no_lstm_tc)
    verdict = "PASS" if lstm_score >= no_lstm_score else "FAIL: recurrence did not help"
    tables["recurrence"] = [
        f"recurrent {lstm_score:.4f}",
        f"last-pair-only {no_lstm_score:.4f}",
        verdict,
    ]

    warp_model, warp_tc = cells["warp"]
    frames = min(len(seq.frames) for seq in val_seqs)

    def usable(s: int) -> bool:
        t = frames - 1 - s
        return t >= max(warp_tc.step_size, default_sub_step(s))

    long_candidates = [s for s in (9, 6, 4, cfg.future_jump, 2) if s > 1 and usable(s)]
    s_long = long_candidates[0] if long_candidates else None

    # step size: a long horizon assembled from small hops should not be worse
    # than fewer larger hops or one big extrapolated step
    if s_long is not None:
        step_rows, step_scores = [], []
        for sub in (1, 3):
            if sub < s_long and s_long % sub == 0:
                score = iou_of(warp_model, warp_tc, s=s_long,
                               mode="auto_regressive", sub_step=sub)
                step_scores.append(score)
                step_rows.append(f"s={s_long} sub_step={sub} {score:.4f}")
        big = iou_of(warp_model, warp_tc, s=s_long, step_size=warp_tc.step_size)
        step_scores.append(big)
        step_rows.append(f"s={s_long} one_big_step {big:.4f}")
        ordered = all(a >= b - 1e-12 for a, b in zip(step_scores, step_scores[1:]))
        tables["step_size"] = step_rows + [
            "PASS" if ordered else "FAIL: smaller sub-steps got worse"
        ]
    else:
        tables["step_size"] = ["skipped: sequences too short for a multi-step horizon"]

    # long horizon: single-step vs auto-regressive
    if s_long is not None:
        single = iou_of(warp_model, warp_tc, s=s_long)
        auto = iou_of(warp_model, warp_tc, s=s_long, mode="auto_regressive")
        tables["mid_term"] = [
            f"s={s_long}",
            f"single_step {single:.4f}",
            f"auto_regressive {auto:.4f}",
            f"difference {abs(single - auto):.4f}",
        ]
    else:
        tables["mid_term"] = ["skipped: sequences too short for a multi-step horizon"]

    # horizon degradation and baseline ordering
    horizon = [f"s={s} {iou_of(warp_model, warp_tc, s=s):.4f}" for s in (1, 3, 9) if usable(s)]
    trained = scores["warp"]
    warp_last = iou_of(warp_model, warp_tc, baseline="warp-last")
    copy_last = iou_of(warp_model, warp_tc, baseline="copy-last")
    ordering = "PASS" if trained > warp_last > copy_last else "FAIL: baseline ordering broken"
    tables["horizon"] = horizon + [
        f"trained {trained:.4f}",
        f"warp-last {warp_last:.4f}",
        f"copy-last {copy_last:.4f}",
        ordering,
    ]

    for name, rows in tables.items():
        path = out / f"table_{name}.txt"
        path.write_text("\n".join(rows) + "\n", encoding="utf-8")
        print(f"--- {name}")
        for row in rows:
            print(row)
    _echo_config(cfg, out)
    return 0


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain-flow": cmd_pretrain_flow,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "predict": cmd_predict,
}


def main(argv=None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = _merge_config(args)
        return _COMMANDS[args.command](cfg, args)
    except UsageError as e:  # includes ConfigError/ShapeError/GenerationError
        print(f"error: {e}", file=sys.stderr)
        return 1
    except FormatError as e:  # includes DataError
        print(f"error: {e}", file=sys.stderr)
        return 2
    except OSError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DivergenceError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
