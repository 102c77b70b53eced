"""Command-line entry point: ``loza <command> [options]``.

Exit codes: 0 success, 1 contract or usage error, 2 I/O or integrity error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .attention import SparsePattern
from .checkpoint import Checkpoint, IncompatibilityError, IntegrityError, load_checkpoint, read_checkpoint, save_checkpoint
from .config import ExperimentConfig, load_config
from .costmodel import (
    AssignmentError,
    cost_report,
    head_level_sharding,
    layer_level_sharding,
    rank_balance,
)
from .data import BOS, DecodeError, byte_tokenize, detokenize
from .model import ConfigError, Full, build_model
from .numerics import ContractError
from .pipeline import (
    CalibrationResult,
    TaskStream,
    _stream_seed,
    base_training,
    build_eval_set,
    calibrate,
    calibration_data,
    evaluate,
    interleaved_pattern,
    rewind_and_train,
    run_pilot,
    sparse_count,
    sparsify,
    with_modes,
)
from .runtime import decode_step, prefill

log = logging.getLogger("loza")

CSV_HEADER = ["context_len", "phase", "mode_mix", "attention_flops", "kv_rows", "ratio_vs_full"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="experiment config (JSON)")
    p.add_argument("--checkpoint", help="input checkpoint")
    p.add_argument("--out", help="output path")
    p.add_argument("--seed", type=int, default=None, help="seed for every random choice (default: config)")


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="loza", description="Layer-wise streaming sparse attention experiments.")
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model; also writes the rewind checkpoint")
    _common(p)
    p.add_argument("--rewind-out", help="where to write the rewind checkpoint (default: <out>.rewind)")

    p = sub.add_parser("calibrate", help="fit per-layer gates on a frozen model")
    _common(p)

    p = sub.add_parser("sparsify", help="switch the lowest-gate layers to streaming sparse attention")
    _common(p)
    p.add_argument("--calibration", help="calibration result JSON from `calibrate`")
    p.add_argument("--ratio", type=float, default=None)

    p = sub.add_parser("rewind-train", help="restore a rewind checkpoint, sparsify, retrain")
    _common(p)
    p.add_argument("--layers", help="comma-separated layer indices to make sparse")
    p.add_argument("--calibration", help="take the layers from a calibration result instead")
    p.add_argument("--ratio", type=float, default=None)
    p.add_argument("--steps", type=int, default=None)

    p = sub.add_parser("eval", help="evaluate a checkpoint on the long and short tasks")
    _common(p)

    p = sub.add_parser("run-pilot", help="full pilot protocol over seeds; writes a JSON report")
    _common(p)

    p = sub.add_parser("bench-cost", help="analytic prefill/decode cost table and rank-balance study")
    _common(p)
    p.add_argument("--summary", help="rank-balance JSON (default: <out>.balance.json)")

    p = sub.add_parser("decode-demo", help="greedy decode, printing per-step KV rows read as TSV")
    _common(p)
    p.add_argument("--prompt", default="the cat sat on ")
    p.add_argument("--steps", type=int, default=32)
    p.add_argument("--layers", help="sparse layers when no checkpoint is given (default: interleaved)")
    return ap


# ---------------------------------------------------------------------------
# helpers


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg = replace(cfg, model=replace(cfg.model, seed=args.seed))
    return cfg


def _need(args, name: str, why: str) -> str:
    val = getattr(args, name.replace("-", "_"))
    if val is None:
        raise ContractError(f"{args.command} needs --{name} ({why})")
    return val


def _write_text(path: Optional[str], text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        Path(path).write_text(text)


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _parse_layers(s: str) -> list[int]:
    try:
        return [int(x) for x in s.split(",") if x.strip()]
    except ValueError as e:
        raise ContractError(f"--layers must be comma-separated integers, got {s!r}") from e


def _load_calibration(path: str) -> CalibrationResult:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as e:
            raise ContractError(f"{path}: not a calibration result ({e})") from e
    return CalibrationResult.from_dict(doc)


# ---------------------------------------------------------------------------
# commands


def cmd_train(args) -> int:
    cfg = _config(args)
    out = _need(args, "out", "path for the trained checkpoint")
    m, w0 = base_training(cfg, cfg.model.seed)
    save_checkpoint(m, out, step=cfg.train.steps, seed=cfg.model.seed)
    save_checkpoint(w0, args.rewind_out or out + ".rewind")
    log.info("wrote %s and rewind checkpoint (step %d)", out, cfg.train.rewind_step)
    return 0


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    m = load_checkpoint(_need(args, "checkpoint", "the trained model"), expect=cfg.model)
    cc = cfg.calibrate
    data = calibration_data(cfg, cfg.model.seed)
    res = calibrate(m, data, cc.steps, cc.lr, cc.l1_lambda, cfg.pattern, cc.loss, cfg.train.answer_weight)
    _write_text(args.out, _dump(res.to_dict()))
    return 0


def cmd_sparsify(args) -> int:
    cfg = _config(args)
    cal_path = _need(args, "calibration", "run `calibrate` first; sparsify ranks layers by its gates")
    m = load_checkpoint(_need(args, "checkpoint", "the model to sparsify"), expect=cfg.model)
    cal = _load_calibration(cal_path)
    if len(cal.alphas) != m.cfg.n_layers:
        raise ContractError(f"calibration has {len(cal.alphas)} gates for a {m.cfg.n_layers}-layer model")
    ratio = args.ratio if args.ratio is not None else cfg.pilot.ratio
    sm = sparsify(m, cal.ranking, ratio, cfg.pattern)
    save_checkpoint(sm, _need(args, "out", "path for the sparsified checkpoint"), sparse_layers=sm.sparse_layers())
    log.info("sparse layers: %s", sm.sparse_layers())
    return 0


def cmd_rewind_train(args) -> int:
    cfg = _config(args)
    w0 = read_checkpoint(_need(args, "checkpoint", "the rewind checkpoint written by `train`"), expect=cfg.model)
    if args.layers is not None:
        sel = _parse_layers(args.layers)
    elif args.calibration is not None:
        cal = _load_calibration(args.calibration)
        ratio = args.ratio if args.ratio is not None else cfg.pilot.ratio
        sel = cal.ranking[: sparse_count(ratio, cfg.model.n_layers)]
    else:
        raise ContractError("rewind-train needs --layers or --calibration to choose the sparse layers")
    tc = cfg.train
    steps = args.steps
    if steps is None:
        steps = cfg.pilot.sparse_train_steps if cfg.pilot.sparse_train_steps is not None else tc.steps - tc.rewind_step
    stream = TaskStream(_stream_seed(cfg.model.seed, 4), tc.lengths, tc.batch_size, tc.min_distance)
    m = rewind_and_train(w0, sel, stream, steps, tc.lr, cfg.pattern, tc.answer_weight, expect=cfg.model)
    save_checkpoint(m, _need(args, "out", "path for the retrained checkpoint"), sparse_layers=sorted(sel))
    return 0


def cmd_eval(args) -> int:
    cfg = _config(args)
    m = load_checkpoint(_need(args, "checkpoint", "the model to evaluate"), expect=cfg.model)
    pc = cfg.pilot
    ev = build_eval_set(cfg.pattern, max(cfg.train.lengths), pc.eval_long, pc.eval_short, _stream_seed(cfg.model.seed, 3))
    res = evaluate(m, ev)
    res["sparse_layers"] = m.sparse_layers()
    _write_text(args.out, _dump(res))
    return 0


def cmd_run_pilot(args) -> int:
    cfg = load_config(args.config)
    seeds = [args.seed] if args.seed is not None else cfg.pilot.seeds
    report = run_pilot(cfg, seeds)
    _write_text(args.out, _dump(report.to_dict()))
    return 0


def bench_rows(cfg: ExperimentConfig) -> list[dict]:
    bc = cfg.bench
    p = cfg.bench_pattern
    L = bc.n_layers
    k = sparse_count(bc.sparse_ratio, L)
    # cost depends only on how many layers are sparse, not which
    mixes = {
        "all_full": ["full"] * L,
        f"sparse_{k}of{L}": ["sparse" if i < k else "full" for i in range(L)],
        "all_sparse": ["sparse"] * L,
    }
    rows = []
    for n in bc.context_lens:
        for phase in ("prefill", "decode"):
            for name, modes in mixes.items():
                r = cost_report(n, modes, p, phase, bc.n_heads, bc.head_dim)
                rows.append(
                    {
                        "context_len": n,
                        "phase": phase,
                        "mode_mix": name,
                        "attention_flops": r.attention_flops,
                        "kv_rows": r.kv_rows,
                        "ratio_vs_full": f"{r.attention_ratio:.6f}",
                    }
                )
    return rows


def balance_summary(cfg: ExperimentConfig) -> dict:
    bc = cfg.bench
    p = cfg.bench_pattern
    L, H, R, n = bc.n_layers, bc.n_heads, bc.n_ranks, bc.balance_context
    k = sparse_count(bc.sparse_ratio, L)
    layer_modes = ["sparse" if i < k else "full" for i in range(L)]
    layer = rank_balance(layer_level_sharding(layer_modes, H, R), n, p, bc.head_dim)
    # the same number of sparse heads, but split by head and grouped by pattern
    head_modes = [["sparse" if h < H * k // L else "full" for h in range(H)] for _ in range(L)]
    head = rank_balance(head_level_sharding(head_modes, R, adversarial=True), n, p, bc.head_dim)
    return {
        "context_len": n,
        "n_ranks": R,
        "pattern": p.to_dict(),
        "layer_level": layer,
        "head_level_adversarial": head,
    }


def cmd_bench_cost(args) -> int:
    cfg = load_config(args.config)
    rows = bench_rows(cfg)
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=CSV_HEADER, lineterminator="\n")
    w.writeheader()
    w.writerows(rows)
    _write_text(args.out, buf.getvalue())
    summary = _dump(balance_summary(cfg))
    if args.summary or args.out:
        Path(args.summary or args.out + ".balance.json").write_text(summary)
    else:
        sys.stdout.write(summary)
    return 0


def cmd_decode_demo(args) -> int:
    cfg = _config(args)
    if args.checkpoint:
        m = load_checkpoint(args.checkpoint, expect=cfg.model)
    else:
        layers = _parse_layers(args.layers) if args.layers else interleaved_pattern(cfg.model.n_layers)
        m = with_modes(build_model(cfg.model), layers, cfg.pattern)
    prompt = [BOS] + byte_tokenize(args.prompt)
    if len(prompt) + args.steps > m.cfg.max_seq_len:
        raise ContractError(f"prompt ({len(prompt)}) + steps ({args.steps}) exceeds max_seq_len {m.cfg.max_seq_len}")
    out = open(args.out, "w") if args.out else sys.stdout
    try:
        out.write("position\ttoken\trows_read_full\trows_read_sparse\n")
        state, logits = prefill(m, prompt)
        for _ in range(args.steps):
            tok = int(np.argmax(logits))
            pos = state.pos
            logits = decode_step(m, state, tok)
            # baseline: what the all-full model reads at this position
            full_rows = (pos + 1) * m.cfg.n_layers
            out.write(f"{pos}\t{detokenize([tok])!r}\t{full_rows}\t{sum(state.last_rows_read)}\n")
            out.flush()
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


COMMANDS = {
    "train": cmd_train,
    "calibrate": cmd_calibrate,
    "sparsify": cmd_sparsify,
    "rewind-train": cmd_rewind_train,
    "eval": cmd_eval,
    "run-pilot": cmd_run_pilot,
    "bench-cost": cmd_bench_cost,
    "decode-demo": cmd_decode_demo,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(e, file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return COMMANDS[args.command](args)
    except (IntegrityError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, ConfigError, IncompatibilityError, AssignmentError, DecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
