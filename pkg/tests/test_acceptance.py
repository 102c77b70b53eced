"""Acceptance criteria 1-13, each at its stated tolerance.

Every test prints one PASS/FAIL line, and the terminal summary repeats them
in order. Criteria 5, 6 and 7 train models and take tens of minutes on one
CPU; they carry the ``slow`` marker.

    pytest tests/test_acceptance.py -v
"""

import hashlib
import subprocess
import sys
import time
from contextlib import contextmanager
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from loza.attention import (
    SparsePattern,
    blended_attention,
    build_streaming_mask,
    full_attention,
    streaming_sparse_attention,
)
from loza.checkpoint import Checkpoint
from loza.cli import main as cli_main
from loza.config import ExperimentConfig
from loza.costmodel import (
    decode_kv_reads,
    end_to_end_ratio,
    head_level_sharding,
    layer_level_sharding,
    non_attention_for_share,
    prefill_attention_flops,
    rank_balance,
)
from loza.data import passkey_batch
from loza.model import Blended, Full, ModelConfig, Sparse, build_model, forward, lm_loss
from loza.numerics import Graph, Tensor, backward
from loza.pipeline import (
    Batch,
    TaskStream,
    _stream_seed,
    base_training,
    build_eval_set,
    calibrate,
    calibration_data,
    evaluate,
    rewind_and_train,
    run_pilot,
    sparsify,
    train,
)
from loza.runtime import SsaKvCache, decode_step, prefill

ROOT = Path(__file__).resolve().parents[1]
WIDE = SparsePattern(1, 7, 128)


@contextmanager
def criterion(n: int, title: str):
    info = {"detail": ""}
    try:
        yield info
    except BaseException as e:
        detail = f"{info['detail']} [{type(e).__name__}: {str(e).splitlines()[0] if str(e) else ''}]".strip()
        ACCEPTANCE_LINES.append((n, title, False, detail))
        print(f"\n[FAIL] {n}. {title}: {detail}")
        raise
    ACCEPTANCE_LINES.append((n, title, True, info["detail"]))
    print(f"\n[PASS] {n}. {title}: {info['detail']}")


def params_digest(m, skip=()) -> str:
    h = hashlib.sha256()
    for k in sorted(m.params):
        if k not in skip:
            h.update(k.encode())
            h.update(m[k].data.tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------


def test_01_sparse_equals_full_within_window():
    with criterion(1, "oracle equivalence within the window") as c:
        t0 = time.perf_counter()
        rng = np.random.default_rng(1)
        worst = 0.0
        for trial in range(100):
            if trial % 2 == 0:
                p = WIDE
            else:
                p = SparsePattern(int(rng.integers(0, 3)), int(rng.integers(1, 5)), int(rng.integers(1, 33)))
            n = int(rng.integers(1, p.window_tokens() + 1))
            q, k, v = (Tensor(rng.standard_normal((n, 2, 8))) for _ in range(3))
            ref = full_attention(q, k, v).data
            for method in ("mask", "blocked"):
                out = streaming_sparse_attention(q, k, v, p, method=method).data
                worst = max(worst, float(np.abs(out - ref).max()))
        elapsed = time.perf_counter() - t0
        c["detail"] = f"max |SSA - full| = {worst:.2e} over 100 trials, {elapsed:.1f}s"
        assert worst < 1e-12
        assert elapsed < 10


def test_02_mask_rule_exhaustive():
    with criterion(2, "mask rule, exhaustive") as c:
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(20):
            p = SparsePattern(int(rng.integers(0, 4)), int(rng.integers(1, 6)), int(rng.integers(1, 65)))
            n = int(rng.integers(1, 513))
            i = np.arange(n)[:, None]
            j = np.arange(n)[None, :]
            b, s, l = p.block_size, p.sink_blocks, p.local_blocks
            oracle = (j <= i) & ((j // b < s) | (i // b - j // b < l))
            mask = build_streaming_mask(n, p)
            assert np.array_equal(mask.dense(), oracle)
            pointwise = np.array([[mask.allowed(a, z) for z in range(n)] for a in range(n)])
            assert np.array_equal(pointwise, oracle)
            assert np.array_equal(mask.row_counts(), oracle.sum(1))
            checked += n * n
        c["detail"] = f"{checked} (i, j) pairs over 20 patterns, exact"


def test_03_blend_endpoints_and_gate_gradient():
    with criterion(3, "blend endpoints and gate gradient") as c:
        rng = np.random.default_rng(3)
        p = SparsePattern(1, 1, 4)
        q, k, v = (Tensor(rng.standard_normal((20, 2, 8))) for _ in range(3))
        assert np.array_equal(blended_attention(q, k, v, p, 1.0).data, full_attention(q, k, v).data)
        assert np.array_equal(blended_attention(q, k, v, p, 0.0).data, streaming_sparse_attention(q, k, v, p).data)

        cfg = ModelConfig(n_layers=2, d_model=16, n_heads=2, head_dim=8, ffn_dim=32, max_seq_len=32, seed=3)
        m = build_model(cfg)
        for name, t in m.params.items():
            if not name.endswith(("ln1", "ln2", "ln_f")):
                t.data *= 25.0
        toks = rng.integers(0, cfg.vocab_size, size=(2, 24))
        # model-level endpoints: a saturated gate is exactly the full / sparse layer
        m.modes = [Blended(p, Tensor(800.0)), Full()]
        ref_full = forward(m, toks).data
        m.modes = [Full(), Full()]
        assert np.array_equal(ref_full, forward(m, toks).data)
        m.modes = [Blended(p, Tensor(-800.0)), Full()]
        ref_sparse = forward(m, toks).data
        m.modes = [Sparse(p), Full()]
        assert np.array_equal(ref_sparse, forward(m, toks).data)

        # d loss / d alpha: tape gradient (chain rule through the sigmoid) vs central differences in alpha
        m.set_trainable(False)
        worst = 0.0
        for a0, a1 in ((0.3, 0.7), (0.5, 0.2), (0.85, 0.45)):
            gates = [Tensor(np.log(a / (1 - a)), requires_grad=True) for a in (a0, a1)]
            m.modes = [Blended(p, g) for g in gates]
            with Graph() as g:
                loss = lm_loss(m, toks)
            backward(loss, g)
            for gate, a in zip(gates, (a0, a1)):
                tape = gate.grad / (a * (1 - a))
                raw = gate.data.copy()
                h = 1e-5
                vals = []
                for aa in (a + h, a - h):
                    gate.data = np.array(np.log(aa / (1 - aa)))
                    vals.append(lm_loss(m, toks).item())
                gate.data = raw
                num = (vals[0] - vals[1]) / (2 * h)
                err = abs(tape - num) / max(abs(tape), abs(num), 1e-12)
                assert abs(num) > 1e-6
                worst = max(worst, float(err))
        c["detail"] = f"endpoints bitwise; dloss/dalpha rel err {worst:.1e}"
        assert worst < 1e-4


def test_04_calibration_freezes_backbone():
    with criterion(4, "calibration freezes the backbone") as c:
        cfg = ModelConfig(n_layers=3, d_model=16, n_heads=2, head_dim=8, ffn_dim=32, max_seq_len=40, seed=4)
        m = build_model(cfg)
        stream = TaskStream(4, [32, 40], 4, 4)
        train(m, stream, 10, 3e-3, 2.0)
        before = params_digest(m)
        moved = []
        for loss in ("lm", "task", "distill"):
            res = calibrate(m, stream.take(2), steps=8, lr=0.1, pattern=SparsePattern(1, 1, 4), loss=loss)
            moved.append(max(abs(a - 0.5) for a in res.alphas))
            assert params_digest(m) == before
        c["detail"] = f"SHA-256 {before[:12]} unchanged; max |alpha - 0.5| per loss {[f'{x:.3f}' for x in moved]}"
        assert min(moved) > 0


@pytest.mark.slow
def test_05_calibration_finds_the_long_range_layer():
    # layers 0, 1, 3 are trained sparse, so only layer 2 can carry out-of-window retrieval
    with criterion(5, "calibration ranks the long-range layer first") as c:
        t0 = time.perf_counter()
        p = SparsePattern(1, 1, 8)
        hits, tops = 0, []
        for seed in range(5):
            cfg = ModelConfig(n_layers=4, d_model=32, n_heads=2, head_dim=16, ffn_dim=64, max_seq_len=64, seed=seed)
            m = build_model(cfg)
            m.modes = [Sparse(p), Sparse(p), Full(), Sparse(p)]
            train(m, TaskStream(seed + 100, [48, 64], 16, 4), 600, 3e-3, 2.0)
            m.modes = [Full()] * 4
            rng = np.random.default_rng(seed + 300)
            window, sink_end = p.window_tokens(), p.sink_blocks * p.block_size
            data = [Batch(*passkey_batch(rng, 16, 64, window + 1, 64 - 4 - sink_end, min_value_pos=sink_end)) for _ in range(4)]
            res = calibrate(m, data, 60, 0.05, pattern=p, loss="task")
            top = int(np.argmax(res.alphas))
            tops.append(top)
            hits += top == 2
        elapsed = time.perf_counter() - t0
        c["detail"] = f"argmax alpha per seed {tops}: {hits}/5 on layer 2, {elapsed:.0f}s"
        assert hits >= 4
        assert elapsed < 600


@pytest.fixture(scope="module")
def pilot_report():
    t0 = time.perf_counter()
    report = run_pilot(ExperimentConfig(), [0, 1, 2])
    return report, time.perf_counter() - t0


@pytest.mark.slow
def test_06_pilot_orderings(pilot_report):
    with criterion(6, "pilot orderings over 3 seeds") as c:
        report, elapsed = pilot_report
        acc = {v: report[v]["long_task_acc"] for v in report.metrics}
        short = {v: report[v]["short_task_acc"] for v in report.metrics}
        per_seed = {r["seed"]: {v: round(r[v]["long_task_acc"], 3) for v in report.metrics} for r in report.per_seed}
        print("\nper-seed long_task_acc:", per_seed)
        c["detail"] = (
            f"mean long acc calibrated {acc['calibrated']:.3f} vs interleaved {acc['interleaved']:.3f}; "
            f"interleaved+training {acc['interleaved_trained']:.3f}; "
            f"short acc calibrated {short['calibrated']:.3f} vs full {short['full']:.3f}; {elapsed:.0f}s"
        )
        assert acc["calibrated"] > acc["interleaved"]
        assert acc["interleaved_trained"] > acc["interleaved"]
        assert abs(short["calibrated"] - short["full"]) <= 0.05
        assert elapsed < 3600


@pytest.mark.slow
def test_07_rewind_pipeline():
    with criterion(7, "lottery-ticket rewind") as c:
        cfg = ExperimentConfig()
        cfg = replace(cfg, pilot=replace(cfg.pilot, ratio=0.75))
        tc, cc = cfg.train, cfg.calibrate
        seed = 0
        m, w0 = base_training(cfg, seed)
        stream = TaskStream(_stream_seed(seed, 4), tc.lengths, tc.batch_size, tc.min_distance)
        r0 = rewind_and_train(w0, [1, 2], stream, 0, tc.lr, cfg.pattern)
        assert all(r0[k].data.tobytes() == w0.params[k].tobytes() for k in w0.params)

        ev = build_eval_set(cfg.pattern, max(tc.lengths), cfg.pilot.eval_long, cfg.pilot.eval_short, _stream_seed(seed, 3))
        cal = calibrate(m, calibration_data(cfg, seed), cc.steps, cc.lr, cc.l1_lambda, cfg.pattern, cc.loss, tc.answer_weight)
        sm = sparsify(m, cal.ranking, cfg.pilot.ratio, cfg.pattern)
        before = evaluate(sm, ev)["long_task_acc"]
        final = rewind_and_train(w0, sm.sparse_layers(), stream, tc.steps - tc.rewind_step, tc.lr, cfg.pattern, tc.answer_weight)
        after = evaluate(final, ev)["long_task_acc"]
        c["detail"] = (
            f"steps=0 rewind bitwise; sparse layers {sm.sparse_layers()}: "
            f"long acc {before:.3f} sparsified -> {after:.3f} rewound and retrained"
        )
        assert after > before


def test_08_decode_parity_and_cache_bound():
    with criterion(8, "decode parity and cache bound") as c:
        p = SparsePattern(1, 3, 16)
        worst, peak = 0.0, 0
        for modes in ([Full()] * 4, [Full(), Sparse(p), Full(), Sparse(p)]):
            cfg = ModelConfig(n_layers=4, d_model=32, n_heads=2, head_dim=16, ffn_dim=64, max_seq_len=128, seed=8)
            m = build_model(cfg)
            for k, t in m.params.items():
                if not k.endswith(("ln1", "ln2", "ln_f")):
                    t.data *= 10.0
            m.modes = list(modes)
            prompt = list(np.random.default_rng(8).integers(0, 256, size=40))
            state, logits = prefill(m, prompt)
            got, seq = [logits], list(prompt)
            for _ in range(64):
                tok = int(np.argmax(logits))
                seq.append(tok)
                logits = decode_step(m, state, tok)
                got.append(logits)
                for cache in state.caches:
                    if isinstance(cache, SsaKvCache):
                        peak = max(peak, cache.rows)
                        assert cache.rows <= p.window_tokens()
            ref = forward(m, seq).data[len(prompt) - 1 :]
            worst = max(worst, float(np.abs(np.stack(got) - ref).max()))
        c["detail"] = f"max |decode - forward| = {worst:.1e}; peak sparse cache {peak} <= {p.window_tokens()} rows"
        assert worst < 1e-10


def test_09_decode_cost_claim():
    with criterion(9, "decode KV reads at 128K") as c:
        t = 131072
        sparse, full = decode_kv_reads(t, "sparse", WIDE), decode_kv_reads(t, "full", WIDE)
        reduction = 1 - sparse / full
        assert sparse == 1024 and full == t
        assert reduction >= 0.90

        # instrumented runtime: a one-layer sparse model decoding at position 131072
        cfg = ModelConfig(n_layers=1, d_model=8, n_heads=1, head_dim=8, ffn_dim=8, max_seq_len=t, seed=9)
        m = build_model(cfg)
        m.modes = [Sparse(WIDE)]
        prompt = np.random.default_rng(9).integers(0, 256, size=t - 1)
        state, logits = prefill(m, prompt)
        decode_step(m, state, int(np.argmax(logits)))
        measured = state.last_rows_read[0]
        c["detail"] = f"sparse {sparse} vs full {full} rows, reduction {reduction:.2%}; runtime read {measured}"
        assert measured == sparse


def test_10_prefill_and_end_to_end_cost():
    with criterion(10, "prefill FLOPs and end-to-end decode at 256K") as c:
        n = 262144
        modes = ["sparse", "full"] * 4
        ratio = prefill_attention_flops(n, modes, WIDE)["total"] / prefill_attention_flops(n, ["full"] * 8, WIDE)["total"]
        e2e = []
        for share in (0.0, 0.1, 0.2, 0.3):
            c_non = non_attention_for_share(share, n, "decode", 8, 64)
            e2e.append(end_to_end_ratio(n, modes, WIDE, "decode", 8, 64, c_non))
        c["detail"] = f"prefill attention ratio {ratio:.4f}; decode ratio at non-attention share 0..30% {[round(x, 4) for x in e2e]}"
        assert ratio <= 0.51
        assert max(e2e) < 0.70


def test_11_rank_balance():
    with criterion(11, "rank balance") as c:
        n = 65536
        layer = rank_balance(layer_level_sharding(["sparse", "full"] * 4, n_heads=8, n_ranks=2), n, WIDE, 64)
        head_modes = [["full"] * 4 + ["sparse"] * 4 for _ in range(8)]
        head = rank_balance(head_level_sharding(head_modes, 2, adversarial=True), n, WIDE, 64)
        c["detail"] = f"layer-level CV {layer['cv']}; adversarial head-level max/mean {head['max_over_mean']:.3f}"
        assert layer["cv"] == 0.0
        assert head["max_over_mean"] > 1.5


def test_12_numerics_suite():
    with criterion(12, "gradient checks and suite runtime") as c:
        t0 = time.perf_counter()
        unit = sorted(str(p) for p in (ROOT / "tests").glob("test_*.py") if p.name != "test_acceptance.py")
        proc = subprocess.run(
            [sys.executable, "-m", "pytest", "-q", "-p", "no:cacheprovider", *unit],
            cwd=ROOT, capture_output=True, text=True,
        )
        elapsed = time.perf_counter() - t0
        tail = proc.stdout.strip().splitlines()[-1] if proc.stdout.strip() else proc.stderr[-200:]
        c["detail"] = f"unit suite incl. every op gradient check: {tail} ({elapsed:.0f}s)"
        assert proc.returncode == 0, proc.stdout[-2000:]
        assert elapsed < 300


def test_13_persistence_and_determinism(tmp_path):
    with criterion(13, "checkpoint round-trip and run-pilot determinism") as c:
        m = build_model(ModelConfig(n_layers=2, d_model=16, n_heads=2, head_dim=8, ffn_dim=32, max_seq_len=32, seed=13))
        m.modes[1] = Sparse(SparsePattern(1, 2, 4))
        raw = Checkpoint.from_model(m).to_bytes()
        back = Checkpoint.from_bytes(raw)
        assert back.to_bytes() == raw
        assert all(back.params[k].tobytes() == m[k].data.tobytes() for k in m.params)

        cfg = str(ROOT / "configs" / "tiny.json")
        a, b = tmp_path / "a.json", tmp_path / "b.json"
        assert cli_main(["run-pilot", "--config", cfg, "--seed", "7", "--out", str(a)]) == 0
        assert cli_main(["run-pilot", "--config", cfg, "--seed", "7", "--out", str(b)]) == 0
        same = a.read_bytes() == b.read_bytes()
        c["detail"] = f"round-trip bitwise ({len(raw)} bytes); run-pilot reports identical: {same}"
        assert same


if __name__ == "__main__":
    sys.exit(subprocess.call([sys.executable, "-m", "pytest", "-v", __file__]))
