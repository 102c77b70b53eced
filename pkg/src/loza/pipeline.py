"""Calibrate gates, pick layers to sparsify, rewind and retrain, and the pilot protocol."""

from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Optional, Sequence, Union

import numpy as np

from .attention import SparsePattern
from .checkpoint import Checkpoint, IncompatibilityError
from .config import ExperimentConfig, TrainConfig
from .data import gen_grammar, passkey_batch, TaskSpec
from .model import (
    Blended,
    Full,
    Model,
    ModelConfig,
    Sparse,
    build_model,
    forward,
    lm_loss,
)
from .numerics import ContractError, Graph, Tensor, add, backward, cross_entropy, mse, scale, sigmoid
from .optim import Adam

log = logging.getLogger(__name__)

GATE_LIMIT = 30.0  # |raw gate| bound; keeps sigmoid strictly inside (0, 1) in float64


# ---------------------------------------------------------------------------
# data plumbing


@dataclass
class Batch:
    tokens: np.ndarray  # [B, n]
    answers: Optional[np.ndarray] = None  # [B] answer positions, for the weighted task loss


def as_batch(x: Union[Batch, np.ndarray]) -> Batch:
    return x if isinstance(x, Batch) else Batch(np.atleast_2d(np.asarray(x, dtype=np.int64)))


class TaskStream:
    """Endless deterministic stream of passkey batches with grammar filler.

    Each batch draws its length from ``lengths``; distances are uniform over
    everything the length allows, so short- and long-range instances mix.
    """

    def __init__(self, seed: int, lengths: Sequence[int], batch_size: int, min_distance: int = 4):
        self.rng = np.random.default_rng(seed)
        self.lengths = list(lengths)
        self.batch_size = batch_size
        self.min_distance = min_distance

    def next(self, length: Optional[int] = None) -> Batch:
        n = int(length if length is not None else self.lengths[self.rng.integers(len(self.lengths))])
        toks, ans = passkey_batch(self.rng, self.batch_size, n, self.min_distance, n - 4)
        return Batch(toks, ans)

    def take(self, k: int, length: Optional[int] = None) -> list[Batch]:
        return [self.next(length) for _ in range(k)]


def task_loss(m: Model, batch: Batch, answer_weight: float) -> Tensor:
    """Next-token cross-entropy plus ``answer_weight`` times the cross-entropy at answer positions."""
    toks = batch.tokens
    logits = forward(m, toks[:, :-1])
    loss = cross_entropy(logits, toks[:, 1:])
    if answer_weight and batch.answers is not None:
        w = np.zeros(toks[:, 1:].shape)
        w[np.arange(toks.shape[0]), batch.answers - 1] = 1.0
        loss = add(loss, scale(cross_entropy(logits, toks[:, 1:], w), answer_weight))
    return loss


def train(
    m: Model,
    stream: TaskStream,
    steps: int,
    lr: float,
    answer_weight: float = 2.0,
    opt: Optional[Adam] = None,
    on_step: Optional[Callable[[int, float], None]] = None,
) -> Adam:
    """Train every parameter of ``m`` in its current modes. Returns the optimizer for resumption."""
    m.set_trainable(True)
    opt = opt or Adam(m.params.values(), lr=lr)
    for step in range(steps):
        batch = stream.next()
        with Graph() as g:
            loss = task_loss(m, batch, answer_weight)
        backward(loss, g)
        opt.step()
        opt.zero_grad()
        if on_step is not None:
            on_step(step, loss.item())
    _check_finite(m)
    return opt


def _check_finite(m: Model) -> None:
    for k, t in m.params.items():
        if not np.isfinite(t.data).all():
            raise FloatingPointError(f"parameter {k} became non-finite")


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class EvalSet:
    long_tokens: np.ndarray
    long_answers: np.ndarray
    short_tokens: np.ndarray


def build_eval_set(pattern: SparsePattern, seq_len: int, n_long: int, n_short: int, seed: int) -> EvalSet:
    """Long instances put the key beyond the streaming window and outside the sinks."""
    rng = np.random.default_rng(seed)
    window = pattern.window_tokens()
    lo = window + 1
    sink_end = pattern.sink_blocks * pattern.block_size
    hi = seq_len - 4 - sink_end
    if lo > hi:
        raise ContractError(f"seq_len {seq_len} leaves no room for out-of-window passkeys with window {window}")
    toks, ans = passkey_batch(rng, n_long, seq_len, lo, hi, min_value_pos=max(2, sink_end))
    short_len = min(window, seq_len)
    short = np.stack([gen_grammar(TaskSpec("grammar", short_len), rng).tokens for _ in range(n_short)])
    return EvalSet(toks, ans, short)


def evaluate(m: Model, ev: EvalSet) -> dict[str, float]:
    long_logits = forward(m, ev.long_tokens[:, :-1]).data
    rows = np.arange(ev.long_tokens.shape[0])
    pred = long_logits[rows, ev.long_answers - 1].argmax(-1)
    long_acc = float((pred == ev.long_tokens[rows, ev.long_answers]).mean())
    lm = cross_entropy(Tensor(long_logits), ev.long_tokens[:, 1:]).item()
    short_logits = forward(m, ev.short_tokens[:, :-1]).data
    short_acc = float((short_logits.argmax(-1) == ev.short_tokens[:, 1:]).mean())
    return {"lm_loss": lm, "short_task_acc": short_acc, "long_task_acc": long_acc}


# ---------------------------------------------------------------------------
# calibration


@dataclass
class CalibrationResult:
    alphas: list[float]
    ranking: list[int]
    steps_run: int
    final_loss: float

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationResult":
        try:
            res = cls([float(a) for a in d["alphas"]], [int(i) for i in d["ranking"]], int(d["steps_run"]), float(d["final_loss"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ContractError(f"malformed calibration result: {e}") from e
        if sorted(res.ranking) != list(range(len(res.alphas))):
            raise ContractError("calibration ranking is not a permutation of the layer indices")
        return res


def rank_layers(alphas: Sequence[float]) -> list[int]:
    """Layer indices by ascending gate value; ties go to the lower index."""
    return sorted(range(len(alphas)), key=lambda i: (alphas[i], i))


def calibrate(
    m: Model,
    data: Iterable[Union[Batch, np.ndarray]],
    steps: int,
    lr: float,
    l1_lambda: float = 0.0,
    pattern: Optional[SparsePattern] = None,
    loss: str = "lm",
    answer_weight: float = 2.0,
) -> CalibrationResult:
    """Train one gate per layer with the backbone frozen.

    Every layer becomes ``Blended`` with its gate at 0 (alpha = 0.5); only the
    gates receive gradients. ``loss`` is ``lm`` (next-token cross-entropy),
    ``task`` (the weighted training loss) or ``distill`` (logit MSE against the
    all-full model). Modes are restored to ``Full`` before returning.
    """
    batches = [as_batch(b) for b in data]
    if steps <= 0:
        raise ContractError(f"calibration needs steps > 0, got {steps}")
    if not batches:
        raise ContractError("calibration data is empty")
    if any(not isinstance(md, Full) for md in m.modes):
        raise ContractError("calibrate expects a model with every layer in full mode")
    if loss not in ("lm", "task", "distill"):
        raise ContractError(f"unknown calibration loss {loss!r}")
    pattern = pattern or SparsePattern()

    teacher = None
    if loss == "distill":
        teacher = [forward(m, b.tokens[:, :-1]).data for b in batches]

    flags = {k: t.requires_grad for k, t in m.params.items()}
    m.set_trainable(False)
    gates = [Tensor(0.0, requires_grad=True, name=f"gate{i}") for i in range(m.cfg.n_layers)]
    m.modes = [Blended(pattern, g) for g in gates]
    opt = Adam(gates, lr=lr, clip=0.0)
    last = math.nan
    try:
        for step in range(steps):
            i = step % len(batches)
            b = batches[i]
            with Graph() as g:
                if loss == "lm":
                    obj = lm_loss(m, b.tokens)
                elif loss == "task":
                    obj = task_loss(m, b, answer_weight)
                else:
                    obj = mse(forward(m, b.tokens[:, :-1]), teacher[i])
                last = obj.item()
                if l1_lambda:
                    total = sigmoid(gates[0])
                    for gt in gates[1:]:
                        total = add(total, sigmoid(gt))
                    obj = add(obj, scale(total, l1_lambda))
            backward(obj, g)
            opt.step()
            opt.zero_grad()
            for gt in gates:
                gt.data = np.clip(gt.data, -GATE_LIMIT, GATE_LIMIT)
        alphas = [float(1.0 / (1.0 + np.exp(-gt.item()))) for gt in gates]
    finally:
        m.modes = [Full() for _ in range(m.cfg.n_layers)]
        for k, t in m.params.items():
            t.requires_grad = flags[k]
            t.grad = None
    return CalibrationResult(alphas, rank_layers(alphas), steps, last)


# ---------------------------------------------------------------------------
# selection and sparse training


def sparse_count(ratio: float, n_layers: int) -> int:
    if not 0.0 <= ratio <= 1.0:
        raise ContractError(f"ratio must lie in [0, 1], got {ratio}")
    # tolerance absorbs products like 0.29 * 100 = 28.999...
    return int(math.floor(ratio * n_layers + 1e-9))


def with_modes(m: Model, selection: Iterable[int], pattern: SparsePattern) -> Model:
    """Copy of ``m`` whose selected layers are sparse and the rest full."""
    sel = set(int(i) for i in selection)
    bad = sorted(i for i in sel if not 0 <= i < m.cfg.n_layers)
    if bad:
        raise ContractError(f"layer indices out of range for {m.cfg.n_layers} layers: {bad}")
    out = m.copy()
    out.modes = [Sparse(pattern) if i in sel else Full() for i in range(m.cfg.n_layers)]
    return out


def sparsify(m: Model, ranking: Sequence[int], ratio: float, pattern: Optional[SparsePattern] = None) -> Model:
    """Hard-switch the ``floor(ratio * n_layers)`` lowest-ranked layers to sparse attention."""
    if sorted(ranking) != list(range(m.cfg.n_layers)):
        raise ContractError(f"ranking must be a permutation of 0..{m.cfg.n_layers - 1}")
    k = sparse_count(ratio, m.cfg.n_layers)
    return with_modes(m, ranking[:k], pattern or SparsePattern())


def interleaved_pattern(n_layers: int) -> list[int]:
    """Every second layer, starting from index 1."""
    return list(range(1, n_layers, 2))


def rewind_and_train(
    w0: Checkpoint,
    selection: Iterable[int],
    stream: TaskStream,
    steps: int,
    lr: float,
    pattern: Optional[SparsePattern] = None,
    answer_weight: float = 2.0,
    expect: Optional[ModelConfig] = None,
) -> Model:
    """Restore ``w0``, sparsify ``selection``, then train all parameters for ``steps``."""
    if expect is not None:
        w0.check_compatible(expect)
    sel = list(selection)
    if any(not 0 <= i < w0.config.n_layers for i in sel):
        raise IncompatibilityError(f"selection {sel} does not fit a {w0.config.n_layers}-layer checkpoint")
    m = with_modes(w0.to_model(), sel, pattern or SparsePattern())
    if steps > 0:
        train(m, stream, steps, lr, answer_weight)
    return m


# ---------------------------------------------------------------------------
# pilot study

VARIANTS = ("full", "interleaved", "interleaved_trained", "calibrated", "calibrated_trained")
METRICS = ("lm_loss", "short_task_acc", "long_task_acc")


@dataclass
class PilotReport:
    seeds: list[int]
    metrics: dict[str, dict[str, float]]  # variant -> metric -> mean over seeds
    per_seed: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"seeds": self.seeds, "metrics": self.metrics, "per_seed": self.per_seed}

    def __getitem__(self, variant: str) -> dict[str, float]:
        return self.metrics[variant]


def _stream_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def base_training(cfg: ExperimentConfig, seed: int) -> tuple[Model, Checkpoint]:
    """Train the stand-in for a mid-trained model; returns (final model, rewind checkpoint)."""
    tc: TrainConfig = cfg.train
    m = build_model(replace(cfg.model, seed=seed))
    stream = TaskStream(_stream_seed(seed, 1), tc.lengths, tc.batch_size, tc.min_distance)
    opt = train(m, stream, tc.rewind_step, tc.lr, tc.answer_weight)
    w0 = Checkpoint.from_model(m, step=tc.rewind_step, seed=seed)
    train(m, stream, tc.steps - tc.rewind_step, tc.lr, tc.answer_weight, opt=opt)
    return m, w0


def calibration_data(cfg: ExperimentConfig, seed: int) -> list[Batch]:
    cc = cfg.calibrate
    stream = TaskStream(_stream_seed(seed, 2), [max(cfg.train.lengths)], cc.batch_size, cfg.train.min_distance)
    return stream.take(cc.n_batches)


def pilot_seed(cfg: ExperimentConfig, seed: int) -> dict:
    tc, cc, pc = cfg.train, cfg.calibrate, cfg.pilot
    pat = cfg.pattern
    ev = build_eval_set(pat, max(tc.lengths), pc.eval_long, pc.eval_short, _stream_seed(seed, 3))
    sparse_steps = pc.sparse_train_steps if pc.sparse_train_steps is not None else tc.steps - tc.rewind_step

    m, w0 = base_training(cfg, seed)
    out: dict = {"seed": seed}
    out["full"] = evaluate(m, ev)

    inter = interleaved_pattern(cfg.model.n_layers)[: sparse_count(pc.ratio, cfg.model.n_layers)]
    out["interleaved"] = evaluate(with_modes(m, inter, pat), ev)
    stream = TaskStream(_stream_seed(seed, 4), tc.lengths, tc.batch_size, tc.min_distance)
    out["interleaved_trained"] = evaluate(rewind_and_train(w0, inter, stream, sparse_steps, tc.lr, pat, tc.answer_weight), ev)

    cal = calibrate(m, calibration_data(cfg, seed), cc.steps, cc.lr, cc.l1_lambda, pat, cc.loss, tc.answer_weight)
    sparse_m = sparsify(m, cal.ranking, pc.ratio, pat)
    out["calibrated"] = evaluate(sparse_m, ev)
    stream = TaskStream(_stream_seed(seed, 4), tc.lengths, tc.batch_size, tc.min_distance)
    out["calibrated_trained"] = evaluate(
        rewind_and_train(w0, sparse_m.sparse_layers(), stream, sparse_steps, tc.lr, pat, tc.answer_weight), ev
    )
    out["calibration"] = cal.to_dict()
    out["interleaved_layers"] = inter
    out["calibrated_layers"] = sparse_m.sparse_layers()
    log.info("seed %d: %s", seed, {v: out[v]["long_task_acc"] for v in VARIANTS})
    return out


def run_pilot(cfg: ExperimentConfig, seeds: Optional[Sequence[int]] = None) -> PilotReport:
    seeds = list(seeds if seeds is not None else cfg.pilot.seeds)
    if not seeds:
        raise ContractError("run_pilot needs at least one seed")
    if cfg.pilot.workers > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=cfg.pilot.workers) as ex:
            per_seed = list(ex.map(pilot_seed, [cfg] * len(seeds), seeds))
    else:
        per_seed = [pilot_seed(cfg, s) for s in seeds]
    metrics = {
        v: {k: float(np.mean([r[v][k] for r in per_seed])) for k in METRICS}
        for v in VARIANTS
    }
    return PilotReport(seeds, metrics, per_seed)
