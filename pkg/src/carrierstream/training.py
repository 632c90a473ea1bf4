"""Two-stage training on a synthetic per-frame recall task.

The task: every token row of a frame shows its own symbol (a learnable
embedding row plus noise), and questions of the form "<qmark> <frame-k>"
are answered by the symbol in a fixed row (row 0 by default) of frame k.
Chance is 1/alphabet. Because mean pooling is permutation-invariant, the
carrier embedding alone cannot tell which row held which symbol; row
identity survives only through the carrier's prefill attention over the
raw rows, which is the pathway the KV-inheriting carrier provides and
the embedding-only ablation removes.

Stage 1 trains only the attention adapters and the frame-symbol stub on
carriers-only sequences (no raw frame tokens; carriers sit at the
positions they will occupy when streaming). Stage 2 trains only the
backbone on full sequences under the semantic mask, exactly the layout
the streaming engine produces at inference. Training runs at float64;
deployed weights are float32.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import TrainBatch, batch_loss, batch_loss_and_grads
from .carrier import FrameTokens
from .config import ModelConfig
from .engine import StreamSession
from .errors import ConfigError, SelectionError
from .masking import SegmentLayout, build_semantic_mask
from .model import Weights, get_param, iter_params

TRAINABLE_SETS = ("adapters_and_stub", "backbone_only")


@dataclass(frozen=True)
class TaskSpec:
    """Synthetic stream-recall task over a small symbol alphabet."""

    frames_per_stream: int = 8
    alphabet: int = 16
    questions_per_stream: int = 8
    noise_scale: float = 0.05
    answer_row: int = 0  # which token row of a frame holds the queried symbol
    question_prefix: tuple[int, ...] | None = None  # default (qmark_id,)

    # token id layout: [0, alphabet) symbols, then one index token per
    # frame slot, then qmark, two system tokens, and a reserved eos
    def sym_token(self, s: int) -> int:
        return s

    def idx_token(self, k: int) -> int:
        return self.alphabet + k

    @property
    def qmark_id(self) -> int:
        return self.alphabet + self.frames_per_stream

    @property
    def system_ids(self) -> tuple[int, int]:
        return (self.qmark_id + 1, self.qmark_id + 2)

    @property
    def eos_id(self) -> int:
        return self.qmark_id + 3

    @property
    def required_vocab(self) -> int:
        return self.alphabet + self.frames_per_stream + 4

    def prefix(self) -> tuple[int, ...]:
        return self.question_prefix if self.question_prefix is not None else (self.qmark_id,)

    def question_len(self) -> int:
        return len(self.prefix()) + 1  # prefix tokens plus the frame-index token

    def text_len(self) -> int:
        return self.questions_per_stream * (self.question_len() + 1)  # + answer

    def validate(self, config: ModelConfig) -> None:
        if self.questions_per_stream < 1 or self.questions_per_stream > self.frames_per_stream:
            raise ConfigError(
                f"{self.questions_per_stream} questions for {self.frames_per_stream} frames"
            )
        if not 0 <= self.answer_row < config.tokens_per_frame:
            raise ConfigError(
                f"answer_row {self.answer_row} outside {config.tokens_per_frame} token rows"
            )
        if config.vocab_size < self.required_vocab:
            raise ConfigError(
                f"task needs vocab >= {self.required_vocab}, model has {config.vocab_size}"
            )
        s = len(self.system_ids)
        needed = s + self.frames_per_stream * (config.tokens_per_frame + 1) + self.text_len()
        if needed > config.max_positions:
            raise ConfigError(f"task spans {needed} positions, model allows {config.max_positions}")


@dataclass
class StreamPlan:
    """A fully specified stream: per-row symbols, question order, noise."""

    symbols: np.ndarray  # (F, N) symbol per frame and token row
    question_frames: np.ndarray  # (Q,)
    noise: np.ndarray  # (F, N, d) unit normal, unscaled

    def answer(self, frame: int, task: TaskSpec) -> int:
        return int(self.symbols[frame, task.answer_row])


def make_plan(task: TaskSpec, config: ModelConfig, rng: np.random.Generator) -> StreamPlan:
    f, n = task.frames_per_stream, config.tokens_per_frame
    return StreamPlan(
        symbols=rng.integers(0, task.alphabet, size=(f, n)),
        question_frames=rng.permutation(f)[: task.questions_per_stream],
        noise=rng.standard_normal((f, n, config.d_model)),
    )


def materialize_frames(plan: StreamPlan, stub: np.ndarray, task: TaskSpec) -> np.ndarray:
    """(F, N, d) frame-token embeddings: per-row symbol plus scaled noise."""
    return stub[plan.symbols] + plan.noise * task.noise_scale


def frames_for_engine(plan: StreamPlan, stub: np.ndarray, task: TaskSpec) -> list[FrameTokens]:
    frames = materialize_frames(plan, stub, task).astype(np.float32)
    return [FrameTokens(frame_index=i, embeddings=frames[i]) for i in range(frames.shape[0])]


def gen_synthetic_stream(
    task: TaskSpec, config: ModelConfig, seed: int, stub: np.ndarray
) -> tuple[list[FrameTokens], list[int], int]:
    """One stream plus its first question and expected answer token."""
    rng = np.random.default_rng(seed)
    plan = make_plan(task, config, rng)
    k = int(plan.question_frames[0])
    question = list(task.prefix()) + [task.idx_token(k)]
    return frames_for_engine(plan, stub, task), question, plan.answer(k, task)


def init_stub(task: TaskSpec, config: ModelConfig, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    scale = 1.0 / np.sqrt(config.d_model)
    return rng.uniform(-scale, scale, size=(task.alphabet, config.d_model)).astype(np.float32)


def _collapse(frames: np.ndarray, mode: str) -> np.ndarray:
    """Carrier embeddings from (..., N, d) frame blocks."""
    return frames.mean(axis=-2) if mode == "mean" else frames[..., -1, :]


def build_batch(
    weights: Weights,
    stub: np.ndarray,
    task: TaskSpec,
    plans: list[StreamPlan],
    stage: int,
) -> TrainBatch:
    """Assemble a float64 batch in the stage's sequence layout.

    Stage 1 sequences contain system tokens, carriers only, then the
    question text; carriers are placed at the positions they occupy in a
    streamed full sequence. Stage 2 sequences are the full streamed
    layout with raw frame tokens under the semantic mask.
    """
    config = weights.config
    b = len(plans)
    f, n, d = task.frames_per_stream, config.tokens_per_frame, config.d_model
    sys_ids = np.array(task.system_ids)
    s_sys = len(sys_ids)
    qlen = task.question_len()
    text_len = task.text_len()

    symbols = np.stack([p.symbols for p in plans])  # (b, F, N)
    noise = np.stack([p.noise for p in plans])  # (b, F, N, d)
    frames = stub[symbols] + noise * task.noise_scale  # (b, F, N, d)
    carriers = _collapse(frames, config.carrier_mode)  # (b, F, d)

    qf = np.stack([p.question_frames for p in plans])  # (b, Q)
    answers = symbols[np.arange(b)[:, None], qf, task.answer_row]  # (b, Q)
    text_ids = np.zeros((b, text_len), dtype=np.int64)
    prefix = np.array(task.prefix())
    step = qlen + 1
    for j in range(task.questions_per_stream):
        text_ids[:, j * step : j * step + len(prefix)] = prefix
        text_ids[:, j * step + qlen - 1] = task.alphabet + qf[:, j]
        text_ids[:, j * step + qlen] = answers[:, j]

    if stage == 2:
        layout = SegmentLayout(system=s_sys, frame_sizes=(n,) * f, text=text_len)
        positions = np.arange(layout.total, dtype=np.int64)
    elif stage == 1:
        layout = SegmentLayout(system=s_sys, frame_sizes=(0,) * f, text=text_len)
        carrier_pos = s_sys + np.arange(f) * (n + 1) + n
        text_start_pos = s_sys + f * (n + 1)
        positions = np.concatenate(
            [
                np.arange(s_sys),
                carrier_pos,
                text_start_pos + np.arange(text_len),
            ]
        ).astype(np.int64)
    else:
        raise SelectionError(f"stage must be 1 or 2, got {stage}")

    s_total = layout.total
    embeds = np.zeros((b, s_total, d), dtype=np.float64)
    tok_map = np.full((b, s_total), -1, dtype=np.int64)
    sc_b: list[np.ndarray] = []
    sc_s: list[np.ndarray] = []
    sc_sym: list[np.ndarray] = []
    sc_coeff: list[np.ndarray] = []
    b_idx = np.repeat(np.arange(b), n)

    embeds[:, :s_sys] = weights.tok_emb[sys_ids]
    tok_map[:, :s_sys] = sys_ids
    for t in range(f):
        fstart, fstop = layout.frame_span(t)
        cpos = layout.carrier_pos(t)
        if fstop > fstart:
            embeds[:, fstart:fstop] = frames[:, t]
            sc_b.append(b_idx)
            sc_s.append(np.tile(np.arange(fstart, fstop), b))
            sc_sym.append(symbols[:, t].reshape(-1))
            sc_coeff.append(np.ones(b * n))
        embeds[:, cpos] = carriers[:, t]
        if config.carrier_mode == "mean":
            sc_b.append(b_idx)
            sc_s.append(np.full(b * n, cpos))
            sc_sym.append(symbols[:, t].reshape(-1))
            sc_coeff.append(np.full(b * n, 1.0 / n))
        else:  # last_token carrier is row N-1 verbatim
            sc_b.append(np.arange(b))
            sc_s.append(np.full(b, cpos))
            sc_sym.append(symbols[:, t, -1])
            sc_coeff.append(np.ones(b))
    tstart = layout.text_start
    embeds[:, tstart:] = weights.tok_emb[text_ids]
    tok_map[:, tstart:] = text_ids

    loss_pos = tstart + np.arange(task.questions_per_stream) * step + (qlen - 1)
    return TrainBatch(
        embeds=embeds,
        positions=positions,
        mask=build_semantic_mask(layout).allow,
        loss_pos=np.broadcast_to(loss_pos, (b, task.questions_per_stream)).copy(),
        targets=answers,
        tok_map=tok_map,
        stub_scatter=(
            np.concatenate(sc_b),
            np.concatenate(sc_s),
            np.concatenate(sc_sym),
            np.concatenate(sc_coeff),
        ),
    )


def _scatter_rows(index_map: np.ndarray, d_embeds: np.ndarray, nrows: int) -> np.ndarray:
    out = np.zeros((nrows, d_embeds.shape[-1]), dtype=d_embeds.dtype)
    valid = index_map >= 0
    np.add.at(out, index_map[valid], d_embeds[valid])
    return out


def _scatter_stub(
    scatter: tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray],
    d_embeds: np.ndarray,
    nrows: int,
) -> np.ndarray:
    b_idx, s_idx, sym, coeff = scatter
    out = np.zeros((nrows, d_embeds.shape[-1]), dtype=d_embeds.dtype)
    np.add.at(out, sym, d_embeds[b_idx, s_idx] * coeff[:, None])
    return out


# ---------------------------------------------------------------------------
# optimizers and the train loop
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    stage: int
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-3
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    trainable: str | None = None  # defaults by stage
    seed: int = 0
    log_every: int = 50
    target_loss: float | None = None  # early stop once reached


class Optimizer:
    def __init__(self, cfg: TrainConfig):
        if cfg.optimizer not in ("sgd", "adam"):
            raise SelectionError(f"unknown optimizer {cfg.optimizer!r}")
        self.cfg = cfg
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> None:
        cfg = self.cfg
        self.t += 1
        for path, arr in params.items():
            g = grads[path]
            if cfg.optimizer == "sgd":
                arr -= cfg.lr * g
                continue
            m = self.m.setdefault(path, np.zeros_like(arr))
            v = self.v.setdefault(path, np.zeros_like(arr))
            m *= cfg.beta1
            m += (1 - cfg.beta1) * g
            v *= cfg.beta2
            v += (1 - cfg.beta2) * g * g
            mhat = m / (1 - cfg.beta1**self.t)
            vhat = v / (1 - cfg.beta2**self.t)
            arr -= cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)


def all_param_paths(weights: Weights) -> list[str]:
    return [p for p, _ in iter_params(weights)] + ["stub"]


def trainable_paths(weights: Weights, trainable: str) -> list[str]:
    if trainable == "adapters_and_stub":
        return [p for p, _ in iter_params(weights) if ".adapters." in p] + ["stub"]
    if trainable == "backbone_only":
        return [p for p, _ in iter_params(weights) if ".adapters." not in p]
    raise SelectionError(f"unknown trainable set {trainable!r}")


def _assemble_grads(
    weights: Weights, stub: np.ndarray, batch: TrainBatch, grads: dict, d_embeds: np.ndarray
) -> dict[str, np.ndarray]:
    grads["tok_emb"] = _scatter_rows(batch.tok_map, d_embeds, weights.config.vocab_size)
    grads["stub"] = _scatter_stub(batch.stub_scatter, d_embeds, stub.shape[0])
    return grads


def _run_training(
    weights: Weights, task: TaskSpec, cfg: TrainConfig, stub: np.ndarray, trainable: str
) -> tuple[Weights, np.ndarray, list[dict]]:
    config = weights.config
    task.validate(config)
    w64 = weights.astype(np.float64)
    stub64 = stub.astype(np.float64)
    paths = trainable_paths(w64, trainable)
    params = {p: (stub64 if p == "stub" else get_param(w64, p)) for p in paths}
    opt = Optimizer(cfg)
    rng = np.random.default_rng(cfg.seed)
    metrics: list[dict] = []

    for step in range(cfg.steps):
        plans = [make_plan(task, config, rng) for _ in range(cfg.batch_size)]
        batch = build_batch(w64, stub64, task, plans, cfg.stage)
        loss, grads, d_embeds, acc = batch_loss_and_grads(w64, batch)
        _assemble_grads(w64, stub64, batch, grads, d_embeds)
        gnorm = math.sqrt(sum(float((grads[p] ** 2).sum()) for p in paths))
        opt.step(params, grads)
        done = step == cfg.steps - 1 or (cfg.target_loss is not None and loss < cfg.target_loss)
        if step % cfg.log_every == 0 or done:
            metrics.append(
                {"step": step, "loss": loss, "grad_norm": gnorm, "accuracy": acc}
            )
        if done:
            break

    out_stub = stub64.astype(np.float32) if "stub" in params else stub
    return w64.astype(np.float32), out_stub, metrics


def train_stage1(
    weights: Weights, task: TaskSpec, cfg: TrainConfig, stub: np.ndarray | None = None
) -> tuple[Weights, np.ndarray, list[dict]]:
    """Adapter + stub training on carriers-only sequences.

    Base weights come back bitwise identical; only adapter factors and
    the frame-symbol stub move.
    """
    if weights.config.adapter_rank < 1:
        raise ConfigError("stage 1 trains adapters; configure adapter_rank >= 1")
    if cfg.stage != 1:
        raise ConfigError(f"stage-1 trainer got a stage-{cfg.stage} config")
    if stub is None:
        stub = init_stub(task, weights.config, cfg.seed)
    return _run_training(weights, task, cfg, stub, cfg.trainable or "adapters_and_stub")


def train_stage2(
    weights: Weights, task: TaskSpec, cfg: TrainConfig, stub: np.ndarray
) -> tuple[Weights, np.ndarray, list[dict]]:
    """Backbone training on full frame sequences under the semantic mask.

    Adapters stay attached and frozen; the stub is used to materialize
    frames but comes back the exact object that was passed in.
    """
    if cfg.stage != 2:
        raise ConfigError(f"stage-2 trainer got a stage-{cfg.stage} config")
    return _run_training(weights, task, cfg, stub, cfg.trainable or "backbone_only")


# ---------------------------------------------------------------------------
# evaluation through the streaming engine
# ---------------------------------------------------------------------------


def evaluate_recall(
    weights: Weights,
    stub: np.ndarray,
    task: TaskSpec,
    config: ModelConfig,
    streams: int,
    seed: int,
    questions: int | None = None,
) -> float:
    """Accuracy of greedy one-token answers over held-out streams.

    Each stream is ingested frame by frame through a fresh session, then
    asked `questions` questions (default: all of the plan's questions,
    sequentially, with answers retained as dialogue, matching the
    training layout).
    """
    rng = np.random.default_rng(seed)
    correct = 0
    total = 0
    for _ in range(streams):
        plan = make_plan(task, config, rng)
        frames = frames_for_engine(plan, stub, task)
        session = StreamSession(config, weights, system_tokens=list(task.system_ids))
        for frame in frames:
            session.ingest_frame(frame)
        nq = len(plan.question_frames) if questions is None else questions
        for j in range(nq):
            k = int(plan.question_frames[j])
            out = session.ask(list(task.prefix()) + [task.idx_token(k)], max_new=1)
            correct += int(out.tokens[0] == plan.answer(k, task))
            total += 1
        session.close()
    return correct / total


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


def grad_check(
    weights: Weights,
    task: TaskSpec,
    stub: np.ndarray | None = None,
    n_coords: int = 220,
    h: float = 1e-5,
    seed: int = 0,
) -> dict:
    """Backprop vs central finite differences at float64.

    Samples coordinates from every parameter group (each layer weight,
    each adapter factor, token/position tables, unembedding, stub) and
    returns the max relative error `|a-b| / max(1e-8, |a|+|b|)` overall
    and per group. Adapter `b` factors are randomized first so adapter
    gradient paths are exercised rather than identically zero.
    """
    config = weights.config
    rng = np.random.default_rng(seed)
    w64 = weights.astype(np.float64)
    if stub is None:
        stub = init_stub(task, config, seed)
    stub64 = stub.astype(np.float64)
    # zero-init b factors would zero the a-factor gradients; draw b large
    # enough that finite-difference roundoff stays well below the signal
    for lw in w64.layers:
        if lw.adapters is not None:
            for name, (a, b) in lw.adapters.items():
                lw.adapters[name] = (a, rng.normal(0.0, 0.4, size=b.shape))

    plans = [make_plan(task, config, rng) for _ in range(2)]

    def loss_now() -> float:
        return batch_loss(w64, build_batch(w64, stub64, task, plans, stage=2))

    batch = build_batch(w64, stub64, task, plans, stage=2)
    loss, grads, d_embeds, _ = batch_loss_and_grads(w64, batch)
    _assemble_grads(w64, stub64, batch, grads, d_embeds)

    paths = all_param_paths(w64)
    per_path = max(3, -(-n_coords // len(paths)))  # ceil division
    worst = 0.0
    per_group: dict[str, float] = {}
    checked = 0
    for path in paths:
        arr = stub64 if path == "stub" else get_param(w64, path)
        flat = arr.reshape(-1)
        count = min(per_path, flat.size)
        coords = rng.choice(flat.size, size=count, replace=False)
        group_worst = 0.0
        for c in coords:
            keep = flat[c]
            flat[c] = keep + h
            up = loss_now()
            flat[c] = keep - h
            down = loss_now()
            flat[c] = keep
            fd = (up - down) / (2 * h)
            bp = float(grads[path].reshape(-1)[c])
            rel = abs(fd - bp) / max(1e-8, abs(fd) + abs(bp))
            group_worst = max(group_worst, rel)
            checked += 1
        per_group[path] = group_worst
        worst = max(worst, group_worst)
    return {"max_rel_err": worst, "per_group": per_group, "coords_checked": checked}
