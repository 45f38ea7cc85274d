"""Training, evaluation, baselines, ablations, sweeps, and cost accounting.

The full model is the cascaded-selection architecture in `mist.ista`. This
module adds everything needed to study it: a validated run configuration,
parameter initialization for every architecture kind, a deterministic AdamW
loop with straight-through selection, eval-mode metrics (accuracy and
planted-segment hit-rate), dense and divided attention baselines, the three
ablations, closed-form multiply-accumulate estimates with a runtime counter
cross-check, and one-axis configuration sweeps.

Determinism contract: (config, seed) fully determines the metrics log.
Sample streams, Gumbel noise streams, and parameter init draw from disjoint
SeedSequence keys, so train/eval data never collide and batch order is
irrelevant to the data a step sees.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import math
import os
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numerics as nx
from .answer import predict, qa_loss, score_answers
from .features import (
    MULTI_EVENT_ORDER,
    SINGLE_EVENT,
    PositionTable,
    SynthConfig,
    SynthSample,
    add_positions,
    generate_synthetic,
    pool_hierarchy,
)
from .ista import (
    IstaState,
    LayerTrace,
    FrameTrace,
    MistParams,
    expected_tokens,
    init_mist_params,
    mist_forward,
    named_parameters,
    site_rng,
)
from .numerics import AttentionParams, Tensor
from . import selection as sel

MODEL_KINDS = ("mist", "meanpool", "trans_frame", "trans_patch", "divided_sta")
ABLATIONS = ("none", "no_ss", "no_rs", "no_sta")

# seed-stream tags; disjoint from the tags inside mist.features
_S_INIT = 303
_TAG_TRAIN = 1
_TAG_EVAL = 2

PARAMS_MAGIC = b"MISTPRMS"
PARAMS_VERSION = 1


class ConfigError(ValueError):
    """Invalid run configuration; message names every offending key."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class ParamsFormatError(ValueError):
    """Corrupt or mismatched parameter file."""


@dataclass(frozen=True)
class TrainConfig:
    """One run, fully specified. JSON config files mirror these field names."""

    model: str = "mist"
    ablation: str = "none"
    task: str = SINGLE_EVENT
    k_segments: int = 8
    frames: int = 32
    n_patches: int = 16
    dim: int = 32
    m_words: int = 8
    n_answers: int = 4
    top_k: int = 2
    top_j: int = 12
    layers: int = 2
    heads: int = 4
    noise_std: float = 0.1
    selector: str = sel.WITH_REPLACEMENT
    temperature_start: float = 1.0
    temperature_end: float = 0.5
    residual_norm: bool = True
    cosine_scores: bool = False
    learning_rate: float = 1e-3
    weight_decay: float = 0.01
    beta1: float = 0.9
    beta2: float = 0.999
    steps: int = 1000
    batch_size: int = 8
    eval_samples: int = 200
    seed: int = 0
    task_seed: int = 0

    def __post_init__(self) -> None:
        if self.selector == sel.NONPARAMETRIC and self.layers != 1:
            # the non-parametric selector has no state feedback worth
            # iterating; resolve to a single layer rather than erroring
            object.__setattr__(self, "layers", 1)
        bad = self._violations()
        if bad:
            raise ConfigError("invalid config keys: " + "; ".join(bad))

    def _violations(self) -> list[str]:
        bad = []
        if self.model not in MODEL_KINDS:
            bad.append(f"model (got {self.model!r})")
        if self.ablation not in ABLATIONS:
            bad.append(f"ablation (got {self.ablation!r})")
        elif self.ablation != "none" and self.model != "mist":
            bad.append("ablation (only valid with model=mist)")
        if self.task not in (SINGLE_EVENT, MULTI_EVENT_ORDER):
            bad.append(f"task (got {self.task!r})")
        for name in ("k_segments", "frames", "n_patches", "dim", "m_words",
                     "top_k", "top_j", "layers", "heads", "batch_size"):
            if getattr(self, name) < 1:
                bad.append(f"{name} (must be >= 1)")
        if self.k_segments >= 1 and self.frames >= 1:
            if self.frames % self.k_segments != 0:
                bad.append("frames (must be a multiple of k_segments)")
        if self.dim >= 1 and self.heads >= 1 and self.dim % self.heads != 0:
            bad.append("heads (must divide dim)")
        if not 2 <= self.n_answers <= self.dim:
            bad.append("n_answers (must be in [2, dim])")
        if self.selector not in sel.SELECTOR_KINDS:
            bad.append(f"selector (got {self.selector!r})")
        elif self.selector != sel.WITH_REPLACEMENT:
            if self.top_k > self.k_segments:
                bad.append("top_k (exceeds k_segments without replacement)")
            if self.top_j > self.n_patches:
                bad.append("top_j (exceeds n_patches without replacement)")
        if self.noise_std < 0:
            bad.append("noise_std (must be >= 0)")
        for name in ("temperature_start", "temperature_end", "learning_rate"):
            if getattr(self, name) <= 0:
                bad.append(f"{name} (must be > 0)")
        if self.weight_decay < 0:
            bad.append("weight_decay (must be >= 0)")
        for name in ("beta1", "beta2"):
            if not 0.0 <= getattr(self, name) < 1.0:
                bad.append(f"{name} (must be in [0, 1))")
        if self.steps < 0:
            bad.append("steps (must be >= 0)")
        if self.eval_samples < 0:
            bad.append("eval_samples (must be >= 0)")
        return bad

    @property
    def t_frames(self) -> int:
        return self.frames // self.k_segments

    def synth_config(self) -> SynthConfig:
        return SynthConfig(kind=self.task, k_segments=self.k_segments,
                           t_frames=self.t_frames, n_patches=self.n_patches,
                           dim=self.dim, m_words=self.m_words,
                           n_answers=self.n_answers, noise_std=self.noise_std,
                           task_seed=self.task_seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError("unknown config keys: " + ", ".join(unknown))
        return cls(**d)


@dataclass
class MetricsLog:
    steps: list[int] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)
    n_eval: int = 0
    n_correct: int = 0
    n_hit: int = 0
    wall_time_s: float = 0.0
    mmacs: float = 0.0

    @property
    def accuracy(self) -> float:
        return self.n_correct / self.n_eval if self.n_eval else 0.0

    @property
    def hit_rate(self) -> float:
        return self.n_hit / self.n_eval if self.n_eval else 0.0


# ---------------------------------------------------------------------------
# parameter containers and initialization


@dataclass
class MeanPoolParams:
    """The mean-pool baseline is parameter-free."""


@dataclass
class TransParams:
    """Single joint self-attention over tokens (frame or patch level)."""

    positions: PositionTable
    attn: AttentionParams


@dataclass
class DividedParams:
    """Two-step attention: temporal across frames, spatial within frames."""

    positions: PositionTable
    attn_time: AttentionParams
    attn_space: AttentionParams


def _init_attn(rng: np.random.Generator, d: int, name: str) -> AttentionParams:
    return AttentionParams(nx.init_linear(rng, d, d, f"{name}.wq"),
                           nx.init_linear(rng, d, d, f"{name}.wk"),
                           nx.init_linear(rng, d, d, f"{name}.wv"),
                           nx.init_linear(rng, d, d, f"{name}.wo"))


def _init_positions(rng: np.random.Generator, kt: int, d: int) -> PositionTable:
    return PositionTable(nx.init_table(rng, kt + 1, d, "positions.temporal"))


def init_model(tc: TrainConfig):
    """Initialize parameters for the configured architecture kind."""
    rng = np.random.default_rng(np.random.SeedSequence([_S_INIT, tc.seed]))
    k, t, d = tc.k_segments, tc.t_frames, tc.dim
    if tc.model == "mist":
        return init_mist_params(rng, k, t, d, tc.layers,
                                residual_norm=tc.residual_norm)
    if tc.model == "meanpool":
        return MeanPoolParams()
    if tc.model in ("trans_frame", "trans_patch"):
        return TransParams(_init_positions(rng, k * t, d),
                           _init_attn(rng, d, "attn"))
    if tc.model == "divided_sta":
        return DividedParams(_init_positions(rng, k * t, d),
                             _init_attn(rng, d, "attn_time"),
                             _init_attn(rng, d, "attn_space"))
    raise ConfigError(f"model (got {tc.model!r})")


def _attn_named(ap: AttentionParams, prefix: str) -> dict[str, Tensor]:
    out = {}
    for sub, lin in (("wq", ap.wq), ("wk", ap.wk), ("wv", ap.wv), ("wo", ap.wo)):
        out[f"{prefix}.{sub}.weight"] = lin.weight
        if lin.bias is not None:
            out[f"{prefix}.{sub}.bias"] = lin.bias
    return out


def model_named_parameters(params) -> dict[str, Tensor]:
    if isinstance(params, MistParams):
        return named_parameters(params)
    if isinstance(params, MeanPoolParams):
        return {}
    if isinstance(params, TransParams):
        out = {"positions.temporal": params.positions.temporal}
        out.update(_attn_named(params.attn, "attn"))
        return out
    if isinstance(params, DividedParams):
        out = {"positions.temporal": params.positions.temporal}
        out.update(_attn_named(params.attn_time, "attn_time"))
        out.update(_attn_named(params.attn_space, "attn_space"))
        return out
    raise TypeError(f"unknown parameter container {type(params).__name__}")


# ---------------------------------------------------------------------------
# baseline and ablation forwards


def _assert_tokens(actual: int, expect: int, site: str) -> None:
    if actual != expect:
        raise AssertionError(
            f"{site} token count {actual} != closed form {expect}")


def baseline_forward(kind: str, sample: SynthSample, params,
                     tc: TrainConfig) -> Tensor:
    """Architecture baselines. All are deterministic (no selection)."""
    k, t, n_p, m = tc.k_segments, tc.t_frames, tc.n_patches, tc.m_words
    words = sample.question.w
    if kind == "meanpool":
        frames, _ = pool_hierarchy(sample.video)
        return nx.mean_pool(nx.reshape(frames, (k * t, tc.dim)), axis=0)
    video = add_positions(sample.video, params.positions)
    if kind == "trans_frame":
        frames, _ = pool_hierarchy(video)
        tokens = nx.concat([nx.reshape(frames, (k * t, tc.dim)), words], axis=0)
        _assert_tokens(tokens.shape[0], k * t + m, "trans_frame")
        out = nx.multi_head_attention(tokens, params.attn, tc.heads)
        return nx.mean_pool(out, axis=0)
    if kind == "trans_patch":
        patches = nx.reshape(video.x, (k * t * n_p, tc.dim))
        tokens = nx.concat([patches, words], axis=0)
        _assert_tokens(tokens.shape[0], k * t * n_p + m, "trans_patch")
        out = nx.multi_head_attention(tokens, params.attn, tc.heads)
        return nx.mean_pool(out, axis=0)
    if kind == "divided_sta":
        return _divided_sta(video.x, words, params, tc)
    raise ConfigError(f"model (got {kind!r})")


def _divided_sta(video_x: Tensor, words: Tensor, params: DividedParams,
                 tc: TrainConfig) -> Tensor:
    """Temporal attention per patch position, then spatial per frame.

    Uni-modal: words join only at the final pooling. With a single frame
    there is nothing to mix across time, so the temporal step is skipped
    and the pass degenerates to one joint spatial attention.
    """
    k, t, n_p, d = tc.k_segments, tc.t_frames, tc.n_patches, tc.dim
    f = k * t
    flat = nx.reshape(video_x, (f, n_p, d))
    if f > 1:
        by_pos = nx.transpose(flat, (1, 0, 2))
        mixed = []
        for p in range(n_p):
            tok = nx.take(by_pos, p, axis=0)
            _assert_tokens(tok.shape[0], f, "divided_sta temporal")
            mixed.append(nx.multi_head_attention(tok, params.attn_time,
                                                 tc.heads))
        stacked = nx.concat([nx.reshape(mx, (1, f, d)) for mx in mixed],
                            axis=0)
        flat = nx.transpose(stacked, (1, 0, 2))
    rows = []
    for fi in range(f):
        tok = nx.take(flat, fi, axis=0)
        _assert_tokens(tok.shape[0], n_p, "divided_sta spatial")
        rows.append(nx.multi_head_attention(tok, params.attn_space, tc.heads))
    pooled = nx.concat(rows + [words], axis=0)
    return nx.mean_pool(pooled, axis=0)


def ablation_forward(variant: str, sample: SynthSample, params: MistParams,
                     tc: TrainConfig, noise_key=None, *, hard: bool = True,
                     temperature: float = 1.0):
    """Reduced architectures; same parameter container as the full model.

    ``no_ss`` swaps segment selection for region selection over every frame,
    ``no_rs`` feeds all patches of the selected segments to attention, and
    ``no_sta`` replaces the joint attention with a plain mean. Parameters a
    variant does not touch stay at their initialization.
    """
    if variant == "no_ss":
        return _forward_no_ss(sample, params, tc, noise_key, hard, temperature)
    if variant == "no_rs":
        return _forward_no_rs(sample, params, tc, noise_key, hard, temperature)
    if variant == "no_sta":
        return _forward_no_sta(sample, params, tc, noise_key, hard, temperature)
    raise ConfigError(f"ablation (got {variant!r})")


def _type_row(lp, idx: int, d: int) -> Tensor:
    return nx.reshape(nx.rows(lp.type_table, idx, idx + 1), (d,))


def _forward_no_ss(sample, params, tc, noise_key, hard, temperature):
    k, t, n_p, d, m = (tc.k_segments, tc.t_frames, tc.n_patches, tc.dim,
                       tc.m_words)
    video = add_positions(sample.video, params.positions)
    frames_flat = nx.reshape(video.x, (k * t, n_p, d))
    mode = sel.SelectorMode(tc.selector, temperature)
    words = sample.question.w
    n_expect = k * t * tc.top_j + m
    pooled = []
    traces = []
    for li, lp in enumerate(params.layers):
        q = nx.mean_pool(words, axis=0)
        rngs = None if noise_key is None else [
            site_rng(noise_key, li, 1 + fi) for fi in range(k * t)
        ]
        res = sel.region_select_multi(frames_flat, q, lp.spatial, tc.top_j,
                                      mode, rngs, hard=hard)
        x_st = nx.reshape(res.selected, (k * t * tc.top_j, d))
        frame_traces = [
            FrameTrace(fi, res.soft_weights.data[fi].copy(),
                       res.indices[fi].copy())
            for fi in range(k * t)
        ]
        tokens = nx.concat([
            lp.proj_region(x_st) + _type_row(lp, 1, d),
            lp.proj_word(words) + _type_row(lp, 2, d),
        ], axis=0)
        _assert_tokens(tokens.shape[0], n_expect, "no_ss")
        out = nx.multi_head_attention(tokens, lp.attn, tc.heads)
        if lp.norm_gain is not None:
            out = nx.layer_norm(tokens + out, lp.norm_gain, lp.norm_bias)
        words = nx.rows(out, tokens.shape[0] - m, tokens.shape[0])
        pooled.append(nx.mean_pool(out, axis=0))
        traces.append(LayerTrace(np.zeros(0), np.zeros(0, dtype=np.int64),
                                 frame_traces))
    x_o = nx.mean_pool(nx.concat([nx.reshape(p, (1, d)) for p in pooled],
                                 axis=0), axis=0)
    return x_o, traces


def _forward_no_rs(sample, params, tc, noise_key, hard, temperature):
    k, t, n_p, d, m = (tc.k_segments, tc.t_frames, tc.n_patches, tc.dim,
                       tc.m_words)
    video = add_positions(sample.video, params.positions)
    _, segments = pool_hierarchy(video)
    state = IstaState(segments, sample.question.w)
    mode = sel.SelectorMode(tc.selector, temperature)
    n_expect = k + tc.top_k * t * n_p + m
    pooled = []
    traces = []
    for li, lp in enumerate(params.layers):
        q = nx.mean_pool(state.words, axis=0)
        res = sel.segment_select(video.x, state.segments, q, lp.temporal,
                                 tc.top_k, mode,
                                 site_rng(noise_key, li, 0), hard=hard)
        x_st = nx.reshape(res.selected, (tc.top_k * t * n_p, d))
        tokens = nx.concat([
            lp.proj_segment(state.segments) + _type_row(lp, 0, d),
            lp.proj_region(x_st) + _type_row(lp, 1, d),
            lp.proj_word(state.words) + _type_row(lp, 2, d),
        ], axis=0)
        _assert_tokens(tokens.shape[0], n_expect, "no_rs")
        out = nx.multi_head_attention(tokens, lp.attn, tc.heads)
        if lp.norm_gain is not None:
            out = nx.layer_norm(tokens + out, lp.norm_gain, lp.norm_bias)
        state = IstaState(nx.rows(out, 0, k),
                          nx.rows(out, tokens.shape[0] - m, tokens.shape[0]))
        pooled.append(nx.mean_pool(out, axis=0))
        traces.append(LayerTrace(res.soft_weights.data.copy(),
                                 res.indices.copy(), []))
    x_o = nx.mean_pool(nx.concat([nx.reshape(p, (1, d)) for p in pooled],
                                 axis=0), axis=0)
    return x_o, traces


def _forward_no_sta(sample, params, tc, noise_key, hard, temperature):
    """Selection cascade intact, joint attention replaced by a plain mean."""
    k, t, n_p, d = tc.k_segments, tc.t_frames, tc.n_patches, tc.dim
    video = add_positions(sample.video, params.positions)
    _, segments = pool_hierarchy(video)
    lp = params.layers[0]
    mode = sel.SelectorMode(tc.selector, temperature)
    q = nx.mean_pool(sample.question.w, axis=0)
    res = sel.segment_select(video.x, segments, q, lp.temporal, tc.top_k,
                             mode, site_rng(noise_key, 0, 0), hard=hard)
    frames_flat = nx.reshape(res.selected, (tc.top_k * t, n_p, d))
    rngs = None if noise_key is None else [
        site_rng(noise_key, 0, 1 + r) for r in range(tc.top_k * t)
    ]
    res_r = sel.region_select_multi(frames_flat, q, lp.spatial, tc.top_j,
                                    mode, rngs, hard=hard)
    x_st = nx.reshape(res_r.selected, (tc.top_k * t * tc.top_j, d))
    frame_traces = [
        FrameTrace(int(res.indices[r // t]) * t + (r % t),
                   res_r.soft_weights.data[r].copy(),
                   res_r.indices[r].copy())
        for r in range(tc.top_k * t)
    ]
    x_o = nx.mean_pool(nx.concat([segments, x_st], axis=0), axis=0)
    trace = LayerTrace(res.soft_weights.data.copy(), res.indices.copy(),
                       frame_traces)
    return x_o, [trace]


def model_forward(tc: TrainConfig, params, sample: SynthSample,
                  noise_key=None, *, hard: bool = True,
                  temperature: float = 1.0):
    """Dispatch to the configured architecture. Returns (x_o, traces)."""
    if tc.model == "mist":
        if tc.ablation == "none":
            return mist_forward(sample, params, tc, noise_key, hard=hard,
                                temperature=temperature)
        return ablation_forward(tc.ablation, sample, params, tc, noise_key,
                                hard=hard, temperature=temperature)
    return baseline_forward(tc.model, sample, params, tc), []


# ---------------------------------------------------------------------------
# optimizer and training loop


class AdamW:
    """Decoupled weight decay; moments in insertion order for determinism."""

    def __init__(self, named: dict[str, Tensor], lr: float, weight_decay: float,
                 beta1: float, beta2: float, eps: float = 1e-8):
        self.named = named
        self.lr, self.wd = lr, weight_decay
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {k: np.zeros_like(p.data) for k, p in named.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in named.items()}

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in self.named.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {k}")
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            update = (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)
            p.data -= self.lr * (update + self.wd * p.data)


def _temperature_at(tc: TrainConfig, step: int) -> float:
    if tc.steps <= 1:
        return tc.temperature_end
    frac = step / (tc.steps - 1)
    return tc.temperature_start + frac * (tc.temperature_end -
                                          tc.temperature_start)


def train(tc: TrainConfig) -> tuple[object, MetricsLog]:
    """Run the configured job; deterministic given (config, seed).

    Batch gradients are accumulated serially in double precision so the
    result is independent of any evaluation parallelism. Raises
    DivergenceError with the offending step if the loss goes non-finite.
    """
    t0 = time.perf_counter()
    params = init_model(tc)
    named = model_named_parameters(params)
    opt = AdamW(named, tc.learning_rate, tc.weight_decay, tc.beta1, tc.beta2)
    scfg = tc.synth_config()
    log = MetricsLog(mmacs=cost_estimate(tc).total_macs / 1e6)
    scale = 1.0 / tc.batch_size
    for s in range(tc.steps):
        tau = _temperature_at(tc, s)
        nx.zero_grads(named)
        loss_sum = 0.0
        for i in range(tc.batch_size):
            sample = generate_synthetic(scfg, (_TAG_TRAIN, tc.seed, s, i))
            try:
                x_o, _ = model_forward(tc, params, sample,
                                       noise_key=(tc.seed, s, i),
                                       temperature=tau)
                loss = qa_loss(score_answers(x_o, sample.answers,
                                             cosine=tc.cosine_scores),
                               sample.label)
                (loss * scale).backward()
            except nx.NonFiniteError as e:
                raise DivergenceError(f"step {s}, sample {i}: {e}") from e
            loss_sum += float(loss.data)
        mean_loss = loss_sum * scale
        if not np.isfinite(mean_loss):
            raise DivergenceError(f"step {s}: loss {mean_loss}")
        opt.step()
        log.steps.append(s)
        log.losses.append(mean_loss)
    if tc.eval_samples:
        ev = evaluate(params, tc, tc.eval_samples, tc.seed)
        log.n_eval, log.n_correct, log.n_hit = ev.n_eval, ev.n_correct, ev.n_hit
    log.wall_time_s = time.perf_counter() - t0
    return params, log


def _eval_one(tc: TrainConfig, params, scfg: SynthConfig, seed: int,
              i: int) -> tuple[bool, bool]:
    sample = generate_synthetic(scfg, (_TAG_EVAL, seed, i))
    with nx.no_grad():
        x_o, traces = model_forward(tc, params, sample)
        scores = score_answers(x_o, sample.answers, cosine=tc.cosine_scores)
    pred = predict(scores, sample.answers)
    picked: set[int] = set()
    for lt in traces:
        picked.update(int(ix) for ix in lt.temporal_indices)
    hit = sample.answer_event.segment in picked
    return pred.index == sample.label, hit


def evaluate(params, tc: TrainConfig, n_samples: int, seed: int) -> MetricsLog:
    """Deterministic eval pass: accuracy and planted-segment hit-rate.

    Hit-rate is the fraction of samples whose label-determining segment
    appears among the temporal selections of any layer; architectures
    without segment selection score 0 on it by construction. Honors
    MIST_THREADS for parallel sample evaluation; results are order-stable.
    """
    t0 = time.perf_counter()
    scfg = tc.synth_config()
    log = MetricsLog(mmacs=cost_estimate(tc).total_macs / 1e6)
    workers = int(os.environ.get("MIST_THREADS", "1"))
    if workers > 1 and n_samples > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda i: _eval_one(tc, params, scfg, seed, i),
                range(n_samples)))
    else:
        results = [_eval_one(tc, params, scfg, seed, i)
                   for i in range(n_samples)]
    for correct, hit in results:
        log.n_eval += 1
        log.n_correct += int(correct)
        log.n_hit += int(hit)
    log.wall_time_s = time.perf_counter() - t0
    return log


# ---------------------------------------------------------------------------
# cost model


@dataclass
class CostReport:
    kind: str
    tokens: dict[str, int]
    total_macs: int
    quadratic_macs: int
    dense_total_macs: int
    dense_quadratic_macs: int

    @property
    def ratio_vs_dense(self) -> float:
        return self.dense_total_macs / self.total_macs

    @property
    def quadratic_ratio(self) -> float:
        if self.quadratic_macs == 0:
            return math.inf
        return self.dense_quadratic_macs / self.quadratic_macs

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ratio_vs_dense"] = self.ratio_vs_dense
        d["quadratic_ratio"] = self.quadratic_ratio
        return d


def _f_attn(n: int, d: int) -> int:
    """Joint attention site: scores + mix (2 n^2 d) and QKVO (4 n d^2)."""
    return 2 * n * n * d + 4 * n * d * d


def _f_attn_quad(n: int, d: int) -> int:
    return 2 * n * n * d


def _sel_site(n_keys: int, d: int, parametric: bool = True) -> int:
    """One selection site: key/query projections plus score dot products."""
    if not parametric:
        return n_keys * d
    return (n_keys + 1) * d * d + n_keys * d


def _sel_pass(frames: int, n_keys: int, d: int, parametric: bool = True) -> int:
    """A batch of ``frames`` selection sites sharing one projected query."""
    if not parametric:
        return frames * n_keys * d
    return d * d + frames * (n_keys * d * d + n_keys * d)


def cost_estimate(tc: TrainConfig) -> CostReport:
    """Closed-form multiply-accumulate counts for one eval forward pass.

    Counts matmul MACs only, matching the runtime counter: projections,
    attention scores and mixing, selection scoring, and answer similarity.
    Pooling, position adds, and layer norm are matmul-free.
    """
    k, t, n_p, d, m = (tc.k_segments, tc.t_frames, tc.n_patches, tc.dim,
                       tc.m_words)
    parametric = tc.selector != sel.NONPARAMETRIC
    # answer similarity is A*D regardless of cosine: normalization has no matmul
    answer = tc.n_answers * d
    n_dense = k * t * n_p + m
    dense_total = _f_attn(n_dense, d) + answer
    dense_quad = _f_attn_quad(n_dense, d)

    kind = tc.model if tc.ablation == "none" else tc.ablation
    if kind == "mist":
        n = expected_tokens(k, t, tc.top_k, tc.top_j, m)
        per_layer = (_sel_site(k, d, parametric)
                     + _sel_pass(tc.top_k * t, n_p, d, parametric)
                     + n * d * d + _f_attn(n, d))
        total = tc.layers * per_layer + answer
        quad = tc.layers * _f_attn_quad(n, d)
        tokens = {"joint": n, "temporal_select": k, "spatial_select": n_p}
    elif kind == "meanpool":
        total, quad, tokens = answer, 0, {}
    elif kind == "trans_frame":
        n = k * t + m
        total = _f_attn(n, d) + answer
        quad = _f_attn_quad(n, d)
        tokens = {"joint": n}
    elif kind == "trans_patch":
        total = dense_total
        quad = dense_quad
        tokens = {"joint": n_dense}
    elif kind == "divided_sta":
        f = k * t
        total = f * _f_attn(n_p, d) + answer
        quad = f * _f_attn_quad(n_p, d)
        tokens = {"spatial": n_p}
        if f > 1:
            total += n_p * _f_attn(f, d)
            quad += n_p * _f_attn_quad(f, d)
            tokens["temporal"] = f
    elif kind == "no_ss":
        n = k * t * tc.top_j + m
        per_layer = (_sel_pass(k * t, n_p, d, parametric)
                     + n * d * d + _f_attn(n, d))
        total = tc.layers * per_layer + answer
        quad = tc.layers * _f_attn_quad(n, d)
        tokens = {"joint": n, "spatial_select": n_p}
    elif kind == "no_rs":
        n = k + tc.top_k * t * n_p + m
        per_layer = _sel_site(k, d, parametric) + n * d * d + _f_attn(n, d)
        total = tc.layers * per_layer + answer
        quad = tc.layers * _f_attn_quad(n, d)
        tokens = {"joint": n, "temporal_select": k}
    elif kind == "no_sta":
        total = (_sel_site(k, d, parametric)
                 + _sel_pass(tc.top_k * t, n_p, d, parametric) + answer)
        quad = 0
        tokens = {"temporal_select": k, "spatial_select": n_p}
    else:
        raise ConfigError(f"model (got {kind!r})")
    return CostReport(kind, tokens, total, quad, dense_total, dense_quad)


def measure_macs(tc: TrainConfig, params=None) -> int:
    """Count matmul MACs of one eval forward with the runtime counter."""
    if params is None:
        params = init_model(tc)
    sample = generate_synthetic(tc.synth_config(), (_TAG_EVAL, 0, 0))
    with nx.no_grad(), nx.count_macs() as counter:
        x_o, _ = model_forward(tc, params, sample)
        score_answers(x_o, sample.answers, cosine=tc.cosine_scores)
    return counter.total


# ---------------------------------------------------------------------------
# sweeps and serialization

SWEEP_AXES = {"top_k": "top_k", "top_j": "top_j", "L": "layers",
              "K": "k_segments", "frames": "frames"}


def sweep(tc_base: TrainConfig, axis: str, values, seeds=(0, 1, 2)) -> list[dict]:
    """Train per (value, seed) varying one axis; shared seeds across values."""
    if axis not in SWEEP_AXES:
        raise ConfigError(f"axis (got {axis!r}, want one of "
                          f"{sorted(SWEEP_AXES)})")
    rows = []
    for value in values:
        cfg = dataclasses.replace(tc_base, **{SWEEP_AXES[axis]: int(value)})
        for seed in seeds:
            cfg_s = dataclasses.replace(cfg, seed=int(seed))
            _, log = train(cfg_s)
            rows.append({"axis": axis, "value": int(value), "seed": int(seed),
                         "loss": log.losses[-1] if log.losses else float("nan"),
                         "acc": log.accuracy, "hit_rate": log.hit_rate,
                         "mmacs": log.mmacs})
    return rows


def write_metrics_csv(log: MetricsLog, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "loss", "acc", "hit_rate", "mmacs"])
        for s, l in zip(log.steps, log.losses):
            w.writerow([s, f"{l:.6f}", "", "", f"{log.mmacs:.3f}"])
        w.writerow(["final", "", f"{log.accuracy:.4f}",
                    f"{log.hit_rate:.4f}", f"{log.mmacs:.3f}"])


def write_sweep_csv(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["axis", "value", "seed", "loss",
                                           "acc", "hit_rate", "mmacs"])
        w.writeheader()
        w.writerows(rows)


def save_params(path: str | Path, tc: TrainConfig, params) -> None:
    """Binary parameter file: magic, JSON header, float64 LE payload."""
    named = model_named_parameters(params)
    header = {
        "version": PARAMS_VERSION,
        "config": tc.to_dict(),
        "tensors": [{"name": k, "shape": list(p.data.shape)}
                    for k, p in named.items()],
    }
    blob = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for p in named.values():
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def load_params(path: str | Path) -> tuple[TrainConfig, object]:
    """Rebuild (config, params) from a parameter file; shapes must match."""
    raw = Path(path).read_bytes()
    if raw[:8] != PARAMS_MAGIC:
        raise ParamsFormatError("bad magic; not a parameter file")
    if len(raw) < 12:
        raise ParamsFormatError("truncated header")
    (hlen,) = struct.unpack("<I", raw[8:12])
    if len(raw) < 12 + hlen:
        raise ParamsFormatError("truncated header")
    try:
        header = json.loads(raw[12:12 + hlen])
    except json.JSONDecodeError as e:
        raise ParamsFormatError(f"bad header JSON: {e}") from e
    if header.get("version") != PARAMS_VERSION:
        raise ParamsFormatError(f"unsupported version {header.get('version')}")
    tc = TrainConfig.from_dict(header["config"])
    params = init_model(tc)
    named = model_named_parameters(params)
    listed = [t["name"] for t in header["tensors"]]
    if listed != list(named):
        raise ParamsFormatError("tensor names do not match the config")
    off = 12 + hlen
    for entry in header["tensors"]:
        p = named[entry["name"]]
        if list(p.data.shape) != entry["shape"]:
            raise ParamsFormatError(f"shape mismatch for {entry['name']}")
        nbytes = p.data.size * 8
        if off + nbytes > len(raw):
            raise ParamsFormatError("truncated payload")
        vals = np.frombuffer(raw[off:off + nbytes], dtype="<f8")
        p.data[...] = vals.reshape(p.data.shape)
        off += nbytes
    if off != len(raw):
        raise ParamsFormatError("trailing bytes after payload")
    return tc, params
