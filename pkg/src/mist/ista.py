"""Iterative selection-and-attention layers over video, question, and answers.

One layer: pool the current word features into a question vector, pick
top_k segments with it, pick top_j patches from every frame of the chosen
segments, then run multi-head self-attention over projected segment, region,
and word tokens (plus a learned token-type embedding each). The attention
output refreshes the segment and word states for the next layer, which
repeats selection on the updated evidence. The model output is the mean
over layers of each layer's mean-pooled token stack.

Selection always scores the full, current segment state; candidate values
are the position-tagged input patches. Question words carry no position
embedding. Temperatures and sampling mode come from the caller so training
can anneal them.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .features import (
    POOL_MEAN,
    PositionTable,
    SynthSample,
    add_positions,
    pool_hierarchy,
)
from .numerics import (
    AttentionParams,
    LinearMap,
    Tensor,
    add,
    concat,
    gather_rows,
    init_linear,
    init_table,
    layer_norm,
    mean_pool,
    mul,
    multi_head_attention,
    parameter,
    reshape,
    rows,
)
from .selection import (
    NONPARAMETRIC,
    SelectorMode,
    SelectParams,
    region_select_multi,
    segment_select,
)

# Token-type table rows.
TYPE_SEGMENT, TYPE_REGION, TYPE_WORD = 0, 1, 2


@dataclass
class IstaLayerParams:
    """All parameters of one layer; layers never share weights."""

    temporal: SelectParams
    spatial: SelectParams
    proj_segment: LinearMap
    proj_region: LinearMap
    proj_word: LinearMap
    attn: AttentionParams
    type_table: Tensor
    norm_gain: Tensor | None = None
    norm_bias: Tensor | None = None


@dataclass
class MistParams:
    """Position table plus the per-layer parameter stacks."""

    positions: PositionTable
    layers: list[IstaLayerParams]


@dataclass
class IstaState:
    """Evidence carried between layers."""

    segments: Tensor   # (K, D)
    words: Tensor      # (M, D)


@dataclass
class FrameTrace:
    """Region selection record of one selected frame."""

    frame: int                 # global frame index, segment * T + t
    weights: np.ndarray        # (N,) patch score distribution
    indices: np.ndarray        # (top_j,) selected patches


@dataclass
class LayerTrace:
    """Selection record of one layer."""

    temporal_weights: np.ndarray   # (K,) segment score distribution
    temporal_indices: np.ndarray   # (top_k,) selected segments
    spatial: list[FrameTrace]


TRACE_SCHEMA = {
    "type": "object",
    "required": ["layers"],
    "additionalProperties": False,
    "properties": {
        "layers": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["temporal", "spatial"],
                "additionalProperties": False,
                "properties": {
                    "temporal": {
                        "type": "object",
                        "required": ["weights", "selected"],
                        "additionalProperties": False,
                        "properties": {
                            "weights": {"type": "array", "items": {"type": "number"}},
                            "selected": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                        },
                    },
                    "spatial": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["frame", "weights", "selected"],
                            "additionalProperties": False,
                            "properties": {
                                "frame": {"type": "integer", "minimum": 0},
                                "weights": {"type": "array", "items": {"type": "number"}},
                                "selected": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                            },
                        },
                    },
                },
            },
        }
    },
}


def trace_to_json(traces: Sequence[LayerTrace]) -> dict:
    """Serialize layer traces into the documented JSON layout."""
    return {
        "layers": [
            {
                "temporal": {
                    "weights": [float(w) for w in lt.temporal_weights],
                    "selected": [int(i) for i in lt.temporal_indices],
                },
                "spatial": [
                    {
                        "frame": int(ft.frame),
                        "weights": [float(w) for w in ft.weights],
                        "selected": [int(i) for i in ft.indices],
                    }
                    for ft in lt.spatial
                ],
            }
            for lt in traces
        ]
    }


def site_rng(noise_key: Sequence[int] | None, layer: int,
             site: int) -> np.random.Generator | None:
    """Independent noise stream for one (sample, layer, selector site).

    The key is a tuple of non-negative ints identifying the sample (for
    training: seed, stream tag, step, batch slot). Site 0 is the temporal
    selector; spatial selectors use 1 + frame rank. ``None`` means eval.
    """
    if noise_key is None:
        return None
    entropy = [int(x) for x in noise_key] + [int(layer), int(site)]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def expected_tokens(k: int, t: int, top_k: int, top_j: int, m: int) -> int:
    """Closed-form token count of the joint attention site."""
    return k + top_k * t * top_j + m


def ista_layer(video_x: Tensor, state: IstaState, lp: IstaLayerParams,
               top_k: int, top_j: int, heads: int, mode: SelectorMode,
               noise_key: Sequence[int] | None, layer_idx: int,
               hard: bool = True) -> tuple[Tensor, IstaState, LayerTrace]:
    """Run one selection-attention layer, returning tokens, state, trace."""
    k_seg, t, n_patch, d = video_x.shape
    m = state.words.shape[0]

    q = mean_pool(state.words, axis=0)
    sel_params = None if mode.kind == NONPARAMETRIC else lp.temporal
    res_t = segment_select(
        video_x, state.segments, q, sel_params, top_k, mode,
        site_rng(noise_key, layer_idx, 0), hard,
    )

    n_frames = top_k * t
    frames_flat = reshape(res_t.selected, (n_frames, n_patch, d))
    reg_params = None if mode.kind == NONPARAMETRIC else lp.spatial
    rngs = None if noise_key is None else [
        site_rng(noise_key, layer_idx, 1 + r) for r in range(n_frames)
    ]
    res_r = region_select_multi(frames_flat, q, reg_params, top_j, mode,
                                rngs, hard)
    x_st = reshape(res_r.selected, (n_frames * top_j, d))
    frame_traces = [
        FrameTrace(int(res_t.indices[r // t]) * t + (r % t),
                   res_r.soft_weights.data[r].copy(),
                   res_r.indices[r].copy())
        for r in range(n_frames)
    ]

    seg_tok = add(lp.proj_segment(state.segments),
                  gather_rows(lp.type_table, [TYPE_SEGMENT]))
    reg_tok = add(lp.proj_region(x_st),
                  gather_rows(lp.type_table, [TYPE_REGION]))
    word_tok = add(lp.proj_word(state.words),
                   gather_rows(lp.type_table, [TYPE_WORD]))
    tokens = concat([seg_tok, reg_tok, word_tok], axis=0)

    expect = expected_tokens(k_seg, t, top_k, top_j, m)
    if tokens.shape[0] != expect:
        raise AssertionError(
            f"token count {tokens.shape[0]} violates closed form {expect}"
        )

    out = multi_head_attention(tokens, lp.attn, heads)
    if lp.norm_gain is not None:
        out = layer_norm(add(tokens, out), lp.norm_gain, lp.norm_bias)

    new_state = IstaState(
        segments=rows(out, 0, k_seg),
        words=rows(out, expect - m, expect),
    )
    trace = LayerTrace(res_t.soft_weights.data.copy(), res_t.indices.copy(),
                       frame_traces)
    return out, new_state, trace


def mist_forward(sample: SynthSample, params: MistParams, cfg,
                 noise_key: Sequence[int] | None = None, *,
                 hard: bool = True, temperature: float = 1.0,
                 ) -> tuple[Tensor, list[LayerTrace]]:
    """Full forward pass: position-tag, pool, run layers, average outputs.

    ``cfg`` provides top_k, top_j, heads, and selector kind. ``noise_key``
    of None runs the deterministic eval path. Returns the pooled output
    vector (D,) and the per-layer selection traces.
    """
    video = add_positions(sample.video, params.positions)
    _, segments = pool_hierarchy(video, POOL_MEAN)
    state = IstaState(segments, sample.question.w)
    mode = SelectorMode(cfg.selector, temperature)

    pooled: list[Tensor] = []
    traces: list[LayerTrace] = []
    for layer_idx, lp in enumerate(params.layers):
        tokens, state, trace = ista_layer(
            video.x, state, lp, cfg.top_k, cfg.top_j, cfg.heads, mode,
            noise_key, layer_idx, hard,
        )
        pooled.append(mean_pool(tokens, axis=0))
        traces.append(trace)

    x_o = pooled[0]
    for extra in pooled[1:]:
        x_o = add(x_o, extra)
    if len(pooled) > 1:
        x_o = mul(x_o, 1.0 / len(pooled))
    return x_o, traces


# -- parameter construction ----------------------------------------------------


def _fresh_select(rng: np.random.Generator, d: int, name: str) -> SelectParams:
    """Independent fan-in uniform draws for the query and key maps.

    With independent random projections the initial selection scores are
    near-uniform over candidates, so an untrained model picks segments at
    roughly the Top_k/K chance rate.
    """
    return SelectParams(init_linear(rng, d, d, f"{name}.query"),
                        init_linear(rng, d, d, f"{name}.key"))


def init_ista_layer(rng: np.random.Generator, d: int, name: str,
                    residual_norm: bool) -> IstaLayerParams:
    """Fresh layer parameters; linear maps use fan-in scaled uniform init."""
    mk = lambda tag: init_linear(rng, d, d, f"{name}.{tag}")
    return IstaLayerParams(
        temporal=_fresh_select(rng, d, f"{name}.temporal"),
        spatial=_fresh_select(rng, d, f"{name}.spatial"),
        proj_segment=mk("proj_segment"),
        proj_region=mk("proj_region"),
        proj_word=mk("proj_word"),
        attn=AttentionParams(mk("attn.wq"), mk("attn.wk"), mk("attn.wv"), mk("attn.wo")),
        type_table=init_table(rng, 3, d, f"{name}.type_table"),
        norm_gain=parameter(np.ones(d), f"{name}.norm.gain") if residual_norm else None,
        norm_bias=parameter(np.zeros(d), f"{name}.norm.bias") if residual_norm else None,
    )


def init_mist_params(rng: np.random.Generator, k: int, t: int, d: int,
                     n_layers: int, residual_norm: bool = True) -> MistParams:
    positions = PositionTable(init_table(rng, k * t + 1, d, "positions.temporal"))
    layers = [
        init_ista_layer(rng, d, f"layers.{i}", residual_norm)
        for i in range(n_layers)
    ]
    return MistParams(positions, layers)


def _linear_params(m: LinearMap) -> list[Tensor]:
    out = [m.weight]
    if m.bias is not None:
        out.append(m.bias)
    return out


def layer_param_list(lp: IstaLayerParams) -> list[Tensor]:
    out: list[Tensor] = []
    for m in (lp.temporal.query, lp.temporal.key, lp.spatial.query, lp.spatial.key,
              lp.proj_segment, lp.proj_region, lp.proj_word,
              lp.attn.wq, lp.attn.wk, lp.attn.wv, lp.attn.wo):
        out.extend(_linear_params(m))
    out.append(lp.type_table)
    if lp.norm_gain is not None:
        out.extend([lp.norm_gain, lp.norm_bias])
    return out


def named_parameters(params: MistParams) -> dict[str, Tensor]:
    """Flat name -> tensor view of every trainable array."""
    out: dict[str, Tensor] = {params.positions.temporal.name: params.positions.temporal}
    for lp in params.layers:
        for t in layer_param_list(lp):
            out[t.name] = t
    return out
