"""Question-conditioned differentiable top-k selection.

Candidates are scored by a single-query cross-modal attention (projected
question vector against projected keys) or, in the nonparametric variant,
by cosine similarity with no trainable scorer. Top-k selection samples
with Gumbel noise: the forward pass copies the chosen candidate rows
exactly (hard one-hot), while the backward pass substitutes the Jacobian
of the Gumbel-Softmax relaxation, so the scorer still receives gradient.

Sampling modes:

* ``with_replacement``: k independent Gumbel-max draws from the score
  distribution (duplicates allowed, k may exceed n).
* ``without_replacement``: draw, zero the winner out, renormalize, repeat;
  requires k <= n and with k = n every candidate is included.
* ``nonparametric``: deterministic top-k by score, ties to the lowest
  index; there is nothing to train so no noise is involved.

In eval mode (no RNG passed) every mode degenerates to deterministic
argmax top-k; with replacement that means the argmax index repeated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .numerics import (
    LinearMap,
    ShapeMismatch,
    Tensor,
    _acc,
    _node,
    matmul,
    mul,
    power,
    reshape,
    softmax,
    tsum,
)

WITH_REPLACEMENT = "with_replacement"
WITHOUT_REPLACEMENT = "without_replacement"
NONPARAMETRIC = "nonparametric"
SELECTOR_KINDS = (WITH_REPLACEMENT, WITHOUT_REPLACEMENT, NONPARAMETRIC)

_TINY = 1e-300
_MASKED = -1e30


@dataclass(frozen=True)
class SelectorMode:
    """Sampling mode and relaxation temperature of a selector."""

    kind: str = WITH_REPLACEMENT
    temperature: float = 1.0

    def __post_init__(self) -> None:
        if self.kind not in SELECTOR_KINDS:
            raise ValueError(f"unknown selector kind {self.kind!r}")
        if not self.temperature > 0:
            raise ValueError("selector temperature must be positive")


@dataclass
class SelectParams:
    """Query and key projections of one selection site."""

    query: LinearMap
    key: LinearMap

    def __post_init__(self) -> None:
        if self.query.d_out != self.key.d_out:
            raise ShapeMismatch("query and key projections must share output width")


@dataclass
class SelectionResult:
    """Outcome of one top-k selection."""

    indices: np.ndarray            # (k,) candidate indices, draw order
    soft_weights: Tensor           # (n,) score distribution over candidates
    selected: Tensor               # (k, ...) selected candidate rows
    straight_through: bool         # hard forward with relaxed backward


def cross_modal_scores(q: Tensor, keys: Tensor, proj_q: LinearMap,
                       proj_k: LinearMap) -> Tensor:
    """Softmax attention of one projected query over projected keys.

    Logits are scaled by sqrt of the projection output width.
    """
    if q.data.ndim != 1 or keys.data.ndim != 2:
        raise ShapeMismatch("expected q (D,) and keys (n, D)")
    if proj_q.d_out != proj_k.d_out:
        raise ShapeMismatch("projection output widths differ")
    d = proj_q.d_out
    qp = proj_q(q)                                   # (d,)
    kp = proj_k(keys)                                # (n, d)
    logits = reshape(matmul(kp, reshape(qp, (d, 1))), (keys.shape[0],))
    return softmax(mul(logits, 1.0 / math.sqrt(d)))


def _l2_rows(x: Tensor) -> Tensor:
    n2 = tsum(mul(x, x), axis=-1, keepdims=True)
    if np.any(n2.data <= 0):
        raise ValueError("cosine scores need non-zero feature vectors")
    return mul(x, power(n2, -0.5))


def nonparametric_scores(q: Tensor, keys: Tensor) -> Tensor:
    """Softmax over cosine similarities; no trainable parameters."""
    if q.data.ndim != 1 or keys.data.ndim != 2:
        raise ShapeMismatch("expected q (D,) and keys (n, D)")
    d = q.shape[0]
    qn = _l2_rows(reshape(q, (1, d)))
    kn = _l2_rows(keys)
    sims = reshape(matmul(kn, reshape(qn, (d, 1))), (keys.shape[0],))
    return softmax(sims)


def _relaxed_rows(scores: Tensor, k: int, mode: SelectorMode,
                  rng: np.random.Generator | None) -> tuple[Tensor, np.ndarray]:
    """k Gumbel-Softmax rows over the candidates plus their hard indices.

    One tape node: the backward maps row gradients through each row's
    softmax and the log back onto the score vector. Masking terms in the
    without-replacement branch are constants of the draw history.
    """
    p = scores.data
    n = p.shape[0]
    tau = mode.temperature
    logp = np.log(np.maximum(p, _TINY))
    soft = np.empty((k, n))
    idx = np.empty(k, dtype=np.int64)

    if mode.kind == WITH_REPLACEMENT:
        z = np.tile(logp, (k, 1))
        if rng is not None:
            z = z + rng.gumbel(size=(k, n))
        z /= tau
        idx[:] = z.argmax(axis=1)
        z -= z.max(axis=1, keepdims=True)
        e = np.exp(z)
        soft[:] = e / e.sum(axis=1, keepdims=True)
    else:
        # sequential: draw, mask the winner, renormalize, repeat
        penalty = np.zeros(n)
        deterministic = rng is None or mode.kind == NONPARAMETRIC
        for i in range(k):
            z = logp + penalty
            if not deterministic:
                z = z + rng.gumbel(size=n)
            z /= tau
            idx[i] = int(z.argmax())
            z = z - z.max()
            e = np.exp(z)
            soft[i] = e / e.sum()
            penalty[idx[i]] = _MASKED

    def bwd(g: np.ndarray) -> None:
        gz = soft * (g - (soft * g).sum(axis=1, keepdims=True))
        glogp = gz.sum(axis=0) / tau
        gp = np.where(p > _TINY, glogp / np.maximum(p, _TINY), 0.0)
        _acc(scores, gp)

    return _node(soft, (scores,), bwd), idx


def _pick(soft: Tensor, values: Tensor, idx: np.ndarray, hard: bool) -> Tensor:
    """Gather the indexed rows (hard) or mix all rows by the relaxed weights.

    In hard mode the forward output is a bit-exact copy of the candidate
    rows; gradient w.r.t. the relaxed weights is dot(grad_row, candidate)
    in both modes, which is the straight-through estimator.
    """
    k, n = soft.shape
    tail = values.shape[1:]
    vflat = values.data.reshape(n, -1)
    if hard:
        out = values.data[idx].copy()
    else:
        out = (soft.data @ vflat).reshape((k,) + tail)

    def bwd(g: np.ndarray) -> None:
        gflat = g.reshape(k, -1)
        _acc(soft, gflat @ vflat.T)
        if values.requires_grad:
            gv = np.zeros_like(vflat)
            if hard:
                np.add.at(gv, idx, gflat)
            else:
                gv += soft.data.T @ gflat
            _acc(values, gv.reshape(values.data.shape))

    return _node(out, (soft, values), bwd)


def gumbel_topk(scores: Tensor, values: Tensor, k: int, mode: SelectorMode,
                rng: np.random.Generator | None = None,
                hard: bool = True) -> SelectionResult:
    """Select k candidate rows of ``values`` according to ``scores``.

    ``scores`` must be a probability vector over the candidates (axis 0 of
    ``values``). Passing no RNG runs the deterministic eval path. ``hard``
    keeps the exact candidate rows in the forward pass; disabling it
    substitutes the fully soft mixture, which makes the loss differentiable
    end to end for finite-difference checks.
    """
    if scores.data.ndim != 1:
        raise ShapeMismatch("scores must be 1-D")
    n = scores.shape[0]
    if values.shape[0] != n:
        raise ShapeMismatch(f"values axis 0 is {values.shape[0]}, scores have {n}")
    if k < 1:
        raise ValueError("k must be at least 1")
    if mode.kind != WITH_REPLACEMENT and k > n:
        raise ValueError(f"{mode.kind} cannot select {k} of {n} candidates")
    total = scores.data.sum()
    if abs(total - 1.0) > 1e-6 or scores.data.min() < -1e-12:
        raise ValueError("scores must form a probability distribution")

    soft, idx = _relaxed_rows(scores, k, mode, rng)
    selected = _pick(soft, values, idx, hard)
    return SelectionResult(idx, scores, selected, straight_through=hard)


def segment_select(video_x: Tensor, segments: Tensor, q: Tensor,
                   params: SelectParams | None, top_k: int, mode: SelectorMode,
                   rng: np.random.Generator | None = None,
                   hard: bool = True) -> SelectionResult:
    """Pick top_k segments; selected rows are whole (T, N, D) patch blocks."""
    k_seg, t, n, d = video_x.shape
    if segments.shape != (k_seg, d):
        raise ShapeMismatch(f"segments {segments.shape} do not match video {video_x.shape}")
    if mode.kind == NONPARAMETRIC:
        scores = nonparametric_scores(q, segments)
    else:
        if params is None:
            raise ValueError("parametric selection needs projection params")
        scores = cross_modal_scores(q, segments, params.query, params.key)
    blocks = reshape(video_x, (k_seg, t * n * d))
    res = gumbel_topk(scores, blocks, top_k, mode, rng, hard)
    return replace(res, selected=reshape(res.selected, (top_k, t, n, d)))


def region_select(patches: Tensor, q: Tensor, params: SelectParams | None,
                  top_j: int, mode: SelectorMode,
                  rng: np.random.Generator | None = None,
                  hard: bool = True) -> SelectionResult:
    """Pick top_j patches of one frame with the shared question query."""
    if patches.data.ndim != 2:
        raise ShapeMismatch("region selection expects (N, D) patches")
    if mode.kind == NONPARAMETRIC:
        scores = nonparametric_scores(q, patches)
    else:
        if params is None:
            raise ValueError("parametric selection needs projection params")
        scores = cross_modal_scores(q, patches, params.query, params.key)
    return gumbel_topk(scores, patches, top_j, mode, rng, hard)


# -- batched variant over many frames ----------------------------------------


@dataclass
class MultiSelectionResult:
    """Outcome of top-k selections run over F independent frames."""

    indices: np.ndarray            # (F, k) patch indices per frame
    soft_weights: Tensor           # (F, n) score distributions
    selected: Tensor               # (F, k, D) selected patch rows
    straight_through: bool


def _relaxed_rows_multi(scores: Tensor, k: int, mode: SelectorMode,
                        rngs: Sequence[np.random.Generator] | None,
                        ) -> tuple[Tensor, np.ndarray]:
    """``_relaxed_rows`` over F frames at once; one tape node.

    ``rngs`` holds one independent generator per frame. Each stream is
    consumed in exactly the order the per-frame function would use, so a
    batched run reproduces F separate runs draw for draw.
    """
    p = scores.data                                    # (F, n)
    f, n = p.shape
    tau = mode.temperature
    logp = np.log(np.maximum(p, _TINY))
    soft = np.empty((f, k, n))
    idx = np.empty((f, k), dtype=np.int64)

    if mode.kind == WITH_REPLACEMENT:
        z = np.repeat(logp[:, None, :], k, axis=1)     # (F, k, n)
        if rngs is not None:
            for i, rng in enumerate(rngs):
                z[i] += rng.gumbel(size=(k, n))
        z /= tau
        idx[:] = z.argmax(axis=-1)
        z -= z.max(axis=-1, keepdims=True)
        e = np.exp(z)
        soft[:] = e / e.sum(axis=-1, keepdims=True)
    else:
        penalty = np.zeros((f, n))
        deterministic = rngs is None or mode.kind == NONPARAMETRIC
        for i in range(k):
            z = logp + penalty
            if not deterministic:
                for j, rng in enumerate(rngs):
                    z[j] += rng.gumbel(size=n)
            z /= tau
            idx[:, i] = z.argmax(axis=-1)
            z -= z.max(axis=-1, keepdims=True)
            e = np.exp(z)
            soft[:, i] = e / e.sum(axis=-1, keepdims=True)
            penalty[np.arange(f), idx[:, i]] = _MASKED

    def bwd(g: np.ndarray) -> None:
        gz = soft * (g - (soft * g).sum(axis=-1, keepdims=True))
        glogp = gz.sum(axis=1) / tau
        gp = np.where(p > _TINY, glogp / np.maximum(p, _TINY), 0.0)
        _acc(scores, gp)

    return _node(soft, (scores,), bwd), idx


def _pick_multi(soft: Tensor, values: Tensor, idx: np.ndarray,
                hard: bool) -> Tensor:
    """Per-frame gather (hard) or relaxed mix; one tape node."""
    f, k, n = soft.shape
    vflat = values.data.reshape(f, n, -1)
    frame_ix = np.arange(f)[:, None]
    if hard:
        out = vflat[frame_ix, idx].copy()              # (F, k, d)
    else:
        out = np.matmul(soft.data, vflat)

    def bwd(g: np.ndarray) -> None:
        gflat = g.reshape(f, k, -1)
        _acc(soft, np.matmul(gflat, vflat.swapaxes(1, 2)))
        if values.requires_grad:
            gv = np.zeros_like(vflat)
            if hard:
                np.add.at(gv, (frame_ix, idx), gflat)
            else:
                gv += np.matmul(soft.data.swapaxes(1, 2), gflat)
            _acc(values, gv.reshape(values.data.shape))

    return _node(out.reshape((f, k) + values.shape[2:]), (soft, values), bwd)


def region_select_multi(frames: Tensor, q: Tensor,
                        params: SelectParams | None, top_j: int,
                        mode: SelectorMode,
                        rngs: Sequence[np.random.Generator] | None = None,
                        hard: bool = True) -> MultiSelectionResult:
    """Region selection over a whole (F, N, D) frame stack at once.

    Semantically F independent ``region_select`` calls sharing the same
    question query, fused into three tape nodes. ``rngs`` must hold one
    generator per frame (None for the deterministic eval path); each is
    consumed exactly as its per-frame counterpart would be.
    """
    if frames.data.ndim != 3:
        raise ShapeMismatch("multi region selection expects (F, N, D) frames")
    f, n, d = frames.shape
    if rngs is not None and len(rngs) != f:
        raise ValueError(f"need one rng per frame: {len(rngs)} for {f}")
    if top_j < 1:
        raise ValueError("k must be at least 1")
    if mode.kind != WITH_REPLACEMENT and top_j > n:
        raise ValueError(f"{mode.kind} cannot select {top_j} of {n} candidates")

    flat = reshape(frames, (f * n, d))
    if mode.kind == NONPARAMETRIC:
        qn = _l2_rows(reshape(q, (1, d)))
        kn = _l2_rows(flat)
        sims = reshape(matmul(kn, reshape(qn, (d, 1))), (f, n))
        scores = softmax(sims, axis=-1)
    else:
        if params is None:
            raise ValueError("parametric selection needs projection params")
        dk = params.query.d_out
        qp = params.query(q)
        kp = params.key(flat)
        logits = reshape(matmul(kp, reshape(qp, (dk, 1))), (f, n))
        scores = softmax(mul(logits, 1.0 / math.sqrt(dk)), axis=-1)

    soft, idx = _relaxed_rows_multi(scores, top_j, mode, rngs)
    selected = _pick_multi(soft, frames, idx, hard)
    return MultiSelectionResult(idx, scores, selected, straight_through=hard)
