"""Feature containers, pooling, position tables, file I/O, synthetic tasks.

A video is a (K, T, N, D) stack of frozen patch features: K segments of T
frames of N patches. Questions are (M, D) word features whose row 0 acts
as the summary token, and answer candidates are an (A, D) bank matched by
dot product. Synthetic tasks plant class prototypes into noise so that the
label is recoverable only by looking at the planted locations, which gives
selection a measurable ground truth.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .numerics import (
    ShapeMismatch,
    Tensor,
    gather_rows,
    mean_pool,
    reshape,
    take,
    tensor,
)

FEATURE_MAGIC = b"MISTFEAT"
FEATURE_VERSION = 1

SINGLE_EVENT = "single_event"
MULTI_EVENT_ORDER = "multi_event_order"
TASK_KINDS = (SINGLE_EVENT, MULTI_EVENT_ORDER)

POOL_MEAN = "mean"
POOL_FIRST_TOKEN = "first_token"

# Stream tags for seed derivation, so prototype draws and per-sample draws
# can never collide even for equal integer seeds.
_S_TASK = 101
_S_SAMPLE = 202


class FeatureFormatError(ValueError):
    """A feature file is malformed or inconsistent."""


@dataclass
class VideoFeatures:
    """Patch features of one video, shaped (K, T, N, D)."""

    x: Tensor
    has_cls_patch: bool = False
    has_cls_frame: bool = False
    positions_added: bool = False

    def __post_init__(self) -> None:
        if self.x.data.ndim != 4:
            raise ShapeMismatch(f"video features must be 4-D, got {self.x.shape}")
        if min(self.x.shape) < 1:
            raise ShapeMismatch("video feature dims must be positive")

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.x.shape  # (K, T, N, D)


@dataclass
class QuestionFeatures:
    """Word features of one question, shaped (M, D); row 0 is the summary token."""

    w: Tensor

    def __post_init__(self) -> None:
        if self.w.data.ndim != 2 or self.w.shape[0] < 1:
            raise ShapeMismatch(f"question features must be (M>=1, D), got {self.w.shape}")


@dataclass
class AnswerBank:
    """Candidate answer features (A, D) and their string labels."""

    a: Tensor
    labels: list[str]

    def __post_init__(self) -> None:
        if self.a.data.ndim != 2 or self.a.shape[0] < 2:
            raise ShapeMismatch(f"answer bank must be (A>=2, D), got {self.a.shape}")
        if len(self.labels) != self.a.shape[0]:
            raise ShapeMismatch("answer labels must match bank rows")
        if len(set(self.labels)) != len(self.labels):
            raise ValueError("answer labels must be unique")


@dataclass
class PositionTable:
    """Temporal position rows, (K*T + 1, D) with row 0 reserved, plus an
    optional 3-row token-type table."""

    temporal: Tensor
    type: Tensor | None = None

    def __post_init__(self) -> None:
        if self.temporal.data.ndim != 2 or self.temporal.shape[0] < 2:
            raise ShapeMismatch("temporal table must be ((K*T)+1 >= 2, D)")
        if self.type is not None:
            if self.type.data.ndim != 2 or self.type.shape[0] != 3:
                raise ShapeMismatch("type table must have exactly 3 rows")
            if self.type.shape[1] != self.temporal.shape[1]:
                raise ShapeMismatch("type and temporal widths differ")


@dataclass(frozen=True)
class PlantedEvent:
    """Ground-truth location of one planted event.

    An event occupies its whole segment in time: the class prototype sits
    at the ``patch`` position of every frame in ``segment``. Spanning the
    segment keeps the planted segment detectable from pooled segment
    features; a prototype planted in a single frame is diluted by the
    T*N-row segment mean to a fraction of the noise floor, and training
    gets no initial selection signal at all (measured: loss stays at
    log A for thousands of steps).
    """

    class_id: int
    segment: int
    patch: int


@dataclass
class SynthSample:
    """One generated example with its planting metadata."""

    video: VideoFeatures
    question: QuestionFeatures
    answers: AnswerBank
    label: int
    kind: str
    events: list[PlantedEvent] = field(default_factory=list)

    @property
    def answer_event(self) -> PlantedEvent:
        """The event whose class equals the label.

        For ordering tasks that is the event in the later segment.
        """
        if self.kind == MULTI_EVENT_ORDER:
            return max(self.events, key=lambda e: e.segment)
        return self.events[0]


# -- pooling -----------------------------------------------------------------


def pool_hierarchy(v: VideoFeatures, mode: str = POOL_MEAN) -> tuple[Tensor, Tensor]:
    """Pool patches into frame features (K, T, D) and segment features (K, D).

    ``mean`` averages patches per frame; ``first_token`` takes the patch-level
    summary token and requires the video to carry one. Segments are always
    the mean over their frames.
    """
    if mode == POOL_MEAN:
        frames = mean_pool(v.x, axis=2)
    elif mode == POOL_FIRST_TOKEN:
        if not v.has_cls_patch:
            raise ValueError("first_token pooling needs a patch summary token")
        frames = take(v.x, 0, axis=2)
    else:
        raise ValueError(f"unknown pooling mode {mode!r}")
    segments = mean_pool(frames, axis=1)
    return frames, segments


def pool_question(q: QuestionFeatures, mode: str = POOL_MEAN) -> Tensor:
    """Pool word features into one (D,) question vector."""
    if mode == POOL_MEAN:
        return mean_pool(q.w, axis=0)
    if mode == POOL_FIRST_TOKEN:
        return take(q.w, 0, axis=0)
    raise ValueError(f"unknown pooling mode {mode!r}")


def add_positions(v: VideoFeatures, table: PositionTable) -> VideoFeatures:
    """Add the temporal position row of frame (k, t) to all its patches.

    Frame (k, t) maps to table row k*T + t + 1; row 0 is reserved.
    Returns a new VideoFeatures so re-application can be rejected.
    """
    if v.positions_added:
        raise ValueError("position embeddings were already added to this video")
    k, t, n, d = v.dims
    if table.temporal.shape != (k * t + 1, d):
        raise ShapeMismatch(
            f"temporal table {table.temporal.shape} does not match "
            f"(K*T+1, D) = {(k * t + 1, d)}"
        )
    idx = (np.arange(k)[:, None] * t + np.arange(t)[None, :] + 1).ravel()
    rows_kt = gather_rows(table.temporal, idx)       # (K*T, D)
    bias = reshape(rows_kt, (k, t, 1, d))            # broadcasts over patches
    shifted = v.x + bias
    return replace(v, x=shifted, positions_added=True)


# -- feature files -----------------------------------------------------------


def save_features(video: VideoFeatures, question: QuestionFeatures,
                  answers: AnswerBank, path: str | Path) -> None:
    """Write one example to the binary feature container.

    Layout: 8-byte magic, u32 little-endian header length, UTF-8 JSON
    header, then row-major little-endian float32 payloads for the video,
    question, and answer arrays in that order.
    """
    k, t, n, d = video.dims
    m, dq = question.w.shape
    a, da = answers.a.shape
    if dq != d or da != d:
        raise ShapeMismatch("video, question, and answers must share width D")
    header = {
        "version": FEATURE_VERSION,
        "K": k, "T": t, "N": n, "D": d, "M": m, "A": a,
        "dtype": "f32",
        "cls_patch": video.has_cls_patch,
        "cls_frame": video.has_cls_frame,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for arr in (video.x.data, question.w.data, answers.a.data):
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_features(path: str | Path) -> tuple[VideoFeatures, QuestionFeatures, AnswerBank]:
    """Read a feature container written by :func:`save_features`."""
    raw = Path(path).read_bytes()
    if len(raw) < len(FEATURE_MAGIC) + 4:
        raise FeatureFormatError("file too short for magic and header length")
    if raw[: len(FEATURE_MAGIC)] != FEATURE_MAGIC:
        raise FeatureFormatError("bad magic, not a feature container")
    off = len(FEATURE_MAGIC)
    (hlen,) = struct.unpack_from("<I", raw, off)
    off += 4
    if off + hlen > len(raw):
        raise FeatureFormatError("declared header length exceeds file size")
    try:
        header = json.loads(raw[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FeatureFormatError(f"header is not valid JSON: {err}") from err
    off += hlen
    required = {"version", "K", "T", "N", "D", "M", "A", "dtype", "cls_patch", "cls_frame"}
    missing = sorted(required - set(header))
    if missing:
        raise FeatureFormatError(f"header missing keys: {', '.join(missing)}")
    if header["version"] != FEATURE_VERSION:
        raise FeatureFormatError(f"unsupported version {header['version']}")
    if header["dtype"] != "f32":
        raise FeatureFormatError(f"unsupported dtype {header['dtype']!r}")
    k, t, n, d = (int(header[x]) for x in "KTND")
    m, a = int(header["M"]), int(header["A"])
    counts = (k * t * n * d, m * d, a * d)
    expect = 4 * sum(counts)
    if len(raw) - off != expect:
        raise FeatureFormatError(
            f"payload is {len(raw) - off} bytes, header implies {expect}"
        )
    parts = []
    for count in counts:
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        off += 4 * count
        if not np.all(np.isfinite(arr)):
            raise FeatureFormatError("payload contains non-finite values")
        parts.append(arr.astype(np.float64))
    video = VideoFeatures(
        tensor(parts[0].reshape(k, t, n, d)),
        has_cls_patch=bool(header["cls_patch"]),
        has_cls_frame=bool(header["cls_frame"]),
    )
    question = QuestionFeatures(tensor(parts[1].reshape(m, d)))
    answers = AnswerBank(
        tensor(parts[2].reshape(a, d)),
        labels=[f"class_{i}" for i in range(a)],
    )
    return video, question, answers


# -- synthetic tasks ---------------------------------------------------------


@dataclass(frozen=True)
class SynthConfig:
    """Shape and difficulty of a planted-event task."""

    kind: str = SINGLE_EVENT
    k_segments: int = 8
    t_frames: int = 4
    n_patches: int = 16
    dim: int = 32
    m_words: int = 8
    n_answers: int = 4
    noise_std: float = 0.1
    task_seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in TASK_KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}")
        for name in ("k_segments", "t_frames", "n_patches", "dim", "m_words", "n_answers"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.n_answers < 2:
            raise ValueError("need at least two answer classes")
        if self.n_answers > self.dim:
            raise ValueError("n_answers must be <= dim so prototypes can be orthogonal")
        if self.noise_std < 0:
            raise ValueError("noise_std must be non-negative")
        if self.kind == MULTI_EVENT_ORDER and self.k_segments < 2:
            raise ValueError("ordering task needs at least two segments")


def _f32(arr: np.ndarray) -> np.ndarray:
    """Round to float32 values (kept in float64) so file round-trips are exact."""
    return arr.astype(np.float32).astype(np.float64)


def _rng_for(*key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(x) for x in key]))


def task_prototypes(cfg: SynthConfig) -> tuple[np.ndarray, np.ndarray]:
    """Orthonormal class prototypes (A, D) and the task cue vector (D,).

    Fixed given the config (including its task_seed), independent of the
    per-sample seed, so a trained scorer can rely on the class directions.
    The cue is the normalized prototype sum: it lies in the class subspace
    (every prototype scores 1/sqrt(A) against it, so it names the event
    family without leaking the label), the way question embeddings from a
    shared vision-language encoder overlap the visual features they ask
    about.
    """
    rng = _rng_for(_S_TASK, cfg.task_seed, cfg.dim, cfg.n_answers)
    a, d = cfg.n_answers, cfg.dim
    basis = np.linalg.qr(rng.standard_normal((d, a)))[0]
    protos = _f32(basis.T)
    cue = _f32(protos.sum(axis=0) / np.sqrt(a))
    return protos, cue


def generate_synthetic(cfg: SynthConfig, seed) -> SynthSample:
    """Generate one deterministic sample for ``(cfg, seed)``.

    ``seed`` may be an int or a tuple of ints; tuples let callers derive
    disjoint train/eval streams. All feature values are float32-representable
    so that save/load round-trips are bit-exact.
    """
    key = (seed,) if isinstance(seed, int) else tuple(seed)
    rng = _rng_for(_S_SAMPLE, cfg.task_seed, *key)
    protos, cue = task_prototypes(cfg)
    k, t, n, d = cfg.k_segments, cfg.t_frames, cfg.n_patches, cfg.dim

    video = _f32(rng.standard_normal((k, t, n, d)) * cfg.noise_std)
    words = _f32(rng.standard_normal((cfg.m_words, d)) * cfg.noise_std)

    if cfg.kind == SINGLE_EVENT:
        label = int(rng.integers(cfg.n_answers))
        seg = int(rng.integers(k))
        patch = int(rng.integers(n))
        video[seg, :, patch] = protos[label]
        words[0] = cue
        events = [PlantedEvent(label, seg, patch)]
    else:
        c_early, c_late = (int(c) for c in rng.choice(cfg.n_answers, 2, replace=False))
        segs = np.sort(rng.choice(k, 2, replace=False))
        s0, s1 = int(segs[0]), int(segs[1])
        p0, p1 = (int(p) for p in rng.integers(n, size=2))
        video[s0, :, p0] = protos[c_early]
        video[s1, :, p1] = protos[c_late]
        # the question names the earlier event's class; the answer is what
        # comes after it
        words[0] = protos[c_early]
        label = c_late
        events = [
            PlantedEvent(c_early, s0, p0),
            PlantedEvent(c_late, s1, p1),
        ]

    return SynthSample(
        video=VideoFeatures(tensor(video)),
        question=QuestionFeatures(tensor(words)),
        answers=AnswerBank(tensor(protos), [f"class_{i}" for i in range(cfg.n_answers)]),
        label=label,
        kind=cfg.kind,
        events=events,
    )
