"""Test-time token reduction: alpha-rank keep sets, similarity pruning, baselines, schedules."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import tensor as T
from .allocator import AllocatorParams, compute_alpha
from .errors import ConfigError, DomainError, ScheduleError, UnsupportedArchitectureError
from .rng import RngStream
from .tensor import Tensor
from .vit import ModelParams, TokenBatch, block_forward, classify, patch_embed

# Published defaults: extra-keep count for DeiT / ViT single-layer runs, and the
# multi-layer schedule (1-indexed block locations) with its pre-block s.
DEFAULT_S_DEIT = 25
DEFAULT_S_VIT = 30
DEFAULT_MULTI_LAYER_S = 40
DEFAULT_MULTI_LAYER_LOCATIONS = (3, 4, 5)

ALPHA_RANKED = "alpha_ranked"
SIMILARITY = "similarity"
RANDOM_DROP = "random"
CLS_TOPK = "cls_topk"


@dataclass
class KeepSet:
    """Per-sample survivors of one pruning step.

    ``positions`` index the live axis of the input batch; ``kept`` holds the
    matching original patch indices. ``removed[b]`` lists ``(original_index,
    tag)`` pairs; a merge tag reads ``merged-into:<original_index>``.
    """

    positions: np.ndarray
    kept: np.ndarray
    removed: list[list[tuple[int, str]]]

    @property
    def count(self) -> int:
        return self.positions.shape[1]


def _check_count(keep_count: int, live: int) -> None:
    if not 1 <= keep_count <= live:
        raise DomainError(f"keep_count {keep_count} outside [1, {live}]")


def _keepset_from_order(order: np.ndarray, keep_count: int, live_indices: np.ndarray, tag: str) -> KeepSet:
    positions = np.sort(order[:, :keep_count], axis=1)
    kept = np.take_along_axis(live_indices, positions, axis=1)
    dropped = np.sort(np.take_along_axis(live_indices, order[:, keep_count:], axis=1), axis=1)
    removed = [[(int(j), tag) for j in row] for row in dropped]
    return KeepSet(positions, kept, removed)


def _top_scores(scores: np.ndarray, keep_count: int, live_indices: np.ndarray | None, tag: str) -> KeepSet:
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    B, n = scores.shape
    _check_count(keep_count, n)
    if live_indices is None:
        live_indices = np.broadcast_to(np.arange(n), (B, n))
    # stable sort on the negated score: ties go to the lower live position,
    # which is also the lower original index since live indices are sorted
    order = np.argsort(-scores, axis=1, kind="stable")
    return _keepset_from_order(order, keep_count, np.asarray(live_indices), tag)


def rank_and_keep(alpha, keep_count: int, live_indices: np.ndarray | None = None) -> KeepSet:
    """Keep the ``keep_count`` tokens with largest alpha (ties: lower original index)."""
    return _top_scores(alpha.data if isinstance(alpha, Tensor) else alpha, keep_count, live_indices, ALPHA_RANKED)


def baseline_cls_topk(attention: np.ndarray | None, keep_count: int, special_tokens: int,
                      live_indices: np.ndarray | None = None) -> KeepSet:
    """Keep the patch tokens with the largest head-averaged CLS attention.

    ``attention`` is the ``[B, seq_len]`` CLS row recorded at the pruning block.
    """
    if special_tokens < 1 or attention is None:
        raise UnsupportedArchitectureError("CLS-attention Top-K cannot be applied to a mean-pooled model")
    patch_att = np.atleast_2d(attention)[:, special_tokens:]
    return _top_scores(patch_att, keep_count, live_indices, CLS_TOPK)


def baseline_random_drop(x: TokenBatch, keep_count: int, rng: RngStream, stage: int = 0) -> KeepSet:
    """Uniform keep set without replacement; sample ``b`` draws from ``rng.fork(stage, sample_id)``."""
    n = x.num_live
    _check_count(keep_count, n)
    order = np.stack([rng.fork(stage, int(sid)).permutation(n) for sid in x.sample_ids])
    return _keepset_from_order(order, keep_count, x.live_indices, RANDOM_DROP)


# ----------------------------------------------------------------- similarity pruning


@dataclass
class SimilarityConfig:
    r: int = 0
    partition: str = "random"  # random | sequential
    action: str = "drop"  # drop | merge
    metric: str = "cosine"
    rng: RngStream = field(default_factory=lambda: RngStream(0, 0x51A))

    def __post_init__(self):
        if self.r < 0:
            raise ConfigError("r must be nonnegative")
        if self.partition not in ("random", "sequential"):
            raise ConfigError(f"unknown partition {self.partition!r}")
        if self.action not in ("drop", "merge"):
            raise ConfigError(f"unknown action {self.action!r}")
        if self.metric != "cosine":
            raise ConfigError(f"unknown metric {self.metric!r}")


def split_groups(n: int, partition: str, rng: RngStream | None = None, scores=None) -> tuple[np.ndarray, np.ndarray]:
    """Live positions of groups A and B; B receives the extra token when ``n`` is odd.

    ``sequential`` alternates tokens by descending score (A first); the
    leftover lowest-ranked token of an odd count goes to B.
    """
    half = n // 2
    if partition == "random":
        perm = rng.permutation(n)
        return np.sort(perm[:half]), np.sort(perm[half:])
    if scores is None:
        raise ConfigError("sequential partition needs token scores")
    order = np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")
    paired = order[: 2 * half]
    a, b = paired[0::2], paired[1::2]
    if n % 2:
        b = np.append(b, order[-1])
    return np.sort(a), np.sort(b)


def cosine_matrix(u: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; rows with zero norm score 0 against everything."""
    nu = np.linalg.norm(u, axis=-1, keepdims=True)
    nv = np.linalg.norm(v, axis=-1, keepdims=True)
    un = np.divide(u, nu, out=np.zeros_like(u), where=nu > 0)
    vn = np.divide(v, nv, out=np.zeros_like(v), where=nv > 0)
    return un @ vn.T


def match_and_select(emb: np.ndarray, a: np.ndarray, b: np.ndarray, r: int):
    """For each B token, its best A match; returns the ``r`` B tokens to remove with their matches.

    Ties on the match pick the lowest A position; ties on the score pick the
    lowest B position. Both are returned as live-axis positions.
    """
    sim = cosine_matrix(emb[b], emb[a])
    best = np.argmax(sim, axis=1)
    score = sim[np.arange(len(b)), best]
    order = np.argsort(-score, kind="stable")[:r]
    return b[order], a[best[order]]


def similarity_prune(x: TokenBatch, cfg: SimilarityConfig, scores: np.ndarray | None = None, stage: int = 0):
    """Remove exactly ``cfg.r`` group-B tokens per sample by cosine match to group A.

    Returns ``(pruned_batch, keep_set)``. Inference only: the result carries no gradient.
    """
    n = x.num_live
    r = cfg.r
    if r == 0:
        pos = np.broadcast_to(np.arange(n), (x.batch, n)).copy()
        return x, KeepSet(pos, x.live_indices.copy(), [[] for _ in range(x.batch)])
    if n < 2 or r > n // 2:
        raise DomainError(f"r={r} exceeds floor({n}/2) live tokens")
    S = x.special_tokens
    acts = x.activations.data.copy()
    positions, removed = [], []
    for bi in range(x.batch):
        emb = acts[bi, S:]
        rng = cfg.rng.fork(stage, int(x.sample_ids[bi])) if cfg.partition == "random" else None
        a, b = split_groups(n, cfg.partition, rng, None if scores is None else scores[bi])
        gone, into = match_and_select(emb, a, b, r)
        live = x.live_indices[bi]
        tags = []
        for g, dst in zip(gone, into):
            if cfg.action == "merge":
                emb[dst] = 0.5 * (emb[dst] + emb[g])
                tags.append((int(live[g]), f"merged-into:{int(live[dst])}"))
            else:
                tags.append((int(live[g]), SIMILARITY))
        keep = np.setdiff1d(np.arange(n), gone)
        positions.append(keep)
        removed.append(sorted(tags))
    positions = np.stack(positions)
    out = TokenBatch(Tensor(acts), S, x.live_indices, x.sample_ids).keep(positions)
    return out, KeepSet(positions, out.live_indices.copy(), removed)


# ----------------------------------------------------------------- schedules


@dataclass
class PruneSchedule:
    """Where and how much to prune. ``locations`` are 1-indexed blocks: location
    ``l`` prunes the output of block ``l`` before block ``l + 1`` runs, using the
    allocator head at 0-indexed layer ``l - 1``."""

    mode: str = "single_layer"
    locations: tuple[int, ...] = (2,)
    rates: tuple[float, ...] = (1.0,)
    s: int = 0
    similarity: SimilarityConfig = field(default_factory=SimilarityConfig)
    pre_block_similarity: bool = False
    keep_counts: tuple[int, ...] | None = None

    def __post_init__(self):
        self.locations = tuple(int(l) for l in self.locations)
        self.rates = tuple(float(k) for k in self.rates)
        if self.mode not in ("single_layer", "multi_layer"):
            raise ConfigError(f"unknown schedule mode {self.mode!r}")
        if len(self.rates) != len(self.locations):
            raise ConfigError("rates and locations must have equal length")
        if any(b <= a for a, b in zip(self.locations, self.locations[1:])):
            raise ConfigError("locations must be strictly increasing")
        if any(not 0 < k <= 1 for k in self.rates):
            raise ConfigError("keep rates must lie in (0, 1]")
        if self.s < 0:
            raise ConfigError("s must be nonnegative")
        if self.mode == "single_layer" and len(self.locations) != 1:
            raise ConfigError("single-layer mode takes exactly one location")
        if self.keep_counts is not None:
            self.keep_counts = tuple(int(c) for c in self.keep_counts)
            if len(self.keep_counts) != len(self.locations):
                raise ConfigError("keep_counts and locations must have equal length")

    def validate(self, depth: int, allocator: AllocatorParams | None = None) -> None:
        if any(not 1 <= l <= depth for l in self.locations):
            raise ConfigError(f"locations {self.locations} outside [1, {depth}]")
        if allocator is not None:
            missing = [l for l in self.locations if l - 1 not in allocator.heads]
            if missing:
                raise ConfigError(f"no allocator head for locations {missing}")


def keep_count_for_rate(n: int, rate: float) -> int:
    """Floor rounding, the single convention used for rate -> count."""
    return int(np.floor(n * rate + 1e-9))


def two_stage_counts(n: int, target: int, s: int) -> tuple[int, int]:
    """``(alpha_keep, similarity_r)`` for a single-layer stage ending at ``target`` tokens.

    The similarity step can remove at most half of its input, and the
    alpha step cannot keep more than ``n``; ``s`` is clipped to fit both.
    """
    r = max(0, min(s, target, n - target))
    return target + r, r


@dataclass
class StageRecord:
    layer: int  # 1-indexed location; 0 = before the first block
    keepset: KeepSet


@dataclass
class ScheduleResult:
    logits: Tensor
    history: list[StageRecord]
    tokens_per_layer: list[int]
    allocator_tokens: list[int]  # live tokens scored by an allocator head, per scoring


# stage(x, cls_attention_row) -> (x, [KeepSet records])
StageFn = Callable[[TokenBatch, np.ndarray | None], tuple[TokenBatch, list[KeepSet]]]


def run_pruned(
    backbone: ModelParams,
    images,
    stages: dict[int, StageFn],
    pre: StageFn | None = None,
    sample_ids=None,
    want_attention: bool = False,
):
    """Forward pass applying ``stages[l]`` to the output of block ``l`` (1-indexed)."""
    config = backbone.config
    x = patch_embed(images, backbone, config, sample_ids)
    history: list[StageRecord] = []
    if pre is not None:
        x, recs = pre(x, None)
        history += [StageRecord(0, k) for k in recs]
    profile = []
    for i in range(config.depth):
        loc = i + 1
        profile.append(x.seq_len)
        x, att = block_forward(x, backbone.block(i), config, want_attention=want_attention and loc in stages)
        if loc in stages:
            x, recs = stages[loc](x, att)
            if x.num_live < 1:
                raise ScheduleError(f"empty keep set after location {loc}")
            history += [StageRecord(loc, k) for k in recs]
    return classify(x, backbone, config), history, profile


def apply_schedule(
    backbone: ModelParams,
    allocator: AllocatorParams,
    images,
    schedule: PruneSchedule,
    sample_ids=None,
) -> ScheduleResult:
    """Inference with alpha-ranked (plus optional similarity) pruning.

    single_layer: at the location keep ``floor(N K) + s`` by alpha, then
    similarity-prune ``s`` (clipped by :func:`two_stage_counts`).
    multi_layer: similarity-prune ``s`` before the first block when
    ``pre_block_similarity``; then at each location keep ``floor(live K)``
    by alpha recomputed on the surviving tokens.
    """
    config = backbone.config
    schedule.validate(config.depth, allocator)
    sim = schedule.similarity
    scored: list[int] = []

    def make_stage(idx: int, loc: int) -> StageFn:
        rate = schedule.rates[idx]
        head = allocator.heads[loc - 1]

        def stage(x: TokenBatch, _att):
            n = x.num_live
            if schedule.keep_counts is not None:
                target = schedule.keep_counts[idx]
            else:
                target = keep_count_for_rate(n, rate)
            if target < 1:
                raise ScheduleError(f"keep count {target} at location {loc} leaves no tokens")
            if target > n:
                raise ScheduleError(f"keep count {target} at location {loc} exceeds {n} live tokens")
            alpha = compute_alpha(x, head).data
            scored.append(n)
            if schedule.mode == "multi_layer":
                ks = rank_and_keep(alpha, target, x.live_indices)
                return x.keep(ks.positions), [ks]
            keep1, r = two_stage_counts(n, target, schedule.s)
            ks = rank_and_keep(alpha, keep1, x.live_indices)
            x = x.keep(ks.positions)
            if r == 0:
                return x, [ks]
            kept_alpha = np.take_along_axis(alpha, ks.positions, axis=1)
            cfg = SimilarityConfig(r, sim.partition, sim.action, sim.metric, sim.rng)
            x, ks2 = similarity_prune(x, cfg, scores=kept_alpha, stage=loc)
            return x, [ks, ks2]

        return stage

    stages = {loc: make_stage(i, loc) for i, loc in enumerate(schedule.locations)}
    pre = None
    if schedule.mode == "multi_layer" and schedule.pre_block_similarity and schedule.s > 0:
        if sim.partition == "sequential":
            raise ConfigError("pre-block similarity pruning has no scores for a sequential partition")

        def pre(x: TokenBatch, _att):
            cfg = SimilarityConfig(schedule.s, sim.partition, sim.action, sim.metric, sim.rng)
            x, ks = similarity_prune(x, cfg, stage=0)
            return x, [ks]

    with T.no_grad():
        logits, history, profile = run_pruned(backbone, images, stages, pre, sample_ids)
    return ScheduleResult(logits, history, profile, scored)


# ----------------------------------------------------------------- history text format


def format_history(history: list[StageRecord], sample_ids) -> list[str]:
    """``sample,layer,kept=i1;i2;...,removed=j1:tag;...`` one line per (sample, record)."""
    lines = []
    sample_ids = list(sample_ids)
    for rec in history:
        ks = rec.keepset
        for bi, sid in enumerate(sample_ids):
            kept = ";".join(str(int(i)) for i in ks.kept[bi])
            removed = ";".join(f"{j}:{tag}" for j, tag in ks.removed[bi])
            lines.append(f"{sid},{rec.layer},kept={kept},removed={removed}")
    return lines


@dataclass
class HistoryLine:
    sample: int
    layer: int
    kept: list[int]
    removed: list[tuple[int, str]]


def parse_history(lines) -> list[HistoryLine]:
    out = []
    for n, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        try:
            sample, layer, kept, removed = line.split(",", 3)
            if not kept.startswith("kept=") or not removed.startswith("removed="):
                raise ValueError("missing kept=/removed= fields")
            kept_ids = [int(t) for t in kept[5:].split(";") if t]
            rem = []
            for item in removed[8:].split(";"):
                if item:
                    j, _, tag = item.partition(":")
                    rem.append((int(j), tag))
            out.append(HistoryLine(int(sample), int(layer), kept_ids, rem))
        except ValueError as exc:
            raise ConfigError(f"history line {n}: {exc}") from None
    return out
