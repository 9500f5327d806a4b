"""Refresh scheduling, frame-wise chunk attention, and adaptive anchor-token
search: the attention-plan machinery behind the cached decoding engines.

Layer groups share one refresh interval per modality and one anchor budget.
Shallow groups refresh on intervals that are exact integer multiples of the
deeper groups' intervals, so the set of groups refreshing at any step is a
suffix in depth order and refreshed inputs always propagate downward. Visual
queries being refreshed attend to their temporal neighborhood plus a cached
set of per-frame anchor tokens; anchors stay globally visible and globally
attending."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .core import NEG_INF, Matrix, softmax_rows
from .diffusion import SequenceLayout
from .model import attention

VISUAL = "visual"
TEXT = "text_context"
MODALITIES = (VISUAL, TEXT)


@dataclass(frozen=True)
class RefreshSchedule:
    """Per-(group, modality) refresh intervals, shallow to deep."""

    tau_text: tuple[int, ...]
    tau_visual: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "tau_text", tuple(int(x) for x in self.tau_text))
        object.__setattr__(self, "tau_visual", tuple(int(x) for x in self.tau_visual))
        validate_schedule(self)

    @classmethod
    def uniform_modality(cls, tau: tuple[int, ...]) -> "RefreshSchedule":
        """Same intervals for both modalities."""
        return cls(tau_text=tuple(tau), tau_visual=tuple(tau))

    @property
    def num_groups(self) -> int:
        return len(self.tau_text)

    def tau(self, g: int, modality: str) -> int:
        return (self.tau_visual if modality == VISUAL else self.tau_text)[g]


def validate_schedule(schedule: RefreshSchedule) -> None:
    """Check the divisibility chain per modality and the per-group modality
    ordering; raises ValueError naming the first offending (group, modality)."""
    taus = {TEXT: schedule.tau_text, VISUAL: schedule.tau_visual}
    if len(schedule.tau_text) != len(schedule.tau_visual):
        raise ValueError("tau_text and tau_visual must cover the same groups")
    if not schedule.tau_text:
        raise ValueError("schedule must cover at least one group")
    for m, tau in taus.items():
        for g, t in enumerate(tau):
            if t < 1:
                raise ValueError(f"interval for (group {g + 1}, {m}) must be >= 1")
            if g > 0 and tau[g - 1] % t != 0:
                raise ValueError(
                    f"divisibility violated at (group {g}, {m}) vs (group {g + 1}, {m}): "
                    f"{tau[g - 1]} is not an integer multiple of {t}"
                )
    for g, (tv, tt) in enumerate(zip(schedule.tau_visual, schedule.tau_text)):
        if tv < tt:
            raise ValueError(
                f"modality ordering violated at group {g + 1}: "
                f"tau_visual={tv} < tau_text={tt}"
            )


def refresh_due(t: int, g: int, modality: str, schedule: RefreshSchedule) -> bool:
    """True iff step t is a refresh step for (group g, modality). Step 1 is
    handled separately by the engine as a forced full initialization."""
    if t < 1:
        raise ValueError("step counter is 1-based")
    return t % schedule.tau(g, modality) == 0


def neighborhood(layout: SequenceLayout, n: int) -> np.ndarray:
    """Indices of the temporal neighborhood of frame n: the union of frames
    n-1, n, n+1, truncated at the sequence ends."""
    lo = max(n - 1, 1)
    hi = min(n + 1, layout.num_frames)
    return np.arange(layout.frame_span(lo).start, layout.frame_span(hi).stop)


def chunk_attention(Q: Matrix, K: Matrix, V: Matrix, layout: SequenceLayout) -> Matrix:
    """Frame-wise chunked attention for the visual segment: each visual query
    in frame n attends only to keys in neighborhood(n). Q rows correspond to
    visual positions; K and V cover the full sequence. Output has one row per
    visual position."""
    if Q.shape[0] != layout.visual_length:
        raise ValueError(
            f"Q rows {Q.shape[0]} != visual length {layout.visual_length}"
        )
    out = np.empty((layout.visual_length, V.shape[1]))
    for n in range(1, layout.num_frames + 1):
        span = layout.frame_span(n)
        nb = neighborhood(layout, n)
        out[span.start : span.stop] = attention(
            Q[span.start : span.stop], K[nb], V[nb]
        )
    return out


def chunk_entry_count(layout: SequenceLayout) -> int:
    """Closed-form score-entry count of one chunked visual self-attention
    pass: sum over frames of |frame| * |neighborhood|."""
    return sum(
        layout.patches_per_frame * neighborhood(layout, n).size
        for n in range(1, layout.num_frames + 1)
    )


def equidistant_indices(total: int, count: int) -> np.ndarray:
    """First index of each of `count` equal strata over [0, total)."""
    if not 1 <= count <= total:
        raise ValueError(f"cannot place {count} equidistant samples in {total}")
    return (np.arange(count) * total) // count


def proxy_scores(
    Q: Matrix, K: Matrix, sample_indices, visual_indices
) -> Matrix:
    """Low-rank proxy attention: rows are softmax(Q[sampled] K[visual]^T/sqrt(d_k))
    over the visual keys, then entries where a sampled query attends to itself
    are zeroed (debiasing). Shape |samples| x |visual|."""
    sample_indices = np.asarray(sample_indices, dtype=np.int64)
    visual_indices = np.asarray(visual_indices, dtype=np.int64)
    if sample_indices.size == 0:
        raise ValueError("sample set must be non-empty")
    d_k = Q.shape[1]
    scores = Q[sample_indices] @ K[visual_indices].T / np.sqrt(d_k)
    probs = softmax_rows(scores)
    col_of = {int(v): j for j, v in enumerate(visual_indices)}
    for i, s in enumerate(sample_indices):
        j = col_of.get(int(s))
        if j is not None:
            probs[i, j] = 0.0
    return probs


@dataclass(frozen=True)
class AnchorPlan:
    """Cached anchor selection: computed once at step 1, immutable after.

    per_frame[g][j] holds frame j's anchor indices for group g (absolute
    positions, |per_frame[g][j]| == budgets[g]); unions[g] is their sorted
    union. Budgets are non-increasing with depth."""

    sample_indices: tuple[int, ...]
    budgets: tuple[int, ...]
    per_frame: tuple[tuple[tuple[int, ...], ...], ...]
    unions: tuple[tuple[int, ...], ...]

    def digest(self) -> str:
        blob = json.dumps(
            [list(self.sample_indices), list(self.budgets),
             [[list(f) for f in g] for g in self.per_frame]]
        ).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def resolve_budgets(budgets, patches_per_frame: int) -> tuple[int, ...]:
    """Map the "full" sentinel to the frame size and validate monotonicity."""
    out = []
    for k in budgets:
        k = patches_per_frame if k == "full" else int(k)
        if k < 0 or k > patches_per_frame:
            raise ValueError(
                f"anchor budget {k} outside [0, patches_per_frame={patches_per_frame}]"
            )
        out.append(k)
    for g in range(1, len(out)):
        if out[g - 1] < out[g]:
            raise ValueError(
                f"anchor budgets must be non-increasing with depth, got {out}"
            )
    return tuple(out)


def select_anchors(
    proxy_by_group: list[Matrix],
    layout: SequenceLayout,
    budgets,
    sample_indices=(),
) -> AnchorPlan:
    """Pick the top-k_g columns per frame from each group's debiased proxy
    matrix (column-summed over sampled queries); ties break to the lower
    index. Returns the full per-group plan."""
    budgets = resolve_budgets(budgets, layout.patches_per_frame)
    if len(proxy_by_group) != len(budgets):
        raise ValueError("one proxy matrix per group is required")
    per_frame, unions = [], []
    for g, (proxy, k) in enumerate(zip(proxy_by_group, budgets)):
        if proxy.shape[1] != layout.visual_length:
            raise ValueError(
                f"group {g}: proxy has {proxy.shape[1]} columns, "
                f"expected {layout.visual_length}"
            )
        col_sums = np.sum(proxy, axis=0)
        frames = []
        for n in range(1, layout.num_frames + 1):
            span = layout.frame_span(n)
            scores = col_sums[span.start : span.stop]
            # Sort by (-score, index): highest score first, lower index on ties.
            order = np.lexsort((np.arange(scores.size), -scores))
            chosen = np.sort(order[:k]) + span.start
            frames.append(tuple(int(i) for i in chosen))
        per_frame.append(tuple(frames))
        unions.append(tuple(sorted({i for f in frames for i in f})))
    return AnchorPlan(
        sample_indices=tuple(int(i) for i in sample_indices),
        budgets=budgets,
        per_frame=tuple(per_frame),
        unions=tuple(unions),
    )


def visual_key_visibility(
    layout: SequenceLayout, anchors, allow_text_keys: bool = False
) -> np.ndarray:
    """Boolean key-visibility matrix for visual query rows, shape (V, L):
    anchor rows see everything; non-anchor rows in frame n see
    neighborhood(n) plus the anchor set (plus text keys when the flag is on)."""
    v, total = layout.visual_length, layout.total_length
    anchor_set = np.zeros(v, dtype=bool)
    anchor_idx = np.asarray(sorted(anchors), dtype=np.int64)
    if anchor_idx.size:
        if anchor_idx.min() < 0 or anchor_idx.max() >= v:
            raise ValueError("anchors must be visual indices")
        anchor_set[anchor_idx] = True
    vis = np.zeros((v, total), dtype=bool)
    for n in range(1, layout.num_frames + 1):
        span = layout.frame_span(n)
        vis[span.start : span.stop, neighborhood(layout, n)] = True
    vis[:, anchor_idx] = True
    if allow_text_keys:
        vis[:, v:] = True
    vis[anchor_set, :] = True
    return vis


def visibility_to_additive(vis: np.ndarray) -> Matrix:
    """Boolean visibility -> additive {0, -inf} mask."""
    mask = np.zeros(vis.shape)
    mask[~vis] = NEG_INF
    return mask


def anchor_augmented_attention(
    Q: Matrix,
    K: Matrix,
    V: Matrix,
    layout: SequenceLayout,
    anchors,
    allow_text_keys: bool = False,
) -> Matrix:
    """Full-sequence attention under the anchor-augmented visibility rule:
    text-context and active-block queries attend everywhere; anchor visual
    queries attend everywhere; non-anchor visual queries in frame n attend to
    neighborhood(n) plus the anchors. Q, K, V cover all positions."""
    total = layout.total_length
    if Q.shape[0] != total:
        raise ValueError(f"Q rows {Q.shape[0]} != sequence length {total}")
    vis = np.ones((total, total), dtype=bool)
    vis[: layout.visual_length] = visual_key_visibility(
        layout, anchors, allow_text_keys
    )
    return attention(Q, K, V, visibility_to_additive(vis))


def relocate_anchors(layout: SequenceLayout, anchors) -> tuple[np.ndarray, np.ndarray]:
    """Permutation moving each frame's anchors (in index order) to the front
    of the visual segment, non-anchors following in original order; prompt and
    response rows are untouched. Position ids are carried by the caller, so
    applying the permutation leaves attention outputs unchanged up to the
    returned inverse. Returns (permutation, inverse) as index arrays such that
    reordered[i] = original[permutation[i]]."""
    anchor_idx = sorted(int(a) for a in anchors)
    if any(a < 0 or a >= layout.visual_length for a in anchor_idx):
        raise ValueError("anchors must be visual indices")
    rest = [i for i in range(layout.visual_length) if i not in set(anchor_idx)]
    perm = np.array(
        anchor_idx + rest + list(range(layout.visual_length, layout.total_length)),
        dtype=np.int64,
    )
    inv = np.empty_like(perm)
    inv[perm] = np.arange(perm.size)
    return perm, inv
