"""The three decode engines: vanilla full recompute, dual-cache (context
cached per block), and the asynchronous-refresh engine with chunked visual
attention and cached anchor tokens.

All engines share one step contract: given the global step counter and the
current diffusion state, produce logits over the active block plus a step
report (refresh events, score-entry count, rows recomputed). The cached
engines run a single shallow-to-deep sweep per step in which the set of live
(recomputed) rows grows monotonically with depth; everything not live is
served from per-layer key/value caches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffusion import DiffusionState, SequenceLayout, StepRecord, assemble_embeddings
from .mars import (
    TEXT,
    VISUAL,
    AnchorPlan,
    RefreshSchedule,
    equidistant_indices,
    proxy_scores,
    refresh_due,
    resolve_budgets,
    select_anchors,
    visibility_to_additive,
    visual_key_visibility,
)
from .model import (
    Weights,
    apply_rotary,
    forward,
    gelu,
    multi_head_attention,
    rms_norm,
    rotary_phases,
    split_heads,
)

ENGINE_KINDS = ("vanilla", "dual_cache", "mars")


@dataclass(frozen=True)
class EngineParams:
    """Which engine to run and, for the refreshing engine, how."""

    kind: str = "vanilla"
    schedule: RefreshSchedule | None = None
    anchor_budgets: tuple = ()
    chunk_enabled: bool = True
    sample_size: int = 32
    # Open switch: let non-anchor visual queries also see prompt/response keys.
    allow_text_keys: bool = False
    # Vanilla-only instrumentation: stash group-boundary hidden states per step.
    capture_boundaries: bool = False

    def __post_init__(self):
        if self.kind not in ENGINE_KINDS:
            raise ValueError(f"unknown engine kind {self.kind!r}")
        if self.kind == "mars":
            if self.schedule is None:
                raise ValueError("mars engine requires a refresh schedule")
            if not self.anchor_budgets:
                raise ValueError("mars engine requires anchor budgets")


class _EngineBase:
    def __init__(
        self,
        weights: Weights,
        layout: SequenceLayout,
        visual_embeddings,
        prompt_tokens,
        params: EngineParams,
    ):
        self.weights = weights
        self.layout = layout
        self.visual_embeddings = np.asarray(visual_embeddings, dtype=np.float64)
        self.prompt_tokens = np.asarray(prompt_tokens, dtype=np.int64)
        self.params = params
        cfg = weights.config
        self.cos, self.sin = rotary_phases(layout.position_ids, cfg.head_dim)
        # Group-boundary layers whose inputs are the cached quantities: the
        # output of each group, i.e. inputs of deeper group starts + final.
        self.boundary_layers = list(cfg.group_boundaries[1:]) + [cfg.num_layers]
        self.last_boundary_states: list[np.ndarray] | None = None

    def _embeddings(self, state: DiffusionState):
        return assemble_embeddings(
            self.weights,
            self.layout,
            self.visual_embeddings,
            self.prompt_tokens,
            state.token_ids,
        )

    def _active_rows(self, state: DiffusionState) -> np.ndarray:
        span = self.layout.block_span(state.active_block)
        return np.arange(span.start, span.stop)

    def _text_context_rows(self, state: DiffusionState) -> np.ndarray:
        """Prompt plus every response position outside the active block
        (decoded blocks and still-masked future blocks alike)."""
        lay = self.layout
        active = set(self._active_rows(state).tolist())
        rows = list(lay.prompt_span) + [
            i for i in lay.response_span if i not in active
        ]
        return np.array(sorted(rows), dtype=np.int64)


class VanillaEngine(_EngineBase):
    """Full bidirectional forward over the entire sequence at every step."""

    name = "vanilla"

    def step(self, t: int, state: DiffusionState):
        cfg = self.weights.config
        total = self.layout.total_length
        logits, acts = forward(
            self.weights, self._embeddings(state), self.layout.position_ids
        )
        if self.params.capture_boundaries:
            self.last_boundary_states = [acts.hidden[b].copy() for b in self.boundary_layers]
        span = self.layout.block_span(state.active_block)
        record = StepRecord(
            step=t,
            block=state.active_block,
            committed=[],
            attention_entries=cfg.num_layers * total * total,
            rows_recomputed=cfg.num_layers * total,
        )
        return logits[span.start : span.stop], record


class _CachedEngineBase(_EngineBase):
    """Shared cache plumbing and the layer sweep used by dual_cache and mars."""

    def __init__(self, weights, layout, visual_embeddings, prompt_tokens, params):
        super().__init__(weights, layout, visual_embeddings, prompt_tokens, params)
        cfg = weights.config
        total = layout.total_length
        shape = (cfg.num_heads, total, cfg.head_dim)
        self.cache_k = [np.zeros(shape) for _ in range(cfg.num_layers)]
        self.cache_v = [np.zeros(shape) for _ in range(cfg.num_layers)]
        # group_inputs[g] holds the hidden states entering group g (g >= 1).
        self.group_inputs = [
            np.zeros((total, cfg.model_dim)) for _ in range(cfg.num_groups)
        ]
        self.scratch = np.zeros((total, cfg.model_dim))
        self.last_refresh = {
            (g, m): 0 for g in range(cfg.num_groups) for m in (VISUAL, TEXT)
        }

    def _full_init(self, t: int, state: DiffusionState):
        """Full forward; repopulate every per-layer K/V and boundary cache."""
        cfg = self.weights.config
        logits, acts = forward(
            self.weights, self._embeddings(state), self.layout.position_ids
        )
        for l in range(cfg.num_layers):
            self.cache_k[l][:] = acts.keys[l]
            self.cache_v[l][:] = acts.values[l]
        for g in range(1, cfg.num_groups):
            self.group_inputs[g][:] = acts.hidden[cfg.group_boundaries[g]]
        for key in self.last_refresh:
            self.last_refresh[key] = t
        return logits, acts

    def _sweep(
        self,
        state: DiffusionState,
        entry_visual: int | None,
        entry_text: int | None,
        visual_masks: list | None = None,
        visual_mask_counts: list | None = None,
    ):
        """One shallow-to-deep pass recomputing the live rows of each group.

        Active-block rows are live from layer 0; visual / text-context rows
        join at their modality's entry group (the shallowest refreshing group)
        with inputs taken from the cached boundary states, and stay live
        through all deeper groups. Fresh keys/values overwrite the caches as
        they are produced, so rows recomputed in the same step see each other
        coherently. Returns (active-block logits, entries, rows_recomputed)."""
        cfg = self.weights.config
        lay = self.layout
        total = lay.total_length
        emb = self._embeddings(state)
        active = self._active_rows(state)
        vis_rows = np.arange(lay.visual_length)
        text_rows = self._text_context_rows(state)

        h = self.scratch
        h[active] = emb[active]
        live = active
        entries = 0
        rows_recomputed = 0

        for g in range(cfg.num_groups):
            joiners = []
            if entry_visual == g:
                joiners.append(vis_rows)
            if entry_text == g:
                joiners.append(text_rows)
            for rows in joiners:
                h[rows] = emb[rows] if g == 0 else self.group_inputs[g][rows]
                live = np.union1d(live, rows)

            visual_live = entry_visual is not None and g >= entry_visual
            chunked = visual_live and self.params.chunk_enabled and visual_masks is not None
            if chunked:
                vis_sel = live < lay.visual_length
                full_sel = ~vis_sel
            else:
                vis_sel = np.zeros(live.size, dtype=bool)
                full_sel = np.ones(live.size, dtype=bool)
            n_full = int(np.sum(full_sel))

            cos, sin = self.cos[live], self.sin[live]
            for l in cfg.group_layers(g):
                lw = self.weights.layers[l]
                x = h[live]
                xn = rms_norm(x, lw.attn_norm)
                q = apply_rotary(split_heads(xn @ lw.wq, cfg.num_heads), cos, sin)
                k = apply_rotary(split_heads(xn @ lw.wk, cfg.num_heads), cos, sin)
                v = split_heads(xn @ lw.wv, cfg.num_heads)
                self.cache_k[l][:, live, :] = k
                self.cache_v[l][:, live, :] = v

                attn = np.empty((live.size, cfg.model_dim))
                if n_full:
                    attn[full_sel] = multi_head_attention(
                        q[:, full_sel, :], self.cache_k[l], self.cache_v[l],
                        None, cfg.head_dim,
                    )
                if chunked:
                    attn[vis_sel] = multi_head_attention(
                        q[:, vis_sel, :], self.cache_k[l], self.cache_v[l],
                        visual_masks[g], cfg.head_dim,
                    )
                x = x + attn @ lw.wo
                x = x + gelu(rms_norm(x, lw.ff_norm) @ lw.w1) @ lw.w2
                h[live] = x

                # Chunk-off visual rows sit in the full class and are already
                # counted by the n_full term.
                entries += n_full * total
                if chunked:
                    entries += visual_mask_counts[g]
                rows_recomputed += live.size
            if g + 1 < cfg.num_groups:
                self.group_inputs[g + 1][live] = h[live]

        logits = rms_norm(h[active], self.weights.final_norm) @ self.weights.head
        return logits, entries, rows_recomputed


class DualCacheEngine(_CachedEngineBase):
    """Per-block context caching: a full forward at the first step of every
    block caches K/V for all non-active positions; the remaining steps of the
    block recompute active-block rows only against the cached context."""

    name = "dual_cache"

    def __init__(self, *args):
        super().__init__(*args)
        self.cached_block: int | None = None

    def step(self, t: int, state: DiffusionState):
        cfg = self.weights.config
        total = self.layout.total_length
        span = self.layout.block_span(state.active_block)
        if state.active_block != self.cached_block:
            logits, _ = self._full_init(t, state)
            self.cached_block = state.active_block
            record = StepRecord(
                step=t, block=state.active_block, committed=[],
                refreshed_visual=list(range(cfg.num_groups)),
                refreshed_text=list(range(cfg.num_groups)),
                attention_entries=cfg.num_layers * total * total,
                rows_recomputed=cfg.num_layers * total,
            )
            return logits[span.start : span.stop], record
        logits, entries, rows = self._sweep(state, None, None)
        record = StepRecord(
            step=t, block=state.active_block, committed=[],
            attention_entries=entries, rows_recomputed=rows,
        )
        return logits, record


class MarsEngine(_CachedEngineBase):
    """Asynchronous modality/depth-wise refreshing with chunked visual
    attention and cached anchors.

    Step 1 runs full attention, fills every cache, and fixes the anchor plan
    from proxy scores at each group's first layer; the plan is immutable for
    the rest of the decode. Later steps always recompute the active block and
    refresh (group, modality) context whenever t is a multiple of its
    interval, reading the refreshed group's input from the cached boundary
    states of the group above."""

    name = "mars"

    def __init__(self, weights, layout, visual_embeddings, prompt_tokens, params):
        super().__init__(weights, layout, visual_embeddings, prompt_tokens, params)
        cfg = weights.config
        if params.schedule.num_groups != cfg.num_groups:
            raise ValueError(
                f"schedule covers {params.schedule.num_groups} groups, "
                f"model has {cfg.num_groups}"
            )
        # Budget validity is checked up front; the plan itself needs step 1.
        resolve_budgets(params.anchor_budgets, layout.patches_per_frame)
        self.plan: AnchorPlan | None = None
        self.visual_masks: list[np.ndarray] = []
        self.visual_mask_counts: list[int] = []
        self.initialized = False

    def _build_anchor_plan(self, acts) -> int:
        """Proxy-score each group's first layer from the step-1 activations
        and cache the per-group anchor sets plus their additive visibility
        masks. Returns the proxy score-entry count."""
        cfg = self.weights.config
        lay = self.layout
        sample_idx = equidistant_indices(lay.total_length, self.params.sample_size)
        vis_idx = np.arange(lay.visual_length)
        proxies = []
        for g in range(cfg.num_groups):
            l0 = cfg.group_boundaries[g]
            lw = self.weights.layers[l0]
            xn = rms_norm(acts.hidden[l0], lw.attn_norm)
            q = apply_rotary(
                split_heads(xn @ lw.wq, cfg.num_heads), self.cos, self.sin
            )
            k = acts.keys[l0]
            per_head = [
                proxy_scores(q[head], k[head], sample_idx, vis_idx)
                for head in range(cfg.num_heads)
            ]
            proxies.append(np.mean(per_head, axis=0))
        self.plan = select_anchors(
            proxies, lay, self.params.anchor_budgets, sample_indices=sample_idx
        )
        for g in range(cfg.num_groups):
            vis = visual_key_visibility(
                lay, self.plan.unions[g], self.params.allow_text_keys
            )
            self.visual_masks.append(visibility_to_additive(vis))
            self.visual_mask_counts.append(int(vis.sum()))
        return cfg.num_groups * sample_idx.size * vis_idx.size

    def step(self, t: int, state: DiffusionState):
        cfg = self.weights.config
        lay = self.layout
        span = lay.block_span(state.active_block)
        if t == 1:
            logits, acts = self._full_init(t, state)
            proxy_entries = self._build_anchor_plan(acts)
            self.initialized = True
            record = StepRecord(
                step=t, block=state.active_block, committed=[],
                refreshed_visual=list(range(cfg.num_groups)),
                refreshed_text=list(range(cfg.num_groups)),
                attention_entries=cfg.num_layers * lay.total_length ** 2,
                proxy_entries=proxy_entries,
                rows_recomputed=cfg.num_layers * lay.total_length,
                anchor_digest=self.plan.digest(),
            )
            return logits[span.start : span.stop], record
        if not self.initialized:
            raise RuntimeError("engine stepped at t > 1 without initialization")

        schedule = self.params.schedule
        due_visual = [g for g in range(cfg.num_groups)
                      if refresh_due(t, g, VISUAL, schedule)]
        due_text = [g for g in range(cfg.num_groups)
                    if refresh_due(t, g, TEXT, schedule)]
        logits, entries, rows = self._sweep(
            state,
            due_visual[0] if due_visual else None,
            due_text[0] if due_text else None,
            self.visual_masks,
            self.visual_mask_counts,
        )
        for g in due_visual:
            self.last_refresh[(g, VISUAL)] = t
        for g in due_text:
            self.last_refresh[(g, TEXT)] = t
        record = StepRecord(
            step=t, block=state.active_block, committed=[],
            refreshed_visual=due_visual, refreshed_text=due_text,
            attention_entries=entries, rows_recomputed=rows,
            anchor_digest=self.plan.digest(),
        )
        return logits, record


def make_engine(
    params: EngineParams,
    weights: Weights,
    layout: SequenceLayout,
    visual_embeddings,
    prompt_tokens,
):
    """Build a fresh single-decode engine session."""
    cls = {
        "vanilla": VanillaEngine,
        "dual_cache": DualCacheEngine,
        "mars": MarsEngine,
    }[params.kind]
    return cls(weights, layout, visual_embeddings, prompt_tokens, params)
