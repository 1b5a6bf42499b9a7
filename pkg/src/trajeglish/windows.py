"""Spatial sliding-window subsetting for scenes beyond the model's agent cap.

Windows are fixed-size agent subsets built greedily: the subset centered on
the self-driving car comes first, then repeatedly the subset (centered on a
still-uncovered agent) with maximum overlap with already-covered agents,
until every agent is covered. An agent acts in the first window that
contains it; later windows that contain it see its already-chosen action as
forced context. Within a window, agents that have already acted come first,
then the window's own actors, each group sorted by distance to the center,
which maximizes the pre-generated information available to the actors.

Window membership is recomputed at scheduled timesteps; each recompute
flushes the decoder caches and re-anchors the scene encoding at the current
states.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, DataError
from .geometry import to_global_arr
from .model import SceneInit, TokenGrid, TrajeglishModel
from .rollout import (
    ControlAssignment,
    IncrementalDecoder,
    Rollout,
    RolloutConfig,
    SceneMemory,
    _decide_token,
    _np_log_softmax,
    _validate_order,
)
from .masks import uses_agent_shift
from .sampling import sample_token
from .scenario import Scenario
from .templates import TemplateSet
from .tokenization import INVALID_TOKEN, template_distances, tokenize_trajectory


@dataclass
class Window:
    """One ordered agent subset. ``members`` lists original agent indices in
    acting order: already-acted agents first, then this window's own actors;
    ``padding`` records how many unfilled slots precede them."""

    center: int
    members: list[int]
    already_acted: list[int]
    owned: list[int]
    padding: int = 0


def _nearest_subset(xy: np.ndarray, center: int, max_agents: int) -> np.ndarray:
    d = np.linalg.norm(xy - xy[center], axis=1)
    order = np.lexsort((np.arange(len(xy)), d))
    return order[:max_agents]


def select_windows(states: np.ndarray, max_agents: int, sdc_index: int) -> list[Window]:
    """Greedy cover of all agents by SDC-first, overlap-maximizing subsets."""
    if max_agents < 1:
        raise ConfigError("max_agents must be >= 1")
    states = np.asarray(states, dtype=float)
    xy = states[:, :2]
    n = xy.shape[0]
    if not 0 <= sdc_index < n:
        raise DataError(f"sdc index {sdc_index} out of range for {n} agents")

    covered: set[int] = set()
    windows: list[Window] = []
    center = sdc_index
    while True:
        subset = _nearest_subset(xy, center, max_agents)
        acted = [int(i) for i in subset if int(i) in covered]
        owned = [int(i) for i in subset if int(i) not in covered]
        d = np.linalg.norm(xy - xy[center], axis=1)
        acted.sort(key=lambda i: (d[i], i))
        owned.sort(key=lambda i: (d[i], i))
        windows.append(
            Window(
                center=int(center),
                members=acted + owned,
                already_acted=acted,
                owned=owned,
                padding=max_agents - len(subset),
            )
        )
        covered.update(owned)
        if len(covered) == n:
            return windows
        # Next center: the uncovered agent whose subset overlaps the covered
        # set the most (ties toward the lowest index).
        best, best_overlap = None, -1
        for g in range(n):
            if g in covered:
                continue
            overlap = sum(1 for i in _nearest_subset(xy, g, max_agents) if int(i) in covered)
            if overlap > best_overlap:
                best, best_overlap = g, overlap
        center = best


@dataclass
class _WindowRun:
    """Live decoding state for one window within one recompute segment."""

    window: Window
    decoder: IncrementalDecoder
    local_of: dict  # original agent index -> position within the window
    tokens: list = field(default_factory=list)  # (|members|,) columns, local idx
    tokens_valid: list = field(default_factory=list)


def _segment_bounds(horizon: int, recompute) -> list[tuple[int, int]]:
    cuts = [0] + [t for t in recompute if 0 < t < horizon] + [horizon]
    return [(a, b) for a, b in zip(cuts, cuts[1:]) if b > a]


def windowed_rollout(model: TrajeglishModel, ts: TemplateSet, scenario: Scenario,
                     control: ControlAssignment, cfg: RolloutConfig,
                     history_steps: int = 1) -> list[Rollout]:
    """Rollout with spatial windows recomputed on cfg.window's schedule.

    With every agent fitting in one window and no recomputes this reduces
    exactly to ``rollout`` under the window's agent order. Agent ordering
    inside windows follows select_windows; the SDC always acts first.
    """
    if cfg.window is None:
        raise ConfigError("windowed_rollout requires cfg.window")
    n = scenario.n_agents
    if len(control.controllers) != n:
        raise ConfigError("control assignment does not match the agent count")
    if history_steps < 1:
        raise DataError("history_steps must be >= 1")
    max_agents = min(cfg.window.max_agents, model.cfg.max_agents)

    metas = [a.meta for a in scenario.agents]
    log_states = scenario.state_grid()
    log_valid = scenario.valid_grid()
    if not log_valid[:, 0].all():
        raise DataError("windowed rollouts require all agents valid at the first step")

    history_tok = [
        tokenize_trajectory(log_states[i, :history_steps], log_valid[i, :history_steps],
                            metas[i], ts)
        if history_steps > 1
        else None
        for i in range(n)
    ]

    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_rollouts)
    out = []
    for r_idx in range(cfg.n_rollouts):
        rng = np.random.default_rng(seeds[r_idx])
        snapped = log_states[:, 0].copy()
        all_states = []  # (N, 3) snapshots per processed step
        all_tokens: list[np.ndarray] = []
        all_valid: list[np.ndarray] = []
        all_logp: list[np.ndarray] = []
        windows_log: list[dict] = []

        # The first segment carries the forced history; later segments start
        # fresh at their recompute point.
        segments = _segment_bounds(cfg.horizon, cfg.window.recompute_timesteps)
        if cfg.horizon == 0:
            segments = []
        for seg_idx, (seg_start, seg_end) in enumerate(segments):
            wins = select_windows(snapped, max_agents, scenario.sdc_index)
            global_order = [i for w in wins for i in w.owned]
            _validate_order(control.controllers, global_order)
            windows_log.append(
                {
                    "at_step": seg_start,
                    "windows": [
                        {"center": w.center, "members": w.members, "owned": w.owned,
                         "padding": w.padding}
                        for w in wins
                    ],
                }
            )
            runs = []
            for w in wins:
                scene = SceneInit(
                    metas=[metas[i] for i in w.members],
                    states=snapped[w.members],
                    map_objects=scenario.map_objects,
                )
                runs.append(
                    _WindowRun(
                        window=w,
                        decoder=IncrementalDecoder(SceneMemory(model, scene)),
                        local_of={g: li for li, g in enumerate(w.members)},
                    )
                )
            prime = history_tok if (seg_idx == 0 and history_steps > 1) else None
            n_prime = history_steps - 1 if prime else 0
            for local_t in range(n_prime + (seg_end - seg_start)):
                priming = local_t < n_prime
                col = np.full(n, 0, dtype=int)
                col_ok = np.zeros(n, dtype=bool)
                logp = np.full(n, np.nan)
                own_logits = {}
                for run in runs:
                    w = run.window
                    m = len(w.members)
                    shift = uses_agent_shift(model.cfg.masking_regime)
                    if shift:
                        toks = np.zeros(m, int)
                        oks = np.zeros(m, bool)
                        for li in range(m):
                            c = run.decoder.content_slot(local_t, li)
                            if c is not None:
                                ct, ca = c
                                toks[li] = run.tokens[ct][ca]
                                oks[li] = run.tokens_valid[ct][ca]
                        logits_all = run.decoder.step_timestep(local_t, toks, oks)
                    decided = np.zeros(m, int)
                    decided_ok = np.zeros(m, bool)
                    for li, g in enumerate(w.members):
                        if not shift:
                            c = run.decoder.content_slot(local_t, li)
                            if c is None:
                                tok_in, ok_in = 0, False
                            elif c[0] == local_t:
                                tok_in, ok_in = int(decided[c[1]]), bool(decided_ok[c[1]])
                            else:
                                tok_in = int(run.tokens[c[0]][c[1]])
                                ok_in = bool(run.tokens_valid[c[0]][c[1]])
                            logits = run.decoder.step(local_t, li, tok_in, ok_in)
                        else:
                            logits = logits_all[li]
                        if col_ok[g] or (g in w.already_acted and not priming):
                            pass  # already decided by an earlier window this step
                        elif priming:
                            h = history_tok[g]
                            col[g] = max(int(h.token_ids[local_t]), 0)
                            col_ok[g] = bool(h.token_valid[local_t])
                            if col_ok[g]:
                                logp[g] = _np_log_softmax(logits[None])[0, col[g]]
                        else:
                            own_logits[g] = logits
                            t_global = history_steps + seg_start + (local_t - n_prime)
                            col[g] = _window_decide(
                                g, control, metas[g], ts, snapped, log_states, log_valid,
                                all_states, cfg, rng, t_global, logits,
                            )
                            col_ok[g] = True
                            logp[g] = _np_log_softmax(logits[None])[0, col[g]]
                        decided[li] = col[g]
                        decided_ok[li] = col_ok[g]
                    run.tokens.append(decided)
                    run.tokens_valid.append(decided_ok)
                # Advance the global chain.
                all_states.append(snapped.copy())
                new_snapped = snapped.copy()
                if priming:
                    snap_col = np.stack([history_tok[g].snapped_states[local_t + 1]
                                         for g in range(n)])
                    snap_ok = np.array([history_tok[g].snapped_valid[local_t + 1]
                                        for g in range(n)])
                    new_snapped = np.where(snap_ok[:, None], snap_col, new_snapped)
                else:
                    for g in range(n):
                        new_snapped[g] = to_global_arr(snapped[g], ts.templates[col[g]])
                snapped = new_snapped
                all_tokens.append(np.where(col_ok, col, INVALID_TOKEN))
                all_valid.append(col_ok)
                all_logp.append(logp)
        all_states.append(snapped.copy())

        t_tok = len(all_tokens)
        states_valid = np.ones((n, t_tok + 1), dtype=bool)
        if history_steps > 1:
            for g in range(n):
                states_valid[g, :history_steps] = history_tok[g].snapped_valid
        out.append(
            Rollout(
                tokens=TokenGrid(
                    np.stack(all_tokens, 1) if t_tok else np.zeros((n, 0), int),
                    np.stack(all_valid, 1) if t_tok else np.zeros((n, 0), bool),
                ),
                states=np.stack(all_states, 1),
                states_valid=states_valid,
                log_probs=np.stack(all_logp, 1) if t_tok else np.zeros((n, 0)),
                seed=int(cfg.seed),
                acting_order=[i for w in select_windows(log_states[:, 0], max_agents,
                                                        scenario.sdc_index) for i in w.owned],
                history_steps=history_steps,
                config={
                    "temperature": cfg.temperature,
                    "p_top": cfg.p_top,
                    "horizon": cfg.horizon,
                    "rollout_index": r_idx,
                    "window_max_agents": max_agents,
                    "window_schedule": list(cfg.window.recompute_timesteps),
                    "windows": windows_log,
                },
            )
        )
    return out


def _window_decide(g, control, meta, ts, snapped, log_states, log_valid, all_states,
                   cfg, rng, t_global, logits):
    controller = control.controllers[g]
    if controller == "model":
        return sample_token(logits, cfg.temperature, cfg.p_top, rng)
    if controller == "replay":
        if t_global >= log_states.shape[1] or not log_valid[g, t_global]:
            raise DataError(f"missing replay state for replay agent {g} at step {t_global}")
        target = log_states[g, t_global]
    else:
        history = np.stack(all_states + [snapped], axis=1)
        got = control.external_policies[g](g, t_global, history)
        target = np.asarray(got if not hasattr(got, "as_array") else got.as_array(), float)
    d = template_distances(snapped[g], target, meta.length, meta.width, ts)
    return int(np.argmin(d))
