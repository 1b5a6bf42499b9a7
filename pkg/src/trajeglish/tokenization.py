"""Tokenizing trajectories into template ids and rendering them back.

The tokenizer maps a next state to the template whose rendered box is
closest (mean corner distance under the agent's dims) to the observed box,
measured in the local frame of the previous state. Full trajectories are
tokenized iteratively: each step snaps against the previously *snapped*
state, not the raw one, so rendering the token chain reproduces the snapped
trajectory exactly.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import AgentMeta, AgentState, corner_distance_arr, to_global_arr, to_local_arr
from .sampling import draw_categorical, nucleus_probs, softmax
from .templates import TemplateSet

INVALID_TOKEN = -1


def template_distances(s0_xyh: np.ndarray, s_xyh: np.ndarray, length: float, width: float,
                       ts: TemplateSet) -> np.ndarray:
    """Corner distances from every template to the local-frame delta s0 -> s. (K,)"""
    local = to_local_arr(np.asarray(s0_xyh, dtype=float), np.asarray(s_xyh, dtype=float))
    tc = ts.corners(length, width)  # (K, 4, 2)
    from .geometry import corners_arr

    gc = corners_arr(local, length, width)  # (4, 2)
    return np.linalg.norm(tc - gc, axis=-1).mean(axis=-1)


def tokenize_step(s0: AgentState | np.ndarray, s: AgentState | np.ndarray,
                  m: AgentMeta, ts: TemplateSet) -> int:
    """Token id minimizing the corner distance to the observed next state.

    Ties break toward the lowest template index.
    """
    s0_xyh = s0.as_array() if isinstance(s0, AgentState) else s0
    s_xyh = s.as_array() if isinstance(s, AgentState) else s
    if isinstance(s0, AgentState) and not s0.valid or isinstance(s, AgentState) and not s.valid:
        raise ValueError("tokenize_step requires valid states")
    d = template_distances(s0_xyh, s_xyh, m.length, m.width, ts)
    return int(np.argmin(d))


def tokenize_step_batch(s0_xyh: np.ndarray, s_xyh: np.ndarray, length: float, width: float,
                        ts: TemplateSet, chunk: int = 4096) -> np.ndarray:
    """Vectorized tokenize_step over (B, 3) state pairs sharing one box size."""
    local = to_local_arr(s0_xyh, s_xyh)  # (B, 3)
    from .geometry import corners_arr

    tc = ts.corners(length, width)  # (K, 4, 2)
    b = local.shape[0]
    out = np.empty(b, dtype=int)
    for start in range(0, b, chunk):
        sl = slice(start, min(start + chunk, b))
        gc = corners_arr(local[sl], length, width)[:, None]  # (b, 1, 4, 2)
        d = np.linalg.norm(tc - gc, axis=-1).mean(axis=-1)  # (b, K)
        out[sl] = d.argmin(axis=1)
    return out


def render(s0: AgentState | np.ndarray, a: int, ts: TemplateSet) -> AgentState:
    """Apply template ``a`` in the local frame of ``s0``."""
    if not 0 <= a < len(ts):
        raise IndexError(f"token id {a} out of range for |V|={len(ts)}")
    s0_xyh = s0.as_array() if isinstance(s0, AgentState) else np.asarray(s0, dtype=float)
    return AgentState.from_array(to_global_arr(s0_xyh, ts.templates[a]))


def chain_render(s0_xyh: np.ndarray, token_ids, ts: TemplateSet) -> np.ndarray:
    """Render a token chain starting from s0. Returns (len(ids) + 1, 3) states."""
    out = np.empty((len(token_ids) + 1, 3))
    out[0] = s0_xyh
    for k, a in enumerate(token_ids):
        out[k + 1] = to_global_arr(out[k], ts.templates[int(a)])
    return out


def tokenize_noisy(s0, s, m: AgentMeta, ts: TemplateSet, sigma: float, p_top: float,
                   rng: np.random.Generator) -> int:
    """Sample a token with distances as negative logits at temperature sigma.

    sigma == 0 (and p_top == 1) recovers the deterministic argmin tokenizer;
    equidistant templates are sampled with equal probability.
    """
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    s0_xyh = s0.as_array() if isinstance(s0, AgentState) else s0
    s_xyh = s.as_array() if isinstance(s, AgentState) else s
    d = template_distances(s0_xyh, s_xyh, m.length, m.width, ts)
    if sigma == 0.0:
        return int(np.argmin(d))
    return draw_categorical(nucleus_probs(softmax(-d / sigma), p_top), rng)


@dataclass
class TokenizedTrajectory:
    """Token chain for one agent.

    token_ids[k] moves snapped_states[k] to snapped_states[k+1]; entries are
    INVALID_TOKEN where the raw state was missing or the chain re-anchored.
    error_per_step[k] is the corner distance between raw and snapped state
    k+1 (nan on invalid steps).
    """

    token_ids: np.ndarray  # (T-1,) int
    token_valid: np.ndarray  # (T-1,) bool
    snapped_states: np.ndarray  # (T, 3)
    snapped_valid: np.ndarray  # (T,) bool
    error_per_step: np.ndarray  # (T-1,)


def tokenize_trajectory(states: np.ndarray, valid: np.ndarray | None, m: AgentMeta,
                        ts: TemplateSet) -> TokenizedTrajectory:
    """Iteratively tokenize a trajectory, chaining from snapped states.

    The first valid state anchors the chain and is not tokenized. Interior
    gaps of invalid states re-anchor the chain at the next valid state; the
    re-anchor step itself carries an invalid token.
    """
    states = np.asarray(states, dtype=float)
    t_s = states.shape[0]
    valid = np.ones(t_s, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("cannot tokenize a trajectory with no valid states")

    ids = np.full(t_s - 1, INVALID_TOKEN, dtype=int)
    token_valid = np.zeros(t_s - 1, dtype=bool)
    snapped = np.zeros((t_s, 3))
    snapped_valid = np.zeros(t_s, dtype=bool)
    err = np.full(t_s - 1, np.nan)

    anchor = int(np.argmax(valid))
    snapped[anchor] = states[anchor]
    snapped_valid[anchor] = True
    for t in range(anchor + 1, t_s):
        if not valid[t]:
            continue
        if not snapped_valid[t - 1]:
            # Gap just ended: re-anchor on the raw state, no token emitted.
            snapped[t] = states[t]
            snapped_valid[t] = True
            continue
        d = template_distances(snapped[t - 1], states[t], m.length, m.width, ts)
        a = int(np.argmin(d))
        ids[t - 1] = a
        token_valid[t - 1] = True
        snapped[t] = to_global_arr(snapped[t - 1], ts.templates[a])
        snapped_valid[t] = True
        err[t - 1] = corner_distance_arr(states[t], snapped[t], m.length, m.width)
    return TokenizedTrajectory(ids, token_valid, snapped, snapped_valid, err)


def tokenize_trajectory_noisy(states: np.ndarray, valid: np.ndarray | None, m: AgentMeta,
                              ts: TemplateSet, sigma: float, p_top: float,
                              rng: np.random.Generator):
    """Noisy chain tokenization for training-input regularization.

    The chain advances through *sampled* tokens while the returned targets
    keep the minimum-distance token at each step, so targets stay clean even
    when inputs are noised.

    Returns (input_trajectory, target_ids).
    """
    states = np.asarray(states, dtype=float)
    t_s = states.shape[0]
    valid = np.ones(t_s, dtype=bool) if valid is None else np.asarray(valid, dtype=bool)
    if not valid.any():
        raise ValueError("cannot tokenize a trajectory with no valid states")

    ids = np.full(t_s - 1, INVALID_TOKEN, dtype=int)
    targets = np.full(t_s - 1, INVALID_TOKEN, dtype=int)
    token_valid = np.zeros(t_s - 1, dtype=bool)
    snapped = np.zeros((t_s, 3))
    snapped_valid = np.zeros(t_s, dtype=bool)
    err = np.full(t_s - 1, np.nan)

    anchor = int(np.argmax(valid))
    snapped[anchor] = states[anchor]
    snapped_valid[anchor] = True
    for t in range(anchor + 1, t_s):
        if not valid[t]:
            continue
        if not snapped_valid[t - 1]:
            snapped[t] = states[t]
            snapped_valid[t] = True
            continue
        d = template_distances(snapped[t - 1], states[t], m.length, m.width, ts)
        targets[t - 1] = int(np.argmin(d))
        if sigma == 0.0:
            a = targets[t - 1]
        else:
            a = draw_categorical(nucleus_probs(softmax(-d / sigma), p_top), rng)
        ids[t - 1] = a
        token_valid[t - 1] = True
        snapped[t] = to_global_arr(snapped[t - 1], ts.templates[a])
        snapped_valid[t] = True
        err[t - 1] = corner_distance_arr(states[t], snapped[t], m.length, m.width)
    return TokenizedTrajectory(ids, token_valid, snapped, snapped_valid, err), targets


def discretization_report(scenarios, ts: TemplateSet) -> dict:
    """Tokenization quality on a corpus.

    Returns a dict with per-class mean corner distance as a function of
    trajectory step, and per-timestep collision probability for raw vs
    tokenized scenarios (see metrics.collision_rate for the single-scene
    version).
    """
    from .geometry import pairwise_overlap_matrix

    max_t = max(s.n_steps for s in scenarios)
    err_sum: dict[str, np.ndarray] = {}
    err_cnt: dict[str, np.ndarray] = {}
    raw_overlap = np.zeros(max_t)
    tok_overlap = np.zeros(max_t)
    agent_cnt = np.zeros(max_t)

    for sc in scenarios:
        n, t_s = sc.n_agents, sc.n_steps
        snapped_grid = np.zeros((n, t_s, 3))
        snapped_ok = np.zeros((n, t_s), dtype=bool)
        for i, agent in enumerate(sc.agents):
            if not agent.valid.any():
                continue
            tok = tokenize_trajectory(agent.states, agent.valid, agent.meta, ts)
            snapped_grid[i] = tok.snapped_states
            snapped_ok[i] = tok.snapped_valid
            cls = agent.meta.agent_class.value
            if cls not in err_sum:
                err_sum[cls] = np.zeros(max_t - 1)
                err_cnt[cls] = np.zeros(max_t - 1)
            ok = tok.token_valid
            err_sum[cls][: t_s - 1][ok] += tok.error_per_step[ok]
            err_cnt[cls][: t_s - 1][ok] += 1

        lengths = np.array([a.meta.length for a in sc.agents])
        widths = np.array([a.meta.width for a in sc.agents])
        raw_states = sc.state_grid()
        raw_valid = sc.valid_grid()
        for t in range(t_s):
            raw_m = pairwise_overlap_matrix(raw_states[:, t], lengths, widths, raw_valid[:, t])
            tok_m = pairwise_overlap_matrix(snapped_grid[:, t], lengths, widths, snapped_ok[:, t])
            raw_overlap[t] += raw_m.any(axis=1).sum()
            tok_overlap[t] += tok_m.any(axis=1).sum()
            agent_cnt[t] += raw_valid[:, t].sum()

    steps = np.arange(1, max_t)
    with np.errstate(invalid="ignore", divide="ignore"):
        error_curves = {
            cls: np.where(err_cnt[cls] > 0, err_sum[cls] / np.maximum(err_cnt[cls], 1), np.nan)
            for cls in err_sum
        }
        raw_rate = np.where(agent_cnt > 0, raw_overlap / np.maximum(agent_cnt, 1), np.nan)
        tok_rate = np.where(agent_cnt > 0, tok_overlap / np.maximum(agent_cnt, 1), np.nan)
    return {
        "step": steps,
        "error_curves": error_curves,
        "mean_error": {cls: float(np.nansum(err_sum[cls]) / max(err_cnt[cls].sum(), 1))
                       for cls in err_sum},
        "collision_timestep": np.arange(max_t),
        "collision_raw": raw_rate,
        "collision_tokenized": tok_rate,
    }
