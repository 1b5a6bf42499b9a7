"""Closed-loop rollouts: per-timestep, per-agent token sampling.

Each timestep factorizes over agents in the declared acting order: an
agent's logits condition on everything earlier in the flattened sequence
that its regime allows, including same-timestep predecessors under
full_intra. Replay and external agents inject raw states that are
chain-tokenized online so the model always observes in-vocabulary context,
and the model's log-probability of *every* token (sampled or forced) is
recorded, which makes the sampled grid's density available for free.

Decoding is incremental with per-position key/value caches; a cache lives
until the window is recomputed (see windows.py).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad
from .errors import ConfigError, DataError
from .geometry import AgentState, to_global_arr
from .layers import MASK_OFF
from .masks import uses_agent_shift
from .model import SceneInit, TokenGrid, TrajeglishModel, _np_log_softmax
from .sampling import sample_token
from .scenario import Scenario
from .templates import TemplateSet
from .tokenization import INVALID_TOKEN, template_distances, tokenize_trajectory

CONTROLLERS = ("model", "replay", "external")


@dataclass
class ControlAssignment:
    """Per-agent controller; external agents get a state-callback policy.

    External callbacks receive (agent_index, step_index, rendered state
    history (N, T, 3)) and return the agent's next raw pose; the engine
    chain-tokenizes it, so external systems stay black boxes.
    """

    controllers: list[str]
    external_policies: dict[int, callable] = field(default_factory=dict)

    def __post_init__(self):
        for c in self.controllers:
            if c not in CONTROLLERS:
                raise ConfigError(f"unknown controller {c!r}; expected one of {CONTROLLERS}")
        for i, c in enumerate(self.controllers):
            if c == "external" and i not in self.external_policies:
                raise ConfigError(f"agent {i} is external but has no policy callback")

    @classmethod
    def all_model(cls, n: int) -> "ControlAssignment":
        return cls(["model"] * n)

    @classmethod
    def all_replay(cls, n: int) -> "ControlAssignment":
        return cls(["replay"] * n)


@dataclass
class WindowConfig:
    max_agents: int
    recompute_timesteps: tuple = ()

    def __post_init__(self):
        rt = tuple(self.recompute_timesteps)
        if any(b <= a for a, b in zip(rt, rt[1:])):
            raise ConfigError("recompute_timesteps must be strictly increasing")
        if self.max_agents < 1:
            raise ConfigError("window max_agents must be >= 1")
        self.recompute_timesteps = rt


@dataclass
class RolloutConfig:
    temperature: float = 1.5
    p_top: float = 1.0
    horizon: int = 16
    n_rollouts: int = 1
    seed: int = 0
    window: WindowConfig | None = None

    def __post_init__(self):
        if self.temperature < 0:
            raise ConfigError("temperature must be >= 0")
        if not 0 < self.p_top <= 1:
            raise ConfigError("p_top must be in (0, 1]")
        if self.horizon < 0 or self.n_rollouts < 1:
            raise ConfigError("horizon must be >= 0 and n_rollouts >= 1")
        if self.window is not None and self.window.recompute_timesteps and (
            max(self.window.recompute_timesteps) >= self.horizon
        ):
            raise ConfigError("recompute_timesteps must lie within the horizon")


@dataclass
class Rollout:
    """One sampled future: token grid, rendered states, per-step log-probs."""

    tokens: TokenGrid  # (N, T_tok) in original agent indexing
    states: np.ndarray  # (N, T_tok + 1, 3) rendered, includes the initial state
    states_valid: np.ndarray  # (N, T_tok + 1)
    log_probs: np.ndarray  # (N, T_tok), nan where no model evaluation happened
    seed: int
    acting_order: list[int]  # original agent indices in acting order
    history_steps: int
    config: dict = field(default_factory=dict)

    def total_log_prob(self) -> float:
        return float(np.nansum(self.log_probs))


class SceneMemory:
    """Per-scene precomputation shared by every rollout: encoder output and
    cross-attention key/value caches per decoder layer."""

    def __init__(self, model: TrajeglishModel, scene: SceneInit):
        self.model = model
        self.cfg = model.cfg
        with no_grad():
            scene_t, scene_mask, agent_base, _ = model.encode_scene([scene])
        self.scene_np = scene_t.data[0]  # (Ls, C)
        self.cross_bias = np.where(scene_mask[0], 0.0, MASK_OFF)[None, None, :]
        self.agent_base = agent_base.data[0]  # (N, C)
        self.n_agents = scene.n_agents
        self.cross_kv = []
        for blk in model.decoder.blocks:
            self.cross_kv.append(blk.cross_attn.np_kv(self.scene_np))


class IncrementalDecoder:
    """KV-cached decoding over one window. Slots are appended in flattened
    order; content metadata drives the regime visibility predicate."""

    def __init__(self, memory: SceneMemory):
        self.mem = memory
        cfg = memory.cfg
        self.cfg = cfg
        self.regime = cfg.masking_regime
        n, c = memory.n_agents, cfg.hidden_dim
        s_max = n * cfg.max_timesteps
        dec = memory.model.decoder
        hd = cfg.hidden_dim // cfg.n_heads
        self.k_cache = [np.zeros((cfg.n_heads, s_max, hd)) for _ in dec.blocks]
        self.v_cache = [np.zeros((cfg.n_heads, s_max, hd)) for _ in dec.blocks]
        self.content_t = np.zeros(s_max, dtype=int)
        self.content_a = np.zeros(s_max, dtype=int)
        self.is_start = np.zeros(s_max, dtype=bool)
        self.n_cached = 0
        self.out_w = dec.tok_embed.weight.data[: cfg.vocab_size]

    def content_slot(self, t: int, agent: int):
        """Which token this slot holds: None means a start token."""
        if uses_agent_shift(self.regime):
            return None if t == 0 else (t - 1, agent)
        if t == 0 and agent == 0:
            return None
        return (t, agent - 1) if agent > 0 else (t - 1, self.mem.n_agents - 1)

    def _visible(self, t: int, agent: int) -> np.ndarray:
        s = self.n_cached
        if self.regime == "full_intra":
            return np.ones(s, dtype=bool)
        if self.regime == "no_intra":
            # Start markers are per-agent under the agent-shift arrangement.
            return np.where(
                self.is_start[:s], self.content_a[:s] == agent, self.content_t[:s] < t
            )
        return self.content_a[:s] == agent  # marginal / marginal_no_map

    def _forward_slots(self, x: np.ndarray, rows_t, rows_a) -> np.ndarray:
        """Append len(x) slots (metadata already recorded) and return logits.

        x: (Q, C) slot inputs; rows_t/rows_a: (Q,) predicted positions.
        """
        mem, dec = self.mem, self.mem.model.decoder
        q_n = x.shape[0]
        pos = self.n_cached - q_n  # metadata for these slots was just written
        visible = np.stack([self._visible(tt, aa) for tt, aa in zip(rows_t, rows_a)])
        bias = np.where(visible, 0.0, MASK_OFF)[None, :, :]  # (1, Q, S)
        for li, blk in enumerate(dec.blocks):
            h = blk.ln1.np_forward(x)
            q = blk.self_attn.np_q(h)
            k_new, v_new = blk.self_attn.np_kv(h)
            self.k_cache[li][:, pos : pos + q_n] = k_new
            self.v_cache[li][:, pos : pos + q_n] = v_new
            att = blk.self_attn.np_attend(
                q, self.k_cache[li][:, : self.n_cached],
                self.v_cache[li][:, : self.n_cached], bias,
            )
            x = x + att
            qc = blk.cross_attn.np_q(blk.ln2.np_forward(x))
            ck, cv = mem.cross_kv[li]
            x = x + blk.cross_attn.np_attend(qc, ck, cv, mem.cross_bias)
            x = x + blk.mlp.np_forward(blk.ln3.np_forward(x))
        h = dec.ln_f.np_forward(x)
        return h @ self.out_w.T

    def _slot_input(self, t: int, agent: int, content_token: int, content_valid: bool):
        cfg, mem, dec = self.cfg, self.mem, self.mem.model.decoder
        content = self.content_slot(t, agent)
        if content is None:
            emb = dec.tok_embed.weight.data[cfg.vocab_size]
        elif content_valid:
            emb = dec.tok_embed.weight.data[int(content_token)]
        else:
            emb = np.zeros(cfg.hidden_dim)
        x = emb + dec.time_embed.weight.data[t]
        if cfg.order_free:
            x = x + mem.agent_base[agent]
        else:
            x = x + mem.model.order_embed.weight.data[agent]
        pos = self.n_cached
        if content is None:
            self.content_t[pos], self.content_a[pos] = -1, agent
            self.is_start[pos] = True
        else:
            self.content_t[pos], self.content_a[pos] = content
        self.n_cached = pos + 1
        return x

    def _check_capacity(self, t: int) -> None:
        if t >= self.cfg.max_timesteps:
            raise DataError(
                f"timestep {t} exceeds decoder capacity {self.cfg.max_timesteps}; "
                "use a window recompute schedule for longer rollouts"
            )

    def step(self, t: int, agent: int, content_token: int, content_valid: bool) -> np.ndarray:
        """Append the slot predicting position (t, agent) and return its logits.

        Only valid under the global-shift (full_intra) arrangement, where
        generation is strictly sequential over the flattened order.
        """
        self._check_capacity(t)
        x = self._slot_input(t, agent, content_token, content_valid)
        return self._forward_slots(x[None], [t], [agent])[0]

    def step_timestep(self, t: int, content_tokens, content_valid) -> np.ndarray:
        """Append all N slots of timestep t at once and return (N, vocab) logits.

        Under the agent-shift regimes every slot of timestep t holds a token
        from timestep t-1, and predictions within the timestep are mutually
        independent, so the whole timestep decodes in one batch. This also
        lets a row attend later-order agents' previous-step tokens, matching
        the teacher-forced path exactly.
        """
        self._check_capacity(t)
        n = self.mem.n_agents
        xs = np.stack(
            [
                self._slot_input(t, i, int(content_tokens[i]), bool(content_valid[i]))
                for i in range(n)
            ]
        )
        return self._forward_slots(xs, [t] * n, list(range(n)))


@dataclass
class RolloutState:
    """Mutable per-rollout engine state, in acting-order agent indexing."""

    decoder: IncrementalDecoder
    snapped: np.ndarray  # (N, 3) current rendered poses
    snapped_valid: np.ndarray  # (N,)
    states: list  # accumulated (N, 3) snapshots, one per processed step
    tokens: list  # accumulated (N,) token columns
    tokens_valid: list
    log_probs: list
    t: int = 0  # next token-grid column to produce


def _decide_token(state: RolloutState, i: int, controller: str, ts: TemplateSet,
                  meta, replay_next, external_policy, tau, p_top, rng, t_global,
                  logits: np.ndarray):
    """Pick agent i's token at the current step from its controller."""
    if controller == "model":
        return sample_token(logits, tau, p_top, rng)
    if controller == "replay":
        if replay_next is None:
            raise DataError(f"missing replay state for replay agent {i} at step {t_global}")
        target = replay_next
    else:
        history = np.stack(state.states + [state.snapped], axis=1)
        got = external_policy(i, t_global, history)
        target = got.as_array() if isinstance(got, AgentState) else np.asarray(got, float)
    d = template_distances(state.snapped[i], target, meta.length, meta.width, ts)
    return int(np.argmin(d))


def _past_content(state: RolloutState, t: int, i: int):
    """Input token for a slot whose content is strictly in the past."""
    ct, ca = state.decoder.content_slot(t, i)
    if ct < len(state.tokens):
        return int(state.tokens[ct][ca]), bool(state.tokens_valid[ct][ca])
    return 0, False


def _timestep_logits(state: RolloutState, n: int, decide) -> tuple:
    """Produce per-agent logits for the current timestep and decide tokens.

    ``decide(i, logits) -> (token, valid)`` is called in acting order. Under the
    agent-shift regimes all logits are computed up front (they are mutually
    independent within the timestep); under full_intra each slot's input is
    the previously decided token, so decoding interleaves.
    """
    t = state.t
    col = np.empty(n, dtype=int)
    logp_col = np.full(n, np.nan)
    if uses_agent_shift(state.decoder.regime):
        contents = np.zeros(n, dtype=int)
        valids = np.zeros(n, dtype=bool)
        for i in range(n):
            if state.decoder.content_slot(t, i) is not None:
                contents[i], valids[i] = _past_content(state, t, i)
        logits_all = state.decoder.step_timestep(t, contents, valids)
        logp_all = _np_log_softmax(logits_all)
        ok_col = np.ones(n, dtype=bool)
        for i in range(n):
            col[i], ok_col[i] = decide(i, logits_all[i])
            if ok_col[i]:
                logp_col[i] = logp_all[i, col[i]]
    else:
        ok_col = np.ones(n, dtype=bool)
        for i in range(n):
            content = state.decoder.content_slot(t, i)
            if content is None:
                tok_in, ok_in = 0, False
            elif content[0] == t:  # same-timestep predecessor, decided this step
                tok_in, ok_in = int(col[content[1]]), bool(ok_col[content[1]])
            else:
                tok_in, ok_in = _past_content(state, t, i)
            logits = state.decoder.step(t, i, tok_in, ok_in)
            col[i], ok_col[i] = decide(i, logits)
            if ok_col[i]:
                logp_col[i] = _np_log_softmax(logits[None])[0, col[i]]
    return col, ok_col, logp_col


def step_scene(state: RolloutState, controllers, metas, ts: TemplateSet,
               replay_next_states, replay_next_valid, external_policies,
               tau: float, p_top: float, rng, t_global: int) -> np.ndarray:
    """Advance one timestep: every agent picks a token in acting order.

    Model agents sample from tempered nucleus logits; replay/external agents
    are chain-tokenized. The model's log-prob of the chosen token is recorded
    for every agent. Returns the token column (N,).
    """
    n = len(controllers)

    def decide(i, logits):
        replay_next = (
            replay_next_states[i]
            if replay_next_states is not None and replay_next_valid[i]
            else None
        )
        tok = _decide_token(
            state, i, controllers[i], ts, metas[i], replay_next,
            external_policies.get(i), tau, p_top, rng, t_global, logits,
        )
        return tok, True

    col, _, logp_col = _timestep_logits(state, n, decide)
    # Render the column and advance the chain.
    new_snapped = state.snapped.copy()
    for i in range(n):
        new_snapped[i] = to_global_arr(state.snapped[i], ts.templates[col[i]])
    state.states.append(state.snapped.copy())
    state.snapped = new_snapped
    state.tokens.append(col)
    state.tokens_valid.append(np.ones(n, dtype=bool))
    state.log_probs.append(logp_col)
    state.t += 1
    return col


def _force_history(state: RolloutState, history_tok: list, metas, ts) -> None:
    """Prime the decoder with chain-tokenized history (columns 0..H-2)."""
    n = len(metas)
    for t in range(len(history_tok[0].token_ids) if history_tok else 0):
        forced = np.array([max(int(h.token_ids[t]), 0) for h in history_tok])
        forced_ok = np.array([bool(h.token_valid[t]) for h in history_tok])

        def decide(i, logits):
            return int(forced[i]), bool(forced_ok[i])

        col, ok, logp_col = _timestep_logits(state, n, decide)
        snapped_col = np.stack([h.snapped_states[t + 1] for h in history_tok])
        snapped_ok = np.array([h.snapped_valid[t + 1] for h in history_tok])
        state.states.append(state.snapped.copy())
        state.snapped = np.where(snapped_ok[:, None], snapped_col, state.snapped)
        state.snapped_valid = snapped_ok | state.snapped_valid
        state.tokens.append(np.where(ok, forced, INVALID_TOKEN))
        state.tokens_valid.append(ok)
        state.log_probs.append(logp_col)
        state.t += 1


def _validate_order(controllers, order) -> None:
    """External (live) agents must act before model agents each timestep;
    replay agents are log-fixed and may sit anywhere in the order."""
    seen_model = False
    for idx in order:
        if controllers[idx] == "model":
            seen_model = True
        elif controllers[idx] == "external" and seen_model:
            raise ConfigError(
                "externally controlled agents must precede model-controlled "
                "agents in the acting order"
            )


def rollout(model: TrajeglishModel, ts: TemplateSet, scenario: Scenario,
            control: ControlAssignment, cfg: RolloutConfig,
            history_steps: int = 1, order: list[int] | None = None) -> list[Rollout]:
    """Sample cfg.n_rollouts independent futures of cfg.horizon steps.

    The first ``history_steps`` scenario states initialize the scene (step 0
    is the encoder input; steps 1..H-1 are teacher-forced as chain-tokenized
    context). Deterministic per (cfg.seed, rollout index).
    """
    n = scenario.n_agents
    if len(control.controllers) != n:
        raise ConfigError("control assignment does not match the agent count")
    if history_steps < 1 or history_steps > scenario.n_steps:
        raise DataError(f"history_steps must be in [1, {scenario.n_steps}]")
    order = list(range(n)) if order is None else list(order)
    if sorted(order) != list(range(n)):
        raise ConfigError("order must be a permutation of the agents")
    _validate_order(control.controllers, order)

    valid0 = np.stack([a.valid[:history_steps] for a in scenario.agents])
    if not valid0.any(axis=1).all():
        raise DataError("every agent needs at least one valid state in the history")

    # Acting-order view of the scene.
    inv = np.argsort(order)
    metas = [scenario.agents[j].meta for j in order]
    log_states = np.stack([scenario.agents[j].states for j in order])
    log_valid = np.stack([scenario.agents[j].valid for j in order])
    controllers = [control.controllers[j] for j in order]

    def _wrap_policy(fn, j_orig):
        # Callbacks speak original agent indexing; the engine runs in acting order.
        def wrapped(_i_act, t, hist):
            return fn(j_orig, t, hist[inv])

        return wrapped

    policies = {
        int(inv[j]): _wrap_policy(fn, j) for j, fn in control.external_policies.items()
    }
    scene = SceneInit(
        metas=metas, states=log_states[:, 0], map_objects=scenario.map_objects
    )

    history_tok = [
        tokenize_trajectory(log_states[i, :history_steps], log_valid[i, :history_steps],
                            metas[i], ts)
        if history_steps > 1
        else None
        for i in range(n)
    ]

    memory = SceneMemory(model, scene)
    seeds = np.random.SeedSequence(cfg.seed).spawn(cfg.n_rollouts)
    out = []
    for r in range(cfg.n_rollouts):
        rng = np.random.default_rng(seeds[r])
        state = RolloutState(
            decoder=IncrementalDecoder(memory),
            snapped=log_states[:, 0].copy(),
            snapped_valid=log_valid[:, 0].copy(),
            states=[],
            tokens=[],
            tokens_valid=[],
            log_probs=[],
        )
        if history_steps > 1:
            _force_history(state, history_tok, metas, ts)
        for step in range(cfg.horizon):
            t_global = history_steps + step
            if any(c == "replay" for c in controllers):
                if t_global >= log_states.shape[1]:
                    raise DataError(
                        f"replay agents need log states through step {t_global}, "
                        f"scenario has {log_states.shape[1]}"
                    )
                replay_states = log_states[:, t_global]
                replay_valid = log_valid[:, t_global]
            else:
                replay_states, replay_valid = None, np.zeros(n, dtype=bool)
            step_scene(
                state, controllers, metas, ts, replay_states, replay_valid,
                policies, cfg.temperature, cfg.p_top, rng, t_global,
            )
        state.states.append(state.snapped.copy())

        t_tok = state.t
        tokens = (
            np.stack(state.tokens, axis=1) if t_tok else np.zeros((n, 0), dtype=int)
        )
        tok_valid = (
            np.stack(state.tokens_valid, axis=1) if t_tok else np.zeros((n, 0), dtype=bool)
        )
        states = np.stack(state.states, axis=1)  # (N, t_tok + 1, 3)
        states_valid = np.ones((n, t_tok + 1), dtype=bool)
        if history_steps > 1:
            for i in range(n):
                states_valid[i, : history_steps] = history_tok[i].snapped_valid
        lp = (
            np.stack(state.log_probs, axis=1) if t_tok else np.zeros((n, 0))
        )
        out.append(
            Rollout(
                tokens=TokenGrid(tokens[inv], tok_valid[inv]),
                states=states[inv],
                states_valid=states_valid[inv],
                log_probs=lp[inv],
                seed=int(cfg.seed),
                acting_order=list(order),
                history_steps=history_steps,
                config={
                    "temperature": cfg.temperature,
                    "p_top": cfg.p_top,
                    "horizon": cfg.horizon,
                    "rollout_index": r,
                },
            )
        )
    return out
