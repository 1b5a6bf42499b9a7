"""Encoder-decoder sequence model over motion tokens.

The encoder turns the scene initialization (per-agent dims/class/initial
pose plus map polylines) into a sequence of embeddings: latent-query tokens
summarizing the map, followed by one token per agent. The decoder runs
masked self-attention over the flattened token grid (timestep-major,
agent-minor), cross-attends to the scene encoding, and decodes logits over
the vocabulary through the transposed token-embedding table (tied weights).

Under the marginal regimes the model must be exactly invariant to the
declared agent order, so those regimes replace the learned order embedding
with the agent's own feature embedding (content-based identity) everywhere.
"""

from __future__ import annotations


import json
from dataclasses import asdict, dataclass, field

import numpy as np

from .autodiff import Module, Parameter, Tensor, concat, log_softmax, no_grad
from .errors import DataError, NumericError
from .geometry import AgentClass, AgentMeta
from .layers import (
    MASK_OFF,
    DecoderBlock,
    Embedding,
    EncoderBlock,
    LayerNorm,
    Linear,
    MLP,
    MultiHeadAttention,
    mask_to_bias,
)
from .masks import REGIMES, input_token_index, slot_mask, uses_agent_shift
from .scenario import MapObject
from .tokenization import INVALID_TOKEN

CHECKPOINT_VERSION = 1

AGENT_CLASSES = tuple(c.value for c in AgentClass)
MAP_TYPES = ("lane", "crosswalk", "edge")  # anything else lands in the "other" bucket
N_AGENT_FEATURES = 6 + len(AGENT_CLASSES)  # x, y, cos h, sin h, length, width, class one-hot
N_POINT_FEATURES = 4 + len(MAP_TYPES) + 1  # x, y, dx, dy, type one-hot (+ other)


@dataclass
class ModelConfig:
    vocab_size: int
    hidden_dim: int = 64
    n_map_layers: int = 1
    n_enc_layers: int = 1
    n_dec_layers: int = 2
    n_heads: int = 4
    max_agents: int = 8
    max_timesteps: int = 32
    max_map_objects: int = 16
    n_latent_queries: int = 4
    masking_regime: str = "full_intra"
    dropout: float = 0.0
    mlp_ratio: int = 4

    def __post_init__(self):
        counts = (
            self.vocab_size, self.hidden_dim, self.n_map_layers, self.n_enc_layers,
            self.n_dec_layers, self.n_heads, self.max_agents, self.max_timesteps,
            self.max_map_objects, self.n_latent_queries, self.mlp_ratio,
        )
        if any(c < 1 for c in counts):
            raise ValueError(f"all ModelConfig counts must be >= 1, got {self}")
        if self.hidden_dim % self.n_heads:
            raise ValueError(
                f"hidden_dim {self.hidden_dim} not divisible by n_heads {self.n_heads}"
            )
        if self.masking_regime not in REGIMES:
            raise ValueError(f"unknown masking regime {self.masking_regime!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must be in [0, 1), got {self.dropout}")

    @property
    def uses_map(self) -> bool:
        return self.masking_regime != "marginal_no_map"

    @property
    def order_free(self) -> bool:
        return uses_agent_shift(self.masking_regime)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


@dataclass
class SceneInit:
    """Scene initialization; list position is the agent-order index."""

    metas: list[AgentMeta]
    states: np.ndarray  # (N, 3) initial poses
    map_objects: list[MapObject] = field(default_factory=list)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float).reshape(-1, 3)
        if len(self.metas) != self.states.shape[0]:
            raise ValueError("metas and states disagree on agent count")

    @property
    def n_agents(self) -> int:
        return len(self.metas)

    def reordered(self, order) -> "SceneInit":
        order = list(order)
        return SceneInit(
            metas=[self.metas[i] for i in order],
            states=self.states[order],
            map_objects=self.map_objects,
        )


@dataclass
class TokenGrid:
    """Per-agent, per-timestep token ids with validity; flattened t-major."""

    ids: np.ndarray  # (N, T) int
    valid: np.ndarray  # (N, T) bool

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.ids.shape != self.valid.shape or self.ids.ndim != 2:
            raise ValueError("TokenGrid ids/valid must share an (N, T) shape")

    @property
    def n_agents(self) -> int:
        return self.ids.shape[0]

    @property
    def n_steps(self) -> int:
        return self.ids.shape[1]

    def flat_ids(self) -> np.ndarray:
        return self.ids.T.reshape(-1)  # timestep-major, agent-minor

    def flat_valid(self) -> np.ndarray:
        return self.valid.T.reshape(-1)


# ------------------------------------------------------------ feature prep

def agent_features(metas, states) -> np.ndarray:
    """(N, N_AGENT_FEATURES) raw encoder inputs for one scene."""
    n = len(metas)
    out = np.zeros((n, N_AGENT_FEATURES))
    states = np.asarray(states, dtype=float)
    out[:, 0] = states[:, 0]
    out[:, 1] = states[:, 1]
    out[:, 2] = np.cos(states[:, 2])
    out[:, 3] = np.sin(states[:, 2])
    out[:, 4] = [m.length for m in metas]
    out[:, 5] = [m.width for m in metas]
    for i, m in enumerate(metas):
        out[i, 6 + AGENT_CLASSES.index(m.agent_class.value)] = 1.0
    return out


def map_point_features(map_objects, max_objects: int) -> tuple[np.ndarray, np.ndarray]:
    """Pad map polylines to (M, P, N_POINT_FEATURES) with a point mask (M, P)."""
    objs = list(map_objects)[:max_objects]
    if not objs:
        return np.zeros((0, 1, N_POINT_FEATURES)), np.zeros((0, 1), dtype=bool)
    p_max = max(o.points.shape[0] for o in objs)
    feats = np.zeros((len(objs), p_max, N_POINT_FEATURES))
    mask = np.zeros((len(objs), p_max), dtype=bool)
    for i, o in enumerate(objs):
        p = o.points.shape[0]
        feats[i, :p, 0:2] = o.points
        segs = np.diff(o.points, axis=0)
        if p > 1:
            feats[i, : p - 1, 2:4] = segs
            feats[i, p - 1, 2:4] = segs[-1]
        type_idx = MAP_TYPES.index(o.object_type) if o.object_type in MAP_TYPES else len(MAP_TYPES)
        feats[i, :p, 4 + type_idx] = 1.0
        mask[i, :p] = True
    return feats, mask


# ----------------------------------------------------------------- encoder

class SceneEncoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.hidden_dim
        self.agent_mlp = Linear(rng, N_AGENT_FEATURES, c)
        self.point_mlp1 = Linear(rng, N_POINT_FEATURES, c)
        self.point_mlp2 = Linear(rng, c, c)
        self.map_blocks = [
            EncoderBlock(rng, c, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_map_layers)
        ]
        self.latent_queries = Parameter(rng.normal(0, 0.02, (cfg.n_latent_queries, c)))
        self.latent_ln_q = LayerNorm(c)
        self.latent_attn = MultiHeadAttention(rng, c, cfg.n_heads)
        self.latent_ln_m = LayerNorm(c)
        self.latent_mlp = MLP(rng, c, cfg.mlp_ratio)
        self.enc_blocks = [
            EncoderBlock(rng, c, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_enc_layers)
        ]

    def encode_map(self, point_feats: np.ndarray, point_mask: np.ndarray) -> Tensor:
        """VectorNet-style polylines -> latent map summary tokens (B, L, C)."""
        b, m, p, _ = point_feats.shape
        h = self.point_mlp2(self.point_mlp1(Tensor(point_feats)).gelu())
        # Masked max-pool over points.
        h = h + Tensor(np.where(point_mask[..., None], 0.0, MASK_OFF))
        poly = h.max(axis=2)  # (B, M, C)
        poly_mask = point_mask.any(axis=2)  # (B, M)
        attn_bias = np.where(poly_mask, 0.0, MASK_OFF)[:, None, None, :]
        for blk in self.map_blocks:
            poly = blk(poly, attn_bias)
        lat = Tensor(np.ones((b, 1, 1))) * self.latent_queries
        lat = lat + self.latent_attn(self.latent_ln_q(lat), poly, attn_bias)
        return lat + self.latent_mlp(self.latent_ln_m(lat))

    def __call__(self, feats: np.ndarray, agent_mask: np.ndarray,
                 point_feats: np.ndarray, point_mask: np.ndarray,
                 order_embed: Embedding | None, use_map: bool):
        """Returns (scene (B, Ls, C), scene_mask (B, Ls), agent_base (B, N, C)).

        Ls = n_latent_queries + N when the map path is active (latent tokens
        pass through untouched when there are zero polylines), else N.
        """
        b, n, _ = feats.shape
        agent_base = self.agent_mlp(Tensor(feats))  # (B, N, C)
        tokens = agent_base
        if order_embed is not None:
            tokens = tokens + order_embed(np.arange(n))
        parts = [tokens]
        masks = [agent_mask]
        if use_map:
            if point_feats.shape[1] > 0:
                lat = self.encode_map(point_feats, point_mask)
            else:
                lat = Tensor(np.ones((b, 1, 1))) * self.latent_queries
            parts.insert(0, lat)
            masks.insert(0, np.ones((b, lat.shape[1]), dtype=bool))
        scene = concat(parts, axis=1)
        scene_mask = np.concatenate(masks, axis=1)
        bias = np.where(scene_mask, 0.0, MASK_OFF)[:, None, None, :]
        for blk in self.enc_blocks:
            scene = blk(scene, bias)
        return scene, scene_mask, agent_base


# ----------------------------------------------------------------- decoder

class TokenDecoder(Module):
    def __init__(self, rng, cfg: ModelConfig):
        c = cfg.hidden_dim
        # Row vocab_size is the start token; tying covers the first vocab_size rows.
        self.tok_embed = Embedding(rng, cfg.vocab_size + 1, c)
        self.time_embed = Embedding(rng, cfg.max_timesteps, c)
        self.blocks = [
            DecoderBlock(rng, c, cfg.n_heads, cfg.mlp_ratio) for _ in range(cfg.n_dec_layers)
        ]
        self.ln_f = LayerNorm(c)

    def output_matrix(self) -> Parameter:
        """The tied embedding table; logits use its first vocab_size rows."""
        return self.tok_embed.weight


class TrajeglishModel(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.cfg = cfg
        self.encoder = SceneEncoder(rng, cfg)
        self.decoder = TokenDecoder(rng, cfg)
        # Learned agent-order embedding, shared between the encoder's agent
        # tokens and the decoder's slots. Unused under the marginal regimes
        # (content-based identity keeps them order-invariant).
        self.order_embed = Embedding(rng, cfg.max_agents, cfg.hidden_dim)

    # -------------------------------------------------------- scene encode

    def encode_scene(self, scenes: list[SceneInit]):
        """Batch-encode scene initializations.

        Returns (scene (B, Ls, C), scene_mask (B, Ls), agent_base (B, N, C),
        n_agents (B,)). Raises on over-capacity inputs: callers window first.
        """
        cfg = self.cfg
        n_agents = np.array([s.n_agents for s in scenes])
        if n_agents.max() > cfg.max_agents:
            raise DataError(
                f"scene has {n_agents.max()} agents, model capacity is {cfg.max_agents}"
            )
        for s in scenes:
            if len(s.map_objects) > cfg.max_map_objects:
                raise DataError(
                    f"scene has {len(s.map_objects)} map objects, capacity is "
                    f"{cfg.max_map_objects}"
                )
        n = int(n_agents.max())
        b = len(scenes)
        feats = np.zeros((b, n, N_AGENT_FEATURES))
        agent_mask = np.zeros((b, n), dtype=bool)
        for bi, s in enumerate(scenes):
            feats[bi, : s.n_agents] = agent_features(s.metas, s.states)
            agent_mask[bi, : s.n_agents] = True

        if cfg.uses_map:
            per_scene = [map_point_features(s.map_objects, cfg.max_map_objects) for s in scenes]
            m = max((pf.shape[0] for pf, _ in per_scene), default=0)
            p = max((pf.shape[1] for pf, _ in per_scene), default=1)
            point_feats = np.zeros((b, m, p, N_POINT_FEATURES))
            point_mask = np.zeros((b, m, p), dtype=bool)
            for bi, (pf, pm) in enumerate(per_scene):
                point_feats[bi, : pf.shape[0], : pf.shape[1]] = pf
                point_mask[bi, : pm.shape[0], : pm.shape[1]] = pm
        else:
            point_feats = np.zeros((b, 0, 1, N_POINT_FEATURES))
            point_mask = np.zeros((b, 0, 1), dtype=bool)

        order_embed = None if cfg.order_free else self.order_embed
        scene, scene_mask, agent_base = self.encoder(
            feats, agent_mask, point_feats, point_mask, order_embed, cfg.uses_map
        )
        return scene, scene_mask, agent_base, n_agents

    # ------------------------------------------------------------- forward

    def _decoder_inputs(self, grids: list[TokenGrid], agent_base: Tensor, n: int, t: int,
                        context_limit: int | None = None):
        """Embed shifted token inputs plus positional information. (B, S, C)"""
        cfg = self.cfg
        if t > cfg.max_timesteps:
            raise DataError(f"{t} timesteps exceeds model capacity {cfg.max_timesteps}")
        b = len(grids)
        s = n * t
        src, is_start = input_token_index(cfg.masking_regime, n, t)
        # A slot's content rides the residual stream, so it must be zeroed when
        # a context limit puts it out of the visible window.
        if context_limit is not None:
            from .masks import build_mask

            m = build_mask(cfg.masking_regime, n, t)
            tk = np.arange(s) // n
            m = m & ((tk[:, None] - tk[None, :]) <= context_limit)
            content_ok = m[np.arange(s), src] | is_start
        else:
            content_ok = np.ones(s, dtype=bool)
        inp_ids = np.zeros((b, s), dtype=int)
        inp_valid = np.zeros((b, s), dtype=bool)
        for bi, g in enumerate(grids):
            ids = np.full((n, t), INVALID_TOKEN, dtype=int)
            ok = np.zeros((n, t), dtype=bool)
            ids[: g.n_agents] = g.ids
            ok[: g.n_agents] = g.valid
            flat_ids = ids.T.reshape(-1)
            flat_ok = ok.T.reshape(-1)
            inp_ids[bi] = np.where(is_start, cfg.vocab_size, flat_ids[src])
            inp_valid[bi] = np.where(is_start, True, flat_ok[src] & content_ok)
        emb = self.decoder.tok_embed(np.where(inp_ids < 0, 0, inp_ids))
        # Unobserved-step inputs embed as zeros; positional terms still apply.
        emb = emb * Tensor(inp_valid[..., None].astype(float))

        k = np.arange(s)
        t_idx, a_idx = k // n, k % n
        x = emb + self.decoder.time_embed(t_idx)
        if cfg.order_free:
            x = x + agent_base[:, a_idx]
        else:
            x = x + self.order_embed(a_idx)
        return x

    def forward(self, grids: list[TokenGrid], scenes: list[SceneInit],
                context_limit: int | None = None) -> Tensor:
        """Teacher-forced logits (B, S, vocab) over the flattened grid."""
        cfg = self.cfg
        if len(grids) != len(scenes):
            raise DataError("grids and scenes must align")
        t = grids[0].n_steps
        if any(g.n_steps != t for g in grids):
            raise DataError("all grids in a batch must share T")
        scene, scene_mask, agent_base, n_agents = self.encode_scene(scenes)
        n = int(n_agents.max())
        if any(g.n_agents > n for g in grids):
            raise DataError("token grid has more agents than its scene")
        x = self._decoder_inputs(grids, agent_base, n, t, context_limit)

        base = slot_mask(cfg.masking_regime, n, t, context_limit)
        k = np.arange(n * t)
        self_bias = np.empty((len(grids), 1, n * t, n * t))
        for bi in range(len(grids)):
            col_real = (k % n) < n_agents[bi]
            self_bias[bi, 0] = mask_to_bias(base & col_real[None, :])
        cross_bias = np.where(scene_mask, 0.0, MASK_OFF)[:, None, None, :]

        scene_t = scene
        for blk in self.decoder.blocks:
            x = blk(x, scene_t, self_bias, cross_bias)
        h = self.decoder.ln_f(x)
        w = self.decoder.output_matrix()[: cfg.vocab_size]  # tied weights
        return h @ w.transpose(1, 0)

    def loss(self, logits: Tensor, grids: list[TokenGrid], n: int | None = None) -> Tensor:
        """Mean cross-entropy over valid target positions."""
        b, s, _ = logits.shape
        n = n or grids[0].n_agents
        t = s // n
        targets = np.zeros((b, s), dtype=int)
        valid = np.zeros((b, s), dtype=bool)
        for bi, g in enumerate(grids):
            ids = np.full((n, t), 0, dtype=int)
            ok = np.zeros((n, t), dtype=bool)
            ids[: g.n_agents] = np.where(g.valid, g.ids, 0)
            ok[: g.n_agents] = g.valid
            targets[bi] = ids.T.reshape(-1)
            valid[bi] = ok.T.reshape(-1)
        n_valid = int(valid.sum())
        if n_valid == 0:
            raise DataError("loss needs at least one valid target position")
        logp = log_softmax(logits, axis=-1)
        bi, si = np.nonzero(valid)
        picked = logp[bi, si, targets[valid]]
        loss = -picked.sum() * (1.0 / n_valid)
        if not np.isfinite(loss.data):
            raise NumericError("non-finite loss")
        return loss

    def per_token_nll(self, grids: list[TokenGrid], scenes: list[SceneInit],
                      context_limit: int | None = None) -> list[np.ndarray]:
        """Teacher-forced -log p per (agent, step); nan at invalid positions."""
        with no_grad():
            logits = self.forward(grids, scenes, context_limit)
        logp = _np_log_softmax(logits.data)
        out = []
        n = max(g.n_agents for g in grids)
        for bi, g in enumerate(grids):
            t = g.n_steps
            nll = np.full((g.n_agents, t), np.nan)
            for i in range(g.n_agents):
                for tt in range(t):
                    if g.valid[i, tt]:
                        nll[i, tt] = -logp[bi, tt * n + i, g.ids[i, tt]]
            out.append(nll)
        return out

    # --------------------------------------------------------- checkpoints

    def save_checkpoint(self, path, extra: dict | None = None) -> None:
        meta = {
            "format_version": CHECKPOINT_VERSION,
            "config": self.cfg.to_dict(),
            "extra": extra or {},
        }
        arrays = {f"param::{k}": v for k, v in self.state_dict().items()}
        np.savez(path, __meta__=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
                 **arrays)

    @classmethod
    def load_checkpoint(cls, path) -> tuple["TrajeglishModel", dict]:
        with np.load(path) as z:
            meta = json.loads(bytes(z["__meta__"]).decode())
            if meta.get("format_version") != CHECKPOINT_VERSION:
                raise DataError(
                    f"unsupported checkpoint version {meta.get('format_version')!r}"
                )
            cfg = ModelConfig.from_dict(meta["config"])
            model = cls(cfg, seed=0)
            state = {k[len("param::"):]: z[k] for k in z.files if k.startswith("param::")}
        model.load_state_dict(state)
        return model, meta.get("extra", {})


def _np_log_softmax(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
