"""Decoder attention-mask regimes over the flattened token sequence.

The flattened order is timestep-major, agent-minor: position k covers
timestep t = k // N and agent i = k % N. ``build_mask`` returns the
token-level visibility contract M[k, j]: may the prediction at position k
use the token at position j. The regimes nest: marginal is a subset of
no_intra, which is a subset of full_intra.

The decoder consumes a *slot-level* arrangement derived from M. Inputs are
shifted so that slot k predicts token k while holding an earlier token:

* full_intra: one global shift (a start token is prepended and the last
  token dropped), so slot k holds token k-1;
* no_intra / marginal / marginal_no_map: a per-agent shift (slot (t, i)
  holds the same agent's token at t-1, with a start token at t=0 for every
  agent).

The arrangement must satisfy a hard constraint: a slot's own content rides
the residual stream past any attention mask, so the token placed in slot k
must itself be M-visible to position k. Token k-1 is same-timestep context
for most positions, which full_intra may see but no_intra and marginal may
not; those regimes therefore hold the same agent's previous-step token
instead. Multi-layer attention also leaks transitively through intermediate
slots, which the per-agent arrangement avoids by keeping streams
self-contained. Soundness (zeroing a mask-invisible token never changes a
logit) is asserted in tests for every regime.
"""

from __future__ import annotations

import numpy as np

REGIMES = ("full_intra", "no_intra", "marginal", "marginal_no_map")

# §-style regime aliases used by experiment configs.
REGIME_OF_VARIANT = {
    "trajeglish": "full_intra",
    "trajeglish_reg": "full_intra",
    "no_intra": "no_intra",
    "marginal": "marginal",
    "marginal_no_map": "marginal_no_map",
}


def _check(regime: str, n: int, t: int) -> None:
    if regime not in REGIMES:
        raise ValueError(f"unknown masking regime {regime!r}; expected one of {REGIMES}")
    if n < 1 or t < 1:
        raise ValueError(f"need N >= 1 and T >= 1, got N={n}, T={t}")


def build_mask(regime: str, n: int, t: int) -> np.ndarray:
    """Token-level visibility M[k, j] over the flattened (S, S) grid, S = N * T.

    full_intra: strict causal. no_intra: causal minus same-timestep positions
    of other agents. marginal (and marginal_no_map): same-agent earlier
    timesteps only. No regime ever sees the future.
    """
    _check(regime, n, t)
    s = n * t
    k = np.arange(s)
    tk, ik = k // n, k % n
    if regime == "full_intra":
        return k[:, None] > k[None, :]
    if regime == "no_intra":
        return tk[:, None] > tk[None, :]
    return (tk[:, None] > tk[None, :]) & (ik[:, None] == ik[None, :])


def uses_agent_shift(regime: str) -> bool:
    return regime in ("no_intra", "marginal", "marginal_no_map")


def input_token_index(regime: str, n: int, t: int) -> tuple[np.ndarray, np.ndarray]:
    """Which token each decoder slot holds.

    Returns (src, is_start): src[k] is the flattened token index placed in
    slot k (undefined where is_start[k]), is_start[k] marks start-token slots.
    """
    _check(regime, n, t)
    s = n * t
    k = np.arange(s)
    if uses_agent_shift(regime):
        src = k - n  # same agent, previous timestep
        is_start = k < n
    else:
        src = k - 1  # global shift
        is_start = k == 0
    return np.where(is_start, 0, src), is_start


def slot_mask(regime: str, n: int, t: int, context_limit: int | None = None) -> np.ndarray:
    """Slot-level self-attention mask A[k, s] for the decoder arrangement.

    Derived from the token-level contract: slot s holds token src[s] (or a
    start token), and row k may attend slot s iff that content is visible to
    position k under ``build_mask`` (start tokens are visible to their own
    stream; the global start token is visible to everyone).

    ``context_limit`` additionally restricts visibility to tokens from the
    most recent ``context_limit`` timesteps before the predicted position
    (test-time history truncation); start tokens stay visible.
    """
    m = build_mask(regime, n, t)
    if context_limit is not None:
        s = n * t
        tk = np.arange(s) // n
        m = m & ((tk[:, None] - tk[None, :]) <= context_limit)
    src, is_start = input_token_index(regime, n, t)
    k = np.arange(n * t)
    out = m[:, src]
    if uses_agent_shift(regime):
        # Start slots are visible within the same agent's stream only.
        same_agent = (k[:, None] % n) == (k[None, :] % n)
        out[:, is_start] = same_agent[:, is_start]
    else:
        out[:, is_start] = True
    return out
