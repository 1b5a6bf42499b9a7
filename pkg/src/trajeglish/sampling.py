"""Temperature and nucleus (top-p) sampling over categorical logits."""

from __future__ import annotations

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    """Numerically stable softmax over the last axis."""
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def nucleus_probs(probs: np.ndarray, p_top: float) -> np.ndarray:
    """Truncate a categorical to the smallest prefix (by probability) with mass >= p_top.

    Ties in probability are broken toward lower indices, matching the
    lowest-index tie rule used for argmax everywhere else.
    """
    if not (0.0 < p_top <= 1.0):
        raise ValueError(f"p_top must be in (0, 1], got {p_top}")
    if p_top == 1.0:
        return probs
    order = np.argsort(-probs, kind="stable")
    sorted_p = probs[order]
    csum = np.cumsum(sorted_p)
    # Keep everything up to and including the first index reaching p_top.
    cutoff = int(np.searchsorted(csum, p_top, side="left"))
    keep = order[: cutoff + 1]
    out = np.zeros_like(probs)
    out[keep] = probs[keep]
    return out / out.sum()


def draw_categorical(probs: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw from a normalized probability vector."""
    cum = np.cumsum(probs)
    cum[-1] = 1.0  # guard against cumsum rounding just below u
    return int(np.searchsorted(cum, rng.random(), side="right"))


def sample_token(logits: np.ndarray, temperature: float, p_top: float,
                 rng: np.random.Generator) -> int:
    """Draw one index from softmax(logits / temperature) after nucleus truncation.

    temperature == 0 is the deterministic argmax limit (lowest index on ties).
    """
    logits = np.asarray(logits, dtype=float)
    if temperature < 0:
        raise ValueError(f"temperature must be >= 0, got {temperature}")
    if temperature == 0.0:
        return int(np.argmax(logits))
    probs = nucleus_probs(softmax(logits / temperature), p_top)
    return draw_categorical(probs, rng)


def categorical_log_prob(logits: np.ndarray, index: int) -> float:
    """Log-probability of ``index`` under softmax(logits) (no temperature)."""
    return float(log_softmax(np.asarray(logits, dtype=float))[index])
