"""Vocabulary fitting: greedy disk sampling, k-means, and grid baselines.

Fitting distances always use the 1 m x 1 m unit box; expected discretization
error (used to rank candidate sets and reported in fit_stats) uses each
transition's own dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError, InsufficientDiversityError
from .geometry import AgentClass, to_local_arr
from .templates import (
    FitMethod,
    TemplateSet,
    template_corners_for_dims,
    unit_box_corners,
    unit_corner_distances,
)

# Grid bounds (meters / radians) for the longitudinal, lateral, and heading deltas.
GRID_X_BOUNDS = (-0.3, 3.5)
GRID_Y_BOUNDS = (-0.2, 0.2)
GRID_H_BOUNDS = (-0.1, 0.1)

# Nominal vocab-size buckets: grid value counts and disk radii per bucket.
GRID_XYH_COUNTS = {128: (6, 6, 4), 256: (7, 7, 6), 384: (8, 8, 7), 512: (9, 9, 8)}
GRID_XY_COUNTS = {128: (12, 12), 256: (16, 16), 384: (20, 20), 512: (23, 23)}
KDISK_EPSILON = {128: 0.035, 256: 0.035, 384: 0.035, 512: 0.030}

DEFAULT_RESTARTS = 16
_EVAL_CAP = 10_000  # held-out rows used to rank candidate sets


@dataclass(frozen=True)
class Transition:
    """One observed state-to-state delta with the agent's class and dims."""

    delta: np.ndarray  # (3,)
    agent_class: AgentClass
    length: float
    width: float


@dataclass
class TransitionSet:
    """Column-array container for a pool of transitions."""

    deltas: np.ndarray  # (M, 3)
    classes: np.ndarray  # (M,) of AgentClass values (object dtype or str)
    lengths: np.ndarray  # (M,)
    widths: np.ndarray  # (M,)

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=float).reshape(-1, 3)
        m = self.deltas.shape[0]
        self.classes = np.asarray(self.classes)
        self.lengths = np.asarray(self.lengths, dtype=float)
        self.widths = np.asarray(self.widths, dtype=float)
        if not (len(self.classes) == len(self.lengths) == len(self.widths) == m):
            raise ValueError("transition columns disagree on length")

    def __len__(self) -> int:
        return self.deltas.shape[0]

    def row(self, i: int) -> Transition:
        return Transition(
            self.deltas[i].copy(), AgentClass(self.classes[i]), self.lengths[i], self.widths[i]
        )

    def subset(self, idx) -> "TransitionSet":
        return TransitionSet(
            self.deltas[idx], self.classes[idx], self.lengths[idx], self.widths[idx]
        )


def extract_transitions(scenarios) -> TransitionSet:
    """Collect local-frame deltas from every consecutive valid state pair.

    Agents with fewer than two valid steps contribute nothing.
    """
    deltas, classes, lengths, widths = [], [], [], []
    for sc in scenarios:
        for agent in sc.agents:
            ok = agent.valid[:-1] & agent.valid[1:]
            if not ok.any():
                continue
            d = to_local_arr(agent.states[:-1][ok], agent.states[1:][ok])
            deltas.append(d)
            n = d.shape[0]
            classes.extend([agent.meta.agent_class.value] * n)
            lengths.extend([agent.meta.length] * n)
            widths.extend([agent.meta.width] * n)
    if not deltas:
        return TransitionSet(np.zeros((0, 3)), np.array([]), np.array([]), np.array([]))
    return TransitionSet(
        np.concatenate(deltas), np.array(classes), np.array(lengths), np.array(widths)
    )


def corners_with_dims(xyh: np.ndarray, lengths, widths) -> np.ndarray:
    """Box corners of (B, 3) poses under per-row (B,) dims. Returns (B, 4, 2)."""
    from .geometry import CORNER_SIGNS

    xyh = np.asarray(xyh, dtype=float)
    half = 0.5 * np.stack(np.broadcast_arrays(lengths, widths), axis=-1)  # (B, 2)
    offs = CORNER_SIGNS * half[..., None, :]  # (B, 4, 2)
    c = np.cos(xyh[:, 2])[:, None]
    s = np.sin(xyh[:, 2])[:, None]
    out = np.empty(offs.shape)
    out[..., 0] = offs[..., 0] * c - offs[..., 1] * s + xyh[:, 0, None]
    out[..., 1] = offs[..., 0] * s + offs[..., 1] * c + xyh[:, 1, None]
    return out


def expected_error(templates: np.ndarray, transitions: TransitionSet,
                   chunk: int = 2048) -> np.ndarray:
    """Per-transition discretization error: min over templates of the corner
    distance under the transition's own dims. Returns (M,)."""
    m = len(transitions)
    out = np.empty(m)
    for start in range(0, m, chunk):
        sl = slice(start, min(start + chunk, m))
        dims_l = transitions.lengths[sl]
        dims_w = transitions.widths[sl]
        tc = template_corners_for_dims(templates, dims_l, dims_w)  # (b, K, 4, 2)
        gc = corners_with_dims(transitions.deltas[sl], dims_l, dims_w)[:, None]  # (b, 1, 4, 2)
        d = np.linalg.norm(tc - gc, axis=-1).mean(axis=-1)  # (b, K)
        out[sl] = d.min(axis=1)
    return out


def error_stats(templates: np.ndarray, transitions: TransitionSet) -> dict[str, float]:
    """Mean expected error overall and per agent class."""
    if len(transitions) == 0:
        return {}
    err = expected_error(templates, transitions)
    stats = {"overall": float(err.mean())}
    for cls in AgentClass:
        mask = transitions.classes == cls.value
        if mask.any():
            stats[cls.value] = float(err[mask].mean())
    return stats


def _split_eval(transitions: TransitionSet, rng: np.random.Generator, reserve: int):
    """Deterministic held-out slice for ranking candidate sets.

    Keeps at least ``2 * reserve`` rows in the fitting pool; tiny pools get no
    holdout and candidates are ranked on the full pool instead.
    """
    m = len(transitions)
    n_eval = min(m // 10, _EVAL_CAP, max(m - 2 * reserve, 0))
    if n_eval == 0:
        return transitions, transitions
    perm = rng.permutation(m)
    return transitions.subset(perm[n_eval:]), transitions.subset(perm[:n_eval])


def fit_kdisks(transitions: TransitionSet, n: int, epsilon: float,
               rng: np.random.Generator | int, restarts: int = DEFAULT_RESTARTS) -> TemplateSet:
    """Greedy disk sampling: draw a transition, drop everything within epsilon
    of it under the unit box, repeat until n templates are kept.

    Runs ``restarts`` independent passes and returns the candidate set with the
    lowest expected discretization error on a held-out slice. Raises
    InsufficientDiversityError if every restart exhausts the pool early.
    """
    if n < 1 or epsilon < 0:
        raise ValueError(f"need n >= 1 and epsilon >= 0, got n={n}, epsilon={epsilon}")
    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    fit_pool, eval_slice = _split_eval(transitions, rng, n)
    if len(fit_pool) == 0:
        raise InsufficientDiversityError(0, n)
    pool_corners = unit_box_corners(fit_pool.deltas)  # (M, 4, 2)

    best = None
    best_err = np.inf
    max_found = 0
    for _ in range(max(restarts, 1)):
        alive = np.arange(len(fit_pool))
        chosen = []
        while len(chosen) < n and alive.size:
            pick = alive[rng.integers(alive.size)]
            d = unit_corner_distances(pool_corners[pick], pool_corners[alive])
            alive = alive[d > epsilon]
            chosen.append(pick)
        max_found = max(max_found, len(chosen))
        if len(chosen) < n:
            continue
        cand = fit_pool.deltas[chosen]
        err = expected_error(cand, eval_slice).mean() if len(eval_slice) else 0.0
        if err < best_err:
            best_err = err
            best = cand
    if best is None:
        raise InsufficientDiversityError(max_found, n)
    return TemplateSet(
        templates=best,
        method=FitMethod.KDISKS,
        epsilon=epsilon,
        seed=seed,
        fit_stats=error_stats(best, eval_slice),
    )


def fit_kmeans(transitions: TransitionSet, n: int, restarts: int = DEFAULT_RESTARTS,
               rng: np.random.Generator | int = 0) -> TemplateSet:
    """k-means over (dx, dy) with k-means++ seeding; template headings are the
    circular mean of each cluster's dh. Best of ``restarts`` runs by expected
    corner-distance error."""
    from sklearn.cluster import KMeans

    seed = rng if isinstance(rng, (int, np.integer)) else None
    rng = np.random.default_rng(rng)
    fit_pool, eval_slice = _split_eval(transitions, rng, n)
    xy = fit_pool.deltas[:, :2]
    n_distinct = np.unique(xy, axis=0).shape[0]
    if n > n_distinct:
        raise DataError(
            f"cannot fit {n} clusters: only {n_distinct} distinct (dx, dy) deltas"
        )
    best = None
    best_err = np.inf
    for r in range(max(restarts, 1)):
        km = KMeans(
            n_clusters=n, init="k-means++", n_init=1,
            random_state=int(rng.integers(2**31 - 1)),
        ).fit(xy)
        centers = np.zeros((n, 3))
        centers[:, :2] = km.cluster_centers_
        for k in range(n):
            dh = fit_pool.deltas[km.labels_ == k, 2]
            if dh.size:
                centers[k, 2] = np.arctan2(np.sin(dh).mean(), np.cos(dh).mean())
        err = expected_error(centers, eval_slice).mean() if len(eval_slice) else 0.0
        if err < best_err:
            best_err = err
            best = centers
    return TemplateSet(
        templates=best,
        method=FitMethod.KMEANS,
        seed=seed,
        fit_stats=error_stats(best, eval_slice),
    )


def fit_grid_xyh(n_x: int, n_y: int, n_h: int) -> TemplateSet:
    """Independent even discretization of dx, dy, dh with inclusive endpoints."""
    if min(n_x, n_y, n_h) < 2:
        raise ValueError("grid counts must each be >= 2")
    xs = np.linspace(*GRID_X_BOUNDS, n_x)
    ys = np.linspace(*GRID_Y_BOUNDS, n_y)
    hs = np.linspace(*GRID_H_BOUNDS, n_h)
    grid = np.stack(np.meshgrid(xs, ys, hs, indexing="ij"), axis=-1).reshape(-1, 3)
    return TemplateSet(templates=grid, method=FitMethod.GRID_XYH)


def fit_grid_xy(n_x: int, n_y: int, transitions: TransitionSet) -> TemplateSet:
    """Even (dx, dy) grid; each template copies the heading of the data
    transition whose location delta is nearest the grid point."""
    if min(n_x, n_y) < 2:
        raise ValueError("grid counts must each be >= 2")
    if len(transitions) == 0:
        raise DataError("grid_xy fitting needs a non-empty transition pool")
    xs = np.linspace(*GRID_X_BOUNDS, n_x)
    ys = np.linspace(*GRID_Y_BOUNDS, n_y)
    grid = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    data_xy = transitions.deltas[:, :2]
    out = np.zeros((grid.shape[0], 3))
    out[:, :2] = grid
    for i, g in enumerate(grid):
        nearest = np.argmin(((data_xy - g) ** 2).sum(axis=1))
        out[i, 2] = transitions.deltas[nearest, 2]
    return TemplateSet(
        templates=out,
        method=FitMethod.GRID_XY,
        fit_stats=error_stats(out, transitions),
    )
