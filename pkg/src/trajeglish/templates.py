"""Action template sets: the discrete vocabulary of (dx, dy, dh) state deltas.

A template is a state change expressed in the local frame of the previous
state. A :class:`TemplateSet` freezes the template order after fitting;
token ids index into that order forever, and the JSON serialization is
byte-stable so ids stay portable across runs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import CORNER_SIGNS, corners_arr, wrap_angle

FORMAT_TAG = "trajeglish-templates-v1"


class FitMethod(str, Enum):
    KDISKS = "kdisks"
    KMEANS = "kmeans"
    GRID_XYH = "grid_xyh"
    GRID_XY = "grid_xy"


@dataclass(frozen=True)
class Template:
    """One vocabulary entry: a local-frame state delta."""

    dx: float
    dy: float
    dh: float

    def as_array(self) -> np.ndarray:
        return np.array([self.dx, self.dy, self.dh], dtype=float)


@dataclass
class TemplateSet:
    """An ordered action vocabulary plus fitting metadata."""

    templates: np.ndarray  # (K, 3) float, rows are (dx, dy, dh)
    method: FitMethod
    epsilon: float | None = None
    seed: int | None = None
    fit_stats: dict[str, float] = field(default_factory=dict)
    _corner_cache: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        t = np.asarray(self.templates, dtype=float)
        if t.ndim != 2 or t.shape[1] != 3 or t.shape[0] < 1:
            raise ValueError(f"templates must be (K>=1, 3), got shape {t.shape}")
        t = t.copy()
        t[:, 2] = wrap_angle(t[:, 2])
        self.templates = t
        self.templates.setflags(write=False)

    def __len__(self) -> int:
        return self.templates.shape[0]

    def template(self, token_id: int) -> Template:
        if not 0 <= token_id < len(self):
            raise IndexError(f"token id {token_id} out of range for |V|={len(self)}")
        return Template(*self.templates[token_id])

    def corners(self, length: float, width: float) -> np.ndarray:
        """(K, 4, 2) corner points of every template box, cached per (length, width)."""
        key = (float(length), float(width))
        got = self._corner_cache.get(key)
        if got is None:
            got = corners_arr(self.templates, length, width)
            got.setflags(write=False)
            self._corner_cache[key] = got
        return got

    # ---------------------------------------------------------------- io

    def to_json(self) -> str:
        doc = {
            "format": FORMAT_TAG,
            "method": self.method.value,
            "epsilon": self.epsilon,
            "seed": self.seed,
            "fit_stats": {k: self.fit_stats[k] for k in sorted(self.fit_stats)},
            "templates": [[float(v) for v in row] for row in self.templates],
        }
        return json.dumps(doc, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "TemplateSet":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"template set parse error at byte {e.pos}: {e.msg}") from e
        if not isinstance(doc, dict) or doc.get("format") != FORMAT_TAG:
            raise DataError(
                f"unsupported template set format: {doc.get('format') if isinstance(doc, dict) else type(doc)}"
            )
        return cls(
            templates=np.array(doc["templates"], dtype=float),
            method=FitMethod(doc["method"]),
            epsilon=doc["epsilon"],
            seed=doc["seed"],
            fit_stats=dict(doc.get("fit_stats", {})),
        )

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "TemplateSet":
        return cls.from_json(Path(path).read_text())


def unit_box_corners(deltas: np.ndarray) -> np.ndarray:
    """Corners of (..., 3) deltas under the 1 m x 1 m fitting box."""
    return corners_arr(deltas, 1.0, 1.0)


def unit_corner_distances(corners_a: np.ndarray, corners_b: np.ndarray) -> np.ndarray:
    """Mean corner distance between pre-computed corner arrays (broadcasting)."""
    return np.linalg.norm(corners_a - corners_b, axis=-1).mean(axis=-1)


def pairwise_unit_distances(templates: np.ndarray) -> np.ndarray:
    """Exhaustive (K, K) unit-box corner distance matrix."""
    c = unit_box_corners(templates)
    return unit_corner_distances(c[:, None], c[None, :])


def verify_separation(ts: TemplateSet, epsilon: float | None = None) -> bool:
    """Check every template pair is separated by more than epsilon under the unit box."""
    eps = ts.epsilon if epsilon is None else epsilon
    if eps is None:
        raise ValueError("no epsilon to verify against")
    d = pairwise_unit_distances(ts.templates)
    k = len(ts)
    return bool(np.all(d[~np.eye(k, dtype=bool)] > eps))


def template_corners_for_dims(templates: np.ndarray, lengths, widths) -> np.ndarray:
    """Template corners under per-row dims.

    Args:
        templates: (K, 3) deltas.
        lengths, widths: scalars or (B,) arrays.

    Returns:
        (K, 4, 2) for scalar dims, else (B, K, 4, 2).
    """
    lengths = np.asarray(lengths, dtype=float)
    widths = np.asarray(widths, dtype=float)
    half = 0.5 * np.stack(np.broadcast_arrays(lengths, widths), axis=-1)  # (..., 2)
    offs = CORNER_SIGNS * half[..., None, :]  # (..., 4, 2)
    c = np.cos(templates[:, 2])
    s = np.sin(templates[:, 2])
    shape = half.shape[:-1] + (templates.shape[0], 4, 2)
    out = np.empty(shape)
    ox = offs[..., None, :, 0]
    oy = offs[..., None, :, 1]
    out[..., 0] = ox * c[:, None] - oy * s[:, None] + templates[:, 0, None]
    out[..., 1] = ox * s[:, None] + oy * c[:, None] + templates[:, 1, None]
    return out
