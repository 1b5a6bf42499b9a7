"""Scenario container and on-disk formats.

A scenario bundles typed map polylines with a rectangular N x T agent state
grid, validity mask, and exactly one self-driving-car flag. Two formats are
supported:

* line-delimited JSON, one scenario per line (``.jsonl``), strict about
  unknown fields so format drift fails loudly;
* a packed binary container for large corpora (header JSON + raw arrays).

Both are documented field-by-field in the README.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError
from .geometry import AgentClass, AgentMeta, wrap_angle

SCENARIO_VERSION = 1
DEFAULT_TICK = 0.1  # seconds per step

_PACKED_MAGIC = b"TJGC"

_TOP_KEYS = {"version", "scenario_id", "tick_duration", "map", "agents"}
_MAP_KEYS = {"type", "points"}
_AGENT_KEYS = {"length", "width", "class", "sdc", "states", "valid"}


@dataclass
class MapObject:
    object_type: str
    points: np.ndarray  # (P, 2)

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 2)


@dataclass
class Agent:
    meta: AgentMeta
    states: np.ndarray  # (T, 3)
    valid: np.ndarray  # (T,) bool
    sdc: bool = False

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=float)
        self.valid = np.asarray(self.valid, dtype=bool)
        if self.states.ndim != 2 or self.states.shape[1] != 3:
            raise DataError(f"agent states must be (T, 3), got {self.states.shape}")
        if self.valid.shape != (self.states.shape[0],):
            raise DataError("agent valid mask length does not match states")
        self.states[:, 2] = wrap_angle(self.states[:, 2])
        # Invalid steps carry zeros by convention.
        self.states[~self.valid] = 0.0


@dataclass
class Scenario:
    scenario_id: str
    agents: list[Agent]
    map_objects: list[MapObject] = field(default_factory=list)
    tick_duration: float = DEFAULT_TICK

    def __post_init__(self):
        if not self.agents:
            raise DataError(f"scenario {self.scenario_id!r} has no agents")
        steps = {a.states.shape[0] for a in self.agents}
        if len(steps) != 1:
            raise DataError(f"scenario {self.scenario_id!r} state grid is not rectangular")
        if sum(a.sdc for a in self.agents) != 1:
            raise DataError(f"scenario {self.scenario_id!r} must flag exactly one sdc agent")

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    @property
    def n_steps(self) -> int:
        return self.agents[0].states.shape[0]

    @property
    def sdc_index(self) -> int:
        return next(i for i, a in enumerate(self.agents) if a.sdc)

    def state_grid(self) -> np.ndarray:
        return np.stack([a.states for a in self.agents])

    def valid_grid(self) -> np.ndarray:
        return np.stack([a.valid for a in self.agents])

    def duration_seconds(self) -> float:
        return self.n_steps * self.tick_duration


# ------------------------------------------------------------------ JSON

def _agent_to_doc(a: Agent) -> dict:
    return {
        "length": a.meta.length,
        "width": a.meta.width,
        "class": a.meta.agent_class.value,
        "sdc": a.sdc,
        "states": [[float(v) for v in row] for row in a.states],
        "valid": [bool(v) for v in a.valid],
    }


def scenario_to_doc(s: Scenario) -> dict:
    return {
        "version": SCENARIO_VERSION,
        "scenario_id": s.scenario_id,
        "tick_duration": s.tick_duration,
        "map": [
            {"type": m.object_type, "points": [[float(x), float(y)] for x, y in m.points]}
            for m in s.map_objects
        ],
        "agents": [_agent_to_doc(a) for a in s.agents],
    }


def _check_keys(doc: dict, allowed: set, where: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise DataError(f"unknown field(s) {sorted(unknown)} in {where}; "
                        f"supported scenario version is {SCENARIO_VERSION}")


def scenario_from_doc(doc: dict) -> Scenario:
    if not isinstance(doc, dict):
        raise DataError(f"scenario record must be an object, got {type(doc).__name__}")
    _check_keys(doc, _TOP_KEYS, "scenario")
    if doc.get("version") != SCENARIO_VERSION:
        raise DataError(f"unsupported scenario version {doc.get('version')!r}")
    agents = []
    for i, a in enumerate(doc["agents"]):
        _check_keys(a, _AGENT_KEYS, f"agents[{i}]")
        agents.append(
            Agent(
                meta=AgentMeta(float(a["length"]), float(a["width"]), AgentClass(a["class"])),
                states=np.array(a["states"], dtype=float),
                valid=np.array(a["valid"], dtype=bool),
                sdc=bool(a.get("sdc", False)),
            )
        )
    map_objects = []
    for i, m in enumerate(doc.get("map", [])):
        _check_keys(m, _MAP_KEYS, f"map[{i}]")
        map_objects.append(MapObject(str(m["type"]), np.array(m["points"], dtype=float)))
    return Scenario(
        scenario_id=str(doc["scenario_id"]),
        agents=agents,
        map_objects=map_objects,
        tick_duration=float(doc["tick_duration"]),
    )


def write_corpus(scenarios, path) -> None:
    with open(path, "w") as f:
        for s in scenarios:
            f.write(json.dumps(scenario_to_doc(s), sort_keys=True))
            f.write("\n")


def read_corpus(path) -> list[Scenario]:
    out = []
    offset = 0
    with open(path, "rb") as f:
        for raw in f:
            line = raw.decode("utf-8")
            if line.strip():
                try:
                    doc = json.loads(line)
                except json.JSONDecodeError as e:
                    raise DataError(
                        f"{path}: parse error at byte {offset + e.pos}: {e.msg}"
                    ) from e
                out.append(scenario_from_doc(doc))
            offset += len(raw)
    return out


def write_scenario(s: Scenario, path) -> None:
    write_corpus([s], path)


def read_scenario(path) -> Scenario:
    corpus = read_corpus(path)
    if len(corpus) != 1:
        raise DataError(f"{path}: expected exactly one scenario, found {len(corpus)}")
    return corpus[0]


# ------------------------------------------------------------ packed binary

def write_corpus_packed(scenarios, path) -> None:
    """Packed container: magic, u32 version, u64 header length, header JSON, raw arrays.

    Arrays follow the header in scenario order: map points (float64, P x 2),
    states (float64, N x T x 3), valid (uint8, N x T).
    """
    scenarios = list(scenarios)
    header = {"version": SCENARIO_VERSION, "scenarios": []}
    blobs = []
    for s in scenarios:
        pts = (
            np.concatenate([m.points for m in s.map_objects])
            if s.map_objects
            else np.zeros((0, 2))
        )
        states = s.state_grid()
        valid = s.valid_grid()
        header["scenarios"].append(
            {
                "scenario_id": s.scenario_id,
                "tick_duration": s.tick_duration,
                "map": [
                    {"type": m.object_type, "n_points": int(m.points.shape[0])}
                    for m in s.map_objects
                ],
                "agents": [
                    {
                        "length": a.meta.length,
                        "width": a.meta.width,
                        "class": a.meta.agent_class.value,
                        "sdc": a.sdc,
                    }
                    for a in s.agents
                ],
                "n_steps": s.n_steps,
            }
        )
        blobs.extend(
            [
                np.ascontiguousarray(pts, dtype="<f8").tobytes(),
                np.ascontiguousarray(states, dtype="<f8").tobytes(),
                np.ascontiguousarray(valid, dtype=np.uint8).tobytes(),
            ]
        )
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_PACKED_MAGIC)
        f.write(struct.pack("<IQ", SCENARIO_VERSION, len(header_bytes)))
        f.write(header_bytes)
        for b in blobs:
            f.write(b)


def read_corpus_packed(path) -> list[Scenario]:
    data = Path(path).read_bytes()
    buf = io.BytesIO(data)
    magic = buf.read(4)
    if magic != _PACKED_MAGIC:
        raise DataError(f"{path}: bad magic {magic!r}, not a packed corpus")
    version, header_len = struct.unpack("<IQ", buf.read(12))
    if version != SCENARIO_VERSION:
        raise DataError(f"{path}: unsupported packed version {version}")
    try:
        header = json.loads(buf.read(header_len).decode("utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: packed header parse error at byte {16 + e.pos}: {e.msg}") from e

    def take(count, dtype, shape):
        n_bytes = count * np.dtype(dtype).itemsize
        raw = buf.read(n_bytes)
        if len(raw) != n_bytes:
            raise DataError(f"{path}: truncated packed corpus")
        return np.frombuffer(raw, dtype=dtype).reshape(shape).copy()

    out = []
    for rec in header["scenarios"]:
        n_agents = len(rec["agents"])
        n_steps = rec["n_steps"]
        n_pts = sum(m["n_points"] for m in rec["map"])
        pts = take(n_pts * 2, "<f8", (n_pts, 2))
        states = take(n_agents * n_steps * 3, "<f8", (n_agents, n_steps, 3))
        valid = take(n_agents * n_steps, np.uint8, (n_agents, n_steps)).astype(bool)
        map_objects = []
        start = 0
        for m in rec["map"]:
            map_objects.append(MapObject(m["type"], pts[start : start + m["n_points"]]))
            start += m["n_points"]
        agents = [
            Agent(
                meta=AgentMeta(a["length"], a["width"], AgentClass(a["class"])),
                states=states[i],
                valid=valid[i],
                sdc=bool(a["sdc"]),
            )
            for i, a in enumerate(rec["agents"])
        ]
        out.append(
            Scenario(
                scenario_id=rec["scenario_id"],
                agents=agents,
                map_objects=map_objects,
                tick_duration=rec["tick_duration"],
            )
        )
    return out
