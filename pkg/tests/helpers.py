"""Shared synthetic inputs for tests: transition pools and tiny scenarios."""

import numpy as np

from trajeglish.fitting import TransitionSet
from trajeglish.geometry import AgentClass, AgentMeta
from trajeglish.scenario import Agent, MapObject, Scenario


def make_transitions(m: int, rng: np.random.Generator) -> TransitionSet:
    """Driving-flavored (dx, dy, dh) deltas at a 0.1 s tick across all classes."""
    deltas = np.zeros((m, 3))
    classes = np.empty(m, dtype=object)
    lengths = np.empty(m)
    widths = np.empty(m)
    kind = rng.choice(4, size=m, p=[0.55, 0.15, 0.15, 0.15])

    cruise = kind == 0
    n = cruise.sum()
    deltas[cruise, 0] = np.clip(rng.normal(1.1, 0.65, n), 0.0, 3.4)
    deltas[cruise, 2] = np.clip(rng.normal(0.0, 0.03, n), -0.1, 0.1)
    deltas[cruise, 1] = deltas[cruise, 0] * np.tan(deltas[cruise, 2]) * 0.5 + rng.normal(
        0, 0.01, n
    )
    classes[cruise] = AgentClass.VEHICLE.value
    lengths[cruise] = rng.normal(4.6, 0.4, n)
    widths[cruise] = rng.normal(2.0, 0.15, n)

    still = kind == 1
    n = still.sum()
    deltas[still] = rng.normal(0, 0.004, (n, 3))
    classes[still] = AgentClass.VEHICLE.value
    lengths[still] = rng.normal(4.6, 0.4, n)
    widths[still] = rng.normal(2.0, 0.15, n)

    ped = kind == 2
    n = ped.sum()
    deltas[ped, 0] = np.clip(rng.normal(0.13, 0.05, n), 0, 0.5)
    deltas[ped, 1] = rng.normal(0, 0.03, n)
    deltas[ped, 2] = np.clip(rng.normal(0, 0.05, n), -0.1, 0.1)
    classes[ped] = AgentClass.PEDESTRIAN.value
    lengths[ped] = 0.9
    widths[ped] = 0.9

    cyc = kind == 3
    n = cyc.sum()
    deltas[cyc, 0] = np.clip(rng.normal(0.5, 0.25, n), 0, 1.5)
    deltas[cyc, 2] = np.clip(rng.normal(0, 0.04, n), -0.1, 0.1)
    deltas[cyc, 1] = deltas[cyc, 0] * np.tan(deltas[cyc, 2]) * 0.5 + rng.normal(0, 0.008, n)
    classes[cyc] = AgentClass.CYCLIST.value
    lengths[cyc] = 1.8
    widths[cyc] = 0.6

    np.clip(deltas[:, 1], -0.19, 0.19, out=deltas[:, 1])
    return TransitionSet(deltas, classes, np.clip(lengths, 0.5, None), np.clip(widths, 0.3, None))


def straight_line_scenario(n_agents=2, n_steps=20, speed=1.0, spacing=10.0,
                           tick=0.1, scenario_id="fixture"):
    """Agents driving in +x on parallel lanes at constant speed."""
    agents = []
    for i in range(n_agents):
        t = np.arange(n_steps)
        # speed is meters per step.
        states = np.stack(
            [speed * t, np.full(n_steps, i * spacing), np.zeros(n_steps)], axis=1
        )
        agents.append(
            Agent(
                meta=AgentMeta(4.5, 2.0, AgentClass.VEHICLE),
                states=states,
                valid=np.ones(n_steps, dtype=bool),
                sdc=i == 0,
            )
        )
    lane = MapObject("lane", np.stack([np.linspace(-5, 60, 14), np.zeros(14)], axis=1))
    return Scenario(scenario_id=scenario_id, agents=agents, map_objects=[lane], tick_duration=tick)


def arc_trajectory(n_steps, radius, step_angle, start=(0.0, 0.0, 0.0)):
    """Constant-curvature track: each step advances step_angle along a circle."""
    states = np.zeros((n_steps, 3))
    states[0] = start
    for t in range(1, n_steps):
        x, y, h = states[t - 1]
        states[t, 0] = x + radius * (np.sin(h + step_angle) - np.sin(h))
        states[t, 1] = y - radius * (np.cos(h + step_angle) - np.cos(h))
        states[t, 2] = h + step_angle
    return states
