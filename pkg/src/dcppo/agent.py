"""The bounded-rational agent of the dynamic discrete choice model.

The agent solves the discounted Bellman system backward in time and acts by
softmax over its Q-values, which is the same as picking
``argmax_a Q_h(s, a) + eps(a)`` with i.i.d. standard Gumbel ``eps``.  Both
sampling routes are implemented so they can be checked against each other.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import softmax

from .mdp import TabularLinearMdp

Mechanism = Literal["softmax", "gumbel_argmax"]


@dataclass(frozen=True, eq=False)
class BehaviorModel:
    gamma: float
    Q: np.ndarray
    V: np.ndarray
    pi_b: np.ndarray

    def to_dict(self) -> dict:
        return {
            "schema": "dcppo.behavior",
            "version": 1,
            "gamma": self.gamma,
            "Q": self.Q.tolist(),
            "V": self.V.tolist(),
            "pi_b": self.pi_b.tolist(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "BehaviorModel":
        if data.get("schema") != "dcppo.behavior":
            raise ValueError("not a behavior document")
        return cls(
            gamma=float(data["gamma"]),
            Q=np.asarray(data["Q"], dtype=np.float64),
            V=np.asarray(data["V"], dtype=np.float64),
            pi_b=np.asarray(data["pi_b"], dtype=np.float64),
        )


def solve_ddc(mdp: TabularLinearMdp, gamma: float) -> BehaviorModel:
    """Exact backward solution of the agent's discounted Bellman system."""
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    r = mdp.rewards
    Q = np.empty((mdp.H, mdp.S, mdp.A))
    V = np.empty((mdp.H, mdp.S))
    pi = np.empty_like(Q)
    v_next = np.zeros(mdp.S)
    for h in reversed(range(mdp.H)):
        Q[h] = r[h] + gamma * mdp.P[h] @ v_next
        pi[h] = softmax(Q[h], axis=-1)
        V[h] = np.sum(pi[h] * Q[h], axis=-1)
        v_next = V[h]
    return BehaviorModel(gamma=float(gamma), Q=Q, V=V, pi_b=pi)


@dataclass(frozen=True, eq=False)
class ChoiceDataset:
    """``n`` trajectories; ``states`` is ``(n, H+1)`` and ``actions`` is ``(n, H)``.

    Step ``h`` holds the triples ``(states[:, h], actions[:, h], states[:, h+1])``,
    so the chaining of consecutive steps holds by construction.
    """

    states: np.ndarray
    actions: np.ndarray
    seed: int
    gamma: float
    mechanism: str = "softmax"

    def __post_init__(self):
        states = np.array(self.states, dtype=np.int64)
        actions = np.array(self.actions, dtype=np.int64)
        if states.ndim != 2 or actions.ndim != 2 or states.shape != (
            actions.shape[0],
            actions.shape[1] + 1,
        ):
            raise ValueError(f"inconsistent shapes {states.shape} and {actions.shape}")
        states.setflags(write=False)
        actions.setflags(write=False)
        object.__setattr__(self, "states", states)
        object.__setattr__(self, "actions", actions)

    @property
    def n(self) -> int:
        return self.actions.shape[0]

    @property
    def H(self) -> int:
        return self.actions.shape[1]

    def step(self, h: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        return self.states[:, h], self.actions[:, h], self.states[:, h + 1]

    def check(self, S: int, A: int) -> "ChoiceDataset":
        if self.n < 1:
            raise ValueError("dataset is empty")
        if self.states.min() < 0 or self.states.max() >= S:
            raise ValueError("state index out of range")
        if self.actions.min() < 0 or self.actions.max() >= A:
            raise ValueError("action index out of range")
        return self

    def to_dict(self) -> dict:
        return {
            "schema": "dcppo.dataset",
            "version": 1,
            "n": self.n,
            "H": self.H,
            "seed": int(self.seed),
            "gamma": self.gamma,
            "mechanism": self.mechanism,
            "steps": [
                {"h": h, "s": s.tolist(), "a": a.tolist(), "s_next": sn.tolist()}
                for h, (s, a, sn) in ((h, self.step(h)) for h in range(self.H))
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ChoiceDataset":
        if data.get("schema") != "dcppo.dataset" or data.get("version") != 1:
            raise ValueError("unsupported dataset document")
        steps = sorted(data["steps"], key=lambda st: st["h"])
        H, n = len(steps), int(data["n"])
        states = np.empty((n, H + 1), dtype=np.int64)
        actions = np.empty((n, H), dtype=np.int64)
        for h, st in enumerate(steps):
            states[:, h] = st["s"]
            actions[:, h] = st["a"]
            if h > 0 and not np.array_equal(st["s"], steps[h - 1]["s_next"]):
                raise ValueError(f"trajectory chaining broken between steps {h - 1} and {h}")
        states[:, H] = steps[-1]["s_next"]
        return cls(states, actions, seed=int(data["seed"]), gamma=float(data["gamma"]),
                   mechanism=data.get("mechanism", "softmax"))

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["traj", "h", "s", "a", "s_next"])
        for i in range(self.n):
            for h in range(self.H):
                writer.writerow([i, h, self.states[i, h], self.actions[i, h], self.states[i, h + 1]])
        return buf.getvalue()


def _uniform_block(seed: int, start: int, stop: int, width: int) -> np.ndarray:
    """Uniforms for trajectories ``start..stop-1`` from a counter-based stream.

    Row ``i`` is a pure function of ``(seed, i)``: the Philox counter is advanced
    to the row's offset, so any partition of the trajectories over workers
    reproduces the same bits.
    """
    bitgen = np.random.Philox(key=seed)
    # Philox emits four 64-bit words per counter increment; width is a multiple of 4.
    bitgen.advance(start * width // 4)
    return np.random.Generator(bitgen).random((stop - start, width))


def _inverse_cdf(probs: np.ndarray, u: np.ndarray) -> np.ndarray:
    cdf = np.cumsum(probs, axis=-1)
    idx = np.sum(cdf <= u[:, None], axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


def _draw_actions(behavior: BehaviorModel, h: int, s: np.ndarray, u: np.ndarray, mechanism: str) -> np.ndarray:
    """Choices at states ``s`` from uniforms ``u`` of shape ``(len(s), A)``."""
    if mechanism == "softmax":
        return _inverse_cdf(behavior.pi_b[h, s], u[:, 0])
    u = np.clip(u, np.finfo(float).tiny, None)
    return np.argmax(behavior.Q[h, s] - np.log(-np.log(u)), axis=-1)


def sample_choices(
    behavior: BehaviorModel, h: int, s: int, n: int, seed: int, mechanism: Mechanism = "softmax"
) -> np.ndarray:
    """``n`` independent choices of the agent at state ``s`` and step ``h``."""
    if mechanism not in ("softmax", "gumbel_argmax"):
        raise ValueError(f"unknown mechanism {mechanism!r}")
    A = behavior.Q.shape[-1]
    width = -(-A // 4) * 4
    u = _uniform_block(seed, 0, n, width)[:, :A]
    return _draw_actions(behavior, h, np.full(n, s), u, mechanism)


def sample_dataset(
    mdp: TabularLinearMdp,
    behavior: BehaviorModel,
    n: int,
    seed: int,
    mechanism: Mechanism = "softmax",
    start: int = 0,
) -> ChoiceDataset:
    """Simulate trajectories ``start .. start+n-1`` of the agent from ``s_init``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    if mechanism not in ("softmax", "gumbel_argmax"):
        raise ValueError(f"unknown mechanism {mechanism!r}")
    H, A = mdp.H, mdp.A
    slots = A + 1
    width = -(-H * slots // 4) * 4
    U = _uniform_block(seed, start, start + n, width)[:, : H * slots].reshape(n, H, slots)
    states = np.empty((n, H + 1), dtype=np.int64)
    actions = np.empty((n, H), dtype=np.int64)
    states[:, 0] = mdp.s_init
    for h in range(H):
        s = states[:, h]
        a = _draw_actions(behavior, h, s, U[:, h, :A], mechanism)
        actions[:, h] = a
        states[:, h + 1] = _inverse_cdf(mdp.P[h, s, a], U[:, h, A])
    return ChoiceDataset(states, actions, seed=seed, gamma=behavior.gamma, mechanism=mechanism)


def empirical_state_distribution(ds: ChoiceDataset, S: int) -> np.ndarray:
    """Per-step state frequencies, shape ``(H, S)``."""
    if ds.n < 1:
        raise ValueError("dataset is empty")
    counts = np.stack([np.bincount(ds.states[:, h], minlength=S) for h in range(ds.H)])
    return counts / ds.n


def empirical_action_frequencies(ds: ChoiceDataset, S: int, A: int) -> np.ndarray:
    """Counts ``N[h, s, a]`` of observed state-action pairs."""
    N = np.zeros((ds.H, S, A))
    for h in range(ds.H):
        np.add.at(N[h], (ds.states[:, h], ds.actions[:, h]), 1.0)
    return N
