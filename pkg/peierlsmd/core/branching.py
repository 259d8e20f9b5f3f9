"""Reduced-Ehrenfest branching: event detection, collapse and branch enumeration."""
import hashlib
import logging
import re
from dataclasses import dataclass
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, field_validator

from peierlsmd.core.adiabatic import AdiabaticSnapshot
from peierlsmd.core.propagator import ElectronState
from peierlsmd.errors import EmptyBranchError

logger = logging.getLogger(__name__)

TRIGGERS = ("pulse_end", "nonadiabatic_exit", "manual")
POLICIES = ("argmax", "sampled", "fixed")
DEFAULT_DELTA_POP = 0.01
DEFAULT_THRESHOLD = 0.05
EMPTY_BRANCH = 1e-12
POPULATION_SUM_TOL = 1e-8

_POLICY_PATTERN = re.compile(r"^(argmax|sampled|fixed)(?:\((-?\d+)\))?$")


@dataclass(frozen=True)
class BranchPolicy:
    """How the collapse target of the frontier state is chosen."""
    name: str = "argmax"
    index: Optional[int] = None
    seed: int = 0

    def __post_init__(self) -> None:
        if self.name not in POLICIES:
            raise ValueError(f"Unsupported branch policy: '{self.name}'. "
                             f"Available policies: {', '.join(POLICIES)}")
        if self.name == "fixed" and self.index is None:
            raise ValueError("the fixed policy needs an index")

    @classmethod
    def argmax(cls) -> "BranchPolicy":
        return cls("argmax")

    @classmethod
    def sampled(cls, seed: int) -> "BranchPolicy":
        return cls("sampled", seed=seed)

    @classmethod
    def fixed(cls, index: int) -> "BranchPolicy":
        return cls("fixed", index=index)

    @classmethod
    def from_config(cls, block) -> "BranchPolicy":
        return cls(block.policy, index=block.fixed_index, seed=block.seed)

    @classmethod
    def parse(cls, text: str, seed: int = 0) -> "BranchPolicy":
        """Parse ``argmax``, ``sampled(7)`` or ``fixed(1)``."""
        match = _POLICY_PATTERN.match(text.strip())
        if match is None:
            raise ValueError(f"Unsupported branch policy: '{text}'. "
                             f"Available policies: {', '.join(POLICIES)}")
        name, value = match.groups()
        if name == "fixed":
            if value is None:
                raise ValueError("the fixed policy needs an index, e.g. fixed(1)")
            return cls.fixed(int(value))
        if name == "sampled":
            return cls.sampled(seed if value is None else int(value))
        return cls.argmax()

    def describe(self) -> str:
        if self.name == "sampled":
            return f"sampled({self.seed})"
        if self.name == "fixed":
            return f"fixed({self.index})"
        return "argmax"


class BranchEvent(BaseModel):
    """One collapse of the electronic state.

    Attributes:
        index: Event counter within the run, starting at 0
        t: Event time (atomic units)
        trigger: pulse_end, nonadiabatic_exit or manual
        populations: Normalized adiabatic populations per electron state
        chosen: Adiabatic index selected for every electron state
        policy: Selection policy, e.g. ``sampled(3)``
        state_hash: Digest of the post-collapse coefficients
        pairs: Nonadiabatic pairs active at the event
        checkpoint: Pre-collapse checkpoint written for branch replay
    """
    model_config = ConfigDict(frozen=True)

    index: int
    t: float
    trigger: str
    populations: list[list[float]]
    chosen: list[int]
    policy: str
    state_hash: str = ""
    pairs: list[tuple[int, int]] = []
    checkpoint: Optional[str] = None

    @field_validator("trigger")
    @classmethod
    def known_trigger(cls, value: str) -> str:
        if value not in TRIGGERS:
            raise ValueError(f"unknown trigger '{value}'")
        return value

    @field_validator("populations")
    @classmethod
    def complete(cls, value: list[list[float]]) -> list[list[float]]:
        for row in value:
            if abs(sum(row) - 1.0) > POPULATION_SUM_TOL:
                raise ValueError(f"populations sum to {sum(row):.12f}, expected 1")
        return value

    @property
    def frontier(self) -> list[float]:
        """Populations of the highest occupied state, the one the policy acts on."""
        return self.populations[-1]


def state_hash(coefficients: np.ndarray) -> str:
    data = np.ascontiguousarray(coefficients, dtype=np.complex128).tobytes()
    return hashlib.sha256(data).hexdigest()[:16]


def _level_populations(snapshot: AdiabaticSnapshot,
                       weights: Optional[np.ndarray]) -> np.ndarray:
    populations = np.asarray(snapshot.populations)
    norms = populations.sum(axis=1, keepdims=True)
    populations = populations / np.where(norms > 0.0, norms, 1.0)
    weights = np.ones(len(populations)) if weights is None else np.asarray(weights, dtype=float)
    return weights @ populations / np.sum(weights)


class EventDetector:
    """Watches successive snapshots for collapse triggers.

    ``pulse_end`` fires once at the first analysis time on or after the
    end of the envelope support. ``nonadiabatic_exit`` fires when a pair
    leaves the nonadiabatic set after an episode during which its level
    populations moved by more than ``delta_pop``. ``manual`` fires at the
    first analysis time on or after each requested time.
    """

    def __init__(self, pulse_end: Optional[float] = None,
                 delta_pop: float = DEFAULT_DELTA_POP,
                 manual_times: Sequence[float] = (),
                 weights: Optional[np.ndarray] = None) -> None:
        self.pulse_end = pulse_end
        self.delta_pop = delta_pop
        self.weights = weights
        self.pulse_fired = False
        self.manual_pending = sorted(float(t) for t in manual_times)
        # pair -> (baseline populations of the pair, largest change so far)
        self.episodes: dict[tuple[int, int], tuple[tuple[float, float], float]] = {}
        self.previous: Optional[np.ndarray] = None

    def update(self, snapshot: AdiabaticSnapshot, t: float) -> Optional[str]:
        """Feed the snapshot taken at time t; returns the trigger that fires, if any."""
        fired: list[str] = []
        if self.pulse_end is not None and not self.pulse_fired and t >= self.pulse_end:
            self.pulse_fired = True
            fired.append("pulse_end")

        if snapshot.populations is not None:
            levels = _level_populations(snapshot, self.weights)
            baseline_source = levels if self.previous is None else self.previous
            active = set(snapshot.nonadiabatic)
            exited = False
            for pair in active:
                i, j = pair
                if pair not in self.episodes:
                    base = (float(baseline_source[i]), float(baseline_source[j]))
                    self.episodes[pair] = (base, 0.0)
            for pair, (base, change) in list(self.episodes.items()):
                i, j = pair
                now = max(abs(levels[i] - base[0]), abs(levels[j] - base[1]))
                change = max(change, float(now))
                if pair in active:
                    self.episodes[pair] = (base, change)
                    continue
                del self.episodes[pair]
                if change > self.delta_pop:
                    logger.debug("Pair %s left the nonadiabatic region, population change %.3e",
                                 pair, change)
                    exited = True
            if exited:
                fired.append("nonadiabatic_exit")
            self.previous = levels

        if self.manual_pending and t >= self.manual_pending[0]:
            while self.manual_pending and t >= self.manual_pending[0]:
                self.manual_pending.pop(0)
            fired.append("manual")

        if not fired:
            return None
        if len(fired) > 1:
            logger.info("Triggers %s coincide at t=%.6g, recording %s", fired, t, fired[0])
        return fired[0]

    def rebase(self, snapshot: AdiabaticSnapshot) -> None:
        """Restart open episodes from the populations of a post-collapse snapshot."""
        levels = _level_populations(snapshot, self.weights)
        self.episodes = {(i, j): ((float(levels[i]), float(levels[j])), 0.0)
                         for i, j in self.episodes}
        self.previous = levels

    def state(self) -> dict[str, Any]:
        """JSON-compatible detector state for checkpoints."""
        return {
            "pulse_fired": self.pulse_fired,
            "manual_pending": list(self.manual_pending),
            "episodes": [[list(pair), list(base), change]
                         for pair, (base, change) in self.episodes.items()],
            "previous": None if self.previous is None else self.previous.tolist(),
        }

    def restore(self, state: dict[str, Any]) -> "EventDetector":
        self.pulse_fired = bool(state["pulse_fired"])
        self.manual_pending = [float(t) for t in state["manual_pending"]]
        self.episodes = {tuple(pair): (tuple(base), float(change))
                         for pair, base, change in state["episodes"]}
        previous = state["previous"]
        self.previous = None if previous is None else np.asarray(previous, dtype=float)
        return self


def detect_event(history: Sequence[AdiabaticSnapshot], pulse=None, t: Optional[float] = None,
                 delta_pop: float = DEFAULT_DELTA_POP,
                 manual_times: Sequence[float] = ()) -> Optional[str]:
    """Replay snapshots through a fresh detector; the trigger at the last one, if any.

    Args:
        history: Snapshots in time order, sampled at the analysis stride
        pulse: PulseSpec whose support end fires ``pulse_end``
        t: Time of the last snapshot (default: its own ``t``)
        delta_pop: Population change that makes an exit significant
        manual_times: Requested collapse times
    """
    if not history:
        return None
    detector = EventDetector(None if pulse is None else pulse.end_time, delta_pop, manual_times)
    trigger = None
    for position, snapshot in enumerate(history):
        last = position == len(history) - 1
        at = t if (last and t is not None) else snapshot.t
        trigger = detector.update(snapshot, at)
    return trigger


def _choose(populations: np.ndarray, policy: BranchPolicy, event_index: int) -> int:
    if policy.name == "fixed":
        return int(policy.index)
    if policy.name == "sampled":
        rng = np.random.default_rng([policy.seed, event_index])
        return int(rng.choice(len(populations), p=populations / populations.sum()))
    return int(np.argmax(populations))


def collapse(state: ElectronState, snapshot: AdiabaticSnapshot, policy: BranchPolicy,
             event_index: int = 0, trigger: str = "manual",
             dressing: Optional[np.ndarray] = None,
             empty_tol: float = EMPTY_BRANCH) -> tuple[ElectronState, BranchEvent]:
    """Collapse every occupied state onto one adiabatic state.

    The policy picks the target of the frontier (last) state; every other
    state goes to its most populated level not yet taken. Each new state
    keeps its norm and the phase of its amplitude on the target.

    Raises:
        EmptyBranchError: If a target carries no population
    """
    if snapshot.amplitudes is None:
        raise ValueError("snapshot carries no amplitudes")
    amplitudes = np.asarray(snapshot.amplitudes)
    raw = np.abs(amplitudes) ** 2
    norms = raw.sum(axis=1)
    populations = raw / np.where(norms > 0.0, norms, 1.0)[:, None]
    levels = snapshot.vectors.shape[1]
    dressing = np.ones(snapshot.vectors.shape[0]) if dressing is None else dressing

    frontier = state.state_count - 1
    chosen = [-1] * state.state_count
    target = _choose(populations[frontier], policy, event_index)
    if not 0 <= target < levels or populations[frontier, target] <= empty_tol:
        weight = populations[frontier, target] if 0 <= target < levels else 0.0
        raise EmptyBranchError(
            f"branch {target} of state {frontier} is empty (population {weight:.3e})")
    chosen[frontier] = target
    for n in range(frontier):
        order = [i for i in np.argsort(-populations[n], kind="stable") if i not in chosen]
        pick = int(order[0])
        if populations[n, pick] <= empty_tol:
            raise EmptyBranchError(
                f"no populated branch left for state {n} (population {populations[n, pick]:.3e})")
        chosen[n] = pick

    coefficients = np.empty_like(state.coefficients)
    for n, i in enumerate(chosen):
        c = amplitudes[n, i]
        phase = c / abs(c)
        coefficients[:, n] = np.sqrt(norms[n]) * phase * dressing * snapshot.vectors[:, i]
    collapsed = state.with_coefficients(coefficients)
    event = BranchEvent(
        index=event_index, t=state.t, trigger=trigger,
        populations=populations.tolist(), chosen=chosen, policy=policy.describe(),
        state_hash=state_hash(coefficients), pairs=list(snapshot.nonadiabatic),
    )
    logger.info("Collapse #%d (%s) at t=%.4f: states -> %s, frontier weight %.4f",
                event_index, trigger, state.t, chosen, populations[frontier, target])
    return collapsed, event


def enumerate_branches(event: BranchEvent,
                       threshold: float = DEFAULT_THRESHOLD) -> list[tuple[int, float]]:
    """Every frontier level with population at or above ``threshold``, in index order."""
    return [(index, weight) for index, weight in enumerate(event.frontier) if weight >= threshold]


def with_checkpoint(event: BranchEvent, path: Optional[str]) -> BranchEvent:
    return event.model_copy(update={"checkpoint": path})
