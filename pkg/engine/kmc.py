import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from numba import njit

from .meanfield import (
    COParams,
    Mechanism,
    MechanismParams,
    NOParams,
    Trajectory,
    check_coverage
)
from .seeding import RngSeed

logger = logging.getLogger(__name__)

CHANNELS = {
    Mechanism.NO: ('adsorption', 'desorption', 'reaction'),
    Mechanism.CO: ('adsorption_a', 'desorption_a', 'adsorption_b2', 'reaction'),
}


@dataclass(frozen=True)
class MicroState:
    """Adsorbate counts on an n_sites lattice at simulation time t."""

    n_sites: int
    counts: Tuple[int, ...]
    t: float = 0.0

    def __post_init__(self):
        if self.n_sites < 1:
            raise ValueError(f"n_sites must be positive, got {self.n_sites}")
        if any(c < 0 for c in self.counts) or sum(self.counts) > self.n_sites:
            raise ValueError(f"Counts {self.counts} invalid on {self.n_sites} sites")

    @property
    def mechanism(self) -> Mechanism:
        return Mechanism.NO if len(self.counts) == 1 else Mechanism.CO


@dataclass
class EventTrace:
    """Per-event debugging record filled by the SSA kernel, up to capacity events."""

    capacity: int = 100_000
    t: List[float] = field(default_factory=list)
    channel: List[int] = field(default_factory=list)
    counts: List[Tuple[int, ...]] = field(default_factory=list)
    dropped: int = 0

    def to_frame(self, mechanism: Mechanism) -> pd.DataFrame:
        mechanism = Mechanism(mechanism)
        columns = ['n'] if mechanism is Mechanism.NO else ['n_a', 'n_b']
        frame = pd.DataFrame(self.counts, columns=columns)
        frame.insert(0, 'channel', self.channel)
        frame.insert(0, 't', self.t)
        return frame


def _rates(params: MechanismParams) -> Tuple[int, np.ndarray]:
    if isinstance(params, NOParams):
        return 0, np.array([params.alpha, params.gamma, params.k], dtype=np.float64)
    return 1, np.array([params.alpha, params.beta, params.gamma, params.k_r], dtype=np.float64)


def propensities(state: MicroState, params: MechanismParams) -> np.ndarray:
    """Channel firing rates for the well-mixed site-count model.

    NO: adsorption, desorption, reaction. CO: A adsorption, A desorption,
    dissociative B2 adsorption (adds two B), A+B reaction.
    """
    N = float(state.n_sites)
    if isinstance(params, NOParams):
        n = state.counts[0]
        vacant = state.n_sites - n
        return np.array([
            params.alpha * vacant,
            params.gamma * n,
            params.k * n * (vacant / N) ** 2
        ])
    n_a, n_b = state.counts
    vacant = state.n_sites - n_a - n_b
    return np.array([
        params.alpha * vacant,
        params.gamma * n_a,
        params.beta * N * (vacant / N) ** 2,
        4.0 * params.k_r * n_a * n_b / N
    ])


@njit(nogil=True)
def _ssa_kernel(rng, counts, n_sites, t, t_end, rates, mechanism,
                trace_t, trace_channel, trace_counts):
    # Direct method. counts is updated in place; returns (events, traced events).
    N = float(n_sites)
    capacity = trace_t.shape[0]
    n_events = 0
    n_traced = 0
    while True:
        if mechanism == 0:
            n = counts[0]
            vacant = n_sites - n
            a0 = rates[0] * vacant
            a1 = rates[1] * n
            a2 = rates[2] * n * (vacant / N) ** 2
            a3 = 0.0
        else:
            n_a = counts[0]
            n_b = counts[1]
            vacant = n_sites - n_a - n_b
            a0 = rates[0] * vacant
            a1 = rates[2] * n_a
            a2 = rates[1] * N * (vacant / N) ** 2
            a3 = 4.0 * rates[3] * n_a * n_b / N
        total = a0 + a1 + a2 + a3
        if total <= 0.0:
            break
        dt = rng.exponential(1.0 / total)
        if t + dt > t_end:
            break
        t += dt

        u = rng.random() * total
        if u < a0:
            channel = 0
        elif u < a0 + a1:
            channel = 1
        elif u < a0 + a1 + a2 or mechanism == 0:
            channel = 2
        else:
            channel = 3

        # moves that would break 0 <= counts, sum <= n_sites are rejected
        if mechanism == 0:
            if channel == 0:
                if vacant > 0:
                    counts[0] += 1
            elif counts[0] > 0:
                counts[0] -= 1
        else:
            if channel == 0:
                if vacant > 0:
                    counts[0] += 1
            elif channel == 1:
                if counts[0] > 0:
                    counts[0] -= 1
            elif channel == 2:
                if vacant >= 2:
                    counts[1] += 2
            else:
                if counts[0] > 0 and counts[1] > 0:
                    counts[0] -= 1
                    counts[1] -= 1

        n_events += 1
        if n_traced < capacity:
            trace_t[n_traced] = t
            trace_channel[n_traced] = channel
            trace_counts[n_traced, 0] = counts[0]
            if mechanism == 1:
                trace_counts[n_traced, 1] = counts[1]
            n_traced += 1
    return n_events, n_traced


def _advance(
    state: MicroState,
    params: MechanismParams,
    t_end: float,
    rng: np.random.Generator,
    trace: Optional[EventTrace] = None
) -> MicroState:
    if t_end < state.t:
        raise ValueError(f"t_end={t_end} precedes the state clock t={state.t}")
    if t_end == state.t:
        return state
    if params.mechanism is not state.mechanism:
        raise ValueError(f"{params.mechanism.value} parameters applied to a {state.mechanism.value} state")

    mechanism, rates = _rates(params)
    counts = np.array(state.counts, dtype=np.int64)
    capacity = trace.capacity - len(trace.t) if trace is not None else 0
    capacity = max(capacity, 0)
    trace_t = np.empty(capacity, dtype=np.float64)
    trace_channel = np.empty(capacity, dtype=np.int64)
    trace_counts = np.zeros((capacity, 2), dtype=np.int64)

    n_events, n_traced = _ssa_kernel(
        rng, counts, state.n_sites, float(state.t), float(t_end), rates, mechanism,
        trace_t, trace_channel, trace_counts
    )

    if trace is not None:
        width = len(state.counts)
        trace.t.extend(trace_t[:n_traced].tolist())
        trace.channel.extend(trace_channel[:n_traced].tolist())
        trace.counts.extend(tuple(row[:width]) for row in trace_counts[:n_traced].tolist())
        trace.dropped += int(n_events - n_traced)

    return MicroState(
        n_sites=state.n_sites,
        counts=tuple(int(c) for c in counts),
        t=float(t_end)
    )


def ssa_run(
    state: MicroState,
    params: MechanismParams,
    t_end: float,
    seed: RngSeed,
    trace: Optional[EventTrace] = None
) -> MicroState:
    """Exact-time SSA realization from state up to t_end.

    Identical (state, params, t_end, seed) give bit-identical output. With
    zero total propensity the clock jumps to t_end and the state is frozen.
    """
    return _advance(state, params, t_end, seed.generator(), trace)


def ssa_trajectory(
    state: MicroState,
    schedule: Union[MechanismParams, Sequence[Tuple[float, MechanismParams]]],
    sample_times: Sequence[float],
    seed: RngSeed,
    trace: Optional[EventTrace] = None
) -> Trajectory:
    """One realization sampled at sample_times under a piecewise-constant parameter.

    schedule is either a single parameter record or (switch time, params)
    pairs, each active from its switch time on. Stopping at sample and
    switch times and resuming with the same stream leaves the process
    law unchanged since waiting times are memoryless.
    """
    if not isinstance(schedule, (list, tuple)):
        schedule = [(state.t, schedule)]
    schedule = sorted(schedule, key=lambda entry: entry[0])
    times = np.sort(np.asarray(sample_times, dtype=float))
    if times.size and times[0] < state.t:
        raise ValueError("sample times must not precede the state clock")

    rng = seed.generator()
    active = 0
    current = state
    samples = []
    for ts in times:
        while active + 1 < len(schedule) and schedule[active + 1][0] <= ts:
            switch = max(schedule[active + 1][0], current.t)
            current = _advance(current, schedule[active][1], switch, rng, trace)
            active += 1
        current = _advance(current, schedule[active][1], float(ts), rng, trace)
        samples.append(restrict(current))
    return Trajectory(t=times, states=np.array(samples).reshape(len(times), -1))


def lift(x, n_sites: int) -> MicroState:
    """Round coverages to site counts (half up); clock reset to zero.

    For CO, if rounding overflows the lattice the larger count gives way.
    """
    mechanism = Mechanism.NO if np.size(x) == 1 else Mechanism.CO
    coverage = check_coverage(x, mechanism)
    counts = [int(np.floor(c * n_sites + 0.5)) for c in coverage]
    while sum(counts) > n_sites:
        largest = int(np.argmax(counts))
        counts[largest] -= 1
    return MicroState(n_sites=int(n_sites), counts=tuple(counts), t=0.0)


def restrict(state: MicroState) -> np.ndarray:
    """Coverage fractions of a micro state."""
    return np.array(state.counts, dtype=float) / state.n_sites
