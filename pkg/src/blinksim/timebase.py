"""Per-node oscillators and free-running timers.

Each simulated node derives its notion of time from an imperfect crystal
oscillator.  The timer is a coarse tick counter (312.5 MHz system clock,
3.2 ns per tick) plus a sub-tick phase, so a node's local time can be read
at picosecond granularity while corrections step the counter in whole
ticks, exactly like the hardware it models.

Conventions:
    * absolute simulation time is measured in integer picoseconds;
    * local time = counter * tick_period + fine_phase, in picoseconds;
    * conversions round half away from zero.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

PS_PER_SECOND = 1_000_000_000_000
DEFAULT_TICK_PERIOD_PS = 3200  # 312.5 MHz system clock
DEFAULT_PPM_BOUND = 50.0  # low-cost crystal accuracy class

# Integration quantum for the frequency random walk inside advance().  The
# walk updates once per quantum, so an explicit small-step summation with
# the same quantum and rng stream reproduces advance() exactly.
WALK_QUANTUM_PS = 1_000_000


def round_half_away(x: float) -> int:
    """Round to the nearest integer, ties away from zero."""
    return int(math.floor(abs(x) + 0.5)) * (1 if x >= 0 else -1)


@dataclass
class OscillatorModel:
    """Free-running oscillator: constant ppm error plus optional noise.

    Attributes:
        nominal_freq_hz: nominal crystal frequency.
        ppm_offset: signed fractional frequency error in parts per million.
            Mutated in place when the frequency random walk is enabled.
        freq_walk_std: std of the ppm random walk accumulated over one
            second of absolute time (ppm / sqrt(s)).
        phase_jitter_std: white timing jitter per coarse tick (ps).
        ppm_bound: configuration limit on |ppm_offset|.
    """

    nominal_freq_hz: float = 25e6
    ppm_offset: float = 0.0
    freq_walk_std: float = 0.0
    phase_jitter_std: float = 0.0
    ppm_bound: float = DEFAULT_PPM_BOUND

    def __post_init__(self) -> None:
        if self.nominal_freq_hz <= 0:
            raise ValueError("nominal_freq_hz must be > 0")
        if self.freq_walk_std < 0 or self.phase_jitter_std < 0:
            raise ValueError("noise std fields must be >= 0")
        if self.ppm_bound < 0:
            raise ValueError("ppm_bound must be >= 0")
        if abs(self.ppm_offset) > self.ppm_bound:
            raise ValueError(
                f"|ppm_offset| = {abs(self.ppm_offset)} exceeds bound {self.ppm_bound}"
            )

    @property
    def rate(self) -> float:
        """Local seconds elapsed per absolute second."""
        return 1.0 + self.ppm_offset * 1e-6

    @property
    def is_noiseless(self) -> bool:
        return self.freq_walk_std == 0.0 and self.phase_jitter_std == 0.0


@dataclass
class LocalClock:
    """A node's free-running timer driven by its oscillator.

    The counter advances one step per tick_period of *local* time; the
    fractional remainder lives in fine_phase, always in [0, tick_period).
    """

    node_id: str
    osc: OscillatorModel = field(default_factory=OscillatorModel)
    tick_period_ps: int = DEFAULT_TICK_PERIOD_PS
    counter: int = 0
    fine_phase_ps: float = 0.0

    def __post_init__(self) -> None:
        if self.tick_period_ps <= 0:
            raise ValueError("tick_period_ps must be > 0")
        if self.counter < 0:
            raise ValueError("counter must be >= 0")
        if not (0.0 <= self.fine_phase_ps < self.tick_period_ps):
            raise ValueError("fine_phase_ps must lie in [0, tick_period)")

    def read_local(self) -> float:
        """Current local time in picoseconds."""
        return self.counter * self.tick_period_ps + self.fine_phase_ps

    def advance(self, dt_abs_ps: float, rng: np.random.Generator | None = None) -> "LocalClock":
        """Advance the timer by dt_abs_ps of absolute time.

        Local elapsed time is dt * (1 + ppm_offset * 1e-6) plus noise.
        With noise enabled the drift integrates in WALK_QUANTUM_PS steps,
        updating the ppm random walk before accumulating each step, and a
        single white-jitter term (std = phase_jitter_std * sqrt(ticks))
        is added at the end.  The noiseless path uses the closed form, so
        zero-noise linearity is exact to float rounding.
        """
        if dt_abs_ps < 0:
            raise ValueError(f"dt_abs_ps must be >= 0, got {dt_abs_ps}")
        if dt_abs_ps == 0:
            return self

        if self.osc.is_noiseless or rng is None:
            elapsed = dt_abs_ps * self.osc.rate
        else:
            elapsed = 0.0
            remaining = float(dt_abs_ps)
            while remaining > 0:
                step = min(remaining, WALK_QUANTUM_PS)
                if self.osc.freq_walk_std > 0:
                    inc_std = self.osc.freq_walk_std * math.sqrt(step / PS_PER_SECOND)
                    self.osc.ppm_offset += rng.normal(0.0, inc_std)
                elapsed += step * self.osc.rate
                remaining -= step
            if self.osc.phase_jitter_std > 0:
                n_ticks = int(dt_abs_ps // self.tick_period_ps)
                if n_ticks > 0:
                    elapsed += rng.normal(0.0, self.osc.phase_jitter_std * math.sqrt(n_ticks))

        total = self.fine_phase_ps + elapsed
        whole = math.floor(total / self.tick_period_ps)
        self.counter += whole
        self.fine_phase_ps = total - whole * self.tick_period_ps
        if self.counter < 0:
            raise ValueError("clock advanced below zero (jitter exceeded elapsed time)")
        return self

    def apply_coarse_correction(self, offset_ticks: int) -> "LocalClock":
        """Step the counter by offset_ticks instantly; fine phase unchanged."""
        new_counter = self.counter + offset_ticks
        if new_counter < 0:
            raise ValueError(
                f"correction {offset_ticks} would drive counter of {self.node_id} "
                f"negative ({self.counter} -> {new_counter})"
            )
        self.counter = new_counter
        return self

    def reset(self) -> "LocalClock":
        """Zero the timer; oscillator state is preserved."""
        self.counter = 0
        self.fine_phase_ps = 0.0
        return self

    def time_to_reach(self, local_target_ps: float) -> float:
        """Absolute duration until the timer reads local_target_ps.

        Extrapolates with the current oscillator rate; exact for noiseless
        clocks, first-order accurate otherwise.
        """
        delta_local = local_target_ps - self.read_local()
        if delta_local < 0:
            raise ValueError(
                f"clock {self.node_id} already past local target "
                f"({self.read_local()} > {local_target_ps})"
            )
        return delta_local / self.osc.rate
