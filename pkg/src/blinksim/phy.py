"""Timing-signal generation on the 2.5 GSps sample grid.

The timing signal is a 31-chip maximal-length sequence, BPSK-modulated as
opposite-polarity UWB monocycles at a 2 ns chip spacing (62 ns active
duration, 155 samples at 0.4 ns).  The correlation template is the same
waveform quantized to 4-bit codes (sign plus 3 bits magnitude) and
zero-padded to 160 samples so its length is a multiple of the 8 parallel
correlator lanes.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

SAMPLE_PERIOD_PS = 400  # 2.5 GSps
CHIP_PERIOD_PS = 2000
SEQUENCE_LEN = 31
LFSR_DEGREE = 5
DEFAULT_TAPS = (5, 2)  # register stages XORed into the feedback
TEMPLATE_LEN = 160
QUANT_MAX = 7  # 4-bit signed, symmetric: codes in [-7, +7]


@dataclass(frozen=True)
class MSequence:
    """Maximal-length sequence as bipolar chips in {-1, +1}."""

    chips: np.ndarray
    degree: int = LFSR_DEGREE
    generator_taps: tuple[int, ...] = DEFAULT_TAPS

    def __post_init__(self) -> None:
        if len(self.chips) != 2**self.degree - 1:
            raise ValueError(f"expected {2**self.degree - 1} chips, got {len(self.chips)}")
        if not np.all(np.isin(self.chips, (-1, 1))):
            raise ValueError("chips must be bipolar (-1 or +1)")


@dataclass
class SampledWaveform:
    """Real amplitudes on a uniform sample grid.

    origin_ps is the absolute time of sample 0.  meta carries side-channel
    information (e.g. fractional-delay residuals) and is excluded from
    equality.
    """

    samples: np.ndarray
    sample_period_ps: int = SAMPLE_PERIOD_PS
    origin_ps: float = 0.0
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self) -> None:
        self.samples = np.asarray(self.samples, dtype=np.float64)
        if self.sample_period_ps <= 0:
            raise ValueError("sample_period_ps must be > 0")

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_ps(self) -> int:
        return len(self.samples) * self.sample_period_ps


@dataclass(frozen=True)
class QuantizedTemplate:
    """Correlation template of 4-bit signed codes."""

    coeffs: np.ndarray

    def __post_init__(self) -> None:
        coeffs = np.asarray(self.coeffs, dtype=np.int64)
        object.__setattr__(self, "coeffs", coeffs)
        if np.any(np.abs(coeffs) > QUANT_MAX):
            raise ValueError(f"template codes must lie in [-{QUANT_MAX}, +{QUANT_MAX}]")

    def __len__(self) -> int:
        return len(self.coeffs)

    @property
    def energy(self) -> int:
        """Sum of squared codes: the ideal matched-filter peak."""
        return int(np.sum(self.coeffs * self.coeffs))


def gen_msequence(taps: tuple[int, ...] = DEFAULT_TAPS, seed_state: int = 1) -> MSequence:
    """Generate a 31-chip m-sequence from a degree-5 Fibonacci LFSR.

    taps lists the register stages (1-based, stage `degree` is the output)
    whose XOR feeds back into stage 1.  Non-primitive polynomials are
    rejected by checking that the state period is exactly 2^degree - 1.
    """
    degree = max(taps)
    if degree != LFSR_DEGREE:
        raise ValueError(f"expected a degree-{LFSR_DEGREE} polynomial, got degree {degree}")
    if seed_state <= 0 or seed_state >= 2**degree:
        raise ValueError(f"seed_state must be a nonzero {degree}-bit value")
    if any(t < 1 or t > degree for t in taps) or len(set(taps)) != len(taps):
        raise ValueError(f"invalid tap set {taps}")

    period = 2**degree - 1
    # state bit i (0-based) holds stage i+1; output is the last stage
    state = [(seed_state >> i) & 1 for i in range(degree)]
    initial = tuple(state)
    bits = []
    steps = 0
    while True:
        bits.append(state[-1])
        feedback = 0
        for t in taps:
            feedback ^= state[t - 1]
        state = [feedback] + state[:-1]
        steps += 1
        if tuple(state) == initial:
            break
        if steps > period:
            break
    if steps != period:
        raise ValueError(
            f"taps {taps} are not primitive: LFSR period {steps} != {period}"
        )

    chips = 1 - 2 * np.array(bits, dtype=np.int64)  # bit 0 -> +1, bit 1 -> -1
    return MSequence(chips=chips, degree=degree, generator_taps=tuple(taps))


def monocycle(
    width_ns: float = 1.2,
    sample_period_ps: int = SAMPLE_PERIOD_PS,
    polarity: int = 1,
) -> SampledWaveform:
    """Sampled UWB monocycle (first derivative of a Gaussian).

    The pulse is truncated to width_ns and normalized to unit peak; its
    odd symmetry makes the sampled pulse exactly zero-mean.  Support is
    ceil(width / sample_period) samples (3 at the 1.2 ns / 0.4 ns defaults).
    """
    width_ps = width_ns * 1000.0
    if width_ps < sample_period_ps:
        raise ValueError("pulse width must be at least one sample period")
    if polarity not in (-1, 1):
        raise ValueError("polarity must be +1 or -1")

    n = int(np.ceil(width_ps / sample_period_ps))
    t = (np.arange(n) - (n - 1) / 2.0) * sample_period_ps
    sigma = width_ps / 3.0  # truncation at +/-1.5 sigma
    x = t / sigma
    y = x * np.exp(0.5 * (1.0 - x * x))
    y = polarity * y / np.max(np.abs(y))
    return SampledWaveform(samples=y, sample_period_ps=sample_period_ps)


def modulate(
    seq: MSequence,
    pulse: SampledWaveform,
    chip_period_ns: float = 2.0,
    pad_to_multiple: int = 8,
) -> SampledWaveform:
    """BPSK-modulate the sequence: one pulse per chip, polarity = chip sign.

    Pulses are placed at the start of each chip slot.  The active span is
    len(seq) * chip_period (155 samples at defaults), zero-padded up to a
    multiple of pad_to_multiple samples (160 at defaults).
    """
    sp = pulse.sample_period_ps
    chip_period_ps = chip_period_ns * 1000.0
    chip_samples = round_samples(chip_period_ps, sp)
    if len(pulse) > chip_samples:
        raise ValueError(
            f"pulse support ({len(pulse)} samples) exceeds chip period "
            f"({chip_samples} samples); inter-chip overlap unsupported"
        )

    active = len(seq.chips) * chip_samples
    total = active
    if pad_to_multiple > 1 and total % pad_to_multiple:
        total += pad_to_multiple - total % pad_to_multiple
    out = np.zeros(total, dtype=np.float64)
    for i, chip in enumerate(seq.chips):
        start = i * chip_samples
        out[start : start + len(pulse)] = chip * pulse.samples
    return SampledWaveform(samples=out, sample_period_ps=sp)


def round_samples(duration_ps: float, sample_period_ps: int) -> int:
    """Duration in whole samples, rounded half away from zero."""
    q = duration_ps / sample_period_ps
    return int(np.floor(abs(q) + 0.5)) * (1 if q >= 0 else -1)


def quantize(samples: np.ndarray, full_scale: float) -> np.ndarray:
    """Map amplitudes to 4-bit signed codes.

    Each sample becomes round(QUANT_MAX * clamp(x / full_scale, -1, 1)),
    rounding half away from zero, so the quantizer is exactly
    odd-symmetric and the -8 code is never produced.
    """
    if full_scale <= 0:
        raise ValueError("full_scale must be > 0")
    x = np.clip(np.asarray(samples, dtype=np.float64) / full_scale, -1.0, 1.0)
    scaled = QUANT_MAX * x
    return (np.sign(scaled) * np.floor(np.abs(scaled) + 0.5)).astype(np.int64)


def make_template(waveform: SampledWaveform, full_scale: float | None = None) -> QuantizedTemplate:
    """Quantize a waveform into the correlation template.

    full_scale defaults to the waveform's own peak, so a unit-peak
    modulated sequence maps to codes in {-7, 0, +7}.
    """
    if full_scale is None:
        full_scale = float(np.max(np.abs(waveform.samples)))
    return QuantizedTemplate(coeffs=quantize(waveform.samples, full_scale))


def default_template(
    taps: tuple[int, ...] = DEFAULT_TAPS, seed_state: int = 1
) -> tuple[SampledWaveform, QuantizedTemplate]:
    """Build the default 160-sample timing waveform and its template."""
    seq = gen_msequence(taps, seed_state)
    pulse = monocycle()
    wave = modulate(seq, pulse)
    return wave, make_template(wave)


def waveform_to_csv(w: SampledWaveform, path: str) -> None:
    """Dump (sample_index, amplitude) rows for debugging/plots."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_index", "amplitude"])
        for i, v in enumerate(w.samples):
            writer.writerow([i, repr(float(v))])


def waveform_from_csv(path: str, sample_period_ps: int = SAMPLE_PERIOD_PS) -> SampledWaveform:
    """Load a recorded waveform exported by waveform_to_csv."""
    amps = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header[:2] != ["sample_index", "amplitude"]:
            raise ValueError(f"unrecognized waveform CSV header: {header}")
        for row in reader:
            amps.append(float(row[1]))
    return SampledWaveform(samples=np.array(amps), sample_period_ps=sample_period_ps)
