"""Behavioral model of the parallel receive correlator and peak detector.

The modeled architecture ingests s=8 samples per 312.5 MHz system clock
(8 x 312.5 MHz = 2.5 GSps) and computes k=8 correlation lags per clock.
The 160-coefficient template is split across L/s = 20 arrays; array j
multiplies template segment j against the sample window that segment
faces at each clock, and the partial products accumulate down the
pipeline so that branch b of system-clock cycle m carries the full
correlation at lag m*s + b.  All arithmetic is integer-exact: 4-bit codes
keep every output below 160 * 7 * 7 < 2**13.

A node's time-of-arrival estimate is the peak position on the local
sample grid: coarse_cycle counts 3.2 ns system clocks, branch counts
0.4 ns lanes within the clock.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .phy import QuantizedTemplate, TEMPLATE_LEN

# Templates are defined with lag 0 aligned to the first active sample of
# the timing sequence, so a peak at lag n means the sequence started at
# window sample n exactly: the alignment offset is zero by construction.
# It is a named constant (asserted by test) so every TOA computation uses
# the same convention.
TEMPLATE_ALIGNMENT_PS = 0


@dataclass(frozen=True)
class CorrelatorConfig:
    """Shape of the parallel correlator."""

    s: int = 8  # samples ingested per system clock
    k: int = 8  # correlation lags produced per system clock
    template_len: int = TEMPLATE_LEN
    sys_clock_period_ps: int = 3200

    def __post_init__(self) -> None:
        if self.s <= 0 or self.k <= 0:
            raise ValueError("s and k must be positive")
        if self.template_len % self.s:
            raise ValueError(
                f"template length {self.template_len} not divisible by s={self.s}"
            )
        if self.sys_clock_period_ps % self.s:
            raise ValueError("sys_clock_period_ps must be a multiple of s")

    @property
    def n_arrays(self) -> int:
        return self.template_len // self.s

    @property
    def sample_period_ps(self) -> int:
        return self.sys_clock_period_ps // self.s


DEFAULT_CONFIG = CorrelatorConfig()


@dataclass(frozen=True)
class PeakReport:
    """Detected correlation peak, in system-clock/branch coordinates."""

    coarse_cycle: int
    branch: int
    value: int
    detected: bool

    def flat_index(self, s: int = 8) -> int:
        return self.coarse_cycle * s + self.branch


def direct_correlate(stream: np.ndarray, template: QuantizedTemplate) -> np.ndarray:
    """Reference sliding correlation: out[n] = sum_i stream[n+i] * coeff[i].

    Exact integer arithmetic; this is the oracle the parallel model must
    match bit for bit.
    """
    stream = np.asarray(stream, dtype=np.int64)
    coeffs = template.coeffs
    if len(stream) < len(coeffs):
        raise ValueError(
            f"stream ({len(stream)}) shorter than template ({len(coeffs)})"
        )
    return np.correlate(stream, coeffs, mode="valid").astype(np.int64)


def ptt_correlate(
    stream: np.ndarray,
    cfg: CorrelatorConfig = DEFAULT_CONFIG,
    template: QuantizedTemplate | None = None,
) -> np.ndarray:
    """Parallel correlator output, one row of s branch values per clock.

    Row m, branch b equals the correlation at lag m*s + b.  Only complete
    clock cycles are emitted (the hardware streams continuously; a finite
    stream leaves one trailing partial cycle, which is dropped).

    Array j's contribution is the correlation of the stream against
    template segment j, read out s lags later per pipeline stage; summing
    the staggered per-array partials reproduces the monolithic result.
    """
    if template is None:
        raise ValueError("template required")
    stream = np.asarray(stream, dtype=np.int64)
    L, s = cfg.template_len, cfg.s
    if len(template) != L:
        raise ValueError(f"template length {len(template)} != configured {L}")
    if len(stream) % s:
        raise ValueError(f"stream length {len(stream)} not a multiple of s={s}")
    if len(stream) < L:
        raise ValueError("stream shorter than template")

    n_cycles = (len(stream) - L - (s - 1)) // s + 1
    n_out = n_cycles * s
    # exact in float64: |values| <= L * 49 << 2**53, so BLAS matmul is
    # bit-faithful integer arithmetic
    windows = np.lib.stride_tricks.sliding_window_view(
        stream.astype(np.float64), s
    )
    segments = template.coeffs.reshape(cfg.n_arrays, s).astype(np.float64)
    acc = np.zeros(n_out, dtype=np.float64)
    for j in range(cfg.n_arrays):
        acc += windows[j * s : j * s + n_out] @ segments[j]
    return acc.astype(np.int64).reshape(n_cycles, s)


def detect_peak(
    branch_outputs: np.ndarray,
    threshold: int,
    mode: str = "local_max",
    guard_cycles: int = 1,
    s: int = 8,
) -> PeakReport:
    """Find the first above-threshold correlation peak.

    local_max (default): after the first threshold crossing, take the
    maximum within guard_cycles system clocks (avoids early sidelobe
    captures); ties go to the lower branch.  first_crossing: report the
    crossing itself.
    """
    if threshold <= 0:
        raise ValueError("threshold must be > 0")
    flat = np.asarray(branch_outputs).reshape(-1)
    above = np.nonzero(flat >= threshold)[0]
    if len(above) == 0:
        return PeakReport(coarse_cycle=0, branch=0, value=0, detected=False)
    first = int(above[0])
    if mode == "first_crossing":
        best = first
    elif mode == "local_max":
        window = flat[first : first + guard_cycles * s + 1]
        best = first + int(np.argmax(window))
    else:
        raise ValueError(f"unknown peak mode {mode!r}")
    return PeakReport(
        coarse_cycle=best // s,
        branch=best % s,
        value=int(flat[best]),
        detected=True,
    )


def toa_from_peak(
    peak: PeakReport,
    rx_window_start_local_ps: float,
    cfg: CorrelatorConfig = DEFAULT_CONFIG,
) -> float:
    """Local time of arrival implied by a detected peak.

    TOA = window start + coarse_cycle * 3.2 ns + branch * 0.4 ns, minus
    the (zero) template alignment constant.
    """
    if not peak.detected:
        raise ValueError("cannot extract a TOA from an undetected peak")
    return (
        rx_window_start_local_ps
        + peak.coarse_cycle * cfg.sys_clock_period_ps
        + peak.branch * cfg.sample_period_ps
        - TEMPLATE_ALIGNMENT_PS
    )


def branch_outputs_to_csv(branch_outputs: np.ndarray, path: str) -> None:
    """Dump per-cycle branch outputs for correlation-trace plots."""
    outputs = np.asarray(branch_outputs)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["cycle"] + [f"branch_{b}" for b in range(outputs.shape[1])])
        for m, row in enumerate(outputs):
            writer.writerow([m] + [int(v) for v in row])
