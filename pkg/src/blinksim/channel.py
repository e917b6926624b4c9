"""Per-link propagation: delay, multipath taps, attenuation, noise.

Links are described by distance, a tap list of (excess_delay_ps, gain)
pairs, and a receiver SNR.  SNR is defined as peak received pulse power
over per-sample noise variance, measured at the quantizer input.
Fractional-sample delays use nearest-sample placement (the hardware has
no interpolation); the residual fraction is reported in waveform metadata
so oracle tests can account for it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .phy import SampledWaveform
from .timebase import round_half_away

SPEED_OF_LIGHT_M_S = 299_792_458.0

# Default non-line-of-sight profile: attenuated direct path plus two
# late reflections (configurable per scenario).
NLOS_DIRECT_ATTEN_DB = 10.0
NLOS_EXCESS_TAPS = ((2000, 0.6), (5000, 0.3))  # (excess_ps, gain rel. direct)


def propagation_delay(distance_m: float) -> int:
    """Free-space propagation delay in integer picoseconds."""
    if distance_m < 0:
        raise ValueError(f"distance must be >= 0, got {distance_m}")
    return round_half_away(distance_m / SPEED_OF_LIGHT_M_S * 1e12)


@dataclass
class LinkParams:
    """Propagation parameters for one node pair.

    taps hold (excess_delay_ps, relative_gain) multipath components,
    sorted by excess delay; snr_db None means a noiseless link.
    """

    distance_m: float
    snr_db: float | None = None
    taps: tuple[tuple[int, float], ...] = ((0, 1.0),)
    los: bool = True

    def __post_init__(self) -> None:
        if self.distance_m < 0:
            raise ValueError("distance must be >= 0")
        if not self.taps:
            raise ValueError("tap list must be non-empty")
        delays = [t[0] for t in self.taps]
        if delays != sorted(delays):
            raise ValueError("taps must be sorted by excess delay")
        if self.los and delays[0] != 0:
            raise ValueError("LOS link must have a zero-excess-delay first tap")
        if not all(math.isfinite(g) for _, g in self.taps):
            raise ValueError("tap gains must be finite")


def nlos_link(
    distance_m: float,
    snr_db: float | None = None,
    direct_atten_db: float = NLOS_DIRECT_ATTEN_DB,
    excess_taps: tuple[tuple[int, float], ...] = NLOS_EXCESS_TAPS,
) -> LinkParams:
    """Obstructed-path link: attenuated direct tap plus late reflections."""
    direct = 10.0 ** (-direct_atten_db / 20.0)
    taps = ((0, direct),) + tuple((d, g * direct) for d, g in excess_taps)
    return LinkParams(distance_m=distance_m, snr_db=snr_db, taps=taps, los=False)


@dataclass
class LinkMatrix:
    """Boolean N x N connectivity: entry 1 iff SNR >= gamma_th (diag 0)."""

    entries: np.ndarray
    gamma_th_db: float

    def __post_init__(self) -> None:
        e = np.asarray(self.entries, dtype=bool)
        if e.ndim != 2 or e.shape[0] != e.shape[1]:
            raise ValueError("entries must be a square matrix")
        if np.any(np.diag(e)):
            raise ValueError("diagonal entries must be 0")
        self.entries = e

    @property
    def n(self) -> int:
        return self.entries.shape[0]


def build_link_matrix(snr_db: np.ndarray, gamma_th_db: float) -> LinkMatrix:
    """Threshold a pairwise SNR matrix into connectivity (boundary inclusive)."""
    snr = np.asarray(snr_db, dtype=np.float64)
    if snr.ndim != 2 or snr.shape[0] != snr.shape[1]:
        raise ValueError("snr matrix must be square")
    entries = snr >= gamma_th_db
    np.fill_diagonal(entries, False)
    return LinkMatrix(entries=entries, gamma_th_db=gamma_th_db)


def place_taps(
    tx: SampledWaveform,
    link: LinkParams,
    tx_time_abs_ps: float,
    window_start_abs_ps: float,
    window_len: int,
    out: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Place the delayed, gain-scaled taps of tx onto a receive window.

    The window grid starts at window_start_abs_ps with tx's sample period.
    Each tap lands at the nearest sample; the first tap's fractional
    residual (ps, in [-half, +half) sample) is returned for oracle use.
    """
    sp = tx.sample_period_ps
    base_delay = propagation_delay(link.distance_m)
    if out is None:
        out = np.zeros(window_len, dtype=np.float64)
    first_residual = 0.0
    for k, (excess_ps, gain) in enumerate(link.taps):
        arrival = tx_time_abs_ps + base_delay + excess_ps
        pos = (arrival - window_start_abs_ps) / sp
        idx = round_half_away(pos)
        if k == 0:
            first_residual = (pos - idx) * sp
        lo = max(0, idx)
        hi = min(window_len, idx + len(tx))
        if lo < hi:
            out[lo:hi] += gain * tx.samples[lo - idx : hi - idx]
    return out, first_residual


def noise_std_for_link(tx: SampledWaveform, link: LinkParams) -> float:
    """Per-sample noise std so peak signal power / variance = snr_db.

    The peak is measured on the composite (all taps) received signal, so
    overlapping taps are accounted for.
    """
    if link.snr_db is None:
        return 0.0
    max_shift = max(1, round_half_away(link.taps[-1][0] / tx.sample_period_ps) + 1)
    # composite received signal with the window anchored at the direct arrival
    buf, _ = place_taps(
        tx, link, 0.0, float(propagation_delay(link.distance_m)), len(tx) + max_shift
    )
    peak = float(np.max(np.abs(buf)))
    if peak == 0.0:
        return 0.0
    return peak / (10.0 ** (link.snr_db / 20.0))


def apply_channel(
    tx: SampledWaveform,
    link: LinkParams,
    tx_time_abs_ps: float,
    rng: np.random.Generator | None = None,
    window_start_abs_ps: float | None = None,
    window_len: int | None = None,
) -> SampledWaveform:
    """Propagate tx through the link onto the receiver's sample grid.

    Without an explicit window the output grid starts at tx_time_abs_ps
    and spans the delayed waveform.  White Gaussian noise is added per
    snr_db (None = noiseless); meta records the first tap's fractional
    delay residual and the noise std used.
    """
    sp = tx.sample_period_ps
    if window_start_abs_ps is None:
        last_arrival = propagation_delay(link.distance_m) + link.taps[-1][0]
        window_start_abs_ps = tx_time_abs_ps
        window_len = len(tx) + round_half_away(last_arrival / sp) + 1
    elif window_len is None:
        raise ValueError("window_len required when window_start_abs_ps is given")

    out, residual = place_taps(tx, link, tx_time_abs_ps, window_start_abs_ps, window_len)
    std = noise_std_for_link(tx, link)
    if std > 0.0:
        if rng is None:
            raise ValueError("rng required for a noisy link")
        out += rng.normal(0.0, std, size=window_len)
    return SampledWaveform(
        samples=out,
        sample_period_ps=sp,
        origin_ps=window_start_abs_ps,
        meta={"frac_delay_ps": residual, "noise_std": std},
    )
