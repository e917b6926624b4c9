"""Network timing state machine: pseudo-range learning, blinking cycles,
consensus corrections, and the measurement slot.

Phase I: every linked pair runs averaged roundtrip exchanges to learn the
one-way propagation delay (pseudo-range), stored in both nodes' diversity
memory.  Slaves are assigned to tiers by hop distance from the master set.

Phase II: a TDMA schedule gives tier t the t-th slot of each blinking
cycle (masters own slot 0) plus one trailing measurement slot in which
every node pulses at the same local-timer value.  All nodes act on the
same local schedule, so clock offsets surface as early/late transmissions
and as received-TOA discrepancies.  A receiver compares each neighbor's
measured TOA (relative to the slot's scheduled transmit time) against the
learned pseudo-range; the weighted sum of those discrepancies is the
consensus correction, rounded to whole coarse ticks (ties toward zero)
and applied as a counter step immediately before the node's own transmit
slot.  A positive correction value means the local clock is ahead, so the
counter is stepped down.  Masters log receptions but are never corrected.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field, replace

import numpy as np

from . import channel as ch
from . import correlator as corr
from . import phy
from .timebase import LocalClock, OscillatorModel, round_half_away

FINE_SHIFT_QUANTUM_PS = 200  # transmit-time shift granularity


@dataclass
class TdmaSchedule:
    """Slot layout of one blinking cycle.

    Slots 0..n_network_slots-1 belong to tiers 0..max_tier; the
    measurement slot is last.  All durations are multiples of the coarse
    tick so scheduled instants land on timer crossings.
    """

    n_network_slots: int
    slot_duration_ps: int = 6_400_000
    tx_offset_ps: int = 1_200_000
    rx_guard_ps: int = 320_000
    window_ps: int = 800_000
    tick_period_ps: int = 3200

    def __post_init__(self) -> None:
        if self.n_network_slots < 1:
            raise ValueError("need at least one network slot")
        for name in ("slot_duration_ps", "tx_offset_ps", "rx_guard_ps", "window_ps"):
            value = getattr(self, name)
            if value < 0 or value % self.tick_period_ps:
                raise ValueError(f"{name}={value} must be a non-negative tick multiple")
        if self.rx_guard_ps > self.tx_offset_ps:
            raise ValueError("rx guard cannot open the window before the slot start")
        if self.tx_offset_ps - self.rx_guard_ps + self.window_ps > self.slot_duration_ps:
            raise ValueError("receive window does not fit inside the slot")

    @property
    def measurement_slot(self) -> int:
        return self.n_network_slots

    @property
    def slots_per_cycle(self) -> int:
        return self.n_network_slots + 1

    @property
    def cycle_len_ps(self) -> int:
        """Full cycle including the measurement slot."""
        return self.slots_per_cycle * self.slot_duration_ps

    @property
    def network_len_ps(self) -> int:
        """The blinking portion of the cycle (without the measurement slot)."""
        return self.n_network_slots * self.slot_duration_ps

    def slot_of_tier(self, tier: int) -> int:
        if not (0 <= tier < self.n_network_slots):
            raise ValueError(f"tier {tier} has no slot")
        return tier


@dataclass
class NodeState:
    """Everything one node carries through the protocol."""

    node_id: str
    role: str  # 'master' | 'slave'
    clock: LocalClock
    tier: int | None = None
    slot: int | None = None
    diversity_mem: dict[str, float] = field(default_factory=dict)
    weights: dict[str, float] = field(default_factory=dict)
    # freshest relative TOA per neighbor: id -> (t_rel_ps, cycle_heard)
    last_meas: dict[str, tuple[float, int]] = field(default_factory=dict)
    tx_fine_shift_ps: float = 0.0

    def __post_init__(self) -> None:
        if self.role not in ("master", "slave"):
            raise ValueError(f"role must be master or slave, got {self.role!r}")

    @property
    def is_master(self) -> bool:
        return self.role == "master"


def consensus_offset(
    measured: dict[str, float],
    learned: dict[str, float],
    weights: dict[str, float],
) -> float:
    """Weighted consensus correction: sum_k w_k * (t_k - t~_k).

    Weights are normalized to sum 1 before use; all three maps must share
    the same nonempty key set.
    """
    keys = set(measured)
    if not keys:
        raise ValueError("no neighbor measurements: node skips correction this cycle")
    if set(learned) != keys or set(weights) != keys:
        raise ValueError("measured/learned/weights must cover the same neighbors")
    total = sum(weights.values())
    if total <= 0:
        raise ValueError("weights must sum to a positive value")
    return sum(weights[k] / total * (measured[k] - learned[k]) for k in keys)


def ticks_from_offset(offset_ps: float, tick_period_ps: int) -> int:
    """Convert a correction to whole ticks, nearest with ties toward zero."""
    q = abs(offset_ps) / tick_period_ps
    t = int(math.ceil(q - 0.5))
    return t if offset_ps >= 0 else -t


def assign_tiers(
    links: ch.LinkMatrix,
    node_ids: list[str],
    masters: set[str],
    tier1_cap: int | None = None,
    snr_db: np.ndarray | None = None,
) -> dict[str, int]:
    """Tier = minimum hop count to any master over the link matrix.

    With tier1_cap set, only the cap best-SNR master-adjacent slaves keep
    tier 1; the rest must derive timing through them.
    """
    if links.n != len(node_ids):
        raise ValueError("link matrix size does not match the node roster")
    if not masters:
        raise ValueError("at least one master is required")
    idx = {nid: i for i, nid in enumerate(node_ids)}
    adj = links.entries.copy()

    def bfs(adjacency: np.ndarray) -> dict[str, int]:
        dist = {nid: (0 if nid in masters else None) for nid in node_ids}
        queue = deque(sorted(masters, key=node_ids.index))
        while queue:
            u = queue.popleft()
            for v_i in np.nonzero(adjacency[idx[u]])[0]:
                v = node_ids[v_i]
                if dist[v] is None:
                    dist[v] = dist[u] + 1
                    queue.append(v)
        return dist

    tiers = bfs(adj)
    if tier1_cap is not None:
        tier1 = sorted(n for n, t in tiers.items() if t == 1)
        if len(tier1) > tier1_cap:
            if snr_db is None:
                raise ValueError("tier1_cap requires the SNR matrix for ranking")
            master_idx = [idx[m] for m in masters]

            def best_master_snr(n: str) -> float:
                return max(float(snr_db[idx[n], m]) for m in master_idx)

            tier1.sort(key=lambda n: (-best_master_snr(n), n))
            dropped = tier1[tier1_cap:]
            for n in dropped:
                for m in masters:
                    adj[idx[n], idx[m]] = adj[idx[m], idx[n]] = False
            tiers = bfs(adj)

    missing = [n for n, t in tiers.items() if t is None]
    if missing:
        raise ValueError(f"nodes unreachable from any master: {', '.join(sorted(missing))}")
    return {n: int(t) for n, t in tiers.items()}


@dataclass
class EngineConfig:
    """Tunables of the protocol engine (defaults match the modeled design)."""

    threshold_frac: float = 0.5  # detection threshold as fraction of ideal peak
    peak_mode: str = "local_max"
    guard_cycles: int = 1
    turnaround_ps: int = 3200  # fixed, calibrated-out reply latency
    roundtrip_reps: int = 16
    rep_period_ps: int = 4_000_000
    ranging_tx_delay_ps: int = 12_800  # listener head start before the probe
    ranging_window_ps: int = 1_024_000
    master_weight_boost: float = 1.0
    link_weights: dict[tuple[str, str], float] = field(default_factory=dict)
    stale_limit_cycles: int = 1
    fine_correction: bool = False
    multi_tx_search_radius_ps: int = 640_000


class RangingError(RuntimeError):
    """Raised when a link fails pseudo-range learning."""


class BlinkNetwork:
    """Simulation engine tying clocks, links and the receive chain together.

    One instance is one deterministic scenario run: every random stream is
    derived from (seed, purpose, node/link indices), so results do not
    depend on execution order.
    """

    def __init__(
        self,
        nodes: list[NodeState],
        links: dict[tuple[str, str], ch.LinkParams],
        gamma_th_db: float,
        snr_db: np.ndarray | None = None,
        schedule: TdmaSchedule | None = None,
        cfg: EngineConfig | None = None,
        seed: int = 0,
        tier1_cap: int | None = None,
    ) -> None:
        self.nodes = {n.node_id: n for n in nodes}
        if len(self.nodes) != len(nodes):
            raise ValueError("duplicate node ids")
        self.node_ids = [n.node_id for n in nodes]
        self.cfg = cfg or EngineConfig()
        self.seed = seed
        self.links: dict[tuple[str, str], ch.LinkParams] = {}
        for (a, b), lp in links.items():
            if a not in self.nodes or b not in self.nodes:
                raise ValueError(f"link ({a}, {b}) references an unknown node")
            self.links[(a, b)] = lp
            self.links[(b, a)] = lp

        n = len(self.node_ids)
        if snr_db is None:
            snr_db = np.full((n, n), -np.inf)
            for (a, b), lp in self.links.items():
                if lp.snr_db is not None:
                    snr_db[self._idx(a), self._idx(b)] = lp.snr_db
                else:
                    snr_db[self._idx(a), self._idx(b)] = np.inf
        self.snr_db = snr_db
        self.link_matrix = ch.build_link_matrix(snr_db, gamma_th_db)

        masters = {n.node_id for n in nodes if n.is_master}
        tiers = assign_tiers(self.link_matrix, self.node_ids, masters, tier1_cap, snr_db)
        max_tier = max(tiers.values())
        if schedule is None:
            schedule = TdmaSchedule(n_network_slots=max_tier + 1)
        elif schedule.n_network_slots != max_tier + 1:
            raise ValueError(
                f"schedule has {schedule.n_network_slots} network slots but the "
                f"topology needs {max_tier + 1}"
            )
        self.schedule = schedule
        for node in nodes:
            node.tier = tiers[node.node_id]
            node.slot = schedule.slot_of_tier(node.tier)
            node.weights = {}

        self.wave, self.template = phy.default_template()
        self.corr_cfg = corr.CorrelatorConfig(
            sys_clock_period_ps=nodes[0].clock.tick_period_ps
        )
        self.threshold = max(1, int(self.cfg.threshold_frac * self.template.energy))

        self.t_abs_ps = 0.0
        self.cycle = 0
        self.phase2_local_base: float | None = None
        self.phase2_abs_start: float | None = None
        self.trace: list[dict] = []
        self._clock_rngs = {
            nid: np.random.default_rng(np.random.SeedSequence((seed, 1, i)))
            for i, nid in enumerate(self.node_ids)
        }
        self._chan_rngs: dict[tuple[int, int, int], np.random.Generator] = {}
        self._misc_rng = np.random.default_rng(np.random.SeedSequence((seed, 4)))

    # ------------------------------------------------------------------ utils

    def _idx(self, node_id: str) -> int:
        return self.node_ids.index(node_id)

    def _chan_rng(self, rx: str, tx: str, phase: int) -> np.random.Generator:
        key = (self._idx(rx), self._idx(tx), phase)
        if key not in self._chan_rngs:
            self._chan_rngs[key] = np.random.default_rng(
                np.random.SeedSequence((self.seed, 2, *key))
            )
        return self._chan_rngs[key]

    def advance_all(self, dt_abs_ps: float) -> None:
        for nid in self.node_ids:
            self.nodes[nid].clock.advance(dt_abs_ps, self._clock_rngs[nid])
        self.t_abs_ps += dt_abs_ps

    def _abs_when_reads(self, node: NodeState, local_target_ps: float) -> float:
        return self.t_abs_ps + node.clock.time_to_reach(local_target_ps)

    def neighbors(self, node_id: str) -> list[str]:
        row = self.link_matrix.entries[self._idx(node_id)]
        return [self.node_ids[j] for j in np.nonzero(row)[0]]

    def _raw_weight(self, node_id: str, neighbor: str) -> float:
        w = self.cfg.link_weights.get((node_id, neighbor))
        if w is None:
            w = self.cfg.link_weights.get((neighbor, node_id), 1.0)
        if self.nodes[neighbor].is_master:
            w *= self.cfg.master_weight_boost
        return w

    # ----------------------------------------------------------- receive path

    def _receive(
        self,
        rx_id: str,
        window_start_local_ps: float,
        window_len_samples: int,
        tx_events: list[tuple[str, float]],
        phase: int,
    ) -> dict[str, tuple[corr.PeakReport, float]]:
        """Capture one receive window and extract per-neighbor peaks.

        tx_events holds (tx_id, tx_abs_ps) for this node's linked
        transmitters.  Returns {tx_id: (PeakReport, local TOA)} for the
        detected ones.
        """
        rx = self.nodes[rx_id]
        window_abs = self._abs_when_reads(rx, window_start_local_ps)
        sp = self.wave.sample_period_ps
        buf = np.zeros(window_len_samples, dtype=np.float64)
        noise_std = 0.0
        for tx_id, tx_abs in tx_events:
            link = self.links[(rx_id, tx_id)]
            ch.place_taps(self.wave, link, tx_abs, window_abs, window_len_samples, out=buf)
            noise_std = max(noise_std, ch.noise_std_for_link(self.wave, link))
        if noise_std > 0.0:
            buf += self._chan_rng(rx_id, tx_events[0][0], phase).normal(
                0.0, noise_std, size=window_len_samples
            )

        full_scale = float(np.max(np.abs(buf)))
        if full_scale == 0.0:
            return {}
        codes = phy.quantize(buf, full_scale)
        branch_out = corr.ptt_correlate(codes, self.corr_cfg, self.template)
        flat = branch_out.reshape(-1)

        results: dict[str, tuple[corr.PeakReport, float]] = {}
        if len(tx_events) == 1:
            report = corr.detect_peak(
                branch_out, self.threshold, self.cfg.peak_mode,
                self.cfg.guard_cycles, self.corr_cfg.s,
            )
            if report.detected:
                toa = corr.toa_from_peak(report, window_start_local_ps, self.corr_cfg)
                results[tx_events[0][0]] = (report, toa)
            return results

        # several same-slot transmitters: search around each expected arrival
        radius = max(1, self.cfg.multi_tx_search_radius_ps // sp)
        for tx_id, tx_abs in tx_events:
            expected_lag = round_half_away(
                (tx_abs + ch.propagation_delay(self.links[(rx_id, tx_id)].distance_m)
                 - window_abs) / sp
            )
            lo = max(0, expected_lag - radius)
            hi = min(len(flat), expected_lag + radius)
            if lo >= hi:
                continue
            report = corr.detect_peak(
                flat[lo:hi], self.threshold, self.cfg.peak_mode,
                self.cfg.guard_cycles, self.corr_cfg.s,
            )
            if report.detected:
                flat_idx = lo + report.flat_index(self.corr_cfg.s)
                report = corr.PeakReport(
                    coarse_cycle=flat_idx // self.corr_cfg.s,
                    branch=flat_idx % self.corr_cfg.s,
                    value=report.value,
                    detected=True,
                )
                toa = corr.toa_from_peak(report, window_start_local_ps, self.corr_cfg)
                results[tx_id] = (report, toa)
        return results

    # --------------------------------------------------------------- Phase I

    def roundtrip_measure(self, a_id: str, b_id: str, repetitions: int | None = None) -> float:
        """Averaged two-way exchange: learn the a<->b pseudo-range.

        Per repetition, a resets its timer and transmits; b detects, then
        replies after the fixed turnaround; a's captured timer value minus
        the turnaround, halved, estimates the one-way delay.  Repetitions
        without a detected peak on either side are discarded; more than
        half discarded raises RangingError.  The mean is stored in both
        nodes' diversity memory.
        """
        if not self.link_matrix.entries[self._idx(a_id), self._idx(b_id)]:
            raise ValueError(f"({a_id}, {b_id}) is not a connected link")
        reps = repetitions or self.cfg.roundtrip_reps
        a, b = self.nodes[a_id], self.nodes[b_id]
        cfg = self.cfg
        sp = self.wave.sample_period_ps
        window_len = cfg.ranging_window_ps // sp
        window_len -= window_len % self.corr_cfg.s
        tick = a.clock.tick_period_ps

        estimates = []
        for _ in range(reps):
            # b opens its window on a tick crossing before a transmits
            b_now = b.clock.read_local()
            b_window_local = math.ceil(b_now / tick) * tick
            tx_abs = self.t_abs_ps + cfg.ranging_tx_delay_ps
            a.clock.reset()  # a's timer zero marks its transmit instant

            got_b = self._receive(b_id, b_window_local, window_len, [(b_id_tx := a_id, tx_abs)], phase=3)
            if got_b:
                _, toa_b = got_b[a_id]
                reply_abs = (
                    self._abs_when_reads(b, toa_b) + cfg.turnaround_ps
                    if toa_b >= b_now
                    else tx_abs + cfg.turnaround_ps
                )
                # a listens from its reset instant (timer value 0)
                a_base_abs = tx_abs
                got_a = self._receive_at_abs(
                    a_id, a_base_abs, 0.0, window_len, [(b_id, reply_abs)], phase=3
                )
                if got_a:
                    _, t_rt = got_a[b_id]
                    estimates.append((t_rt - cfg.turnaround_ps) / 2.0)
            self.advance_all(cfg.rep_period_ps)

        if len(estimates) < (reps + 1) // 2:
            raise RangingError(
                f"link ({a_id}, {b_id}): only {len(estimates)}/{reps} roundtrips detected"
            )
        pseudo = float(np.mean(estimates))
        a.diversity_mem[b_id] = pseudo
        b.diversity_mem[a_id] = pseudo
        self.trace.append(
            {"type": "ranging", "a": a_id, "b": b_id,
             "pseudo_range_ps": pseudo, "kept": len(estimates), "reps": reps}
        )
        return pseudo

    def _receive_at_abs(
        self,
        rx_id: str,
        window_abs_ps: float,
        window_start_local_ps: float,
        window_len_samples: int,
        tx_events: list[tuple[str, float]],
        phase: int,
    ) -> dict[str, tuple[corr.PeakReport, float]]:
        """Receive with the window pinned at an absolute instant.

        Used for the ranging initiator whose timer was just reset: its
        window starts at the reset instant (local 0) regardless of the
        engine clock state.
        """
        sp = self.wave.sample_period_ps
        buf = np.zeros(window_len_samples, dtype=np.float64)
        noise_std = 0.0
        for tx_id, tx_abs in tx_events:
            link = self.links[(rx_id, tx_id)]
            ch.place_taps(self.wave, link, tx_abs, window_abs_ps, window_len_samples, out=buf)
            noise_std = max(noise_std, ch.noise_std_for_link(self.wave, link))
        if noise_std > 0.0:
            buf += self._chan_rng(rx_id, tx_events[0][0], phase).normal(
                0.0, noise_std, size=window_len_samples
            )
        full_scale = float(np.max(np.abs(buf)))
        if full_scale == 0.0:
            return {}
        codes = phy.quantize(buf, full_scale)
        branch_out = corr.ptt_correlate(codes, self.corr_cfg, self.template)
        report = corr.detect_peak(
            branch_out, self.threshold, self.cfg.peak_mode,
            self.cfg.guard_cycles, self.corr_cfg.s,
        )
        if not report.detected:
            return {}
        toa = corr.toa_from_peak(report, window_start_local_ps, self.corr_cfg)
        return {tx_events[0][0]: (report, toa)}

    def phase1_learn(self) -> dict[tuple[str, str], float]:
        """Deterministic sequential polling over all connected pairs."""
        learned = {}
        for i, a_id in enumerate(self.node_ids):
            for b_id in self.node_ids[i + 1 :]:
                if self.link_matrix.entries[self._idx(a_id), self._idx(b_id)]:
                    learned[(a_id, b_id)] = self.roundtrip_measure(a_id, b_id)
        for node in self.nodes.values():
            node.weights = {
                nbr: self._raw_weight(node.node_id, nbr) for nbr in self.neighbors(node.node_id)
            }
            missing = [n for n in self.neighbors(node.node_id) if n not in node.diversity_mem]
            if missing:
                raise RangingError(
                    f"{node.node_id} lacks pseudo-ranges for: {', '.join(missing)}"
                )
        return learned

    # -------------------------------------------------------------- Phase II

    def inject_offsets(
        self,
        offsets_ticks: dict[str, int] | None = None,
        random_bound_ticks: int = 0,
        randomize_fine: bool = True,
    ) -> None:
        """Define the Phase II cold-start state.

        Timers were reset freely during the roundtrip exchanges, so the
        handoff to the blinking cycles re-baselines every counter to a
        common epoch and then applies the configured per-node offsets
        (explicit values win over the random bound).  Masters stay exactly
        on the epoch; slave fine phases scatter uniformly over one tick,
        modeling the uncontrolled sub-tick transmit error.
        """
        tick = self.nodes[self.node_ids[0]].clock.tick_period_ps
        epoch_ticks = (
            max(int(self.nodes[nid].clock.read_local() // tick) for nid in self.node_ids)
            + 2
            + max(random_bound_ticks, 0)
        )
        for nid in self.node_ids:
            node = self.nodes[nid]
            node.clock.counter = epoch_ticks
            node.clock.fine_phase_ps = 0.0
            if node.is_master:
                continue
            if offsets_ticks is not None and nid in offsets_ticks:
                ticks = offsets_ticks[nid]
            elif random_bound_ticks:
                ticks = int(self._misc_rng.integers(-random_bound_ticks, random_bound_ticks + 1))
            else:
                ticks = 0
            if ticks:
                node.clock.apply_coarse_correction(ticks)
            if randomize_fine:
                node.clock.fine_phase_ps = float(
                    self._misc_rng.uniform(0.0, node.clock.tick_period_ps)
                )

    def start_phase2(self) -> None:
        """Anchor the common local slot schedule and the absolute barriers."""
        sched = self.schedule
        anchor = self.nodes[self._master_id()]
        margin = 2 * sched.slot_duration_ps
        latest = max(n.clock.read_local() for n in self.nodes.values())
        base = (
            math.ceil((latest + margin) / sched.slot_duration_ps)
            * sched.slot_duration_ps
        )
        self.phase2_local_base = float(base)
        t0 = self._abs_when_reads(anchor, base)
        self.advance_all(t0 - self.t_abs_ps)
        self.phase2_abs_start = self.t_abs_ps
        self.cycle = 0
        self.trace.append(
            {"type": "phase2_start", "t_abs_ps": self.t_abs_ps, "local_base_ps": base}
        )
        self._snapshot_sync()

    def _master_id(self) -> str:
        return next(nid for nid in self.node_ids if self.nodes[nid].is_master)

    def _snapshot_sync(self) -> None:
        ref = self.nodes[self._master_id()].clock.read_local()
        offsets = {
            nid: self.nodes[nid].clock.read_local() - ref
            for nid in self.node_ids
            if not self.nodes[nid].is_master
        }
        self.trace.append(
            {"type": "sync", "t_abs_ps": self.t_abs_ps, "offsets_ps": offsets}
        )

    def _slot_base_local(self, slot: int) -> float:
        assert self.phase2_local_base is not None, "start_phase2 first"
        pos = self.cycle * self.schedule.slots_per_cycle + slot
        return self.phase2_local_base + pos * self.schedule.slot_duration_ps

    def _advance_to_slot(self, slot: int) -> None:
        target_abs = self.phase2_abs_start + (
            (self.cycle * self.schedule.slots_per_cycle + slot)
            * self.schedule.slot_duration_ps
        )
        if target_abs > self.t_abs_ps:
            self.advance_all(target_abs - self.t_abs_ps)

    def _apply_correction(self, node: NodeState) -> dict | None:
        """Consensus correction from the freshest measurement per neighbor."""
        fresh = {
            nbr: t_rel
            for nbr, (t_rel, cyc) in node.last_meas.items()
            if self.cycle - cyc <= self.cfg.stale_limit_cycles
        }
        if not fresh:
            return None
        learned = {nbr: node.diversity_mem[nbr] for nbr in fresh}
        weights = {nbr: node.weights.get(nbr, 1.0) for nbr in fresh}
        t_o = consensus_offset(fresh, learned, weights)
        ticks = ticks_from_offset(t_o, node.clock.tick_period_ps)
        if ticks:
            node.clock.apply_coarse_correction(-ticks)
        if self.cfg.fine_correction:
            residual = t_o - ticks * node.clock.tick_period_ps
            node.tx_fine_shift_ps = (
                round_half_away(residual / FINE_SHIFT_QUANTUM_PS) * FINE_SHIFT_QUANTUM_PS
            )
        event = {
            "type": "correction",
            "cycle": self.cycle,
            "node": node.node_id,
            "t_o_ps": t_o,
            "ticks": ticks,
            "counter_after": node.clock.counter,
            "neighbors_used": sorted(fresh),
        }
        self.trace.append(event)
        return event

    def run_blink_cycle(self) -> list[dict]:
        """Execute the network slots of one blinking cycle.

        Per slot: advance to the barrier, correct the slot's transmitters
        (slaves only) from accumulated measurements, transmit, and let
        every linked listener measure.  Returns the correction events.
        """
        if self.phase2_local_base is None:
            raise RuntimeError("Phase II not started: call start_phase2() first")
        sched = self.schedule
        corrections: list[dict] = []

        for slot in range(sched.n_network_slots):
            self._advance_to_slot(slot)
            transmitters = [
                nid for nid in self.node_ids if self.nodes[nid].slot == slot
            ]
            for nid in transmitters:
                node = self.nodes[nid]
                if not node.is_master:
                    event = self._apply_correction(node)
                    if event is not None and event["ticks"] != 0:
                        corrections.append(event)
            self._snapshot_sync()

            slot_local = self._slot_base_local(slot)
            tx_local = slot_local + sched.tx_offset_ps
            tx_events_all = []
            for nid in transmitters:
                node = self.nodes[nid]
                tx_abs = self._abs_when_reads(node, tx_local) + node.tx_fine_shift_ps
                tx_events_all.append((nid, tx_abs))
                self.trace.append(
                    {"type": "tx", "cycle": self.cycle, "slot": slot,
                     "node": nid, "t_abs_ps": tx_abs}
                )

            window_local = tx_local - sched.rx_guard_ps
            window_len = sched.window_ps // self.wave.sample_period_ps
            for rx_id in self.node_ids:
                if rx_id in transmitters:
                    continue
                rx_events = [
                    (tx_id, tx_abs)
                    for tx_id, tx_abs in tx_events_all
                    if self.link_matrix.entries[self._idx(rx_id), self._idx(tx_id)]
                ]
                if not rx_events:
                    continue
                got = self._receive(rx_id, window_local, window_len, rx_events, phase=2)
                for tx_id, (report, toa) in got.items():
                    t_rel = toa - tx_local
                    self.nodes[rx_id].last_meas[tx_id] = (t_rel, self.cycle)
                    self.trace.append(
                        {"type": "rx", "cycle": self.cycle, "slot": slot,
                         "rx": rx_id, "tx": tx_id,
                         "coarse_cycle": report.coarse_cycle,
                         "branch": report.branch, "value": report.value,
                         "t_rel_ps": t_rel,
                         "delta_ps": t_rel - self.nodes[rx_id].diversity_mem[tx_id]}
                    )
        return corrections

    def measurement_slot(self, reference: str | None = None) -> dict[str, float]:
        """All nodes pulse at the same local-timer value; offsets vs reference.

        Returns each node's absolute emission time minus the reference's
        (a node whose timer runs ahead emits early, giving a negative
        offset).  Advances the engine to the end of the cycle.
        """
        if reference is not None and reference not in self.nodes:
            raise ValueError(f"reference node {reference!r} missing")
        sched = self.schedule
        self._advance_to_slot(sched.measurement_slot)
        self._snapshot_sync()
        emit_local = self._slot_base_local(sched.measurement_slot) + sched.tx_offset_ps
        emissions = {}
        for nid in self.node_ids:
            node = self.nodes[nid]
            emissions[nid] = self._abs_when_reads(node, emit_local) + node.tx_fine_shift_ps
        offsets = {}
        if reference is not None:
            ref_emit = emissions[reference]
            offsets = {nid: emissions[nid] - ref_emit for nid in self.node_ids}
            self.trace.append(
                {"type": "measurement", "cycle": self.cycle,
                 "reference": reference, "offsets_ps": offsets}
            )
        # advance through the measurement slot to the next cycle boundary
        self.cycle += 1
        self._advance_to_slot(0)
        return offsets

    def emission_times_abs(self, extra_local_offset_ps: float = 0.0) -> dict[str, float]:
        """Absolute times at which each node's timer reaches a common value.

        Helper for coherence experiments: the common target is the next
        schedulable instant (one slot ahead, plus any extra offset).
        """
        latest = max(self.nodes[nid].clock.read_local() for nid in self.node_ids)
        tick = self.nodes[self.node_ids[0]].clock.tick_period_ps
        target = (
            math.ceil((latest + self.schedule.slot_duration_ps) / tick) * tick
            + extra_local_offset_ps
        )
        return {
            nid: self._abs_when_reads(self.nodes[nid], target)
            + self.nodes[nid].tx_fine_shift_ps
            for nid in self.node_ids
        }
