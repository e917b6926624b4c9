"""blinksim: cycle-accurate simulator for consensus-based UWB network
timing synchronization.

The package models drifting node clocks, sample-level UWB timing signals,
a quantized parallel correlator, and tiered TDMA blinking cycles with
consensus corrections, reproducing desk-scale offset/jitter statistics
and convergence behavior.
"""

from .timebase import LocalClock, OscillatorModel
from .phy import (
    MSequence,
    QuantizedTemplate,
    SampledWaveform,
    gen_msequence,
    make_template,
    modulate,
    monocycle,
    quantize,
)
from .channel import (
    LinkMatrix,
    LinkParams,
    apply_channel,
    build_link_matrix,
    nlos_link,
    propagation_delay,
)
from .correlator import (
    CorrelatorConfig,
    PeakReport,
    detect_peak,
    direct_correlate,
    ptt_correlate,
    toa_from_peak,
)
from .protocol import (
    BlinkNetwork,
    EngineConfig,
    NodeState,
    TdmaSchedule,
    assign_tiers,
    consensus_offset,
    ticks_from_offset,
)
from .simkit import (
    BeamformResult,
    LinkSpec,
    NodeSpec,
    OffsetStats,
    ScenarioConfig,
    ScenarioResult,
    ScheduleSpec,
    beamform_gain_from_offsets,
    beamform_sum,
    convergence_time,
    load_scenario,
    offset_statistics,
    preset_scenario,
    run_scenario,
    save_scenario,
    validate_scenario,
)

__version__ = "0.1.0"

__all__ = [
    "LocalClock",
    "OscillatorModel",
    "MSequence",
    "QuantizedTemplate",
    "SampledWaveform",
    "gen_msequence",
    "make_template",
    "modulate",
    "monocycle",
    "quantize",
    "LinkMatrix",
    "LinkParams",
    "apply_channel",
    "build_link_matrix",
    "nlos_link",
    "propagation_delay",
    "CorrelatorConfig",
    "PeakReport",
    "detect_peak",
    "direct_correlate",
    "ptt_correlate",
    "toa_from_peak",
    "BlinkNetwork",
    "EngineConfig",
    "NodeState",
    "TdmaSchedule",
    "assign_tiers",
    "consensus_offset",
    "ticks_from_offset",
    "BeamformResult",
    "LinkSpec",
    "NodeSpec",
    "OffsetStats",
    "ScenarioConfig",
    "ScenarioResult",
    "ScheduleSpec",
    "beamform_gain_from_offsets",
    "beamform_sum",
    "convergence_time",
    "load_scenario",
    "offset_statistics",
    "preset_scenario",
    "run_scenario",
    "save_scenario",
    "validate_scenario",
]
