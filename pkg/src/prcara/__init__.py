"""Discrete-time C-V2X sidelink simulator with sensing-based and
proactive-RSSI resource allocation."""

from .channel import (
    ChannelParams,
    FastFading,
    LinkBudget,
    PowerLaw,
    WinnerB1Los,
    noise_power_dbm,
    pathloss_gain,
    sample_channel_gain,
    sinr_linear,
)
from .config import DecodeThresholds, RunConfig, load_config, save_config
from .engine import (
    Outcome,
    RunMetrics,
    TxRecord,
    compute_ipg,
    compute_reliability,
    run_monte_carlo,
    run_replica,
)
from .estimator import (
    AdamState,
    EstimatorNet,
    TrainConfig,
    TrainingSample,
    adam_step,
    forward,
    generate_dataset,
    load_weights,
    loss_and_gradient,
    save_weights,
    train,
)
from .grid import (
    ResourceGrid,
    ResourceIndex,
    SelectionSubset,
    assert_single_allocation,
    selection_subset,
    selection_window,
)
from .scenario import (
    EventFsm,
    Scenario,
    TrafficMode,
    Vehicle,
    generate_highway,
    ingest_trace,
    step_event_fsm,
)
from .schedulers import (
    ProactiveView,
    SchedulerKind,
    SpsState,
    ext_sci_avoid_select,
    min_rssi_select,
    pr_cara_select,
    sb_ds_select,
    sb_sps_select,
)
from .sci import ExtendedSci, decode_sci, encode_sci, reservation_of
from .sensing import CsrList, SensingMatrix, average_per_csr, build_csr, record_rssi

__version__ = "0.1.0"

__all__ = [
    "AdamState",
    "ChannelParams",
    "CsrList",
    "DecodeThresholds",
    "EstimatorNet",
    "EventFsm",
    "ExtendedSci",
    "FastFading",
    "LinkBudget",
    "Outcome",
    "PowerLaw",
    "ProactiveView",
    "ResourceGrid",
    "ResourceIndex",
    "RunConfig",
    "RunMetrics",
    "Scenario",
    "SchedulerKind",
    "SelectionSubset",
    "SensingMatrix",
    "SpsState",
    "TrafficMode",
    "TrainConfig",
    "TrainingSample",
    "TxRecord",
    "Vehicle",
    "WinnerB1Los",
    "adam_step",
    "assert_single_allocation",
    "average_per_csr",
    "build_csr",
    "compute_ipg",
    "compute_reliability",
    "decode_sci",
    "encode_sci",
    "ext_sci_avoid_select",
    "forward",
    "generate_dataset",
    "generate_highway",
    "ingest_trace",
    "load_config",
    "load_weights",
    "loss_and_gradient",
    "min_rssi_select",
    "noise_power_dbm",
    "pathloss_gain",
    "pr_cara_select",
    "record_rssi",
    "reservation_of",
    "run_monte_carlo",
    "run_replica",
    "sample_channel_gain",
    "save_config",
    "save_weights",
    "sb_ds_select",
    "sb_sps_select",
    "selection_subset",
    "selection_window",
    "sinr_linear",
    "step_event_fsm",
    "train",
]
