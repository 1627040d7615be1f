"""LIEC-SGD and error-feedback baselines on a simulated parameter server."""
from .algorithms import (
    ALGORITHMS,
    RunResult,
    ScheduleSpec,
    ServerState,
    VirtualSequence,
    WorkerState,
    corollary1_lr,
    doublesqueeze_iteration,
    liec_iteration,
    memsgd_iteration,
    psgd_iteration,
    run,
    virtual_check,
)
from .compressors import CompressorSpec, Dense, SignScale, Sparse, decompress, measure_delta
from .config import ExperimentConfig, load_config, parse_config
from .harness import Channel, IterationRecord, decode, encode, frame_length, metrics_flush
from .numerics import RngStream, axpy, mean_reduce, sq_norm
from .problems import fd_gradient, full_grad, make_logistic, make_quadratic, stoch_grad

__version__ = "0.1.0"
