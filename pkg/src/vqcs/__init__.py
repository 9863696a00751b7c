"""Quantized compressed sensing lab.

A learned encoder-quantizer-decoder pipeline for compressing noisy
compressive measurements of sparse sources, trained end-to-end through a
soft-to-hard quantization layer, plus the classical compress-and-estimate
and estimate-and-compress baselines and a rate-distortion benchmark harness.
"""

from .errors import (
    ConfigurationError,
    DivergenceError,
    DomainError,
    ProtocolError,
    ShapeError,
    StateError,
)
from .signal_model import (
    Dataset,
    MeasurementModel,
    SparseSourceSpec,
    make_measurement_matrix,
    nmse_db,
    rate_bits,
    sample_dataset,
    sample_source,
)
from .quantizer import (
    ScalarQuantizer,
    VectorCodebook,
    lloyd_max_sq,
    lloyd_vq,
    sq_decode,
    sq_encode,
    uniform_sq,
    vq_quantize,
)
from .shq import (
    AnnealSchedule,
    ShqLayer,
    blend_at,
    build_quantizer,
    shifts_at,
    shq_backward,
    shq_forward,
    steepness_at,
)
from .nnet import (
    AdamState,
    FeedforwardNet,
    GradientSet,
    LayerTrace,
    adam_step,
    backprop,
    forward,
    init_net,
)
from .trainer import (
    DeepVqcsModel,
    TrainConfig,
    TrainReport,
    compress,
    load_checkpoint,
    reconstruct,
    save_checkpoint,
    train,
    validate_hard,
)
from .baselines import (
    BpdnProblem,
    CePipelineSpec,
    bpdn,
    mmse_exhaustive,
    omp,
    run_ce_baseline,
    run_ec_vq,
)

__version__ = "0.1.0"
