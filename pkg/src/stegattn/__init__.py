"""Attention-based steganalysis of QIM steganography in compressed-speech
quantization-index streams, with a synthetic data pipeline for end-to-end
detect/train/benchmark experiments."""

__version__ = "0.1.0"

from .qis import (
    COVER,
    STEGO,
    CodecShape,
    Corpus,
    CoverModel,
    EmptySample,
    FormatError,
    IndexOutOfRange,
    QisError,
    QisSample,
    SampleMeta,
    ShapeMismatch,
    StreamTooShort,
    generate_cover,
    generate_cover_corpus,
    read_corpus,
    sample_cover_model,
    slide_windows,
    validate_sample,
    write_corpus,
)
from .qim import (
    BitExhaustion,
    Codebook,
    Partition,
    StegoConfig,
    build_partition,
    default_codebooks,
    embed_bits,
    extract_bits,
    make_stego_corpus,
    read_sidecar,
    requant_maps,
    synth_codebook,
    write_sidecar,
)
from .model import (
    ForwardCache,
    Gradients,
    ModelConfig,
    ModelParams,
    NonFiniteActivation,
    NonFiniteGradient,
    attention_head,
    backward,
    batch_loss_and_grads,
    forward,
    init_params,
    load_checkpoint,
    positional_encoding,
    predict,
    predict_batch,
    save_checkpoint,
)
from .gradcheck import GradCheckReport, grad_check, grad_check_many, small_check_config
from .training import (
    AdamConfig,
    CellResult,
    DivergenceDetected,
    EarlyStopConfig,
    EvalResult,
    ExperimentGrid,
    LatencyStat,
    NonFiniteUpdate,
    ResultTable,
    TrainConfig,
    TrainHistory,
    bench_inference,
    evaluate,
    merge_corpora,
    run_sweep,
    split_pair,
    train,
    trend_violations,
)

__all__ = [name for name in dir() if not name.startswith("_")]
