"""Output-code classification toolkit: codebooks, soft-Hamming decoding,
bit-level pseudo-label denoising, code-space losses, and a desk-scale
teacher-student noise-robustness simulator."""

from .codebook import (
    Codebook,
    CodebookError,
    EmbeddingTable,
    SeparationStats,
    generate_mmd,
    generate_text,
    load,
    one_hot,
    read_embeddings,
    save,
    separation_stats,
    theorem2_threshold,
    validate,
)
from .decoding import (
    DecodeResult,
    bit_confidence,
    decode,
    decode_batch,
    pixel_confidence,
    sigmoid,
    soft_hamming,
)
from .losses import LossConfig, LossValue, bce_loss, ce_loss, finite_diff_check, pcc_loss, pcd_loss, total_loss
from .metrics import CalibSamples, ReliabilityBins, bit_level_samples, ece, reliability_bins, topc_accuracy
from .pseudolabel import (
    PseudoCode,
    bitwise_label,
    codewise_label,
    distinct_part,
    hybrid_label,
    image_quality_weight,
    mine_reliable_bits,
    shared_part,
    threshold_filter,
)
from .simulator import (
    LinearBitModel,
    SyntheticTask,
    TaskConfig,
    TrainConfig,
    TrainingDiverged,
    compare_ecoc_vs_onehot,
    evaluate,
    exact_bit_noise,
    inject_uniform_label_noise,
    make_task,
    train_pseudo_label,
    train_supervised,
)

__version__ = "0.1.0"
