"""Calibration study toolkit for fine-tuned masked language models.

Pre-trains a small transformer MLM on synthetic multi-domain text,
fine-tunes it under eight method variants, measures confidence
calibration in and out of domain, and generates label-conditioned
sequences by iterative mask filling with rejection.
"""

from .calibration import (
    BinStats,
    CalibrationReport,
    Histogram,
    PredictionRecord,
    compute_ece,
    confidence_histogram,
    mlm_calibration_eval,
    reliability_bins,
    track_confidence,
)
from .config import ExperimentConfig, load_preset, preset_names
from .corpus import (
    Domain,
    LabeledExample,
    MaskedBatch,
    SyntheticTaskSpec,
    TokenSequence,
    Vocabulary,
    build_vocabulary,
    corrupt_joint,
    corrupt_pretrain,
    generate_corpus,
    generate_labeled,
    oracle_label,
)
from .errors import ConfigurationError, SamplingFailure
from .model import (
    EncoderConfig,
    ParameterStore,
    dump_representations,
    encode,
    init_params,
    load_checkpoint,
    mlm_logits,
    save_checkpoint,
    snapshot_pretrained,
)
from .objectives import LossValue, loss_cls, loss_joint, loss_kd_mlm, loss_mlm
from .peft import attach_adapter, attach_lora, attach_prefix
from .sampler import SamplerConfig, mask_predict_sample, mask_schedule
from .seeding import derive_seed
from .tuning import (
    FinetuneData,
    Method,
    MethodConfig,
    PretrainConfig,
    mixout_apply,
    pretrain_mlm,
    train,
)

__version__ = "0.1.0"
