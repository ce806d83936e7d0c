"""Causal self-supervised frontend pretraining on speech mixtures, with a
causal mask-based separator, evaluation metrics, and streaming profiling."""

__version__ = "0.1.0"

from .data_sim import Manifest, MixtureExample, Waveform, build_manifest, crop_batch, simulate_mixture
from .frontend import CspFrontend, FrameSequence, FrontendConfig, MaskPlan, apply_mask, sample_mask_plan
from .pretext import LossReport, bu_loss, ckd_loss, csp_loss, fit_teacher_centroids, info_nce, sample_negatives, td_loss
from .quantizer import CodebookSet, QuantizeResult, anneal_temperature, diversity_loss, quantize
from .separation import SeparationPipeline, SeparatorConfig, SeparatorModel, StreamingSeparator, pit_loss, train_separator
from .trainer import Checkpoint, PretrainConfig, lr_schedule, pretrain
from .evaluation import DiscreteJoint, ProfileReport, count_macs, evaluate_set, histogram, mi_bound_check, profile_streaming, si_sdr
