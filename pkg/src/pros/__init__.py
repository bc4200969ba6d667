"""Two-stage prompt tuning over a frozen dual encoder for universal
cross-domain retrieval, with a synthetic desk-scale backend."""

from .backbone import BackboneConfig, PromptedSequence, SyntheticBackbone, build_backbone
from .caps import CaPSConfig, PromptSimulator, assemble_inference_input
from .errors import ConfigError, NumericError, PreconditionError, ProsError
from .prompts import MaskSpec, PromptBank, apply_mask, assemble_pul_input, build_mask
from .protocol import (ClassPartition, DatasetManifest, ProtocolSplit,
                       SyntheticDataConfig, build_split, generate_synthetic_dataset,
                       partition_classes)
from .retrieval import (EmbeddingGallery, RankedResult, evaluate_retrieval,
                        extract_features, map_all, map_at_k, prec_at_k, rank,
                        sigma_diagnostic)
from .training import (ProsModel, TrainConfig, align_loss, build_caption_bank,
                       build_model, csl_step, load_checkpoint, pul_step,
                       save_checkpoint, train_stage)

__version__ = "0.1.0"
