"""Semantic-attention masked image modeling for 3D volumes, at desk scale."""
__version__ = "0.1.0"

from .errors import (ConfigError, CorruptCheckpointError, FormatError, NumericError, PlacementError,
                     ShapeError, SmartError, ValidationError)
from .masking import (MaskingConfig, MaskStrategy, MaskVector, TokenGrid, apply_mask,
                      attention_guided_mask, blockwise_mask, pack_mask, patch_dropout, patchify,
                      random_mask, unpack_mask)
from .model import ModelConfig, SmartNet, forward_encoder, semantic_attention
from .distill import (LossWeights, SharpenConfig, aitd_loss, amip_loss, ampd_loss, ema_update, gitd_loss,
                      momentum_schedule, sharpen, total_loss, update_center)
from .phantoms import PhantomSpec, VolumeSample, generate_phantom, ingest_volume, phantom_set, sample_views
from .config import TrainConfig, dump_config, parse_config
from .train import Pretrainer, StepRecord, load_encoder
