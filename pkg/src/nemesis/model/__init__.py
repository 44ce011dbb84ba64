from .checkpoint import checkpoint_bytes, load_checkpoint, parse_checkpoint, save_checkpoint
from .masking import (MaskSpec, column_tokens, full_visible, gen_mask, mask_budget,
                      plane_tokens, stream_masks)
from .network import (ModelConfig, ModelParams, Reconstruction, attention, compose, decode,
                      embed_patches, encode, init_params, masked_mse, matb_block,
                      mean_predictor_volume, param_shapes, reconstruct_volume,
                      reconstruction_loss, sab_block)
