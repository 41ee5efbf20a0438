"""Variant assembly, parameter accounting, attention-map export and checkpoints."""
from .accounting import closed_form_parameters, count_parameters, transformer_parameters
from .network import VARIANTS, ConfigError, Model, ModelConfig, build_model, model_forward, predict
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .export import (
    UnsupportedVariantError,
    export_attention_maps,
    normalize_map,
    read_pgm,
    write_attention_maps,
    write_pgm,
)
