"""JSON config surface: schema validation with helpful errors plus the defaults
dump behind `vtp config --print-defaults`."""

import json

import jsonschema

from .trainer import TrainConfig

_NUM = {"type": "number"}
_INT = {"type": "integer"}
_BOOL = {"type": "boolean"}

MODEL_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "patch_size": _INT, "latent_dim": _INT, "image_size": _INT,
        "encoder_depth": _INT, "encoder_width": _INT, "encoder_heads": _INT,
        "decoder_blocks": _INT, "decoder_width": _INT, "decoder_heads": _INT,
        "text_depth": _INT, "text_width": _INT, "text_heads": _INT,
        "text_max_len": _INT, "vocab_size": _INT, "dino_prototypes": _INT,
        "dino_hidden": _INT, "clip_embed_dim": _INT, "use_qknorm": _BOOL,
        "heads_from_bottleneck": _BOOL,
    },
}

WEIGHTS_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "lambda_rec": {"type": "number", "minimum": 0},
        "lambda_ssl": {"type": "number", "minimum": 0},
        "lambda_clip": {"type": "number", "minimum": 0},
    },
}

DATASET_SCHEMA = {
    "type": "object",
    "properties": {
        "kind": {"enum": ["synth", "folder"]},
        "seed": _INT, "n": _INT, "num_classes": _INT, "image_size": _INT,
        "variant": {"enum": ["plain", "rich"]},
        "path": {"type": "string"}, "grammar_version": _INT,
    },
    "required": ["kind"],
}

TRAIN_SCHEMA = {
    "type": "object",
    "additionalProperties": False,
    "properties": {
        "model": MODEL_SCHEMA,
        "weights": WEIGHTS_SCHEMA,
        "enable_clip": _BOOL, "enable_ssl": _BOOL, "enable_rec": _BOOL,
        "batch_size": _INT, "batch_ssl": _INT, "batch_rec": _INT,
        "total_samples": _INT, "total_flops": _INT,
        "lr_peak": _NUM, "lr_floor": _NUM, "warmup_frac": _NUM,
        "weight_decay": _NUM,
        "ema_start": _NUM, "ema_end": _NUM,
        "teacher_temp_start": _NUM, "teacher_temp_end": _NUM,
        "temp_warmup_frac": _NUM, "student_temp": _NUM, "center_momentum": _NUM,
        "mask_ratio": _NUM, "local_views": _INT, "augment": _BOOL,
        "dataset": DATASET_SCHEMA,
        "seed": _INT, "stage": {"enum": ["pretrain", "gan_finetune"]},
        "eval_every": _INT, "log_every": _INT, "checkpoint_every": _INT,
        "disc_base": _INT, "disc_lr": _NUM,
    },
}


def validate_train_config(doc: dict) -> TrainConfig:
    """Schema-check a JSON document, then build and semantically validate the
    TrainConfig (defaults fill everything the document omits)."""
    try:
        jsonschema.validate(doc, TRAIN_SCHEMA)
    except jsonschema.ValidationError as e:
        path = "/".join(str(p) for p in e.absolute_path) or "<root>"
        raise ValueError(f"config invalid at {path}: {e.message}") from None
    return TrainConfig.from_dict(doc).validate()


def load_train_config(path: str) -> TrainConfig:
    with open(path) as fh:
        return validate_train_config(json.load(fh))


def default_config_json() -> str:
    return json.dumps(TrainConfig().to_dict(), indent=2)
