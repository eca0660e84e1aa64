import numpy as np
import pytest
import torch

from vtp.model import ModelConfig, build_model

torch.set_num_threads(1)


def tiny_model_config(**over):
    base = dict(
        image_size=16, patch_size=8, latent_dim=4,
        encoder_width=16, encoder_depth=1, encoder_heads=2,
        decoder_width=16, decoder_blocks=1, decoder_heads=2,
        text_width=16, text_depth=1, text_heads=2, text_max_len=8,
        dino_prototypes=8, dino_hidden=8, clip_embed_dim=8,
    )
    base.update(over)
    return ModelConfig(**base)


def tiny_train_dict(**over):
    d = {
        "model": {
            "image_size": 16, "patch_size": 8, "latent_dim": 4,
            "encoder_width": 16, "encoder_depth": 1, "encoder_heads": 2,
            "decoder_width": 16, "decoder_blocks": 1, "decoder_heads": 2,
            "text_width": 16, "text_depth": 1, "text_heads": 2, "text_max_len": 8,
            "dino_prototypes": 8, "dino_hidden": 8, "clip_embed_dim": 8,
        },
        "batch_size": 4, "batch_ssl": 2, "batch_rec": 2,
        "total_samples": 16, "local_views": 2, "disc_base": 8,
        "dataset": {"kind": "synth", "seed": 3, "n": 16, "num_classes": 4,
                    "image_size": 16},
    }
    d.update(over)
    return d


@pytest.fixture(scope="session")
def tiny_cfg():
    return tiny_model_config()


@pytest.fixture(scope="session")
def tiny_model(tiny_cfg):
    # session-scoped: tests must treat it as read-only
    return build_model(tiny_cfg, seed=0)


@pytest.fixture()
def rng():
    return np.random.default_rng(0)


@pytest.fixture(scope="session")
def ext_cache(tmp_path_factory):
    """Shared feature-extractor cache so each tiny geometry trains once."""
    return str(tmp_path_factory.mktemp("extractor-cache"))


_REC_SEQ = [0]


def make_sweep_record(axis, axis_value, seed=0, objectives="ae",
                      linprobe=0.5, frechet_gen=100.0, psnr=20.0,
                      frechet_rec=50.0, zeroshot=0.1,
                      dit_sha="dit-aaa", extractor_sha="ext-bbb",
                      status="ok"):
    """Minimal registry record accepted by append_record and report()."""
    _REC_SEQ[0] += 1
    point_id = f"{axis}={axis_value}/{objectives}/seed{seed}"
    return {
        "record_version": 1,
        "point_id": point_id,
        "point_sha": f"sha-{_REC_SEQ[0]:06d}",
        "status": status,
        "axis": axis,
        "axis_value": axis_value,
        "objectives": objectives,
        "seed": seed,
        "flops": "1000",
        "params": 1234,
        "metrics": None if status != "ok" else {
            "psnr_mean": psnr, "frechet_rec": frechet_rec,
            "linprobe_acc": linprobe, "zeroshot_acc": zeroshot,
            "frechet_gen": frechet_gen,
        },
        "dit_sha": dit_sha,
        "extractor_sha": extractor_sha,
        "error": None if status == "ok" else "RuntimeError: boom",
    }
