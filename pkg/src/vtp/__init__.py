"""vtp: joint contrastive / self-supervised / reconstruction pre-training for
ViT image tokenizers, plus a fixed diffusion harness that scores tokenizers by
the quality of what a small latent generator learns on top of them."""

__version__ = "0.1.0"

from .model import (  # noqa: F401
    EmaTeacher,
    LatentGrid,
    ModelConfig,
    TokenizerModel,
    build_model,
    count_flops,
    count_params,
    ema_update,
)
from .losses import (  # noqa: F401
    DinoState,
    LossReport,
    LossWeights,
    PatchDiscriminator,
    PerceptualNet,
    clip_loss,
    dino_loss,
    gan_losses,
    mim_loss,
    rec_loss,
    total_loss,
)
from .data import SynthDataset, Vocab, build_vocab, synth_dataset  # noqa: F401
from .trainer import RunState, TrainConfig, Trainer, load_tokenizer  # noqa: F401
from .evaluation import (  # noqa: F401
    FeatureExtractor,
    MetricsRecord,
    compute_metrics,
    frechet,
    linear_probe,
    psnr,
    train_feature_extractor,
    zero_shot,
)
from .genharness import DiT, DiTConfig, build_dit, rf_loss, sample, train_and_score  # noqa: F401
from .sweep import SweepSpec, run_sweep  # noqa: F401

# report pulls in matplotlib; import it explicitly via vtp.report when needed
