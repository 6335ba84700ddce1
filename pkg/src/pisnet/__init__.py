"""Query-guided attention for person re-identification on multi-person gallery crops."""
from .errors import *  # noqa: F401,F403
from .model_core import (
    QGAB, Backbone, BackboneConfig, BoxLayout, PersonBox, PISNet, backbone_forward, embed,
    feature_corrupt, gram_forward, qgab_forward,
)
from .losses import LossWeights, id_loss, mps_loss, total_loss
from .data_pipeline import (
    DatasetManifest, SynthConfig, build_batch, extract_layout, ingest_reid_dir, read_manifest,
    synthesize, validate_pi_criteria, write_dataset,
)
from .training import TrainConfig, load_checkpoint, pretrain_backbone, save_checkpoint, train_qgab
from .evaluation import (
    VARIANTS, ablation_run, compute_cmc, compute_map, evaluate, pairwise_score, rank_gallery, sweep,
)

__version__ = "0.1.0"
