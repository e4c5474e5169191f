"""Progressive region enhancement network for fine-grained food recognition."""

from .backbone import (BackboneSpec, StageFeatureMap, create_backbone,
                       register_backbone, registered_backbones)
from .config import AttentionConfig, AugmentConfig, ConfigError, RunConfig
from .data import (DatasetManifest, ManifestEntry, SplitManifest, augment_train,
                   build_manifest, make_batches, preprocess_eval, split_manifest)
from .evaluation import (CombinedPrediction, MetricsReport, evaluate, predict,
                         stage_heatmaps, topk_accuracy)
from .losses import (LossReport, LossWeights, concat_ce, pairwise_kl, stage_ce,
                     total_loss)
from .model import (ForwardOutputs, PRENet, RegionEnhance, StageBundle,
                    StageNeck, fuse, global_descriptor, global_max_pool)
from .training import (BatchReport, ProgressiveSchedule, TrainingLog, fit,
                       load_checkpoint, load_model, lr_at, make_schedule,
                       save_checkpoint, train_batch)

__version__ = "0.1.0"
