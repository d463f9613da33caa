"""Out-of-distribution detection that scores foreground semantics and
background domain separately, on a synthetic shapes-on-textures benchmark."""

from .config import RunConfig, load_config
from .data_synth import DatasetSpec, gen_id_dataset, gen_ood_dataset, render_example
from .metrics import aupr, auroc, detect, fpr_at_tpr, histogram, top1_accuracy
from .model import (DualHeadModel, TrainConfig, convert_dense_to_classifier, load_checkpoint,
                    pixel_ce_loss, save_checkpoint, train_classifier, train_dense)
from .pseudo_mask import MaskConfig, generate_pseudo_masks, mask_iou, multiscale_cam
from .scoring import (FusionConfig, ScorerSpec, domain_score, energy, fit_vim, fuse, maxlogit,
                      msp, odin, semantic_logits, vim_score)

__version__ = "0.1.0"
