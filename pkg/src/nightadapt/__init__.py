"""One-stage day-to-night domain adaptation for semantic segmentation."""

from .core import (Config, ConfigError, DegenerateInputError, IGNORE_INDEX,
                   LabelSet, ShapeError, load_config, validate_config)
from .relight import (RelightNet, LightLossTerms, exposure_loss, light_loss,
                      ssim_loss, tv_loss)
from .segmentation import SegNet, weighted_ce
from .reweight import (clamp_absent_proportions, normalize_weights,
                       raw_class_weights, reweighted_argmax)
from .static_supervision import (local_match_prob, make_pseudo_label,
                                 restrict_to_static, static_loss,
                                 static_loss_ce, static_loss_focal)
from .adversarial import Discriminator, disc_loss, disc_output_size, gen_adv_loss
from .evaluation import (confusion_matrix, evaluate_dataset,
                         iou_from_confusion)
from .data import (DatasetIndex, PairedSample, class_proportions,
                   load_labeled_index, load_paired_index, synth_generate,
                   synthetic_label_set)
from .trainer import (augment_sample, discriminator_step, generator_losses,
                      generator_step, poly_lr, pretrain_source, run_training)
from .checkpoint import load_checkpoint, restore_networks, save_checkpoint

__version__ = "0.1.0"
