"""Ambiguity-adaptive semi-supervised 3D segmentation lab."""

from .tensor import Tape, Tensor
from .network import NetworkOutput, forward, init_params, load_checkpoint, save_checkpoint
from .lowrank import LogitGaussian, build_distribution, sample_logits, supervised_loss_au
from .consistency import RampSchedule, aua_loss, gdice_distance, ged_consistency, ramp_weight
from .teacher import ema_update, perturb_input
from .contrastive import (ClassPrototype, bcl_loss, extract_boundary,
                          load_prototypes, pcl_loss, sample_boundary_pixels,
                          save_prototypes, update_prototypes)
from .metrics import dice, jaccard, surface_distances
from .data import VolumeSample, generate_synthetic, read_volume, write_volume
from .pipeline import (TrainConfig, estimate_prototypes, evaluate,
                       generate_pseudo_labels, train_stage1, train_stage2)

__version__ = "0.1.0"
