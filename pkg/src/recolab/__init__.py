"""Desk-scale laboratory for regional-contrast semi-supervised segmentation."""

from .core import (ClassMean, DenseRepresentation, KeyPool, LossConfig, QueryBundle,
                   RelationGraph, class_mean, negative_class_distribution,
                   normalize_pixels, reco_loss, relation_graph)
from .sampling import (PixelCandidateSet, SamplerConfig, gate_pseudo_pixels,
                       sample_negative_keys, sample_queries, split_easy_hard)
from .model import (ModelConfig, OptimConfig, TeacherState, backward,
                    confidence_and_pseudo, ema_update, forward, init_params,
                    load_checkpoint, poly_lr, save_checkpoint, sgd_step)
from .trainer import (LossBreakdown, TrainConfig, Trainer, TrainerState, compute_eta,
                      cross_entropy, semi_supervised_step, supervised_step)
from .data import (PartitionSpec, SynthSpec, classmix, cutmix, cutout,
                   generate_synthetic, partition_pdfl, partition_plfd)
from .evaluate import ConfusionMatrix, class_embeddings, dendrogram, mean_iou

__version__ = "0.1.0"
