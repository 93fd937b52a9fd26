"""Retinal vessel segmentation with uncertainty-weighted dual objectives,
distance-transform vessel weight maps, and improved localization connections.
"""

from .datasets import (FoldSplit, FundusSample, PatchBatch, attach_weight_map,
                       class_balance_weights, load_dataset, make_batch,
                       make_splits, sample_patches, split_samples)
from .evaluation import (AblationRow, MetricsReport, compute_metrics,
                         infer_full_image, pooled_metrics,
                         probability_difference_map, roc_auc, run_ablation)
from .lerf import (LayerRF, LayerSpec, VesselWidthStats, gradient_rf_footprint,
                   receptive_fields, select_preeminent_layer, target_stage,
                   vessel_pixel_widths, vessel_width_stats)
from .network import (DualOutput, NetworkSpec, VesselNet, build_network,
                      count_parameters, ilc_extra_parameters)
from .synthetic import make_synthetic_dataset, synthetic_sample
from .training import (TrainConfig, fit, load_checkpoint, load_config, lr_at,
                       restore, save_config, train_step)
from .uncertainty import (LossBreakdown, UncertaintyParams, approximation_gap,
                          combined_loss, scaled_softmax, single_objective_loss,
                          static_combined_loss)
from .weightmap import compute_weight_map, distance_transform, weighted_cross_entropy

__version__ = "0.1.0"
