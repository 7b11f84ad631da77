"""Two-branch real-time semantic segmentation in pure numpy.

The package builds the network as an explicit layer graph, trains it with a
hand-rolled reverse-mode autodiff engine, and ships the supporting pieces a
segmentation experiment needs: synthetic data, mIoU scoring, l1 filter
pruning, BN folding, profiling and a CLI.
"""

__version__ = "0.1.0"

from .architecture import (ContextNetConfig, build_context_branch,
                           build_contextnet, build_detail_branch, count_flops,
                           count_params, fold_batch_norm, scaled_width,
                           variant_config)
from .autodiff import (backward, contextnet_loss, cross_entropy, forward,
                       grad_check, poly_lr, rmsprop_step)
from .checkpoint import load_checkpoint, save_checkpoint, save_graph_params
from .data import (compute_miou, generate_synthetic_dataset, load_dataset,
                   save_dataset)
from .errors import (CheckpointError, ConfigError, ContextNetError, DataError,
                     GraphError, NumericsError, ShapeError)
from .graphdef import GraphBuilder, GraphSpec, LayerSpec, ParamSpec, init_params
from .pruning import (FilterRank, PruneSchedule, coupling_groups,
                      progressive_prune, prune_filters, rank_filters_l1)
from .train import TrainConfig, evaluate, evaluate_ensemble, train
