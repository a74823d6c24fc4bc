"""Prioritized node-wise message propagation for graph neural networks."""

from .autodiff import Tape, Tensor, backward, nll_per_node
from .backbone import (BackboneConfig, PropagationTrace, encode,
                       init_backbone_params, predict, project_logits,
                       propagate_step, run)
from .controllers import (ControllerConfig, break_loss, break_probability,
                          decide_break_steps, decide_update_steps,
                          init_controller_params, merged_loss,
                          priority_weight, update_loss, update_probability,
                          weight_objective)
from .data import (DatasetBundle, Labels, SbmSpec, SplitMasks, edge_homophily,
                   generate_sbm, load_dataset, save_dataset)
from .errors import ConfigError, InputError, NumericalError, ShapeError
from .graph import (Graph, NormalizedAdjacency, build_graph, degrees,
                    normalize, read_edge_list, spmm, to_dense, write_edge_list)
from .optim import (AdamState, adam_step, grad_check, load_checkpoint,
                    save_checkpoint)
from .priority import (PriorityFeatures, build_priority, degree_centrality,
                       eigenvector_centrality, heterophily_degree)
from .trainer import (TrainConfig, Trainer, TrainReport, grid_search,
                      write_weights_steps_tsv)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
