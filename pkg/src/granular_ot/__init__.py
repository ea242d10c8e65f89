"""Few-shot slide classification by optimal transport between multi-granular
visual prompts and learnable text prompts, on a numpy reverse-mode tape."""

from .autodiff import GradTape, Tensor, backward, check_gradients
from .classifier import FoldMetrics, MetricsReport, class_probabilities, compute_metrics, cross_entropy_loss
from .errors import ConfigError, DataError, DivergenceError, FormatError, GranularOTError, InputError
from .gat import GatParams, gat_forward
from .graph import SpatialGraph, build_grid_graph, build_knn_graph
from .model import ModelConfig, SlideModel, forward_slide
from .ot import SinkhornConfig, TransportPlan, cost_matrix, exact_ot_uniform, ot_distance, sinkhorn, solve, unbalanced_sinkhorn
from .prompts import FusionConfig, TextPromptSet, encode_text_prompts, fuse, group_prompting, patch_prompting
from .synthetic import GeneratorConfig, PatchBag, generate_dataset, read_dataset, write_dataset
from .trainer import Checkpoint, TrainConfig, evaluate, load_checkpoint, save_checkpoint, train

__version__ = "0.1.0"
