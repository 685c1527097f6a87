"""Divided-view position-embedding 3D detection on a synthetic camera rig.

The package splits into the geometry/partition substrate (`geom`,
`partition`), a small reverse-mode autodiff engine (`autodiff`), the
model proper (`dvpe`, `attention`, `memory`, `model`), training pieces
(`assign`, `train`, `checkpoint`), and the synthetic scene simulator with
metrics and benchmarks (`simeval`).
"""

from .assign import (Assignment, CostMatrix, LossBreakdown, LossWeights,
                     detection_loss, hungarian, one_to_many_assign, pairwise_cost)
from .attention import (AttnBlockParams, MhaParams, masked_mha,
                        oracle_global_attention, temporal_attention,
                        visibility_cross_attention)
from .autodiff import MlpParams, Tensor, grad_check, mlp_apply, sincos_encode
from .dvpe import DvpeParams, NormRange, VirtualCoords, encode_key_pe, encode_query_pe, to_virtual
from .geom import (CameraModel, RayGrid, apply_homogeneous, discretize_rays,
                   discretize_rig, invert_homogeneous, make_camera,
                   make_homogeneous, make_rotation_z, wrap_angle)
from .memory import (MemoryEntry, MemoryQueue, MemoryView, ego_compensate,
                     encode_roi, push_frame, topk_select)
from .model import (LocalBox, ModelConfig, ModelParams, WorldBox, decoder_forward,
                    init_model, init_reference_points, local_head, local_to_world,
                    world_to_local)
from .partition import (PartitionConfig, ViewPartition, gather_pad, group_index,
                        partition_items, scatter_unpad, shift_schedule)
from .simeval import (GTBox, MetricsReport, Proposal, Scene, SceneConfig,
                      bench_attention, evaluate, generate_scene,
                      oracle_2d_proposals, render_features, scene_from_text,
                      scene_to_text)
from .train import OptimConfig, Optimizer, RunConfig, parse_run_config, train

__version__ = "0.1.0"
