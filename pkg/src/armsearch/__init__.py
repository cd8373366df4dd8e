"""Person search with an attention-aware relation mixer (ARM) on a small
numpy autograd engine, plus a synthetic-scene workbench."""
from .arm import ArmConfig, ArmParams, UsageError, ablation_variant, arm_forward, spatio_channel_attention
from .boxes import Box, Detection, assign_targets, iou, nms
from .checkpoint import ChecksumError, CheckpointError
from .config import RunConfig, load_config
from .gradcheck import GradCheckReport, grad_check
from .metrics import MetricsReport, QueryCase, evaluate, query_ap
from .model import ModelConfig, NonFiniteLoss, PersonSearchModel
from .oim import OimState, oim_loss
from .optim import SgdConfig, sgd_step
from .roi import roi_align
from .synth import Scene, SynthConfig, make_splits, render_scene
from .tensor import ContractError, DimensionError, Tensor, no_grad, precision

__version__ = "0.1.0"
