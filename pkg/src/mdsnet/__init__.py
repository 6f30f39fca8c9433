"""Stack-based multi-view pancreas segmentation on numpy.

The pieces compose left to right: ``volume`` cuts volumes into stacks and
views, ``unet`` segments stacks under the ``loss`` energy, ``biclstm`` refines
the fused probability volume along the slice axis, ``metrics`` scores it, and
``training`` and ``experiments`` tie them into runs.
"""
from .biclstm import BiCLSTM, RefinerConfig, refine_volume, train_refiner
from .loss import LossWeights, loss_gradient, stack_loss, total_loss
from .metrics import MetricReport, evaluate_case, fuse_maps, fuse_views
from .training import Case, MDSNet, TrainConfig, evaluate, fit, phantom_cases, predict, run_pipeline
from .unet import StackUNet, UNetConfig
from .volume import Volume, generate_phantom, load_volume, plan_stacks, save_volume

__version__ = "0.1.0"
