"""Backdoor sharpness analysis and Fisher-guided purification for small numpy MLPs."""

from .data import LabeledDataset, PoisonPlan, TriggerSpec, gen_synthetic, load_idx, poison, poisoned_test_set, save_idx, split
from .errors import FipLabError
from .ffip import ffip_purify
from .fip import FipConfig, fip_purify
from .fisher import fim_diag, grad_trace_fim, trace_fim
from .nn import Batch, MlpModel, init_mlp, load_checkpoint, save_checkpoint
from .smoothness import AnalysisConfig, analyze, compare, lambda_max, spectral_density, trace_hutchinson
from .svd import jacobi_svd, reconstruct, svd_decompose
from .train import TrainConfig, evaluate, fine_tune, train

__version__ = "0.1.0"
