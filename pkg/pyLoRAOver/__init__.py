import os

# BLAS thread pools follow MPO_OVER_THREADS (default 1); must happen before numpy loads
for _var in ('OMP_NUM_THREADS', 'OPENBLAS_NUM_THREADS', 'MKL_NUM_THREADS'):
    os.environ.setdefault(_var, os.environ.get('MPO_OVER_THREADS', '1'))

from .tensor import DenseTensor, SvdResult, reshape, matmul, svd_truncated, frobenius_norm
from .tensor_io import load_tensor, save_tensor
from .mpo import (MpoShapePlan, MpoChain, BudgetReport, plan_shapes, auto_plan, decompose, contract, error_bound,
                  budget, save_chain, load_chain)
from .config import RunConfig, TaskConfig, LoraConfig, TrainConfig, SelectionConfig, MpoConfig, load_run_config
from .adapters import AdapterSlot, init_adapter, effective_matrix, forward_delta, over_parameterize, merge
from .autodiff import Tape, TapeNode
from .task import SyntheticTask
from .model import AdapterModel
from .optim import Optimizer, step
from .selection import (ImportanceLedger, score_predefined, score_runtime, select_round,
                        taylor_consistency_probe)
from .training import MetricsLog, Trainer, run_training
from .log_utils import set_logger, set_debug_trace
