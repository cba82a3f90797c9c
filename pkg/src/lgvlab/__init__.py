"""Desk-scale lab for LGV surrogates and transfer-based adversarial attacks."""
from .attack import AttackConfig, TransferReport, evaluate, ifgsm, project_ball, transfer_matrix
from .data import Dataset, load_idx, make_blobs, make_spirals, select_correct
from .model import Batch, InvalidArgument, ModelSpec, QuadraticSpec
from .surrogates import (SubspaceBasis, build_subspace, project_top_c, rd_vicinity,
                         sample_subspace, shift_deviations)
from .training import TrainConfig, WeightCollection, collect_lgv, swa, train

__version__ = "0.1.0"
