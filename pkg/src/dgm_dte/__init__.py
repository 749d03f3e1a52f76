"""Dual-graph multitask delivery time estimation under label imbalance.

A desk-scale, framework-free pipeline: a small reverse-mode autodiff
engine (numerics), attribute relation graphs built from order tables
(graphs), GAT/GCN/attention-fusion building blocks (layers), kernel
density re-weighting for rare labels (imbalance), the dual-branch
multitask model itself (model), synthetic data and temporal splits
(data), and MAE/MAPE/EW reporting (metrics).
"""

import os as _os

# Thread cap must land in the environment before numpy first loads its BLAS.
_threads = _os.environ.get("DGM_DTE_THREADS")
if _threads:
    for _var in (
        "OMP_NUM_THREADS",
        "OPENBLAS_NUM_THREADS",
        "MKL_NUM_THREADS",
        "NUMEXPR_NUM_THREADS",
    ):
        _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
