"""Dual-task building extraction / change detection at desk scale.

A dense rank-4 tensor core with reverse-mode differentiation, the four
network blocks (multi-scale fusion, parameter-free spatial-spectral
attention, dual-branch extractor, differential fusion), a query-based
decoder, metrics, raster/checkpoint I/O and a CLI.
"""

import os as _os

# cap BLAS threading before numpy loads; results stay bit-identical per thread count
_threads = _os.environ.get("MSSFC_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .tensor import Tensor, Parameter, ParamStore, Rng, ShapeError, fd_gradcheck
from .model import Model, ModelConfig

__all__ = [
    "Tensor",
    "Parameter",
    "ParamStore",
    "Rng",
    "ShapeError",
    "fd_gradcheck",
    "Model",
    "ModelConfig",
]
