"""Two-branch graph-convolution context module with a self-contained autodiff
engine, analytic cost accounting and a synthetic segmentation benchmark."""

import os as _os

# Cap BLAS parallelism before numpy loads anywhere downstream; DGCN_THREADS
# defaults to 1 so results are bit-deterministic out of the box.
_threads = _os.environ.get("DGCN_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

from .tensor import RngState, Tensor, finite_diff_grad, read_tensor, rel_error, write_tensor  # noqa: E402
from .head import DGCConfig, DGCHead, fuse, head_forward, init_head  # noqa: E402

__all__ = [
    "RngState",
    "Tensor",
    "finite_diff_grad",
    "rel_error",
    "read_tensor",
    "write_tensor",
    "DGCConfig",
    "DGCHead",
    "fuse",
    "head_forward",
    "init_head",
]
