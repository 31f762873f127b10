"""Syntax-guided multi-modal contrastive pre-training for code at desk scale."""

import os as _os

__version__ = "0.1.0"

# Thread count for the BLAS backend; only effective if numpy is not imported yet.
_threads = _os.environ.get("SYNMODAL_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _threads)
