"""Reusing a monolingual masked LM for low-resource translation via vocabulary extension."""

import os as _os

# Intra-op parallelism is capped before numpy loads its BLAS; one thread by
# default so that results do not depend on the machine.
_threads = _os.environ.setdefault("RELM_THREADS", "1")
for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
    _os.environ.setdefault(_var, _threads)

__version__ = "0.1.0"
