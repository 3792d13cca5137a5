"""Amortized ab initio cryo-EM reconstruction on a small numpy autodiff core."""
import os as _os

# CRYOFORGE_THREADS caps BLAS/OpenMP threads; it must be set before numpy loads.
if _os.environ.get("CRYOFORGE_THREADS"):
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["CRYOFORGE_THREADS"])

__version__ = "0.1.0"
