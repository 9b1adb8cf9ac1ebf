"""Event-driven training of single-spike networks with rectified-linear PSPs."""
import numba

# the bundled TBB is too old for numba; skip straight to OpenMP
numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]

from .neuron import NO_SPIKE, T_MAX, THRESHOLD  # noqa: E402

__version__ = "0.1.0"
__all__ = ["NO_SPIKE", "T_MAX", "THRESHOLD"]
