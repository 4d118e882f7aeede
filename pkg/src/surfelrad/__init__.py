"""Inverse rendering of 2D Gaussian surfels with radiometric-consistency training."""
import warnings

# numba falls back to OpenMP when the system TBB is too old; the notice is noise
warnings.filterwarnings("ignore", message="The TBB threading layer requires")
