"""History matching with Bayes linear emulators."""

import os

# unbuffered Fortran I/O lets the ODE solver's warnings be silenced reliably;
# must be set before any scipy extension loads libgfortran
os.environ.setdefault("GFORTRAN_UNBUFFERED_PRECONNECTED", "y")

__version__ = "0.1.0"
