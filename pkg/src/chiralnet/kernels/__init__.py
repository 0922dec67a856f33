"""Geometry kernels: numba fast path with a pure-numpy fallback.

The backend is chosen once at import time from the CHIRALNET_KERNELS
environment variable:

  auto   (default) use numba if it imports, else numpy
  numba  require the numba backend (ImportError if unavailable)
  numpy  force the pure-numpy backend

Both backends implement identical contracts; `benchmarks/bench_kernels.py`
times them against each other and checks agreement.
"""

import os

_choice = os.environ.get("CHIRALNET_KERNELS", "auto").lower()

if _choice not in ("auto", "numba", "numpy"):
    raise ValueError(
        f"CHIRALNET_KERNELS must be one of auto/numba/numpy, got {_choice!r}"
    )

if _choice == "numpy":
    from . import numpy_backend as _backend
elif _choice == "numba":
    from . import numba_backend as _backend
else:
    try:
        from . import numba_backend as _backend
    except ImportError:
        from . import numpy_backend as _backend

BACKEND = _backend.__name__.rsplit(".", 1)[-1].replace("_backend", "")

bond_distances = _backend.bond_distances
bend_angles = _backend.bend_angles
dihedral_angles = _backend.dihedral_angles
rotate_about_axis = _backend.rotate_about_axis
reflect_through_plane = _backend.reflect_through_plane
rigid_transform = _backend.rigid_transform
