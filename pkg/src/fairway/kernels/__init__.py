"""Hot numeric kernels: compiled core with a pure-numpy fallback.

The compiled extension (``fairway.kernels._core``) and the numpy fallback
(``fairway.kernels._purepy``) expose the same functions with identical
semantics.  Whichever is importable wins; set ``FAIRWAY_PURE_PYTHON=1`` to
force the fallback (useful for benchmarking and debugging).
"""

import os

if os.environ.get("FAIRWAY_PURE_PYTHON", "") == "1":
    from . import _purepy as _impl

    BACKEND = "python"
else:
    try:
        from . import _core as _impl

        BACKEND = "cython"
    except ImportError:
        from . import _purepy as _impl

        BACKEND = "python"

rollout = _impl.rollout
poly_point_info = _impl.poly_point_info
poly_intersects = _impl.poly_intersects
sweep_collision = _impl.sweep_collision
pair_sweep_collision = _impl.pair_sweep_collision
grid_lookup = _impl.grid_lookup
lattice_dijkstra = _impl.lattice_dijkstra

__all__ = [
    "BACKEND",
    "rollout",
    "poly_point_info",
    "poly_intersects",
    "sweep_collision",
    "pair_sweep_collision",
    "grid_lookup",
    "lattice_dijkstra",
]
