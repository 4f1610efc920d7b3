"""fairway: lattice-plus-improvement motion planning for surface vessels.

The planner runs in two steps.  A state-lattice A* search over a library of
precomputed motion primitives produces a dynamically feasible trajectory that
respects traffic-rule constraints encoded as a per-obstacle finite state
machine.  A receding-horizon nonlinear program then smooths the active window
of that trajectory inside convex corridors while the rule constraints stay
frozen.  A closed-loop driver replans the lattice step whenever the improved
trajectory stops being safe or the improvement stops paying off.
"""

__version__ = "0.1.0"
