"""Flow-matching toy lab: quantized adaptive conditions, solvers, exact transport metrics."""

try:
    from ._flowlab import *  # noqa: F401,F403  (installed wheel layout)
except ImportError:  # in-tree build: extension sits directly on PYTHONPATH
    from _flowlab import *  # noqa: F401,F403
