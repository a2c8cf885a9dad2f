"""depthgate: adaptive-depth transformer workbench.

Per-token residual gating on a small decoder-only transformer, trained and
measured end to end: a tape-based float32 autodiff core, router MLPs with a
depth penalty, an early-exit baseline, sparse gather/scatter inference, and
wall-clock benchmarks, all behind one CLI.
"""

__version__ = "0.1.0"
