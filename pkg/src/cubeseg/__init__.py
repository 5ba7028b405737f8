"""Semi-supervised multi-organ volume segmentation via cube partition,
cross/within-image mixing and recovery, distribution-aware pseudo-label
blending, cube-location reasoning, and EMA teacher-student training."""

import os

# The kernels issue many short parallel regions; numba's workqueue layer
# handles that pattern with far less sync overhead than libgomp on small
# machines. Respect an explicit user choice.
os.environ.setdefault("NUMBA_THREADING_LAYER", "workqueue")

__version__ = "0.1.0"
