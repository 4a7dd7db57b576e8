"""Learning-by-ignoring: bilevel reweighting of corrupted training data.

The package bundles a small deterministic numeric core, a two-tower
multimodal answer classifier, the ignoring-weight bilevel trainer with a
finite-difference hypergradient and an exact unrolled oracle, three
self-supervised pretraining tasks, a synthetic QA benchmark with known
corruption ground truth, and evaluation metrics, all behind a CLI.
"""

from ._kernels import available_backends, get_backend, set_backend

__version__ = "0.1.0"

__all__ = ["available_backends", "get_backend", "set_backend", "__version__"]
