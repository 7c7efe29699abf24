"""Synthetic concept-shape datasets, hybrid concept-based models, and
adversarial concept attacks.

Modules
-------
datagen    dataset generation (classes, prototypes, rendering, manifests)
ops        tensor operations with reverse-mode gradients, checkpoint I/O
models     model zoo (standard CNN, CBM variants, SCM, oracle)
training   training loop, MPO, confidence intervals, grid/subset experiments
attack     PGD and the masked concept attack, sweeps
cli        command line harness
"""

__version__ = "0.1.0"
