"""Nested mixture-of-experts neural operator for autoregressive PDE
prediction, with its own tape-based differentiation engine, synthetic PDE
data generators, and a training/evaluation CLI."""

from . import (  # noqa: F401  (imports register grad-check cases)
    autodiff,
    checkpoint,
    encoding,
    errors,
    experts,
    kernels,
    losses,
    model,
    optim,
    pdedata,
    routing,
    seeding,
    tensor,
    training,
)

__version__ = "0.1.0"
