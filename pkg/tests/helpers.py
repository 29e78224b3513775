"""Shared construction and numeric helpers for the test suite."""

from __future__ import annotations

import numpy as np

from proxigmm import Dataset


def make_gaussian_dataset(
    n: int = 200,
    seed: int = 0,
    d_z: int = 1,
    d_w: int = 1,
    d_x: int = 1,
    outcome_scale: float = 1.0,
) -> Dataset:
    """A generic well-conditioned dataset with no particular causal structure.

    The outcome loads on every block so that moment systems built from it
    are non-degenerate; the treatment is an independent fair coin.
    """
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(n, d_z))
    w = 0.6 * z[:, :1] + rng.normal(size=(n, d_w))
    x = rng.normal(size=(n, d_x)) if d_x else np.empty((n, 0))
    a = (rng.random(n) < 0.5).astype(float)
    y = (
        0.4
        + 0.5 * a
        + w.sum(axis=1)
        + 0.3 * z.sum(axis=1)
        + (x.sum(axis=1) if d_x else 0.0)
        + outcome_scale * rng.normal(size=n)
    )
    return Dataset(
        y=y,
        a=a,
        z=z,
        w=w,
        x=x,
        z_names=tuple(f"z{i + 1}" for i in range(d_z)),
        w_names=tuple(f"w{i + 1}" for i in range(d_w)),
        x_names=tuple(f"x{i + 1}" for i in range(d_x)),
    )


def finite_difference(fn, point: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central finite-difference gradient of a scalar or vector function."""
    point = np.asarray(point, dtype=float)
    base = np.asarray(fn(point))
    grad = np.empty(base.shape + point.shape)
    for j in range(point.size):
        shift = np.zeros_like(point)
        shift[j] = eps
        grad[..., j] = (np.asarray(fn(point + shift)) - np.asarray(fn(point - shift))) / (
            2 * eps
        )
    return grad
