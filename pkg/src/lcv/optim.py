"""Gradient steps for the kernel parameters.

Two interchangeable update rules maintain the SPD structure:

* ``cayley_sgd_step`` walks the free parameters ``(s, t)`` with plain SGD
  and reassembles the kernel through the Cayley maps;
* ``stiefel_sgd_step`` walks the orthogonal factor directly on its
  manifold (project the Euclidean gradient to the tangent space, retract)
  while the diagonal factor still moves through the arctan chart.

Both leave every iterate exactly factored, so no projection back onto the
SPD cone is ever needed.
"""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .cayley import (
    DiagParams,
    OrthogonalMatrix,
    SkewParams,
    cayley_inverse,
    dlambda_dt,
    lambda_from_t,
    pack_skew,
)
from .kernel import (
    KernelGradient,
    SPDKernel,
    assemble_kernel,
    identity_kernel,
    kernel_factor_grads,
    kernel_grad,
)

_MODES = ("cayley", "stiefel")


@dataclass(frozen=True)
class OptimizerConfig:
    """Plain SGD settings shared by both parameterizations."""

    learning_rate: float = 1e-2
    max_steps: int = 500
    grad_tolerance: float = 1e-6
    mode: str = "cayley"

    def __post_init__(self):
        if not (self.learning_rate > 0 and np.isfinite(self.learning_rate)):
            raise ValueError("OptimizerConfig: learning_rate must be positive and finite")
        if self.max_steps < 1:
            raise ValueError("OptimizerConfig: max_steps must be at least 1")
        if not (self.grad_tolerance > 0):
            raise ValueError("OptimizerConfig: grad_tolerance must be positive")
        if self.mode not in _MODES:
            raise ValueError(f"OptimizerConfig: mode must be one of {_MODES}, got {self.mode!r}")


@dataclass(frozen=True)
class TrainState:
    """Snapshot of an optimization run after ``step`` updates."""

    kernel: SPDKernel
    step: int
    last_loss: float
    grad_norm: float

    def __post_init__(self):
        if self.step < 0:
            raise ValueError("TrainState: step must be nonnegative")


def initial_state(dim: int) -> TrainState:
    """Fresh state at the identity kernel, before any update."""
    return TrainState(
        kernel=identity_kernel(dim),
        step=0,
        last_loss=float("nan"),
        grad_norm=float("inf"),
    )


def cayley_sgd_step(state: TrainState, grad: KernelGradient, lr: float, loss: float | None = None) -> TrainState:
    """One SGD step in the free parameterization.

    Moves ``s`` and ``t`` against the gradient and reassembles; a zero
    gradient reproduces the same kernel bitwise.
    """
    if not (lr > 0 and np.isfinite(lr)):
        raise ValueError("cayley_sgd_step: lr must be positive and finite")
    k = state.kernel
    if grad.d_skew.shape != k.skew_params.entries.shape or grad.d_diag.shape != k.diag_params.t.shape:
        raise ValueError("cayley_sgd_step: gradient shape disagrees with the parameters")
    s = SkewParams(entries=k.skew_params.entries - lr * grad.d_skew, dim=k.dim)
    t = DiagParams(t=k.diag_params.t - lr * grad.d_diag)
    return TrainState(
        kernel=assemble_kernel(s, t),
        step=state.step + 1,
        last_loss=state.last_loss if loss is None else float(loss),
        grad_norm=grad.max_norm(),
    )


def stiefel_project(X: OrthogonalMatrix, Z: np.ndarray) -> np.ndarray:
    """Project an ambient matrix onto the tangent space at ``X``.

    ``P_X(Z) = (I - X X^T) Z + X skew(X^T Z)`` with
    ``skew(M) = (M - M^T) / 2``; the result always satisfies
    ``X^T P_X(Z)`` skew-symmetric.
    """
    Xv = X.values
    Z = np.asarray(Z, dtype=float)
    if Z.shape != Xv.shape:
        raise ValueError(f"stiefel_project: shapes disagree, {Z.shape} vs {Xv.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("stiefel_project: Z must be finite")
    XtZ = Xv.T @ Z
    return Z - Xv @ XtZ + Xv @ (0.5 * (XtZ - XtZ.T))


def stiefel_retract(X: OrthogonalMatrix, Z: np.ndarray) -> OrthogonalMatrix:
    """Retract a tangent step back onto the manifold.

    ``R_X(Z) = (X + Z)(I + Z^T Z)^{-1/2}``; the zero step returns ``X``
    itself, exactly.
    """
    Xv = X.values
    Z = np.asarray(Z, dtype=float)
    if Z.shape != Xv.shape:
        raise ValueError(f"stiefel_retract: shapes disagree, {Z.shape} vs {Xv.shape}")
    if not np.all(np.isfinite(Z)):
        raise ValueError("stiefel_retract: Z must be finite")
    if not Z.any():
        return X
    M = np.eye(Xv.shape[0]) + Z.T @ Z
    return OrthogonalMatrix((Xv + Z) @ matrix_inv_sqrt(M))


def matrix_inv_sqrt(M: np.ndarray, sym_tol: float = 1e-8) -> np.ndarray:
    """Inverse square root of an SPD matrix via its eigendecomposition."""
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"matrix_inv_sqrt: expected a square matrix, got {M.shape}")
    asym = float(np.max(np.abs(M - M.T)))
    if asym > sym_tol:
        raise ValueError(f"matrix_inv_sqrt: matrix is asymmetric by {asym:.3e}")
    w, V = np.linalg.eigh(0.5 * (M + M.T))
    if w[0] <= 0.0:
        raise ValueError(f"matrix_inv_sqrt: matrix is not positive definite (min eig {w[0]:.3e})")
    R = (V / np.sqrt(w)) @ V.T
    return 0.5 * (R + R.T)


def stiefel_sgd_step(
    state: TrainState,
    dL_dP: np.ndarray,
    lr: float,
    d_diag: np.ndarray | None = None,
    loss: float | None = None,
) -> TrainState:
    """One Riemannian SGD step on the orthogonal factor.

    The Euclidean gradient ``dL_dP`` is projected to the tangent space at
    the current ``P`` and retracted; the diagonal parameters move through
    the arctan chart when ``d_diag`` is given.  The skew parameters are
    re-synced to the Cayley preimage of the new ``P`` so checkpoints stay
    mode-agnostic.
    """
    if not (lr > 0 and np.isfinite(lr)):
        raise ValueError("stiefel_sgd_step: lr must be positive and finite")
    k = state.kernel
    Z = stiefel_project(k.P, np.asarray(dL_dP, dtype=float))
    newP = stiefel_retract(k.P, -lr * Z)
    if d_diag is None:
        t = k.diag_params
    else:
        d_diag = np.asarray(d_diag, dtype=float)
        if d_diag.shape != k.diag_params.t.shape:
            raise ValueError("stiefel_sgd_step: d_diag shape disagrees with the parameters")
        if not np.all(np.isfinite(d_diag)):
            raise ValueError("stiefel_sgd_step: d_diag must be finite")
        t = DiagParams(t=k.diag_params.t - lr * d_diag)
    lam = lambda_from_t(t)
    W = newP.values.T @ (lam[:, None] * newP.values)
    W = 0.5 * (W + W.T)
    kernel = SPDKernel(
        W=W,
        P=newP,
        lam=lam,
        skew_params=pack_skew(cayley_inverse(newP)),
        diag_params=t,
    )
    grad_norm = float(max(
        np.max(np.abs(Z)) if Z.size else 0.0,
        np.max(np.abs(d_diag)) if d_diag is not None and d_diag.size else 0.0,
    ))
    return TrainState(
        kernel=kernel,
        step=state.step + 1,
        last_loss=state.last_loss if loss is None else float(loss),
        grad_norm=grad_norm,
    )


def finite_difference_oracle(
    loss: Callable[[SkewParams, DiagParams], float],
    s: SkewParams,
    t: DiagParams,
    eps: float = 1e-5,
) -> KernelGradient:
    """Central finite differences of a scalar loss over the free parameters.

    The independent reference for every analytic gradient in this package:
    ``(loss(p + eps e_i) - loss(p - eps e_i)) / (2 eps)`` coordinate by
    coordinate over both parameter vectors.
    """
    if not (1e-7 <= eps <= 1e-3):
        raise ValueError("finite_difference_oracle: eps must lie in [1e-7, 1e-3]")

    def probe(sv: np.ndarray, tv: np.ndarray) -> float:
        value = float(loss(SkewParams(entries=sv, dim=s.dim), DiagParams(t=tv)))
        if not np.isfinite(value):
            raise ValueError("finite_difference_oracle: loss returned a non-finite value")
        return value

    sv = np.array(s.entries)
    tv = np.array(t.t)
    d_skew = np.zeros_like(sv)
    for i in range(sv.size):
        hi, lo = sv.copy(), sv.copy()
        hi[i] += eps
        lo[i] -= eps
        d_skew[i] = (probe(hi, tv) - probe(lo, tv)) / (2.0 * eps)
    d_diag = np.zeros_like(tv)
    for i in range(tv.size):
        hi, lo = tv.copy(), tv.copy()
        hi[i] += eps
        lo[i] -= eps
        d_diag[i] = (probe(sv, hi) - probe(sv, lo)) / (2.0 * eps)
    return KernelGradient(d_skew=d_skew, d_diag=d_diag)


def step_benchmark(dim: int, mode: str, iters: int = 20, seed: int = 0) -> float:
    """Wall-clock milliseconds per optimizer step at a given kernel size.

    Runs ``iters`` steps against a fixed random symmetric gradient on
    ``W`` and averages; used for reporting only.
    """
    if mode not in _MODES:
        raise ValueError(f"step_benchmark: mode must be one of {_MODES}")
    rng = np.random.default_rng(seed)
    state = initial_state(dim)
    A = rng.standard_normal((dim, dim)) * 0.01
    G = A + A.T
    t0 = time.perf_counter()
    for _ in range(iters):
        if mode == "cayley":
            state = cayley_sgd_step(state, kernel_grad(state.kernel, G), lr=1e-3)
        else:
            dL_dP, dL_dlam = kernel_factor_grads(state.kernel, G)
            dd = dL_dlam * dlambda_dt(state.kernel.diag_params)
            state = stiefel_sgd_step(state, dL_dP, lr=1e-3, d_diag=dd)
    return (time.perf_counter() - t0) * 1000.0 / iters
