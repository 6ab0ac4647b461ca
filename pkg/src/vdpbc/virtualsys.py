"""Virtual mechanical systems, their variational dynamics and quadratic storage.

For a mechanical pH model with state x = (q, p), the virtual system has
state x_v = (q_v, p_v) and is parametrized by the actual state x:

    xdot_v = [J_v(x) - R_v(x)] dH_v/dx_v (x_v, x) + g(x) u
    J_v = [[0, I], [-I, -S_H(x)]],   R_v = diag(0, D(q) - 1/2 Mdot(q))
    H_v = 1/2 p_v^T M^{-1}(q) p_v + P(q_v)

At x_v = x it reproduces the plant. R_v need not be semidefinite.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
from scipy.linalg import block_diag

from .exceptions import CertificateError, DomainError
from .phmech import MechanicalModel, PhaseState, _velocity, split_state

__all__ = [
    "VirtualMechanicalSystem",
    "VariationalState",
    "DifferentialStorage",
    "virtual_vector_field",
    "prolonged_vector_field",
    "differential_output",
    "storage_value",
    "storage_rate",
]


@dataclass(frozen=True, eq=False)
class VirtualMechanicalSystem:
    base: MechanicalModel

    @property
    def n(self):
        return self.base.n

    def _qv(self, x):
        q, p = split_state(self.base, x)
        return q, p, _velocity(self.base, q, p)

    def J(self, x):
        q, _, v = self._qv(x)
        n = self.n
        S = self.base.gyroscopic_matrix(q, v)
        I = np.eye(n)
        return np.block([[np.zeros((n, n)), I], [-I, -S]])

    def R(self, x):
        q, _, v = self._qv(x)
        n = self.n
        lower = self.base.damping(q) - 0.5 * self.base.inertia_directional_derivative(q, v)
        # symmetrize exactly; Mdot and D are symmetric up to rounding
        lower = 0.5 * (lower + lower.T)
        out = np.zeros((2 * n, 2 * n))
        out[n:, n:] = lower
        return out

    def hamiltonian(self, x_v, x):
        qv, pv = split_state(self.base, x_v)
        q, _ = split_state(self.base, x)
        return float(0.5 * pv @ _velocity(self.base, q, pv) + self.base.potential(qv))

    def gradient(self, x_v, x):
        qv, pv = split_state(self.base, x_v)
        q, _ = split_state(self.base, x)
        return np.concatenate([self.base.potential_gradient(qv), _velocity(self.base, q, pv)])

    def hessian(self, x_v, x):
        """d2H_v/dx_v2 = diag(d2P/dq2 (q_v), M^{-1}(q))."""
        qv, _ = split_state(self.base, x_v)
        q, _ = split_state(self.base, x)
        n = self.n
        out = np.zeros((2 * n, 2 * n))
        out[:n, :n] = self.base.potential_hessian(qv)
        out[n:, n:] = np.linalg.inv(self.base.inertia(q))
        return out

    def input_matrix(self, x):
        q, _ = split_state(self.base, x)
        B = self.base.input_matrix(q)
        return np.vstack([np.zeros_like(B), B])


@dataclass
class VariationalState:
    """Virtual state x_v with a tangent vector dx at it."""

    x: np.ndarray
    dx: np.ndarray

    def __post_init__(self):
        if isinstance(self.x, PhaseState):
            self.x = self.x.vector
        self.x = np.asarray(self.x, dtype=float)
        self.dx = np.asarray(self.dx, dtype=float)
        if self.x.ndim != 1 or self.x.shape != self.dx.shape:
            raise DomainError("state and tangent vector must be 1-D of equal size")


def _input(vsys, u):
    m = vsys.base.m
    u = np.zeros(m) if u is None else np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (m,):
        raise DomainError(f"input must have {m} entries, got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise DomainError("input has non-finite components")
    return u


def virtual_vector_field(vsys: VirtualMechanicalSystem, x_v, x, u=None, t: float = 0.0) -> np.ndarray:
    if isinstance(x_v, PhaseState):
        x_v = x_v.vector
    if isinstance(x, PhaseState):
        x = x.vector
    u = _input(vsys, u)
    return (vsys.J(x) - vsys.R(x)) @ vsys.gradient(x_v, x) + vsys.input_matrix(x) @ u


def prolonged_vector_field(vsys: VirtualMechanicalSystem, vs: VariationalState, x, u=None, du=None, t: float = 0.0):
    """(xdot_v, dxdot_v) with dxdot_v = [J_v - R_v] d2H_v/dx_v2 dx_v + g du."""
    if isinstance(x, PhaseState):
        x = x.vector
    if vs.x.size != 2 * vsys.n:
        raise DomainError(f"variational state must have {2 * vsys.n} entries")
    xdot = virtual_vector_field(vsys, vs.x, x, u, t)
    A = vsys.J(x) - vsys.R(x)
    dxdot = A @ vsys.hessian(vs.x, x) @ vs.dx + vsys.input_matrix(x) @ _input(vsys, du)
    return xdot, dxdot


def differential_output(vsys: VirtualMechanicalSystem, vs: VariationalState, x) -> np.ndarray:
    """dy_v = g(x)^T d2H_v/dx_v2 dx_v."""
    return vsys.input_matrix(x).T @ vsys.hessian(vs.x, x) @ vs.dx


@dataclass(frozen=True, eq=False)
class DifferentialStorage:
    """Quadratic storage V = 1/2 dx^T Q(x, t) dx.

    `metric` is either a constant symmetric matrix or a callable (x, t) -> matrix.
    """

    metric: np.ndarray | Callable

    def __post_init__(self):
        if not callable(self.metric):
            Q = np.atleast_2d(np.asarray(self.metric, dtype=float))
            if Q.shape[0] != Q.shape[1]:
                raise DomainError("metric must be square")
            object.__setattr__(self, "metric", Q)

    def matrix(self, x=None, t: float = 0.0) -> np.ndarray:
        Q = self.metric(x, t) if callable(self.metric) else self.metric
        Q = np.atleast_2d(np.asarray(Q, dtype=float))
        if not np.array_equal(Q, Q.T):
            raise CertificateError("metric is not symmetric")
        try:
            np.linalg.cholesky(Q)
        except np.linalg.LinAlgError:
            raise CertificateError(f"metric is not positive definite (min eigenvalue {np.linalg.eigvalsh(Q).min():.3g})") from None
        return Q

    def bounds(self, x=None, t: float = 0.0):
        """(c1, c2) with c1 |dx|^2 <= 2 V <= c2 |dx|^2 at (x, t)."""
        lam = np.linalg.eigvalsh(self.matrix(x, t))
        return float(lam[0]), float(lam[-1])

    @classmethod
    def block(cls, *blocks):
        return cls(block_diag(*(np.atleast_2d(np.asarray(b, dtype=float)) for b in blocks)))


def storage_value(ds: DifferentialStorage, x_err, dx_err, t: float = 0.0) -> float:
    dx_err = np.asarray(dx_err, dtype=float)
    return float(0.5 * dx_err @ ds.matrix(x_err, t) @ dx_err)


def storage_rate(ds: DifferentialStorage, x_err, dx_err, dx_err_rate, t: float = 0.0, metric_rate=None) -> float:
    """dV/dt = dx^T Q dxdot (+ 1/2 dx^T Qdot dx when the metric moves)."""
    dx_err = np.asarray(dx_err, dtype=float)
    rate = float(dx_err @ ds.matrix(x_err, t) @ np.asarray(dx_err_rate, dtype=float))
    if metric_rate is not None:
        rate += 0.5 * float(dx_err @ np.asarray(metric_rate, dtype=float) @ dx_err)
    return rate
