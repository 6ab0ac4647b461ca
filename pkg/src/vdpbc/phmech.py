"""Port-Hamiltonian mechanical models.

A mechanical system on T*Q is described by its inertia M(q), damping D(q),
potential P(q) and input matrix B(q). The phase state is x = (q, p) with
p = M(q) qdot, and the Hamiltonian is the total energy

    H(q, p) = 1/2 p^T M^{-1}(q) p + P(q).

Velocity-dependent inertial forces are collected in the workless matrix
E(q, p) = S_H(q, p) - 1/2 Mdot(q), where S_H is the skew-symmetric
gyroscopic matrix built from the Christoffel symbols of M, so that

    d/dq (1/2 p^T M^{-1} p) = E(q, p) M^{-1}(q) p.

Flexible-joint robots are the block model `FjrModel`: a link model and a
motor model coupled by a linear joint spring K(q_m - q_l).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import block_diag

from .exceptions import DomainError, SingularInertiaError

__all__ = [
    "Potential",
    "ZeroPotential",
    "QuadraticPotential",
    "GravityPotential",
    "MechanicalModel",
    "ConstantInertiaModel",
    "TwoLinkArm",
    "FjrModel",
    "PhaseState",
    "table1_model",
    "hamiltonian",
    "gradient_H",
    "workless_matrix",
    "ph_vector_field",
    "natural_output",
    "split_state",
]


# --------------------------------------------------------------------------
# potentials
# --------------------------------------------------------------------------

# kind codes understood by the compiled closed-loop kernels
POTENTIAL_ZERO = 0
POTENTIAL_QUADRATIC = 1
POTENTIAL_GRAVITY = 2


class Potential(ABC):
    """Scalar potential P(q) with derivatives up to third order."""

    kind: int

    @property
    @abstractmethod
    def n(self) -> int: ...

    @abstractmethod
    def value(self, q): ...

    @abstractmethod
    def gradient(self, q): ...

    @abstractmethod
    def hessian(self, q): ...

    @abstractmethod
    def third(self, q, v, w):
        """Third derivative contracted twice: sum_jk d3P/dq_i dq_j dq_k v_j w_k."""

    def kernel_arrays(self):
        """(matrix, vector) parameters handed to the compiled kernels."""
        n = self.n
        return np.zeros((n, n)), np.zeros(n)


@dataclass(frozen=True)
class ZeroPotential(Potential):
    dim: int
    kind = POTENTIAL_ZERO

    @property
    def n(self):
        return self.dim

    def value(self, q):
        return 0.0

    def gradient(self, q):
        return np.zeros(self.dim, dtype=np.result_type(q, float))

    def hessian(self, q):
        return np.zeros((self.dim, self.dim))

    def third(self, q, v, w):
        return np.zeros(self.dim, dtype=np.result_type(q, v, w, float))


@dataclass(frozen=True)
class QuadraticPotential(Potential):
    """P(q) = 1/2 q^T G q with G symmetric."""

    stiffness: np.ndarray
    kind = POTENTIAL_QUADRATIC

    def __post_init__(self):
        G = np.atleast_2d(np.asarray(self.stiffness, dtype=float))
        if G.shape[0] != G.shape[1] or not np.allclose(G, G.T, rtol=0, atol=1e-14):
            raise DomainError("quadratic potential needs a symmetric square matrix")
        object.__setattr__(self, "stiffness", G)

    @property
    def n(self):
        return self.stiffness.shape[0]

    def value(self, q):
        return 0.5 * q @ self.stiffness @ q

    def gradient(self, q):
        return self.stiffness @ q

    def hessian(self, q):
        return self.stiffness.copy()

    def third(self, q, v, w):
        return np.zeros(self.n, dtype=np.result_type(q, v, w, float))

    def kernel_arrays(self):
        return self.stiffness.copy(), np.zeros(self.n)


@dataclass(frozen=True)
class GravityPotential(Potential):
    """Independent pendulum loads, P(q) = sum_i w_i (1 - cos q_i).

    w_i is the nominal load M g l of joint i [N m]; P(0) = 0.
    """

    loads: np.ndarray
    kind = POTENTIAL_GRAVITY

    def __post_init__(self):
        object.__setattr__(self, "loads", np.atleast_1d(np.asarray(self.loads, dtype=float)))

    @property
    def n(self):
        return self.loads.shape[0]

    def value(self, q):
        return float(np.sum(self.loads * (1.0 - np.cos(q))))

    def gradient(self, q):
        return self.loads * np.sin(q)

    def hessian(self, q):
        return np.diag(self.loads * np.cos(q))

    def third(self, q, v, w):
        return -self.loads * np.sin(q) * v * w

    def kernel_arrays(self):
        return np.zeros((self.n, self.n)), self.loads.copy()


# --------------------------------------------------------------------------
# mechanical models
# --------------------------------------------------------------------------


def _fd_step(q):
    return 1e-6 * max(1.0, float(np.max(np.abs(q)))) if len(q) else 1e-6


class MechanicalModel(ABC):
    """Inertia, damping, potential and input matrix of a mechanical pH system.

    Subclasses without an analytic inertia derivative inherit a central
    finite-difference fallback for `inertia_directional_derivative`.
    """

    n: int
    m: int

    @abstractmethod
    def inertia(self, q) -> np.ndarray: ...

    def inertia_directional_derivative(self, q, v) -> np.ndarray:
        """Mdot(q) for qdot = v, i.e. sum_k v_k dM/dq_k."""
        q = np.asarray(q, dtype=float)
        v = np.asarray(v, dtype=float)
        scale = float(np.max(np.abs(v))) if v.size else 0.0
        if scale == 0.0:
            return np.zeros((self.n, self.n))
        h = _fd_step(q)
        d = v / scale
        return scale * (self.inertia(q + h * d) - self.inertia(q - h * d)) / (2 * h)

    def inertia_partials(self, q) -> np.ndarray:
        """Stack of dM/dq_k, shape (n, n, n)."""
        eye = np.eye(self.n)
        return np.stack([self.inertia_directional_derivative(q, eye[k]) for k in range(self.n)])

    @property
    def constant_inertia(self) -> bool:
        return False

    @abstractmethod
    def damping(self, q) -> np.ndarray: ...

    @abstractmethod
    def potential(self, q) -> float: ...

    @abstractmethod
    def potential_gradient(self, q) -> np.ndarray: ...

    @abstractmethod
    def potential_hessian(self, q) -> np.ndarray: ...

    @abstractmethod
    def input_matrix(self, q) -> np.ndarray: ...

    def gyroscopic_matrix(self, q, qdot) -> np.ndarray:
        """Skew-symmetric S_L(q, qdot) = 1/2 (C - C^T) of the Christoffel Coriolis matrix.

        Column j of W is (dM/dq_j) qdot; then S_L = 1/2 (W - W^T), which gives
        S_L qdot = 1/2 Mdot qdot - d/dq (1/2 qdot^T M qdot).
        """
        if self.constant_inertia:
            return np.zeros((self.n, self.n))
        W = np.einsum("jkl,l->kj", self.inertia_partials(q), qdot)
        return 0.5 * (W - W.T)


@dataclass(frozen=True, eq=False)
class ConstantInertiaModel(MechanicalModel):
    """Mechanical system with constant inertia and damping."""

    mass: np.ndarray
    friction: np.ndarray
    potential_fn: Potential | None = None
    input_mat: np.ndarray | None = None

    def __post_init__(self):
        M = np.atleast_2d(np.asarray(self.mass, dtype=float))
        D = np.atleast_2d(np.asarray(self.friction, dtype=float))
        n = M.shape[0]
        if M.shape != (n, n) or D.shape != (n, n):
            raise DomainError("inertia and damping must be square and of equal size")
        _check_spd(M, "inertia", strict=True)
        _check_spd(D, "damping", strict=False)
        B = np.eye(n) if self.input_mat is None else np.atleast_2d(np.asarray(self.input_mat, dtype=float))
        if B.shape[0] != n or np.linalg.matrix_rank(B) != B.shape[1]:
            raise DomainError("input matrix must be n x m with full column rank")
        pot = ZeroPotential(n) if self.potential_fn is None else self.potential_fn
        if pot.n != n:
            raise DomainError("potential dimension does not match the inertia")
        object.__setattr__(self, "mass", M)
        object.__setattr__(self, "friction", D)
        object.__setattr__(self, "input_mat", B)
        object.__setattr__(self, "potential_fn", pot)
        object.__setattr__(self, "_mass_inv", np.linalg.inv(M))

    @property
    def n(self):
        return self.mass.shape[0]

    @property
    def m(self):
        return self.input_mat.shape[1]

    @property
    def constant_inertia(self):
        return True

    def inertia(self, q):
        return self.mass

    def inertia_inverse(self):
        return self._mass_inv

    def inertia_directional_derivative(self, q, v):
        return np.zeros((self.n, self.n))

    def damping(self, q):
        return self.friction

    def potential(self, q):
        return self.potential_fn.value(q)

    def potential_gradient(self, q):
        return self.potential_fn.gradient(q)

    def potential_hessian(self, q):
        return self.potential_fn.hessian(q)

    def input_matrix(self, q):
        return self.input_mat


@dataclass(frozen=True, eq=False)
class TwoLinkArm(MechanicalModel):
    """Planar two-link arm with configuration-dependent inertia.

    M(q) = [[a + 2 b cos q2, c + b cos q2],
            [c + b cos q2,   c          ]]
    P(q) = g1 (1 - cos q1) + g2 (1 - cos(q1 + q2))

    The default constants keep M positive definite for every q2 (a c - c^2 > b^2).
    """

    a: float = 3.0
    b: float = 0.8
    c: float = 1.0
    g1: float = 4.0
    g2: float = 1.5
    friction: tuple = (0.1, 0.1)

    def __post_init__(self):
        if self.a * self.c - self.c**2 <= self.b**2:
            raise DomainError("two-link constants give an indefinite inertia")

    n = 2
    m = 2

    def inertia(self, q):
        c2 = np.cos(q[1])
        return np.array([[self.a + 2 * self.b * c2, self.c + self.b * c2], [self.c + self.b * c2, self.c]])

    def inertia_directional_derivative(self, q, v):
        s2 = np.sin(q[1])
        dM2 = np.array([[-2 * self.b * s2, -self.b * s2], [-self.b * s2, 0.0]])
        return v[1] * dM2

    def damping(self, q):
        return np.diag(np.asarray(self.friction, dtype=float))

    def potential(self, q):
        return self.g1 * (1 - np.cos(q[0])) + self.g2 * (1 - np.cos(q[0] + q[1]))

    def potential_gradient(self, q):
        s12 = self.g2 * np.sin(q[0] + q[1])
        return np.array([self.g1 * np.sin(q[0]) + s12, s12])

    def potential_hessian(self, q):
        c12 = self.g2 * np.cos(q[0] + q[1])
        return np.array([[self.g1 * np.cos(q[0]) + c12, c12], [c12, c12]])

    def input_matrix(self, q):
        return np.eye(2)


@dataclass(frozen=True, eq=False)
class FjrModel(MechanicalModel):
    """Flexible-joint robot: links and motors coupled by joint springs.

    Configuration q = (q_l, q_m), momentum p = (p_l, p_m). The joint
    potential is 1/2 zeta^T K zeta with deflection zeta = q_m - q_l, and the
    input acts on the motor momenta only through B_m.
    """

    link: MechanicalModel
    motor: MechanicalModel
    stiffness: np.ndarray
    motor_input: np.ndarray | None = None

    def __post_init__(self):
        K = np.atleast_2d(np.asarray(self.stiffness, dtype=float))
        nl = self.link.n
        if self.motor.n != nl or K.shape != (nl, nl):
            raise DomainError("link, motor and stiffness dimensions must agree")
        _check_spd(K, "stiffness", strict=True)
        Bm = np.eye(nl) if self.motor_input is None else np.atleast_2d(np.asarray(self.motor_input, dtype=float))
        if Bm.shape != (nl, nl) or np.linalg.matrix_rank(Bm) != nl:
            raise DomainError("motor input matrix must be square and full rank")
        object.__setattr__(self, "stiffness", K)
        object.__setattr__(self, "motor_input", Bm)

    @property
    def n_link(self):
        return self.link.n

    @property
    def n(self):
        return 2 * self.link.n

    @property
    def m(self):
        return self.link.n

    @property
    def constant_inertia(self):
        return self.link.constant_inertia and self.motor.constant_inertia

    def _split(self, q):
        k = self.n_link
        return q[:k], q[k:]

    def inertia(self, q):
        ql, qm = self._split(q)
        return block_diag(self.link.inertia(ql), self.motor.inertia(qm))

    def inertia_directional_derivative(self, q, v):
        ql, qm = self._split(q)
        vl, vm = self._split(v)
        return block_diag(
            self.link.inertia_directional_derivative(ql, vl),
            self.motor.inertia_directional_derivative(qm, vm),
        )

    def gyroscopic_matrix(self, q, qdot):
        ql, qm = self._split(q)
        vl, vm = self._split(qdot)
        return block_diag(self.link.gyroscopic_matrix(ql, vl), self.motor.gyroscopic_matrix(qm, vm))

    def damping(self, q):
        ql, qm = self._split(q)
        return block_diag(self.link.damping(ql), self.motor.damping(qm))

    def joint_potential(self, q):
        ql, qm = self._split(q)
        zeta = qm - ql
        return 0.5 * zeta @ self.stiffness @ zeta

    def potential(self, q):
        ql, qm = self._split(q)
        return self.link.potential(ql) + self.motor.potential(qm) + self.joint_potential(q)

    def potential_gradient(self, q):
        ql, qm = self._split(q)
        spring = self.stiffness @ (qm - ql)
        return np.concatenate([self.link.potential_gradient(ql) - spring, self.motor.potential_gradient(qm) + spring])

    def potential_hessian(self, q):
        ql, qm = self._split(q)
        K = self.stiffness
        return block_diag(self.link.potential_hessian(ql), self.motor.potential_hessian(qm)) + np.block(
            [[K, -K], [-K, K]]
        )

    def input_matrix(self, q):
        k = self.n_link
        return np.vstack([np.zeros((k, k)), self.motor_input])


def table1_model(stiffness: float = 31.0, *, damping: bool = True, load: float = 0.8) -> FjrModel:
    """Single flexible joint with the link/rotor constants used in the examples.

    Link inertia 0.031 kg m^2, rotor inertia 0.004 kg m^2, frictions 0.2 and
    0.007 N m s/rad, pendulum load 0.8 N m, B_m = 1.
    """
    link = ConstantInertiaModel(
        [[0.031]], [[0.2 if damping else 0.0]], GravityPotential([load])
    )
    motor = ConstantInertiaModel([[0.004]], [[0.007 if damping else 0.0]])
    return FjrModel(link, motor, [[stiffness]])


def _check_spd(A, name, strict):
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise DomainError(f"{name} matrix must be symmetric")
    lam_min = np.linalg.eigvalsh(A).min()
    if lam_min < 0 or (strict and lam_min == 0):
        raise DomainError(f"{name} matrix must be positive {'definite' if strict else 'semidefinite'}")


# --------------------------------------------------------------------------
# phase state
# --------------------------------------------------------------------------


@dataclass
class PhaseState:
    """Point (q, p) of the phase space T*Q."""

    q: np.ndarray
    p: np.ndarray
    n_link: int | None = field(default=None)

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        self.p = np.atleast_1d(np.asarray(self.p, dtype=float))
        if self.q.shape != self.p.shape:
            raise DomainError("q and p must have the same dimension")
        if self.n_link is not None and 2 * self.n_link != self.q.size:
            raise DomainError("link/motor partition does not cover q")

    @classmethod
    def from_vector(cls, x, n_link=None):
        x = np.asarray(x, dtype=float)
        n = x.size // 2
        return cls(x[:n], x[n:], n_link)

    @property
    def vector(self):
        return np.concatenate([self.q, self.p])

    def partition(self):
        """(q_l, q_m, p_l, p_m) for a flexible-joint state."""
        k = self.n_link if self.n_link is not None else self.q.size // 2
        return self.q[:k], self.q[k:], self.p[:k], self.p[k:]


def split_state(model: MechanicalModel, x):
    """Return (q, p) as float arrays, validating dimension and finiteness."""
    if isinstance(x, PhaseState):
        q, p = x.q, x.p
    else:
        x = np.asarray(x)
        if x.ndim != 1 or x.size != 2 * model.n:
            raise DomainError(f"state must have {2 * model.n} entries, got shape {x.shape}")
        q, p = x[: model.n], x[model.n :]
    if q.size != model.n or p.size != model.n:
        raise DomainError(f"state dimension {q.size} does not match model dimension {model.n}")
    if not (np.all(np.isfinite(q)) and np.all(np.isfinite(p))):
        raise DomainError("state has non-finite components")
    return q, p


def _velocity(model, q, p):
    if isinstance(model, ConstantInertiaModel):
        return model.inertia_inverse() @ p
    try:
        v = np.linalg.solve(model.inertia(q), p)
    except np.linalg.LinAlgError:
        raise SingularInertiaError(q) from None
    if not np.all(np.isfinite(v)):
        raise SingularInertiaError(q)
    return v


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def hamiltonian(model: MechanicalModel, x) -> float:
    """Total energy 1/2 p^T M^{-1}(q) p + P(q) [J]."""
    q, p = split_state(model, x)
    return float(0.5 * p @ _velocity(model, q, p) + model.potential(q))


def workless_matrix(model: MechanicalModel, x) -> np.ndarray:
    """E(q, p) = S_H(q, p) - 1/2 Mdot(q), evaluated at qdot = M^{-1}(q) p."""
    q, p = split_state(model, x)
    if model.constant_inertia:
        return np.zeros((model.n, model.n))
    v = _velocity(model, q, p)
    return model.gyroscopic_matrix(q, v) - 0.5 * model.inertia_directional_derivative(q, v)


def gradient_H(model: MechanicalModel, x):
    """(dH/dq, dH/dp) with the kinetic part of dH/dq written as E(q, p) M^{-1} p."""
    q, p = split_state(model, x)
    v = _velocity(model, q, p)
    dq = model.potential_gradient(q)
    if not model.constant_inertia:
        dq = dq + workless_matrix(model, np.concatenate([q, p])) @ v
    return dq, v


def ph_vector_field(model: MechanicalModel, x, u=None, t: float = 0.0) -> np.ndarray:
    """(qdot, pdot) = (M^{-1} p, -dP/dq - (E + D) M^{-1} p + B u) as a flat array."""
    q, p = split_state(model, x)
    if u is None:
        u = np.zeros(model.m)
    u = np.atleast_1d(np.asarray(u, dtype=float))
    if u.shape != (model.m,):
        raise DomainError(f"input must have {model.m} entries, got {u.shape}")
    if not np.all(np.isfinite(u)):
        raise DomainError("input has non-finite components")
    v = _velocity(model, q, p)
    if model.constant_inertia:
        force = model.damping(q) @ v
    else:
        force = (workless_matrix(model, np.concatenate([q, p])) + model.damping(q)) @ v
    pdot = -model.potential_gradient(q) - force + model.input_matrix(q) @ u
    return np.concatenate([v, pdot])


def natural_output(model: MechanicalModel, x) -> np.ndarray:
    """Power-conjugate output y = B(q)^T M^{-1}(q) p."""
    q, p = split_state(model, x)
    return model.input_matrix(q).T @ _velocity(model, q, p)
