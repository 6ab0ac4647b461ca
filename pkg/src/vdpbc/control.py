"""Tracking controllers for flexible-joint robots built on the virtual system.

The link controller shapes the link error (q_err_l, sigma_l) with

    p_lr  = M_l (qdot_ld - Lambda_l q_err_l),      sigma_l = p_lv - p_lr
    u_l   = pdot_lr + dP_l/dq_l + (E_l + D_l) M_l^{-1} p_lr
            - Pi_l q_err_l - K_ld M_l^{-1} sigma_l + omega_l

and its output is recycled as a motor position reference
q_md = q_l + K^{-1} u_l. The motor controller then tracks q_md with the same
structure, plus a coupling term that cancels the link error entering through
the spring. Evaluating everything at x_v = x gives the applied input.

Derivatives of q_md are taken either analytically through the model or by
central differences (see `ControllerConfig.derivatives`).
"""

from __future__ import annotations

from abc import ABC, abstractmethod
from dataclasses import dataclass, fields

import numpy as np
from scipy.linalg import block_diag, eigh

from . import _kernels as kern
from .exceptions import DomainError, SynthesisError
from .phmech import (
    ConstantInertiaModel,
    FjrModel,
    MechanicalModel,
    Potential,
    ZeroPotential,
    split_state,
)

__all__ = [
    "ControllerConfig",
    "ReferenceTrajectory",
    "SinusoidalTrajectory",
    "LinkControl",
    "ControlDecomposition",
    "RateBound",
    "CompiledController",
    "link_controller",
    "motor_reference",
    "motor_controller",
    "derive_beta",
    "on_reference_state",
]

DERIVATIVE_MODES = ("analytic", "finite_difference")


def _as_matrix(value, name):
    if callable(value):
        raise SynthesisError(f"{name} must be a constant matrix; state-dependent metrics are not supported")
    A = np.atleast_2d(np.asarray(value, dtype=float))
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise SynthesisError(f"{name} must be a square matrix")
    if not np.all(np.isfinite(A)):
        raise SynthesisError(f"{name} has non-finite entries")
    return A


def _require_pd(A, name):
    if not np.allclose(A, A.T, rtol=0, atol=1e-12 * max(1.0, np.abs(A).max())):
        raise SynthesisError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(A).min() <= 0:
        raise SynthesisError(f"{name} must be positive definite")


def _rate_margin(Pi, Lam):
    """Largest beta with Pi Lam + Lam^T Pi >= 2 beta Pi."""
    S = Pi @ Lam
    return float(eigh(S + S.T, 2.0 * Pi, eigvals_only=True)[0])


# --------------------------------------------------------------------------
# configuration
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ControllerConfig:
    """Gains of the link and motor controllers.

    link_rate / motor_rate are Lambda_l, Lambda_m (phi(q_err) = Lambda q_err),
    link_metric / motor_metric the constant storage blocks Pi_l, Pi_m and
    link_damping / motor_damping the injected damping K_ld, K_md.
    """

    link_rate: np.ndarray
    motor_rate: np.ndarray
    link_metric: np.ndarray
    motor_metric: np.ndarray
    link_damping: np.ndarray
    motor_damping: np.ndarray
    derivatives: str = "analytic"
    fd_step: float = 1e-4

    def __post_init__(self):
        names = {
            "link_rate": "Lambda_l",
            "motor_rate": "Lambda_m",
            "link_metric": "Pi_l",
            "motor_metric": "Pi_m",
            "link_damping": "K_ld",
            "motor_damping": "K_md",
        }
        for attr, label in names.items():
            object.__setattr__(self, attr, _as_matrix(getattr(self, attr), label))
        sizes = {getattr(self, attr).shape[0] for attr in names}
        if len(sizes) != 1:
            raise SynthesisError("all gain matrices must have the same dimension")
        for attr in ("link_metric", "motor_metric", "link_damping", "motor_damping"):
            _require_pd(getattr(self, attr), names[attr])
        for side, Pi, Lam in (("l", self.link_metric, self.link_rate), ("m", self.motor_metric, self.motor_rate)):
            if _rate_margin(Pi, Lam) <= 0:
                raise SynthesisError(
                    f"contraction inequality Pi_{side} Lambda_{side} + Lambda_{side}^T Pi_{side} "
                    f">= 2 beta_{side} Pi_{side} has no solution beta_{side} > 0"
                )
        if self.derivatives not in DERIVATIVE_MODES:
            raise SynthesisError(f"derivatives must be one of {DERIVATIVE_MODES}, got {self.derivatives!r}")
        if not self.fd_step > 0:
            raise SynthesisError("fd_step must be positive")

    @property
    def n(self):
        return self.link_rate.shape[0]

    @classmethod
    def table1(cls, **overrides):
        """Single-joint gains: Lambda_l = 10, Pi_l = 2 Lambda_l, K_ld = 0.6,
        Lambda_m = 15, Pi_m = 4 Lambda_m, K_md = 0.3."""
        gains = dict(
            link_rate=10.0,
            motor_rate=15.0,
            link_metric=20.0,
            motor_metric=60.0,
            link_damping=0.6,
            motor_damping=0.3,
        )
        gains.update(overrides)
        return cls(**gains)

    def storage_weight(self, model: FjrModel):
        """diag(Pi_l, Pi_m, M_l^{-1}, M_m^{-1}) for the (q_err_l, q_err_m, sigma_l, sigma_m) ordering."""
        _, Mli, _, Mmi = _constant_inertias(model)
        return block_diag(self.link_metric, self.motor_metric, Mli, Mmi)


# --------------------------------------------------------------------------
# reference trajectories
# --------------------------------------------------------------------------


class ReferenceTrajectory(ABC):
    """Desired link trajectory with time derivatives up to order four."""

    order = 4

    @property
    @abstractmethod
    def n(self) -> int: ...

    @abstractmethod
    def derivatives(self, t) -> np.ndarray:
        """Array (..., 5, n): q_d and its first four derivatives at the times t."""

    def __call__(self, t):
        return self.derivatives(t)[..., 0, :]


@dataclass(frozen=True)
class SinusoidalTrajectory(ReferenceTrajectory):
    """q_d(t) = offset + amplitude sin(frequency t + phase), frequency in rad/s."""

    amplitude: np.ndarray = np.pi / 4
    frequency: np.ndarray = 1.0
    phase: np.ndarray = 0.0
    offset: np.ndarray = 0.0

    def __post_init__(self):
        arrs = np.broadcast_arrays(
            *(np.atleast_1d(np.asarray(getattr(self, f.name), dtype=float)) for f in fields(self))
        )
        for f, a in zip(fields(self), arrs):
            if not np.all(np.isfinite(a)):
                raise DomainError(f"trajectory {f.name} must be finite")
            object.__setattr__(self, f.name, a.copy())

    @property
    def n(self):
        return self.amplitude.shape[0]

    def derivatives(self, t):
        t = np.asarray(t, dtype=float)
        k = np.arange(5)[:, None]
        arg = self.frequency * t[..., None, None] + self.phase + 0.5 * np.pi * k
        out = self.amplitude * self.frequency**k * np.sin(arg)
        out[..., 0, :] += self.offset
        return out


# --------------------------------------------------------------------------
# decomposition records
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class LinkControl:
    q_err: np.ndarray
    p_r: np.ndarray
    p_r_dot: np.ndarray
    sigma: np.ndarray
    u_ff: np.ndarray
    u_fb: np.ndarray
    u: np.ndarray


_ROW_FIELDS = {
    "link_error": kern.EQL,
    "p_lr": kern.PLR,
    "p_lr_dot": kern.PLR_D,
    "sigma_l": kern.SL,
    "u_l_ff": kern.ULFF,
    "u_l_fb": kern.ULFB,
    "u_l": kern.UL,
    "q_md": kern.QMD,
    "q_md_dot": kern.QMD_D1,
    "q_md_ddot": kern.QMD_D2,
    "motor_error": kern.EQM,
    "p_mr": kern.PMR,
    "p_mr_dot": kern.PMR_D,
    "sigma_m": kern.SM,
    "u_ff": kern.UFF,
    "u_fb": kern.UFB,
    "u": kern.U,
    "link_error_rate": kern.EQL_RATE,
    "motor_error_rate": kern.EQM_RATE,
    "sigma_l_rate": kern.SL_RATE,
    "sigma_m_rate": kern.SM_RATE,
}


@dataclass(frozen=True)
class ControlDecomposition:
    """Input u = u_ff + u_fb together with every intermediate of the chain."""

    link_error: np.ndarray
    p_lr: np.ndarray
    p_lr_dot: np.ndarray
    sigma_l: np.ndarray
    u_l_ff: np.ndarray
    u_l_fb: np.ndarray
    u_l: np.ndarray
    q_md: np.ndarray
    q_md_dot: np.ndarray
    q_md_ddot: np.ndarray
    motor_error: np.ndarray
    p_mr: np.ndarray
    p_mr_dot: np.ndarray
    sigma_m: np.ndarray
    u_ff: np.ndarray
    u_fb: np.ndarray
    u: np.ndarray
    link_error_rate: np.ndarray
    motor_error_rate: np.ndarray
    sigma_l_rate: np.ndarray
    sigma_m_rate: np.ndarray

    @classmethod
    def from_rows(cls, rows):
        return cls(**{name: rows[i].copy() for name, i in _ROW_FIELDS.items()})

    @property
    def error(self):
        """(q_err_l, q_err_m, sigma_l, sigma_m) stacked."""
        return np.concatenate([self.link_error, self.motor_error, self.sigma_l, self.sigma_m])

    @property
    def error_rate(self):
        return np.concatenate([self.link_error_rate, self.motor_error_rate, self.sigma_l_rate, self.sigma_m_rate])


# --------------------------------------------------------------------------
# compiled closed loop
# --------------------------------------------------------------------------


def _constant_inertias(model: FjrModel):
    if not isinstance(model, FjrModel):
        raise SynthesisError("the motor controller needs a flexible-joint model")
    link, motor = model.link, model.motor
    if not (isinstance(link, ConstantInertiaModel) and isinstance(motor, ConstantInertiaModel)):
        raise SynthesisError("the motor controller is implemented for constant link and motor inertia only")
    return link.mass, link.inertia_inverse(), motor.mass, motor.inertia_inverse()


class CompiledController:
    """Closed-loop controller packed for the compiled kernels.

    `fd_offset` and `fd_step` select the finite-difference grid: the reference
    table passed to `evaluate` must hold samples spaced fd_step / fd_offset apart.
    """

    def __init__(self, model: FjrModel, cfg: ControllerConfig, traj: ReferenceTrajectory, *, fd_offset=None, fd_step=None):
        Ml, _, Mm, _ = _constant_inertias(model)
        link, motor = model.link, model.motor
        n = model.n_link
        if cfg.n != n or traj.n != n:
            raise SynthesisError(f"gains and trajectory must have dimension {n}")
        if not isinstance(motor.potential_fn, ZeroPotential):
            raise SynthesisError("motor side must carry no intrinsic potential")
        pot: Potential = link.potential_fn
        if pot.kind not in (0, 1, 2):
            raise SynthesisError(f"unsupported link potential {type(pot).__name__}")
        if cfg.derivatives == "analytic":
            fd_offset, fd_step = 0, 0.0
        else:
            fd_offset = 1 if fd_offset is None else int(fd_offset)
            fd_step = cfg.fd_step if fd_step is None else float(fd_step)
        G, w = pot.kernel_arrays()
        self.model, self.cfg, self.traj = model, cfg, traj
        self.n = n
        self.fd_offset, self.fd_step = fd_offset, fd_step
        self.params = kern.pack_params(
            Ml, Mm, link.friction, motor.friction, model.stiffness, model.motor_input,
            pot.kind, G, w, cfg.link_rate, cfg.motor_rate, cfg.link_metric, cfg.motor_metric,
            cfg.link_damping, cfg.motor_damping, fd_offset, fd_step,
        )

    @property
    def pad(self):
        """Table rows needed on each side of a sample for the difference stencil."""
        return 2 * self.fd_offset

    def point_table(self, t):
        """Reference table around a single time t; the sample sits at row `pad`."""
        h = self.fd_step / self.fd_offset if self.fd_offset else 0.0
        times = t + h * (np.arange(2 * self.pad + 1) - self.pad)
        return np.ascontiguousarray(self.traj.derivatives(times))

    def evaluate(self, x_v, t, omega=None):
        x_v = np.ascontiguousarray(x_v, dtype=float)
        omega = np.zeros(self.n) if omega is None else np.atleast_1d(np.asarray(omega, dtype=float))
        if omega.shape != (self.n,) or not np.all(np.isfinite(omega)):
            raise DomainError(f"omega must be a finite {self.n}-vector")
        return kern.chain(self.params, x_v, self.point_table(t), self.pad, omega)

    def directional(self, x_v, dx_v, t):
        """Derivative of every chain row along dx_v."""
        return kern.chain_directional(
            self.params, np.ascontiguousarray(x_v, dtype=float), np.ascontiguousarray(dx_v, dtype=float),
            self.point_table(t), self.pad,
        )


def _compiled(model, cfg, traj):
    return CompiledController(model, cfg, traj)


# --------------------------------------------------------------------------
# operations
# --------------------------------------------------------------------------


def link_controller(model, cfg: ControllerConfig, x_l, traj: ReferenceTrajectory, t, omega_l=None, *, x_actual=None):
    """Link control law for a rigid mechanical system (or the links of an FJR).

    x_l is the (virtual) link state (q_l, p_l); the inertia and the workless
    matrix are evaluated at the actual state x_actual, which defaults to x_l.
    """
    link: MechanicalModel = model.link if isinstance(model, FjrModel) else model
    if cfg.n != link.n or traj.n != link.n:
        raise SynthesisError(f"gains and trajectory must have dimension {link.n}")
    qv, pv = split_state(link, x_l)
    q, p = (qv, pv) if x_actual is None else split_state(link, x_actual)
    n = link.n
    omega_l = np.zeros(n) if omega_l is None else np.atleast_1d(np.asarray(omega_l, dtype=float))
    if omega_l.shape != (n,) or not np.all(np.isfinite(omega_l)):
        raise DomainError(f"omega_l must be a finite {n}-vector")
    d = traj.derivatives(float(t))
    M = link.inertia(q)
    Minv = np.linalg.inv(M)
    qdot = Minv @ p
    qdot_v = Minv @ pv

    q_err = qv - d[0]
    ref_vel = d[1] - cfg.link_rate @ q_err
    p_r = M @ ref_vel
    p_r_dot = link.inertia_directional_derivative(q, qdot) @ ref_vel + M @ (d[2] - cfg.link_rate @ (qdot_v - d[1]))
    sigma = pv - p_r
    if link.constant_inertia:
        E = np.zeros((n, n))
    else:
        E = link.gyroscopic_matrix(q, qdot) - 0.5 * link.inertia_directional_derivative(q, qdot)
    u_ff = p_r_dot + link.potential_gradient(qv) + (E + link.damping(q)) @ Minv @ p_r
    u_fb = -cfg.link_metric @ q_err - cfg.link_damping @ Minv @ sigma + omega_l
    return u_ff + u_fb, LinkControl(q_err, p_r, p_r_dot, sigma, u_ff, u_fb, u_ff + u_fb)


def motor_reference(model: FjrModel, cfg: ControllerConfig, x, traj: ReferenceTrajectory, t, x_v=None):
    """(q_md, qdot_md, qddot_md) of the motor position reference q_l + K^{-1} u_l."""
    ctrl = _compiled(model, cfg, traj)
    x_v = split_state(model, x if x_v is None else x_v)
    split_state(model, x)
    rows = ctrl.evaluate(np.concatenate(x_v), float(t))
    return rows[kern.QMD].copy(), rows[kern.QMD_D1].copy(), rows[kern.QMD_D2].copy()


def motor_controller(model: FjrModel, cfg: ControllerConfig, x_v, x, traj: ReferenceTrajectory, t, omega=None):
    """Applied input u(x_v, x, t) and its decomposition; use x_v = x on the plant."""
    ctrl = _compiled(model, cfg, traj)
    qv, pv = split_state(model, x_v)
    split_state(model, x)
    dec = ControlDecomposition.from_rows(ctrl.evaluate(np.concatenate([qv, pv]), float(t), omega))
    return dec.u, dec


@dataclass(frozen=True)
class RateBound:
    """Contraction margins. Iterates as (beta_l, beta_m, beta).

    damping_rate is lambda_min(D + K_d) lambda_min(M^{-1}) over the full
    system; blockwise replaces it by the link and motor terms separately.
    """

    beta_l: float
    beta_m: float
    beta: float
    damping_rate: float
    blockwise: float

    def __iter__(self):
        return iter((self.beta_l, self.beta_m, self.beta))


def derive_beta(cfg: ControllerConfig, model: FjrModel, q=None) -> RateBound:
    if not isinstance(model, FjrModel):
        raise SynthesisError("derive_beta needs a flexible-joint model")
    if cfg.n != model.n_link:
        raise SynthesisError(f"gains must have dimension {model.n_link}")
    q = np.zeros(model.n) if q is None else np.asarray(q, dtype=float)
    ql, qm = q[: model.n_link], q[model.n_link :]
    beta_l = _rate_margin(cfg.link_metric, cfg.link_rate)
    beta_m = _rate_margin(cfg.motor_metric, cfg.motor_rate)

    def rate(D, Kd, M):
        return np.linalg.eigvalsh(D + Kd).min() / np.linalg.eigvalsh(M).max()

    D = model.damping(q)
    Kd = block_diag(cfg.link_damping, cfg.motor_damping)
    full = float(rate(D, Kd, model.inertia(q)))
    link_rate = rate(model.link.damping(ql), cfg.link_damping, model.link.inertia(ql))
    motor_rate = rate(model.motor.damping(qm), cfg.motor_damping, model.motor.inertia(qm))
    return RateBound(
        beta_l=beta_l,
        beta_m=beta_m,
        beta=min(beta_l, beta_m, full),
        damping_rate=full,
        blockwise=float(min(beta_l, beta_m, link_rate, motor_rate)),
    )


def on_reference_state(model: FjrModel, cfg: ControllerConfig, traj: ReferenceTrajectory, t0=0.0):
    """Plant state with every error coordinate zero at time t0."""
    Ml, _, Mm, _ = _constant_inertias(model)
    ctrl = _compiled(model, cfg, traj)
    n = model.n_link
    d = traj.derivatives(float(t0))
    x = np.concatenate([d[0], np.zeros(n), Ml @ d[1], np.zeros(n)])
    # q_md depends on the link state only; qdot_md also needs q_m
    x[n : 2 * n] = ctrl.evaluate(x, t0)[kern.QMD]
    x[3 * n :] = Mm @ ctrl.evaluate(x, t0)[kern.QMD_D1]
    return x
