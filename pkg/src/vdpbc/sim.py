"""Fixed-step simulation of the plant, the closed loop and the prolonged closed loop.

Closed-loop and prolonged runs go through the compiled kernels; the
reference is tabulated on a half-step grid t_j = j dt / 2 so that every RK4
stage reads its derivatives from the table.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import _kernels as kern
from .control import CompiledController, ControllerConfig, ReferenceTrajectory, derive_beta
from .exceptions import DivergenceError, DomainError
from .phmech import (
    ConstantInertiaModel,
    FjrModel,
    MechanicalModel,
    ZeroPotential,
    hamiltonian,
    natural_output,
    ph_vector_field,
    split_state,
)

__all__ = [
    "IntegratorConfig",
    "SimulationRecord",
    "ProlongedRecord",
    "OpenLoopRecord",
    "DecayEstimate",
    "simulate_closed_loop",
    "simulate_prolonged",
    "simulate_open_loop",
    "measured_decay_rate",
    "transient_time",
]

SCHEMES = ("rk4", "euler")


@dataclass(frozen=True)
class IntegratorConfig:
    dt: float = 1e-4
    t_end: float = 10.0
    scheme: str = "rk4"
    record_stride: int = 1
    bound: float = 1e6

    def __post_init__(self):
        if not (np.isfinite(self.dt) and self.dt > 0):
            raise DomainError("dt must be positive")
        if not (np.isfinite(self.t_end) and self.t_end >= self.dt):
            raise DomainError("t_end must be at least dt")
        if self.scheme not in SCHEMES:
            raise DomainError(f"scheme must be one of {SCHEMES}")
        if int(self.record_stride) != self.record_stride or self.record_stride < 1:
            raise DomainError("record_stride must be a positive integer")

    @property
    def steps(self) -> int:
        return int(round(self.t_end / self.dt))


@dataclass
class SimulationRecord:
    """Recorded closed-loop samples.

    err stacks (q_err_l, q_err_m, sigma_l, sigma_m) along axis 1, each of
    length n; V and dVdt use diag(Pi_l, Pi_m, M_l^{-1}, M_m^{-1}).
    """

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    u_ff: np.ndarray
    u_fb: np.ndarray
    err: np.ndarray
    err_rate: np.ndarray
    H: np.ndarray
    V: np.ndarray
    dVdt: np.ndarray
    beta: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.u.shape[1]

    @property
    def q(self):
        return self.x[:, : 2 * self.n]

    @property
    def p(self):
        return self.x[:, 2 * self.n :]

    def error_norms(self):
        """(|q_err_l|, |q_err_m|, |sigma_l|, |sigma_m|) per sample."""
        return np.linalg.norm(self.err, axis=2)

    def summary(self, threshold: float = 1e-3) -> dict:
        norms = self.error_norms()
        est = measured_decay_rate(self.t, self.V)
        return {
            "final_q_err_l": float(norms[-1, 0]),
            "final_q_err_m": float(norms[-1, 1]),
            "final_sigma_l": float(norms[-1, 2]),
            "final_sigma_m": float(norms[-1, 3]),
            "beta": self.beta,
            "beta_hat": est.rate,
            "beta_hat_truncated": est.truncated,
            "peak_u": float(np.abs(self.u).max()),
            "transient_time": transient_time(self.t, norms[:, 0], threshold),
            "transient_time_all": transient_time(self.t, norms.max(axis=1), threshold),
        }

    def rows(self):
        """Flat table in the order t, q_l, q_m, p_l, p_m, u, u_ff, u_fb, errors, H, V, dVdt."""
        cols = [self.t[:, None], self.x, self.u, self.u_ff, self.u_fb, self.err.reshape(len(self.t), -1),
                self.H[:, None], self.V[:, None], self.dVdt[:, None]]
        return np.hstack(cols)


@dataclass
class ProlongedRecord:
    """Closed-loop record plus the virtual state, its tangent and differential storage."""

    closed: SimulationRecord
    x_v: np.ndarray
    dx_v: np.ndarray
    dx_err: np.ndarray
    dx_err_rate: np.ndarray
    V: np.ndarray
    dVdt: np.ndarray
    dy: np.ndarray
    domega: np.ndarray

    @property
    def t(self):
        return self.closed.t

    def supply(self):
        """dy^T domega per sample."""
        return np.einsum("ij,ij->i", self.dy, self.domega)


@dataclass
class OpenLoopRecord:
    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    H: np.ndarray
    dissipated: np.ndarray
    supplied: np.ndarray

    def balance_residual(self):
        """H(t) + int v^T D v - int y^T u - H(0) per sample."""
        return self.H + self.dissipated - self.supplied - self.H[0]


@dataclass(frozen=True)
class DecayEstimate:
    rate: float
    truncated: bool
    window: tuple


def transient_time(t, norm, threshold=1e-3) -> float:
    """First time after which `norm` stays below threshold; inf if never."""
    above = np.nonzero(np.asarray(norm) >= threshold)[0]
    if above.size == 0:
        return float(t[0])
    if above[-1] == len(t) - 1:
        return float("inf")
    return float(t[above[-1] + 1])


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------


def _signal_table(sig, times, n):
    if sig is None:
        return np.zeros((times.size, n))
    vals = np.array([np.atleast_1d(np.asarray(sig(float(t)), dtype=float)) for t in times])
    if vals.shape != (times.size, n):
        raise DomainError(f"input signal must return {n}-vectors")
    if not np.all(np.isfinite(vals)):
        raise DomainError("input signal has non-finite values")
    return np.ascontiguousarray(vals)


class _Grid:
    """Half-step reference table shared by the closed-loop kernels."""

    def __init__(self, model, cfg, traj, integ):
        if cfg.derivatives == "analytic":
            self.ctrl = CompiledController(model, cfg, traj)
        else:
            # finite differences with step dt: two half-steps on the grid
            self.ctrl = CompiledController(model, cfg, traj, fd_offset=2, fd_step=integ.dt)
        self.pad = self.ctrl.pad
        self.nsteps = integ.steps
        self.dt = integ.dt
        j = np.arange(2 * self.nsteps + 1 + 2 * self.pad) - self.pad
        self.times = j * (integ.dt / 2)
        self.tab = np.ascontiguousarray(traj.derivatives(self.times))

    def index(self, steps):
        return self.pad + 2 * steps


def _storage(ctrl: CompiledController, err, rate):
    P = ctrl.params
    W = [ctrl.cfg.link_metric, ctrl.cfg.motor_metric, P[kern.P_MLI], P[kern.P_MMI]]
    V = np.zeros(err.shape[0])
    dV = np.zeros(err.shape[0])
    for k, Wk in enumerate(W):
        We = err[:, k] @ Wk.T
        V += 0.5 * np.einsum("ij,ij->i", err[:, k], We)
        dV += np.einsum("ij,ij->i", We, rate[:, k])
    return V, dV


def _closed_record(grid, X, steps, wtab, beta):
    ctrl = grid.ctrl
    idx = grid.index(steps)
    out, H = kern.evaluate_rows(ctrl.params, X, grid.tab, wtab, idx)
    err = out[:, kern.ERR_ROWS]
    rate = out[:, kern.RATE_ROWS]
    V, dV = _storage(ctrl, err, rate)
    return SimulationRecord(
        t=steps * grid.dt,
        x=X,
        u=out[:, kern.U],
        u_ff=out[:, kern.UFF],
        u_fb=out[:, kern.UFB],
        err=err,
        err_rate=rate,
        H=H,
        V=V,
        dVdt=dV,
        beta=beta,
    )


def _check_x0(model, x0):
    q, p = split_state(model, x0)
    return np.ascontiguousarray(np.concatenate([q, p]))


def _beta(model, cfg):
    return derive_beta(cfg, model).beta


# --------------------------------------------------------------------------
# simulations
# --------------------------------------------------------------------------


def simulate_closed_loop(
    model,
    cfg: ControllerConfig,
    traj: ReferenceTrajectory,
    integ: IntegratorConfig,
    x0,
    omega: Callable | None = None,
) -> SimulationRecord:
    """Integrate the plant under u(x, x, t) (+ omega(t) in the feedback part)."""
    beta = _beta(model, cfg)
    x0 = _check_x0(model, x0)
    grid = _Grid(model, cfg, traj, integ)
    wtab = _signal_table(omega, grid.times, grid.ctrl.n)
    X, steps, failed = kern.integrate_closed_loop(
        grid.ctrl.params, x0, grid.tab, wtab, grid.pad, integ.dt, grid.nsteps,
        integ.scheme == "rk4", int(integ.record_stride), float(integ.bound),
    )
    if failed >= 0:
        raise DivergenceError(failed * integ.dt)
    return _closed_record(grid, X, steps, wtab, beta)


def simulate_prolonged(
    model,
    cfg: ControllerConfig,
    traj: ReferenceTrajectory,
    integ: IntegratorConfig,
    x0,
    dx0,
    *,
    x_v0=None,
    domega: Callable | None = None,
) -> ProlongedRecord:
    """Co-integrate the closed loop, the virtual system and its tangent.

    The virtual state starts at x_v0 (default x0) and is driven by the same
    controller; its tangent dx_v follows the variational virtual dynamics
    with input variation du = (du/dx_v) dx_v + domega(t).
    """
    beta = _beta(model, cfg)
    x0 = _check_x0(model, x0)
    xv0 = x0.copy() if x_v0 is None else _check_x0(model, x_v0)
    dx0 = np.ascontiguousarray(np.asarray(dx0, dtype=float))
    if dx0.shape != x0.shape or not np.all(np.isfinite(dx0)):
        raise DomainError(f"tangent vector must be a finite {x0.size}-vector")
    grid = _Grid(model, cfg, traj, integ)
    n = grid.ctrl.n
    wtab = np.zeros((grid.times.size, n))
    dwtab = _signal_table(domega, grid.times, n)
    P = grid.ctrl.params
    X, XV, DX, steps, failed = kern.integrate_prolonged(
        P, x0, xv0, dx0, grid.tab, wtab, dwtab, grid.pad, integ.dt, grid.nsteps,
        integ.scheme == "rk4", int(integ.record_stride), float(integ.bound),
    )
    if failed >= 0:
        raise DivergenceError(failed * integ.dt)
    closed = _closed_record(grid, X, steps, wtab, beta)
    idx = grid.index(steps)
    d = kern.evaluate_tangent_rows(P, XV, DX, grid.tab, idx)
    dw = dwtab[idx]
    dx_err = d[:, kern.ERR_ROWS]
    dx_rate = d[:, kern.RATE_ROWS].copy()
    dx_rate[:, 3] += dw @ P[kern.P_BM].T
    V, dV = _storage(grid.ctrl, dx_err, dx_rate)
    dy = dx_err[:, 3] @ P[kern.P_MMI].T @ P[kern.P_BM]
    return ProlongedRecord(closed, XV, DX, dx_err, dx_rate, V, dV, dy, dw)


def _compiled_plant(model):
    """Kernel parameters for a constant-inertia FJR with a built-in potential, else None."""
    if not isinstance(model, FjrModel):
        return None
    link, motor = model.link, model.motor
    if not (isinstance(link, ConstantInertiaModel) and isinstance(motor, ConstantInertiaModel)):
        return None
    if not isinstance(motor.potential_fn, ZeroPotential) or link.potential_fn.kind not in (0, 1, 2):
        return None
    n = model.n_link
    G, w = link.potential_fn.kernel_arrays()
    I = np.eye(n)
    return kern.pack_params(link.mass, motor.mass, link.friction, motor.friction, model.stiffness,
                            model.motor_input, link.potential_fn.kind, G, w, I, I, I, I, I, I)


def simulate_open_loop(model: MechanicalModel, integ: IntegratorConfig, x0, u: Callable | None = None) -> OpenLoopRecord:
    """Integrate the plant under an external input u(t).

    The dissipated energy int v^T D v and the supplied energy int y^T u are
    integrated alongside the state, so the energy balance inherits the
    integrator order. Constant-inertia flexible-joint models use the compiled
    plant; everything else goes through the generic vector field.
    """
    x0 = _check_x0(model, x0)
    N = x0.size
    m = model.m
    dt = integ.dt
    nsteps = integ.steps
    stride = int(integ.record_stride)
    P = _compiled_plant(model)
    if P is not None:
        utab = _signal_table(u, np.arange(2 * nsteps + 1) * (dt / 2), m)
        Z, steps, failed = kern.integrate_open_loop(
            P, np.concatenate([x0, [0.0, 0.0]]), utab, dt, nsteps, integ.scheme == "rk4", stride, float(integ.bound)
        )
        if failed >= 0:
            raise DivergenceError(failed * dt)
        X = Z[:, :N]
        t = steps * dt
        H = np.array([kern.hamiltonian(P, x) for x in X])
        return OpenLoopRecord(t, X, utab[2 * steps], H, Z[:, N], Z[:, N + 1])

    def u_at(t):
        if u is None:
            return np.zeros(m)
        val = np.atleast_1d(np.asarray(u(t), dtype=float))
        if val.shape != (m,) or not np.all(np.isfinite(val)):
            raise DomainError(f"input signal must return finite {m}-vectors")
        return val

    def rhs(t, z):
        x = z[:N]
        ut = u_at(t)
        q = x[: model.n]
        v = np.linalg.solve(model.inertia(q), x[model.n :])
        power_d = v @ model.damping(q) @ v
        power_s = natural_output(model, x) @ ut
        return np.concatenate([ph_vector_field(model, x, ut, t), [power_d, power_s]])

    z = np.concatenate([x0, [0.0, 0.0]])
    ts, zs = [0.0], [z.copy()]
    for k in range(nsteps):
        t = k * dt
        if integ.scheme == "rk4":
            k1 = rhs(t, z)
            k2 = rhs(t + dt / 2, z + dt / 2 * k1)
            k3 = rhs(t + dt / 2, z + dt / 2 * k2)
            k4 = rhs(t + dt, z + dt * k3)
            z = z + dt / 6 * (k1 + 2 * k2 + 2 * k3 + k4)
        else:
            z = z + dt * rhs(t, z)
        if not np.all(np.isfinite(z[:N])) or np.abs(z[:N]).max() > integ.bound:
            raise DivergenceError((k + 1) * dt, float(np.linalg.norm(z[:N])))
        if (k + 1) % stride == 0 or k + 1 == nsteps:
            ts.append((k + 1) * dt)
            zs.append(z.copy())
    Z = np.array(zs)
    t = np.array(ts)
    X = Z[:, :N]
    U = np.array([u_at(tt) for tt in t])
    H = np.array([hamiltonian(model, x) for x in X])
    return OpenLoopRecord(t, X, U, H, Z[:, N], Z[:, N + 1])


def _stall_index(t, V, sel, frac=0.01, ratio=0.1):
    """First sample where the local decay rate falls below `ratio` of the
    rate at the window start; rates are taken over `frac` of the window."""
    idx = np.nonzero(sel)[0]
    if idx.size < 4:
        return None
    span = max(1, int(frac * idx.size))
    logV = np.log(np.maximum(V[idx], 1e-300))
    if idx.size <= 2 * span:
        return None
    local = -(logV[span:] - logV[:-span]) / (t[idx][span:] - t[idx][:-span])
    if not local[0] > 0:
        return None
    slow = np.nonzero(local < ratio * local[0])[0]
    return int(idx[slow[0]] + span) if slow.size else None


def measured_decay_rate(t, V=None, window=None, floor: float = 1e-24) -> DecayEstimate:
    """Least-squares slope of log V over a window, divided by -2.

    `t` may be a record with `t` and `V` attributes. Without an explicit
    window the fit starts once V has dropped two decades below its peak (or
    at mid-horizon if it never does). Samples below floor * max(V) are
    numeric zero: they end the window early and the estimate is flagged
    as truncated. So does a stall, where V settles onto the integrator's
    truncation floor long before round-off.
    """
    if V is None:
        t, V = t.t, t.V
    t = np.asarray(t, dtype=float)
    V = np.asarray(V, dtype=float)
    peak = float(V.max()) if V.size else 0.0
    if not peak > 0:
        return DecayEstimate(float("nan"), True, (float("nan"), float("nan")))
    if window is None:
        dropped = np.nonzero(V <= 1e-2 * peak)[0]
        lo = t[dropped[0]] if dropped.size else t[0] + 0.5 * (t[-1] - t[0])
        window = (lo, t[-1])
    lo, hi = window
    sel = (t >= lo) & (t <= hi)
    truncated = False
    small = np.nonzero(sel & (V <= max(floor * peak, 1e-300)))[0]
    if small.size:
        sel &= np.arange(t.size) < small[0]
        truncated = True
    stall = _stall_index(t, V, sel)
    if stall is not None:
        sel &= np.arange(t.size) < stall
        truncated = True
    if sel.sum() < 2:
        return DecayEstimate(float("nan"), True, (float(lo), float(hi)))
    slope = np.polyfit(t[sel], np.log(V[sel]), 1)[0]
    return DecayEstimate(float(-slope / 2), truncated, (float(t[sel][0]), float(t[sel][-1])))
