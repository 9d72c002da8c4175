"""Governor power flow: post-droop steady state with compensation detection.

Two solvers share the Newton machinery:

* :func:`solve_dispatch_pf` -- ordinary power flow (slack absorbs the
  mismatch, frequency pinned).  Used by :func:`balance_base` to bring a case
  file into exact pre-disturbance equilibrium so that frequency deviations
  measure the disturbance and not file rounding.

* :func:`solve_gpf` -- the dense optimization: minimize ``0.5*||n||^2``
  subject to the governor network equations, solved as a Newton iteration on
  the first-order optimality system.  Eliminating the compensation current
  ``n`` through stationarity (``n = -lambda`` for the KCL multipliers)
  leaves a saddle system in the primal unknowns and multipliers.  On a
  survivable system the optimum is ``n = 0`` and the solution coincides with
  the ordinary droop power flow; on a collapsed system the nonzero ``n``
  quantifies the deficit while the iteration still converges.

Voltage limiting and step damping keep iterates inside the region where the
constant-power injection currents are well behaved.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from .case_io import NetworkCase
from .droop import DroopCurve, aggregate_gain
from .errors import (
    ConvergenceError,
    GridFreqError,
    SingularInjectionError,
    SingularSystemError,
)
from .linear_solver import SparseSystem
from .network_model import (
    MODE_DISPATCH,
    MODE_GOVERNOR,
    Formulation,
    SystemState,
)


@dataclass(frozen=True)
class SolverConfig:
    """Newton iteration controls shared by all solvers."""

    tol_residual: float = 1e-6
    max_iters: int = 200
    damping_factor: float = 0.7
    v_step_limit: float = 0.1
    df_step_limit: float = 0.1
    flat_start: bool = False
    polish_steps: int = 2


@dataclass
class GpfSolution:
    """Result of a governor power flow solve."""

    state: SystemState
    n_re: np.ndarray
    n_im: np.ndarray
    converged: bool
    iterations: int
    df: float
    objective: float
    residual: float
    x: np.ndarray = field(repr=False)
    lam: np.ndarray = field(repr=False)
    message: str = ""

    @property
    def n_inf(self) -> float:
        if self.n_re.size == 0:
            return 0.0
        return float(
            max(np.abs(self.n_re).max(), np.abs(self.n_im).max())
        )


def _step_scale(form: Formulation, dx: np.ndarray, cfg: SolverConfig) -> float:
    """Scale factor keeping voltage and frequency moves within limits."""
    dv = np.abs(dx[: 2 * form.n]).max() if form.n else 0.0
    ddf = abs(dx[form.iDF])
    scale = 1.0
    if dv > cfg.v_step_limit:
        scale = min(scale, cfg.v_step_limit / dv)
    if ddf > cfg.df_step_limit:
        scale = min(scale, cfg.df_step_limit / ddf)
    if scale < 1.0:
        scale *= cfg.damping_factor
    return scale


def _try_step(form, x, dx, scale):
    """Apply a damped step, backtracking away from voltage collapse."""
    for _ in range(25):
        x_new = x + scale * dx
        try:
            c = form.residual(x_new)
            return x_new, c
        except SingularInjectionError:
            scale *= 0.5
    raise ConvergenceError("step repeatedly drove a bus voltage to zero")


def solve_dispatch_pf(net: NetworkCase, cfg: SolverConfig | None = None,
                      Y=None) -> tuple[SystemState, np.ndarray, Formulation]:
    """Ordinary power flow with an ideal slack; returns (state, x, form)."""
    cfg = cfg or SolverConfig()
    form = Formulation(net, Y=Y, mode=MODE_DISPATCH)
    x = form.init_state(flat=cfg.flat_start)
    c = form.residual(x)
    for _ in range(cfg.max_iters):
        if np.abs(c).max() < cfg.tol_residual:
            for _ in range(cfg.polish_steps):
                J = form.jacobian(x)
                dx = SparseSystem(form.n_x, *_coo(J)).solve(-c)
                x_new, c_new = _try_step(form, x, dx, 1.0)
                if np.abs(c_new).max() >= np.abs(c).max():
                    break
                x, c = x_new, c_new
            return form.state_parts(x), x, form
        J = form.jacobian(x)
        dx = SparseSystem(form.n_x, *_coo(J)).solve(-c)
        x, c = _try_step(form, x, dx, _step_scale(form, dx, cfg))
    raise ConvergenceError(
        "dispatch power flow did not converge",
        residual=float(np.abs(c).max()),
        iterations=cfg.max_iters,
    )


def balance_base(net: NetworkCase, cfg: SolverConfig | None = None) -> NetworkCase:
    """Return a copy of ``net`` in exact pre-disturbance equilibrium.

    Solves the ordinary power flow and writes back the slack unit's actual
    output, the solved reactive dispatch and the solved voltage profile, so
    the subsequent governor power flow of the undisturbed system sits at
    ``df = 0`` identically.
    """
    state, _, form = solve_dispatch_pf(net, cfg)
    out = copy.deepcopy(net)
    gens = out.in_service_gens()
    for gi, g in enumerate(gens):
        g.pg += float(state.dp[gi])
        g.qg = float(state.qg[gi])
    vm = state.vmag()
    va = np.arctan2(state.vim, state.vre)
    out.vm0 = [float(v) for v in vm]
    out.va0 = [float(a) for a in va]
    out.balanced = True
    return out


def _coo(J: sp.spmatrix):
    c = J.tocoo()
    return c.row, c.col, c.data


def _kkt_system(form: Formulation, x, lam, J, delta: float = 0.0):
    """Assemble the saddle system [[H + delta*I, J^T], [J, -S]].

    ``delta`` is an inertia-correction regularizer: it alters only the
    iteration matrix (never the residual), so a converged answer does not
    depend on it.
    """
    n_x = form.n_x
    nk = 2 * form.n                      # KCL rows carry the compensation
    hr, hc, hv = form.hessian_triplets(x, lam)
    Jc = J.tocoo()
    rows = [hr, Jc.col, Jc.row + n_x, np.arange(nk) + n_x]
    cols = [hc, Jc.row + n_x, Jc.col, np.arange(nk) + n_x]
    vals = [hv, Jc.data, Jc.data, -np.ones(nk)]
    if delta > 0.0:
        rows.append(np.arange(n_x))
        cols.append(np.arange(n_x))
        vals.append(np.full(n_x, delta))
    return SparseSystem(
        2 * n_x,
        np.concatenate(rows),
        np.concatenate(cols),
        np.concatenate(vals),
    )


def _kkt_residual(form: Formulation, c, lam, J):
    nk = 2 * form.n
    r = np.concatenate([J.T @ lam, c])
    r[form.n_x: form.n_x + nk] -= lam[:nk]
    return r


def _newton_kkt(form: Formulation, x: np.ndarray, lam: np.ndarray,
                cfg: SolverConfig, tol: float, budget: int,
                shift: np.ndarray | None = None):
    """Newton on the optimality saddle system, optionally with a constant
    current shift added to the KCL rows (used by source stepping).

    The primal step obeys the voltage/frequency limits while the dual step
    is taken in full; both are backtracked together when the KKT residual
    would not decrease.  Returns (x, lam, converged, iters, message).
    """
    n_x = form.n_x
    nk = 2 * form.n

    def res(xv):
        c = form.residual(xv)
        if shift is not None:
            c = c.copy()
            c[:nk] += shift
        return c

    c = res(x)
    message = ""
    escapes = 0
    delta = 0.0
    for it in range(1, budget + 1):
        J = form.jacobian(x)
        r = _kkt_residual(form, c, lam, J)
        if float(np.abs(r).max()) < tol:
            return x, lam, True, it, ""
        merit = float(r @ r)
        accepted = False
        trial = None
        for _reg in range(6):
            try:
                dy = _kkt_system(form, x, lam, J, delta).solve(-r)
            except SingularSystemError as exc:
                if delta < 1e2:
                    delta = max(10.0 * delta, 1e-6)
                    continue
                row = exc.row
                if row >= n_x:
                    message = f"singular KKT at {form.describe_row(row - n_x)}"
                elif row >= 0:
                    message = f"singular KKT at stationarity row {row}"
                else:
                    message = f"singular KKT: {exc}"
                return x, lam, False, it, message
            dx = dy[:n_x]
            ax = _step_scale(form, dx, cfg)
            al = 1.0
            for _ in range(10):
                try:
                    x_t = x + ax * dx
                    c_t = res(x_t)
                except SingularInjectionError:
                    ax *= 0.5
                    continue
                lam_t = lam + al * dy[n_x:]
                r_t = _kkt_residual(form, c_t, lam_t, form.jacobian(x_t))
                merit_t = float(r_t @ r_t)
                if trial is None or merit_t < trial[0]:
                    trial = (merit_t, x_t, c_t, lam_t)
                if merit_t <= (1.0 - 1e-4 * min(ax, al)) * merit:
                    accepted = True
                    break
                ax *= 0.5
                al *= 0.5
            if accepted:
                break
            # Newton direction is not a descent direction: regularize the
            # Hessian block (inertia correction) and rebuild the step
            if delta >= 1e2:
                break
            delta = max(10.0 * delta, 1e-6)
        if accepted:
            escapes = 0
            delta *= 0.2
            if delta < 1e-10:
                delta = 0.0
        else:
            # bounded non-monotone escape: take the least-bad trial a few
            # times before declaring the iteration stuck
            if trial is None or trial[0] > 4.0 * merit or escapes >= 5:
                return x, lam, False, it, "no descent step found"
            escapes += 1
            _, x_t, c_t, lam_t = trial
        x, c, lam = x_t, c_t, lam_t
    return x, lam, False, budget, f"budget of {budget} iterations exhausted"


def _polish_kkt(form: Formulation, x, lam, cfg: SolverConfig):
    """Full Newton steps at the solution to sharpen it toward round-off."""
    c = form.residual(x)
    for _ in range(cfg.polish_steps):
        J = form.jacobian(x)
        r = _kkt_residual(form, c, lam, J)
        if np.abs(r).max() < 1e-14:
            break
        try:
            dy = _kkt_system(form, x, lam, J).solve(-r)
            x_new = x + dy[: form.n_x]
            c_new = form.residual(x_new)
            lam_new = lam + dy[form.n_x:]
        except (SingularSystemError, SingularInjectionError):
            break
        r_new = _kkt_residual(form, c_new, lam_new, form.jacobian(x_new))
        if np.abs(r_new).max() >= np.abs(r).max():
            break
        x, c, lam = x_new, c_new, lam_new
    return x, lam


def solve_gpf(net: NetworkCase, curves: dict[int, DroopCurve],
              cfg: SolverConfig | None = None, Y=None,
              x0: np.ndarray | None = None,
              lam0: np.ndarray | None = None) -> GpfSolution:
    """Solve the dense compensation optimization with droop coupling.

    The iteration starts strictly feasible: the initial multipliers are set
    so the implied compensation absorbs the initial mismatch exactly.  If
    the direct Newton solve stalls (severe localized collapses), the
    disturbance is re-applied gradually by source stepping: the initial
    mismatch current is released in deterministic stages, each warm-started
    from the last.  Nonconvergence returns the best iterate flagged, never
    raises.
    """
    cfg = cfg or SolverConfig()
    form = Formulation(net, Y=Y, curves=curves, mode=MODE_GOVERNOR)
    if aggregate_gain({g.index: cv for g, cv in zip(form.gens, form.curves)}) <= 0.0:
        raise GridFreqError("no generator has droop capability")
    n_x = form.n_x
    nk = 2 * form.n

    x_init = form.init_state(flat=cfg.flat_start) if x0 is None else x0.copy()
    c0 = form.residual(x_init)
    if lam0 is None:
        lam_init = np.zeros(n_x)
        lam_init[:nk] = c0[:nk]          # n = -lambda absorbs the mismatch
    else:
        lam_init = lam0.copy()

    x, lam, converged, iters, message = _newton_kkt(
        form, x_init, lam_init, cfg, cfg.tol_residual, cfg.max_iters
    )

    if not converged:
        # Source stepping: release the initial mismatch in stages.  Stage s
        # solves the problem with (1-s) of the disturbance still supplied by
        # a fixed auxiliary current, so each hop is a mild disturbance.
        mismatch = c0[:nk].copy()
        x, lam = x_init.copy(), np.zeros(n_x)
        s, ds = 0.0, 0.25
        total = iters
        failed = False
        while s < 1.0 and total < 6 * cfg.max_iters:
            s_try = min(1.0, s + ds)
            shift = -(1.0 - s_try) * mismatch
            lam_try = lam.copy()
            lam_try[:nk] = form.residual(x)[:nk] + shift
            stage_tol = cfg.tol_residual if s_try >= 1.0 else 1e-4
            x_t, lam_t, ok, used, msg = _newton_kkt(
                form, x, lam_try, cfg, stage_tol, cfg.max_iters // 2,
                shift=shift,
            )
            total += used
            if ok:
                x, lam = x_t, lam_t
                s = s_try
                ds = min(ds * 1.5, 0.5)
            else:
                ds *= 0.5
                if ds < 1e-3:
                    message = f"source stepping stalled at s={s:.3f}: {msg}"
                    failed = True
                    break
        iters = total
        converged = s >= 1.0 and not failed
        if converged:
            message = ""

    if converged:
        x, lam = _polish_kkt(form, x, lam, cfg)

    c = form.residual(x)
    r = _kkt_residual(form, c, lam, form.jacobian(x))
    n_re = -lam[: form.n]
    n_im = -lam[form.n: 2 * form.n]
    state = form.state_parts(x)
    return GpfSolution(
        state=state,
        n_re=n_re,
        n_im=n_im,
        converged=converged,
        iterations=iters,
        df=state.df,
        objective=0.5 * float(n_re @ n_re + n_im @ n_im),
        residual=float(np.abs(r).max()),
        x=x,
        lam=lam,
        message=message,
    )


def predict_df_smallsignal(net: NetworkCase, curves: dict[int, DroopCurve],
                           dp_lost: float) -> float:
    """First-order frequency deviation ``-dp_lost / sum(k_j)`` in Hz.

    Valid while no surviving unit leaves its linear droop region; the
    governor power flow is the authoritative answer when in doubt.
    """
    total_gain = aggregate_gain(curves)
    if total_gain <= 0.0:
        raise GridFreqError("aggregate droop gain is zero")
    return -dp_lost / total_gain


def saturated_units(curves: dict[int, DroopCurve], df: float) -> list[int]:
    """Generator indices whose droop response leaves the linear region at df."""
    out = []
    for idx, cv in curves.items():
        if cv.k == 0.0:
            continue
        if not (cv.f3 <= df < cv.f2):
            out.append(idx)
    return out
