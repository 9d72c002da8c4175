"""Rectangular-coordinate network equations and their derivatives.

Every bus contributes two current-mismatch (KCL) equations built from the
bus admittance matrix and the device injection currents.  Constant-power
devices inject ``I = (P - jQ) / conj(V)``; generator buses add a voltage
magnitude equation paired with a free reactive-power unknown; every
in-service generator adds a power-adjustment unknown tied to the common
frequency deviation through its droop curve; the slack bus pins the angle
reference.

Two formulations share the layout:

* ``governor`` -- the frequency deviation ``df`` is a free unknown and each
  generator follows ``dP_j = F_j(df)``.
* ``dispatch`` -- ordinary power flow used to balance the base case: ``df``
  is pinned to zero, non-slack units hold ``dP_j = 0``, and the slack-bus
  unit(s) absorb the mismatch.

The residual, the exact sparse Jacobian, and the Hessian-vector contraction
``sum_k lam_k * grad^2 c_k`` (needed by the optimality systems) are all
assembled from closed-form derivatives of the injection currents.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp

from .case_io import PV, SLACK, NetworkCase
from .droop import DroopCurve
from .errors import GridFreqError, SingularInjectionError

MODE_GOVERNOR = "governor"
MODE_DISPATCH = "dispatch"

_VMIN_SQ = 1e-12  # |V|^2 floor before constant-power injections blow up


@dataclass
class AdmittanceMatrix:
    """Bus admittance split into real (G) and imaginary (B) parts."""

    G: sp.csr_matrix
    B: sp.csr_matrix

    @property
    def n(self) -> int:
        return self.G.shape[0]


def build_admittance(net: NetworkCase) -> AdmittanceMatrix:
    """Standard bus admittance matrix in per unit.

    For a branch (i, j) with series admittance ``y = 1/(r + jx)``, total
    charging ``b``, tap ``t`` and phase shift ``phi``::

        Yii += (y + jb/2) / t^2          Yij += -y / (t * e^{-j phi})
        Yjj +=  y + jb/2                 Yji += -y / (t * e^{+j phi})

    Bus shunts (gs + j bs) add to the diagonal.
    """
    n = net.n_bus
    rows, cols, vals = [], [], []
    for br in net.branches:
        y = 1.0 / complex(br.r, br.x)
        ych = complex(0.0, 0.5 * br.b)
        a = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
        rows += [br.f, br.t, br.f, br.t]
        cols += [br.f, br.t, br.t, br.f]
        vals += [
            (y + ych) / (br.tap * br.tap),
            y + ych,
            -y / a.conjugate(),
            -y / a,
        ]
    for i in range(n):
        if net.gs[i] != 0.0 or net.bs[i] != 0.0:
            rows.append(i)
            cols.append(i)
            vals.append(complex(net.gs[i], net.bs[i]))
    Y = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
    Y.sum_duplicates()
    return AdmittanceMatrix(G=Y.real.tocsr(), B=Y.imag.tocsr())


@dataclass
class SystemState:
    """Solved (or iterate) state unpacked into named arrays."""

    vre: np.ndarray
    vim: np.ndarray
    qg: np.ndarray      # per in-service generator
    dp: np.ndarray      # per in-service generator
    df: float

    def vmag(self) -> np.ndarray:
        return np.hypot(self.vre, self.vim)


class Formulation:
    """Unknown/equation layout plus residual, Jacobian and Hessian assembly.

    Unknown ordering:  ``[Vre(n), Vim(n), Qg(nq), dP(m), df]`` where the
    ``nq`` reactive unknowns belong to generators at PV/slack buses.
    Row ordering: ``[KCL_re(n), KCL_im(n), |V| rows(npv), Q-share rows,
    droop-block rows(m), angle row]``.  Both counts equal ``n_x``.
    """

    def __init__(self, net: NetworkCase, Y: AdmittanceMatrix | None = None,
                 curves: dict[int, DroopCurve] | None = None,
                 mode: str = MODE_GOVERNOR):
        if mode not in (MODE_GOVERNOR, MODE_DISPATCH):
            raise ValueError(f"unknown mode {mode!r}")
        if mode == MODE_GOVERNOR and curves is None:
            raise GridFreqError("governor mode requires droop curves")
        self.net = net
        self.mode = mode
        self.Y = Y if Y is not None else build_admittance(net)
        self.gens = net.in_service_gens()
        if not self.gens:
            raise GridFreqError("no in-service generators")
        self.curves = None
        if curves is not None:
            try:
                self.curves = [curves[g.index] for g in self.gens]
            except KeyError as exc:
                raise GridFreqError(f"missing droop curve for gen {exc}") from exc

        n = net.n_bus
        m = len(self.gens)
        self.n = n
        self.m = m

        # Reactive unknowns: generators at voltage-controlled buses.
        self.q_gens = [
            gi for gi, g in enumerate(self.gens)
            if net.bus_type[g.bus] in (PV, SLACK)
        ]
        self.nq = len(self.q_gens)
        self._qpos = {gi: k for k, gi in enumerate(self.q_gens)}

        # One magnitude row per distinct voltage-controlled bus; extra
        # machines on the same bus share reactive output equally.
        pv_bus_first: dict[int, int] = {}
        share_pairs: list[tuple[int, int]] = []   # (gen pos, first gen pos)
        for gi in self.q_gens:
            b = self.gens[gi].bus
            if b in pv_bus_first:
                share_pairs.append((gi, pv_bus_first[b]))
            else:
                pv_bus_first[b] = gi
        self.pv_buses = sorted(pv_bus_first)
        self.pv_first_gen = [pv_bus_first[b] for b in self.pv_buses]
        self.vset = np.array(
            [self.gens[pv_bus_first[b]].vset for b in self.pv_buses]
        )
        self.share_pairs = share_pairs
        self.npv = len(self.pv_buses)

        self.n_x = 2 * n + self.nq + m + 1
        self.iQ0 = 2 * n
        self.iDP0 = 2 * n + self.nq
        self.iDF = 2 * n + self.nq + m

        self.rMAG0 = 2 * n
        self.rSHARE0 = 2 * n + self.npv
        self.rDROOP0 = self.rSHARE0 + len(share_pairs)
        self.rANG = self.rDROOP0 + m
        assert self.rANG + 1 == self.n_x

        # Dispatch mode: which droop-block row pins df, which pin dP = 0,
        # which share slack output between co-located slack machines.
        slack_gens = [gi for gi, g in enumerate(self.gens)
                      if g.bus == net.slack_bus]
        if mode == MODE_DISPATCH and not slack_gens:
            raise GridFreqError("dispatch mode requires a generator at the slack bus")
        self._slack_gens = slack_gens

        self._prepare_static()
        self._prepare_device_arrays()

    # ------------------------------------------------------------------
    # layout helpers

    def iVr(self, b: int) -> int:
        return b

    def iVi(self, b: int) -> int:
        return self.n + b

    def iQ(self, gen_pos: int) -> int:
        return self.iQ0 + self._qpos[gen_pos]

    def iDP(self, gen_pos: int) -> int:
        return self.iDP0 + gen_pos

    def describe_row(self, r: int) -> str:
        n, net = self.n, self.net
        if r < n:
            return f"KCL-re at bus {net.bus_ids[r]}"
        if r < 2 * n:
            return f"KCL-im at bus {net.bus_ids[r - n]}"
        if r < self.rSHARE0:
            b = self.pv_buses[r - self.rMAG0]
            return f"|V| setpoint at bus {net.bus_ids[b]}"
        if r < self.rDROOP0:
            gi, _ = self.share_pairs[r - self.rSHARE0]
            return f"Q-share of gen {self.gens[gi].index}"
        if r < self.rANG:
            return f"droop coupling of gen {self.gens[r - self.rDROOP0].index}"
        return "slack angle"

    # ------------------------------------------------------------------
    # static assembly pieces

    def _prepare_static(self) -> None:
        n = self.n
        Yc = self.Y.G.tocoo()
        Bc = self.Y.B.tocoo()
        rows = [Yc.row, Yc.row + n, Bc.row, Bc.row + n]
        cols = [Yc.col, Yc.col + n, Bc.col + n, Bc.col]
        vals = [Yc.data, Yc.data, -Bc.data, Bc.data]

        # Q-share rows, droop-block skeleton, angle row
        for k, (gi, g0) in enumerate(self.share_pairs):
            r = self.rSHARE0 + k
            rows.append(np.array([r, r]))
            cols.append(np.array([self.iQ(gi), self.iQ(g0)]))
            vals.append(np.array([1.0, -1.0]))

        if self.mode == MODE_DISPATCH:
            first = self._slack_gens[0]
            for gi in range(self.m):
                r = self.rDROOP0 + gi
                if gi == first:
                    rows.append(np.array([r]))
                    cols.append(np.array([self.iDF]))
                    vals.append(np.array([1.0]))
                elif gi in self._slack_gens:
                    rows.append(np.array([r, r]))
                    cols.append(np.array([self.iDP(gi), self.iDP(first)]))
                    vals.append(np.array([1.0, -1.0]))
                else:
                    rows.append(np.array([r]))
                    cols.append(np.array([self.iDP(gi)]))
                    vals.append(np.array([1.0]))
        else:
            # dP_j column of dP_j - F_j(df); the df column is state-dependent
            r = np.arange(self.rDROOP0, self.rDROOP0 + self.m)
            rows.append(r)
            cols.append(np.arange(self.iDP0, self.iDP0 + self.m))
            vals.append(np.ones(self.m))

        s = self.net.slack_bus
        th = self.net.slack_angle
        rows.append(np.array([self.rANG, self.rANG]))
        cols.append(np.array([self.iVi(s), self.iVr(s)]))
        vals.append(np.array([math.cos(th), -math.sin(th)]))

        self._st_rows = np.concatenate(rows)
        self._st_cols = np.concatenate(cols)
        self._st_vals = np.concatenate(vals)

    def _prepare_device_arrays(self) -> None:
        net = self.net
        pd = np.asarray(net.pd)
        qd = np.asarray(net.qd)
        self.load_bus = np.flatnonzero((pd != 0.0) | (qd != 0.0))
        self.load_p = -pd[self.load_bus]
        self.load_q = -qd[self.load_bus]
        self.gen_bus = np.array([g.bus for g in self.gens], dtype=np.int64)
        self.gen_pg = np.array([g.pg for g in self.gens])
        self.gen_qg_fixed = np.array([g.qg for g in self.gens])
        self.gen_has_q = np.zeros(self.m, dtype=bool)
        self.gen_qcol = np.full(self.m, -1, dtype=np.int64)
        for gi in self.q_gens:
            self.gen_has_q[gi] = True
            self.gen_qcol[gi] = self.iQ(gi)

    # ------------------------------------------------------------------
    # state handling

    def init_state(self, flat: bool = False) -> np.ndarray:
        """Initial unknown vector from the case profile (or a flat start)."""
        net = self.net
        x = np.zeros(self.n_x)
        if flat:
            vm = np.ones(self.n)
            va = np.zeros(self.n)
        else:
            vm = np.asarray(net.vm0, dtype=float).copy()
            va = np.asarray(net.va0, dtype=float)
        for b, gi in zip(self.pv_buses, self.pv_first_gen):
            vm[b] = self.gens[gi].vset
        x[: self.n] = vm * np.cos(va)
        x[self.n: 2 * self.n] = vm * np.sin(va)
        for gi in self.q_gens:
            x[self.iQ(gi)] = self.gens[gi].qg
        return x

    def state_parts(self, x: np.ndarray) -> SystemState:
        qg = self.gen_qg_fixed.copy()
        for gi in self.q_gens:
            qg[gi] = x[self.iQ(gi)]
        return SystemState(
            vre=x[: self.n].copy(),
            vim=x[self.n: 2 * self.n].copy(),
            qg=qg,
            dp=x[self.iDP0: self.iDP0 + self.m].copy(),
            df=float(x[self.iDF]),
        )

    def _gen_pq(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        p = self.gen_pg + x[self.iDP0: self.iDP0 + self.m]
        q = self.gen_qg_fixed.copy()
        if self.nq:
            q[self.gen_has_q] = x[self.gen_qcol[self.gen_has_q]]
        return p, q

    def _check_voltage(self, d2: np.ndarray, buses: np.ndarray) -> None:
        bad = np.flatnonzero(d2 < _VMIN_SQ)
        if bad.size:
            raise SingularInjectionError(int(buses[bad[0]]))

    # ------------------------------------------------------------------
    # residual / Jacobian / Hessian

    def residual(self, x: np.ndarray) -> np.ndarray:
        """Constraint residuals c(x) (compensation currents not included)."""
        n = self.n
        vr = x[:n]
        vi = x[n: 2 * n]
        c = np.zeros(self.n_x)
        c[:n] = self.Y.G @ vr - self.Y.B @ vi
        c[n: 2 * n] = self.Y.G @ vi + self.Y.B @ vr

        lb = self.load_bus
        if lb.size:
            d2 = vr[lb] ** 2 + vi[lb] ** 2
            self._check_voltage(d2, lb)
            c[lb] -= (self.load_p * vr[lb] + self.load_q * vi[lb]) / d2
            c[n + lb] -= (self.load_p * vi[lb] - self.load_q * vr[lb]) / d2

        gb = self.gen_bus
        p, q = self._gen_pq(x)
        d2 = vr[gb] ** 2 + vi[gb] ** 2
        self._check_voltage(d2, gb)
        np.subtract.at(c, gb, (p * vr[gb] + q * vi[gb]) / d2)
        np.subtract.at(c, n + gb, (p * vi[gb] - q * vr[gb]) / d2)

        pvb = np.asarray(self.pv_buses, dtype=np.int64)
        if pvb.size:
            c[self.rMAG0: self.rSHARE0] = (
                vr[pvb] ** 2 + vi[pvb] ** 2 - self.vset ** 2
            )
        for k, (gi, g0) in enumerate(self.share_pairs):
            c[self.rSHARE0 + k] = x[self.iQ(gi)] - x[self.iQ(g0)]

        df = x[self.iDF]
        dp = x[self.iDP0: self.iDP0 + self.m]
        if self.mode == MODE_GOVERNOR:
            fvals = np.array([cv.value(df) for cv in self.curves])
            c[self.rDROOP0: self.rANG] = dp - fvals
        else:
            first = self._slack_gens[0]
            for gi in range(self.m):
                r = self.rDROOP0 + gi
                if gi == first:
                    c[r] = df
                elif gi in self._slack_gens:
                    c[r] = dp[gi] - dp[first]
                else:
                    c[r] = dp[gi]

        s = self.net.slack_bus
        th = self.net.slack_angle
        c[self.rANG] = vi[s] * math.cos(th) - vr[s] * math.sin(th)
        return c

    def _injection_jac(self, vr, vi, p, q):
        """First derivatives of I = (P - jQ)/conj(V) at the device bus.

        Returns (dIre/dVr, dIre/dVi, dIre/dP, dIre/dQ); the imaginary-part
        derivatives follow from dIim/dVr = dIre/dVi, dIim/dVi = -dIre/dVr,
        dIim/dP = dIre/dQ * (-1) ... computed by the caller from symmetry.
        """
        d2 = vr * vr + vi * vi
        d4 = d2 * d2
        a = (p * (vi * vi - vr * vr) - 2.0 * q * vr * vi) / d4
        b = (q * (vr * vr - vi * vi) - 2.0 * p * vr * vi) / d4
        return d2, a, b

    def jacobian(self, x: np.ndarray) -> sp.csr_matrix:
        """Exact sparse Jacobian dc/dx."""
        n = self.n
        vr = x[:n]
        vi = x[n: 2 * n]
        rows = [self._st_rows]
        cols = [self._st_cols]
        vals = [self._st_vals]

        lb = self.load_bus
        if lb.size:
            _, a, b = self._injection_jac(vr[lb], vi[lb], self.load_p, self.load_q)
            rows.append(np.concatenate([lb, lb, n + lb, n + lb]))
            cols.append(np.concatenate([lb, n + lb, lb, n + lb]))
            vals.append(np.concatenate([-a, -b, -b, a]))

        gb = self.gen_bus
        p, q = self._gen_pq(x)
        d2, a, b = self._injection_jac(vr[gb], vi[gb], p, q)
        rows.append(np.concatenate([gb, gb, n + gb, n + gb]))
        cols.append(np.concatenate([gb, n + gb, gb, n + gb]))
        vals.append(np.concatenate([-a, -b, -b, a]))
        # dP coupling: dIre/dP = Vr/|V|^2, dIim/dP = Vi/|V|^2
        dpcols = np.arange(self.iDP0, self.iDP0 + self.m)
        rows.append(np.concatenate([gb, n + gb]))
        cols.append(np.concatenate([dpcols, dpcols]))
        vals.append(np.concatenate([-vr[gb] / d2, -vi[gb] / d2]))
        # Qg coupling: dIre/dQ = Vi/|V|^2, dIim/dQ = -Vr/|V|^2
        if self.nq:
            hq = self.gen_has_q
            bq = gb[hq]
            qcols = self.gen_qcol[hq]
            rows.append(np.concatenate([bq, n + bq]))
            cols.append(np.concatenate([qcols, qcols]))
            vals.append(np.concatenate([-vi[bq] / d2[hq], vr[bq] / d2[hq]]))

        pvb = np.asarray(self.pv_buses, dtype=np.int64)
        if pvb.size:
            rmag = np.arange(self.rMAG0, self.rSHARE0)
            rows.append(np.concatenate([rmag, rmag]))
            cols.append(np.concatenate([pvb, n + pvb]))
            vals.append(np.concatenate([2.0 * vr[pvb], 2.0 * vi[pvb]]))

        if self.mode == MODE_GOVERNOR:
            df = x[self.iDF]
            rD = np.arange(self.rDROOP0, self.rANG)
            rows.append(rD)
            cols.append(np.full(self.m, self.iDF, dtype=np.int64))
            vals.append(np.array([-cv.deriv(df) for cv in self.curves]))

        J = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(self.n_x, self.n_x),
        ).tocsr()
        J.sum_duplicates()
        return J

    def _device_hessian(self, vr, vi, p, q, lr, li):
        """Second derivatives of -(lr*Ire + li*Iim) w.r.t. (Vr, Vi)."""
        d2 = vr * vr + vi * vi
        d6 = d2 * d2 * d2
        t_re = p * vr + q * vi
        t_im = p * vi - q * vr
        s = lr * t_re + li * t_im
        a = p * lr - q * li
        bq = p * li + q * lr
        hrr = 2.0 * (-4.0 * vr * vr * s + d2 * (2.0 * vr * a + s)) / d6
        hri = 2.0 * (-4.0 * vr * vi * s + d2 * (vi * a + vr * bq)) / d6
        hii = 2.0 * (-4.0 * vi * vi * s + d2 * (2.0 * vi * bq + s)) / d6
        return d2, hrr, hri, hii

    def hessian_triplets(self, x: np.ndarray, lam: np.ndarray):
        """Triplets of H = sum_k lam_k * grad^2 c_k(x) (symmetric, n_x^2)."""
        n = self.n
        vr = x[:n]
        vi = x[n: 2 * n]
        rows, cols, vals = [], [], []

        def vv_block(bus, hrr, hri, hii):
            rows.append(np.concatenate([bus, bus, n + bus, n + bus]))
            cols.append(np.concatenate([bus, n + bus, bus, n + bus]))
            vals.append(np.concatenate([hrr, hri, hri, hii]))

        lb = self.load_bus
        if lb.size:
            _, hrr, hri, hii = self._device_hessian(
                vr[lb], vi[lb], self.load_p, self.load_q, lam[lb], lam[n + lb]
            )
            vv_block(lb, hrr, hri, hii)

        gb = self.gen_bus
        p, q = self._gen_pq(x)
        lr = lam[gb]
        li = lam[n + gb]
        d2, hrr, hri, hii = self._device_hessian(vr[gb], vi[gb], p, q, lr, li)
        vv_block(gb, hrr, hri, hii)

        d4 = d2 * d2
        e = lr * vr[gb] + li * vi[gb]
        fq = lr * vi[gb] - li * vr[gb]
        hrp = (2.0 * vr[gb] * e - lr * d2) / d4
        hip = (2.0 * vi[gb] * e - li * d2) / d4
        dpc = np.arange(self.iDP0, self.iDP0 + self.m)
        rows.append(np.concatenate([gb, dpc, n + gb, dpc]))
        cols.append(np.concatenate([dpc, gb, dpc, n + gb]))
        vals.append(np.concatenate([hrp, hrp, hip, hip]))
        if self.nq:
            hq = self.gen_has_q
            bq_ = gb[hq]
            qc = self.gen_qcol[hq]
            hrq = (2.0 * vr[bq_] * fq[hq] + li[hq] * d2[hq]) / d4[hq]
            hiq = (2.0 * vi[bq_] * fq[hq] - lr[hq] * d2[hq]) / d4[hq]
            rows.append(np.concatenate([bq_, qc, n + bq_, qc]))
            cols.append(np.concatenate([qc, bq_, qc, n + bq_]))
            vals.append(np.concatenate([hrq, hrq, hiq, hiq]))

        pvb = np.asarray(self.pv_buses, dtype=np.int64)
        if pvb.size:
            gam = lam[self.rMAG0: self.rSHARE0]
            rows.append(np.concatenate([pvb, n + pvb]))
            cols.append(np.concatenate([pvb, n + pvb]))
            vals.append(np.concatenate([2.0 * gam, 2.0 * gam]))

        if self.mode == MODE_GOVERNOR:
            df = x[self.iDF]
            nu = lam[self.rDROOP0: self.rANG]
            h = -np.dot(nu, [cv.deriv2(df) for cv in self.curves])
            if h != 0.0:
                rows.append(np.array([self.iDF]))
                cols.append(np.array([self.iDF]))
                vals.append(np.array([h]))

        if not rows:
            return (np.zeros(0, np.int64),) * 2 + (np.zeros(0),)
        return (
            np.concatenate(rows),
            np.concatenate(cols),
            np.concatenate(vals),
        )


def branch_flows(net: NetworkCase, state: SystemState):
    """Complex power flow (p.u.) entering each branch from both ends."""
    v = state.vre + 1j * state.vim
    sf, st = [], []
    for br in net.branches:
        y = 1.0 / complex(br.r, br.x)
        ych = complex(0.0, 0.5 * br.b)
        a = br.tap * complex(math.cos(br.shift), math.sin(br.shift))
        vf, vt = v[br.f], v[br.t]
        i_f = (y + ych) / (br.tap * br.tap) * vf - y / a.conjugate() * vt
        i_t = (y + ych) * vt - y / a * vf
        sf.append(vf * np.conj(i_f))
        st.append(vt * np.conj(i_t))
    return np.array(sf), np.array(st)


def power_balance(net: NetworkCase, state: SystemState) -> dict[str, float]:
    """Active-power conservation terms at a state (all p.u.).

    ``mismatch`` is generation (incl. droop adjustments) minus load, branch
    losses and shunt consumption; it vanishes at a converged solution.
    """
    gens = net.in_service_gens()
    total_gen = sum(g.pg for g in gens) + float(np.sum(state.dp))
    total_load = float(np.sum(net.pd))
    sf, st = branch_flows(net, state)
    branch_loss = float(np.sum(sf.real + st.real)) if len(sf) else 0.0
    vsq = state.vre ** 2 + state.vim ** 2
    shunt_loss = float(np.dot(net.gs, vsq))
    return {
        "generation": total_gen,
        "load": total_load,
        "branch_loss": branch_loss,
        "shunt_loss": shunt_loss,
        "mismatch": total_gen - total_load - branch_loss - shunt_loss,
    }
