"""Full AC power flow: admittance assembly, polar Newton-Raphson, Q-limit switching."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np

from .network import BusKind, NetworkCase, check


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-8  # inf-norm of P/Q mismatch, p.u.
    max_iterations: int = 30
    enforce_q_limits: bool = True
    flat_start: bool = False

    def __post_init__(self) -> None:
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be at least 1")

    @classmethod
    def paper_env(cls) -> "SolverConfig":
        """Loose 2e-3 p.u. mismatch preset, the floor of the original study's simulator."""
        return cls(tolerance=2e-3)


@dataclass
class PowerFlowSolution:
    vm: np.ndarray  # p.u., per bus
    va: np.ndarray  # rad, per bus
    pg: np.ndarray  # MW, per generator
    qg: np.ndarray  # MVar, per generator
    branch_flows: np.ndarray  # (n_branch, 4): p_from, q_from, p_to, q_to in MW/MVar
    converged: bool
    iterations: int
    max_mismatch: float  # p.u.
    pv_to_pq_switches: tuple[int, ...] = ()
    diagnostic: str = ""  # "", "max_iterations", "singular_jacobian" or "non_finite"

    @property
    def diverged(self) -> bool:
        return not self.converged


# ---------------------------------------------------------------------------
# admittance assembly
# ---------------------------------------------------------------------------


def _branch_admittances(case: NetworkCase):
    """Per-branch pi-model terms (yff, yft, ytf, ytt) with out-of-service branches zeroed."""
    nl = len(case.branches)
    yff = np.zeros(nl, complex)
    yft = np.zeros(nl, complex)
    ytf = np.zeros(nl, complex)
    ytt = np.zeros(nl, complex)
    for k, br in enumerate(case.branches):
        if br.r == 0 and br.x == 0:
            raise ValueError(f"branch {br.from_bus}-{br.to_bus} has zero series impedance")
        if not br.in_service:
            continue
        ys = 1.0 / complex(br.r, br.x)
        bc = 0.5j * br.b_charging
        t = br.tap * np.exp(1j * br.shift)
        ytt[k] = ys + bc
        yff[k] = ytt[k] / (br.tap * br.tap)
        yft[k] = -ys / np.conj(t)
        ytf[k] = -ys / t
    return yff, yft, ytf, ytt


def build_ybus(case: NetworkCase) -> np.ndarray:
    """Dense complex bus admittance matrix in p.u. (off-nominal taps on the from side)."""
    n = case.n_bus
    idx = case.bus_index
    f = np.array([idx[br.from_bus] for br in case.branches], dtype=int)
    t = np.array([idx[br.to_bus] for br in case.branches], dtype=int)
    yff, yft, ytf, ytt = _branch_admittances(case)
    ysh = np.array([complex(b.gs, b.bs) for b in case.buses]) / case.base_mva
    Y = np.diag(ysh).astype(complex)
    np.add.at(Y, (f, f), yff)
    np.add.at(Y, (f, t), yft)
    np.add.at(Y, (t, f), ytf)
    np.add.at(Y, (t, t), ytt)
    return Y


@dataclass(frozen=True)
class _Model:
    """Array form of a case, shared by every solve on it."""

    Y: np.ndarray
    f: np.ndarray
    t: np.ndarray
    yff: np.ndarray
    yft: np.ndarray
    ytf: np.ndarray
    ytt: np.ndarray
    in_service: np.ndarray
    kinds: tuple[BusKind, ...]
    pd: np.ndarray  # p.u.
    qd: np.ndarray  # p.u.
    gen_bus: np.ndarray  # bus position per generator
    v_set: np.ndarray  # per bus (1.0 where no generator)
    q_min: np.ndarray  # per generator, p.u.
    q_max: np.ndarray
    vm0: np.ndarray
    va0: np.ndarray
    slack: int


@lru_cache(maxsize=128)
def _model(case: NetworkCase) -> _Model:
    check(case)
    idx = case.bus_index
    base = case.base_mva
    yff, yft, ytf, ytt = _branch_admittances(case)
    gen_bus = np.array([idx[g.bus] for g in case.generators], dtype=int)
    v_set = np.ones(case.n_bus)
    # first generator on a bus sets its voltage
    for k in reversed(range(case.n_gen)):
        v_set[gen_bus[k]] = case.generators[k].v_set
    return _Model(
        Y=build_ybus(case),
        f=np.array([idx[br.from_bus] for br in case.branches], dtype=int),
        t=np.array([idx[br.to_bus] for br in case.branches], dtype=int),
        yff=yff,
        yft=yft,
        ytf=ytf,
        ytt=ytt,
        in_service=np.array([br.in_service for br in case.branches], dtype=bool),
        kinds=tuple(b.kind for b in case.buses),
        pd=np.array([b.pd for b in case.buses]) / base,
        qd=np.array([b.qd for b in case.buses]) / base,
        gen_bus=gen_bus,
        v_set=v_set,
        q_min=case.gen_array("q_min") / base,
        q_max=case.gen_array("q_max") / base,
        vm0=np.array([b.vm for b in case.buses]),
        va0=np.array([b.va for b in case.buses]),
        slack=case.slack_bus,
    )


# ---------------------------------------------------------------------------
# Newton-Raphson core
# ---------------------------------------------------------------------------


def _jacobian(Y: np.ndarray, V: np.ndarray, pvpq: np.ndarray, pq: np.ndarray) -> np.ndarray:
    Ibus = Y @ V
    Vnorm = V / np.abs(V)
    dS_dVm = V[:, None] * np.conj(Y * Vnorm[None, :]) + np.diag(np.conj(Ibus) * Vnorm)
    dS_dVa = 1j * V[:, None] * np.conj(np.diag(Ibus) - Y * V[None, :])
    return np.block(
        [
            [dS_dVa[np.ix_(pvpq, pvpq)].real, dS_dVm[np.ix_(pvpq, pq)].real],
            [dS_dVa[np.ix_(pq, pvpq)].imag, dS_dVm[np.ix_(pq, pq)].imag],
        ]
    )


def _mismatch(Y, V, sbus, pvpq, pq) -> np.ndarray:
    S = V * np.conj(Y @ V) - sbus
    return np.concatenate([S.real[pvpq], S.imag[pq]])


class NewtonSystem:
    """The polar mismatch equations F(x) = 0 for fixed bus types.

    ``x`` stacks voltage angles at PV+PQ buses followed by magnitudes at PQ
    buses. Exposed mainly so the analytic Jacobian can be checked against
    finite differences.
    """

    def __init__(self, Y, sbus, vm, va, pvpq, pq):
        self.Y = Y
        self.sbus = sbus
        self.vm = np.array(vm, dtype=float)
        self.va = np.array(va, dtype=float)
        self.pvpq = np.asarray(pvpq, dtype=int)
        self.pq = np.asarray(pq, dtype=int)

    @classmethod
    def from_case(cls, case: NetworkCase, vm=None, va=None) -> "NewtonSystem":
        m = _model(case)
        pg = _bus_sum(m.gen_bus, case.gen_array("pg") / case.base_mva, case.n_bus)
        sbus = pg - m.pd - 1j * m.qd
        pv = [i for i, k in enumerate(m.kinds) if k is BusKind.PV]
        pq = [i for i, k in enumerate(m.kinds) if k is BusKind.PQ]
        vm = m.vm0 if vm is None else vm
        va = m.va0 if va is None else va
        return cls(m.Y, sbus, vm, va, np.sort(np.r_[pv, pq]).astype(int), pq)

    @property
    def x0(self) -> np.ndarray:
        return np.concatenate([self.va[self.pvpq], self.vm[self.pq]])

    def voltage(self, x: np.ndarray) -> np.ndarray:
        vm = self.vm.copy()
        va = self.va.copy()
        npvpq = len(self.pvpq)
        va[self.pvpq] = x[:npvpq]
        vm[self.pq] = x[npvpq:]
        return vm * np.exp(1j * va)

    def F(self, x: np.ndarray) -> np.ndarray:
        return _mismatch(self.Y, self.voltage(x), self.sbus, self.pvpq, self.pq)

    def J(self, x: np.ndarray) -> np.ndarray:
        return _jacobian(self.Y, self.voltage(x), self.pvpq, self.pq)


def _bus_sum(gen_bus: np.ndarray, values: np.ndarray, n_bus: int) -> np.ndarray:
    out = np.zeros(n_bus, dtype=values.dtype)
    np.add.at(out, gen_bus, values)
    return out


def _newton(Y, V, sbus, pvpq, pq, tol, max_it):
    """Iterate from V in place. Returns (V, converged, iterations, max_mismatch, diagnostic)."""
    npvpq = len(pvpq)
    F = _mismatch(Y, V, sbus, pvpq, pq)
    norm = float(np.max(np.abs(F))) if F.size else 0.0
    it = 0
    while norm > tol:
        if it >= max_it:
            return V, False, it, norm, "max_iterations"
        J = _jacobian(Y, V, pvpq, pq)
        try:
            dx = -np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            return V, False, it, norm, "singular_jacobian"
        it += 1
        vm = np.abs(V)
        va = np.angle(V)
        va[pvpq] += dx[:npvpq]
        vm[pq] += dx[npvpq:]
        V = vm * np.exp(1j * va)
        F = _mismatch(Y, V, sbus, pvpq, pq)
        norm = float(np.max(np.abs(F)))
        if not np.isfinite(norm) or np.any(vm <= 0):
            return V, False, it, norm, "non_finite"
    return V, True, it, norm, ""


def _branch_flows_pu(m: _Model, V: np.ndarray) -> np.ndarray:
    Vf = V[m.f]
    Vt = V[m.t]
    sf = Vf * np.conj(m.yff * Vf + m.yft * Vt)
    st = Vt * np.conj(m.ytf * Vf + m.ytt * Vt)
    return np.column_stack([sf.real, sf.imag, st.real, st.imag])


def compute_branch_flows(case: NetworkCase, vm: Sequence[float], va: Sequence[float]) -> np.ndarray:
    """Terminal flows (p_from, q_from, p_to, q_to) in MW/MVar for every branch."""
    vm = np.asarray(vm, dtype=float)
    va = np.asarray(va, dtype=float)
    if vm.shape != (case.n_bus,) or va.shape != (case.n_bus,):
        raise ValueError(f"vm and va must have length {case.n_bus}")
    m = _model(case)
    return _branch_flows_pu(m, vm * np.exp(1j * va)) * case.base_mva


def solve(
    case: NetworkCase,
    config: SolverConfig = SolverConfig(),
    pg: Sequence[float] | None = None,
    init: tuple[np.ndarray, np.ndarray] | None = None,
) -> PowerFlowSolution:
    """Solve the AC power flow.

    ``pg`` overrides the generator active-power settings (MW, one entry per
    generator; the slack entry is ignored). ``init`` is a warm-start
    ``(vm, va)`` pair; otherwise the case voltages (or a flat start) are used.
    Non-convergence is reported through ``converged=False``, never raised.
    """
    m = _model(case)
    n = case.n_bus
    base = case.base_mva
    pg_mw = case.gen_array("pg") if pg is None else np.asarray(pg, dtype=float)
    if pg_mw.shape != (case.n_gen,):
        raise ValueError(f"pg must have length {case.n_gen}")

    kinds = list(m.kinds)
    gen_p = _bus_sum(m.gen_bus, pg_mw / base, n)
    qfix = np.zeros(n)  # pinned generator Q per bus after PV->PQ switching, p.u.

    if init is not None:
        vm, va = (np.array(a, dtype=float) for a in init)
    elif config.flat_start:
        vm, va = np.ones(n), np.zeros(n)
        va[m.slack] = m.va0[m.slack]
    else:
        vm, va = m.vm0.copy(), m.va0.copy()
    regulated = np.array([k is not BusKind.PQ for k in kinds])
    vm[regulated] = m.v_set[regulated]
    va[m.slack] = m.va0[m.slack]
    V = vm * np.exp(1j * va)

    switches: list[int] = []
    pinned_q = np.full(case.n_gen, np.nan)
    total_it = 0
    for _ in range(case.n_gen + 1):
        pv = np.array([i for i, k in enumerate(kinds) if k is BusKind.PV], dtype=int)
        pq = np.array([i for i, k in enumerate(kinds) if k is BusKind.PQ], dtype=int)
        pvpq = np.sort(np.r_[pv, pq]).astype(int)
        sbus = gen_p - m.pd + 1j * (qfix - m.qd)
        V, ok, it, norm, diag = _newton(
            m.Y, V, sbus, pvpq, pq, config.tolerance, config.max_iterations - total_it
        )
        total_it += it
        if not ok:
            break
        if not config.enforce_q_limits:
            break
        qgen_bus = (V * np.conj(m.Y @ V)).imag + m.qd
        newly = []
        for i in pv:
            on_bus = np.flatnonzero(m.gen_bus == i)
            lo, hi = m.q_min[on_bus].sum(), m.q_max[on_bus].sum()
            if qgen_bus[i] > hi + config.tolerance or qgen_bus[i] < lo - config.tolerance:
                limit = hi if qgen_bus[i] > hi else lo
                newly.append(i)
                kinds[i] = BusKind.PQ
                qfix[i] = limit
                pinned_q[on_bus] = np.where(limit == hi, m.q_max[on_bus], m.q_min[on_bus])
        if not newly:
            break
        switches.extend(newly)

    S = V * np.conj(m.Y @ V)
    pg_out, qg_out = _generator_injections(case, m, S, pg_mw / base, pinned_q)
    return PowerFlowSolution(
        vm=np.abs(V),
        va=np.angle(V),
        pg=pg_out * base,
        qg=qg_out * base,
        branch_flows=_branch_flows_pu(m, V) * base,
        converged=ok,
        iterations=total_it,
        max_mismatch=norm,
        pv_to_pq_switches=tuple(case.buses[i].id for i in switches),
        diagnostic=diag,
    )


def _generator_injections(case, m: _Model, S, pg_pu, pinned_q):
    """Per-generator (P, Q) in p.u. from bus injections.

    Slack P takes the residual of its bus; bus Q is shared in proportion to
    each generator's Q range (equal shares when a range is unbounded).
    """
    pg = pg_pu.copy()
    qg = np.zeros(case.n_gen)
    sgen_bus = S + m.pd + 1j * m.qd
    slack_gens = np.flatnonzero(m.gen_bus == m.slack)
    others = pg[slack_gens[1:]].sum() if len(slack_gens) > 1 else 0.0
    pg[slack_gens[0]] = sgen_bus[m.slack].real - others
    for i in np.unique(m.gen_bus):
        on_bus = np.flatnonzero(m.gen_bus == i)
        if len(on_bus) == 1:
            qg[on_bus] = sgen_bus[i].imag
            continue
        if not np.any(np.isnan(pinned_q[on_bus])):
            qg[on_bus] = pinned_q[on_bus]
            continue
        rng = m.q_max[on_bus] - m.q_min[on_bus]
        qtot = sgen_bus[i].imag
        if np.all(np.isfinite(rng)) and rng.sum() > 0:
            qg[on_bus] = m.q_min[on_bus] + (qtot - m.q_min[on_bus].sum()) * rng / rng.sum()
        else:
            qg[on_bus] = qtot / len(on_bus)
    return pg, qg


# ---------------------------------------------------------------------------
# reporting
# ---------------------------------------------------------------------------


def bus_table(case: NetworkCase, sol: PowerFlowSolution) -> str:
    """CSV with one row per bus: id,vm,va_deg,pg,qg,pd,qd (generation summed per bus)."""
    m = _model(case)
    pg = _bus_sum(m.gen_bus, sol.pg, case.n_bus)
    qg = _bus_sum(m.gen_bus, sol.qg, case.n_bus)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["id", "vm", "va_deg", "pg", "qg", "pd", "qd"])
    for i, b in enumerate(case.buses):
        w.writerow([b.id, f"{sol.vm[i]:.10f}", f"{math.degrees(sol.va[i]):.10f}",
                    f"{pg[i]:.6f}", f"{qg[i]:.6f}", f"{b.pd:.6f}", f"{b.qd:.6f}"])
    return buf.getvalue()


def branch_table(case: NetworkCase, sol: PowerFlowSolution) -> str:
    """CSV with one row per branch: from,to,p_from,q_from,p_to,q_to."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["from", "to", "p_from", "q_from", "p_to", "q_to"])
    for br, flows in zip(case.branches, sol.branch_flows):
        w.writerow([br.from_bus, br.to_bus, *(f"{v:.6f}" for v in flows)])
    return buf.getvalue()


def summary_text(case: NetworkCase, sol: PowerFlowSolution) -> str:
    lines = [
        f"converged      {sol.converged}",
        f"iterations     {sol.iterations}",
        f"max_mismatch   {sol.max_mismatch:.3e} p.u.",
        f"pv_to_pq       {list(sol.pv_to_pq_switches)}",
    ]
    if sol.diagnostic:
        lines.append(f"diagnostic     {sol.diagnostic}")
    lines.append(f"{'bus':>4} {'vm':>8} {'va_deg':>9}")
    for i, b in enumerate(case.buses):
        lines.append(f"{b.id:>4} {sol.vm[i]:8.4f} {math.degrees(sol.va[i]):9.3f}")
    lines.append(f"{'gen':>4} {'bus':>4} {'pg':>9} {'qg':>9}")
    for k, g in enumerate(case.generators):
        lines.append(f"{k + 1:>4} {g.bus:>4} {sol.pg[k]:9.3f} {sol.qg[k]:9.3f}")
    return "\n".join(lines) + "\n"
