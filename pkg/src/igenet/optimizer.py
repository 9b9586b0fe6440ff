"""Joint scheduling / IGE power design.

Stage one relaxes the binary schedule and handles the bilinear SINR term with
a convex surrogate (SCA over second-order cones), rounds, and polishes powers.
Stage two keeps the schedule and redesigns the power matrix through an
iterative rank-constrained SDP that trades condition number against energy.

Inside the solvers powers are normalized by P_max and gains by P_max / W_z,
so every SINR row reads  c_e p_e >= 1 + sum_j G_je p_j  with c_e = G_ee / gamma_e.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.optimize import minimize_scalar

from . import conic
from .conic import AffExpr, ConicProgram, MatExpr
from .estimator import RankDeficient, condition_number, structural_rank
from .network import slots_feasible

DELTA_FLOOR = 1e-6
W_DOUBLINGS = 20  # cap on the rank-penalty growth; beyond ~1e6 x w0 the SDPs turn ill-posed


class Infeasible(ValueError):
    pass


class SolverFailure(RuntimeError):
    pass


class RoundingInfeasible(RuntimeError):
    pass


class StalledRank(RuntimeError):
    pass


class TooLarge(ValueError):
    pass


@dataclass
class ScheduleProblem:
    links: tuple
    num_nodes: int
    n_blocks: int
    required: np.ndarray  # slots per link
    gamma: np.ndarray  # linear SINR thresholds
    g_comm: np.ndarray  # per link
    g_ub: np.ndarray  # [j, i] conservative cross gains (diagonal unused)
    noise: np.ndarray  # per receiver (mW)
    p_min: float = 800.0
    p_max: float = 1200.0
    block_slots: int = 1

    def __post_init__(self):
        L = len(self.links)
        self.required = np.asarray(self.required, dtype=int).reshape(L)
        self.gamma = np.asarray(self.gamma, dtype=float).reshape(L)
        self.g_comm = np.asarray(self.g_comm, dtype=float).reshape(L)
        self.g_ub = np.asarray(self.g_ub, dtype=float).reshape(L, L)
        self.noise = np.broadcast_to(np.asarray(self.noise, dtype=float), (L,)).copy()
        if np.any(self.gamma <= 0):
            raise ValueError("SINR thresholds must be positive")
        if np.any(self.g_ub < 0):
            raise ValueError("gains must be non-negative")
        if not 0 <= self.p_min <= self.p_max:
            raise ValueError("need 0 <= p_min <= p_max")

    @property
    def num_links(self) -> int:
        return len(self.links)

    @classmethod
    def from_estimate(cls, links, num_nodes, n_blocks, demands, g_hat, noise, delta_bound=None,
                      p_min=800.0, p_max=1200.0, g_comm=None):
        """g^ub = g_hat + delta_bound; communication gains default to diag(g_hat)."""
        g_hat = np.asarray(g_hat, dtype=float)
        ub = g_hat if delta_bound is None else g_hat + np.asarray(delta_bound, dtype=float)
        gc = np.diag(g_hat) if g_comm is None else g_comm
        return cls(links=tuple(links), num_nodes=num_nodes, n_blocks=n_blocks,
                   required=demands.required_slots, gamma=demands.sinr_threshold, g_comm=gc,
                   g_ub=ub, noise=noise, p_min=p_min, p_max=p_max, block_slots=demands.block_slots)

    def normalized(self):
        """(c, G): c_e = G_ee / gamma_e, G[j, e] cross gains in noise units at P_max, zero diagonal."""
        G = self.g_ub * self.p_max / self.noise[None, :]
        np.fill_diagonal(G, 0.0)
        c = self.g_comm * self.p_max / self.noise / self.gamma
        return c, G

    def conflicts(self):
        if getattr(self, "_conflicts", None) is None:
            self._conflicts = self._conflict_mask()
        return self._conflicts

    def _conflict_mask(self):
        """Symmetric link-pair mask that can never share a block.

        Same transmitter or receiver (C1/C2), or one link blocks the other on
        its own: even at P_min the interferer pushes the victim below gamma
        at P_max.
        """
        c, G = self.normalized()
        rho = self.p_min / self.p_max
        L = self.num_links
        kill = c[None, :] < 1.0 + G * rho
        node = np.zeros((L, L), dtype=bool)
        for j, (s, d) in enumerate(self.links):
            for e, (s2, d2) in enumerate(self.links):
                node[j, e] = j != e and (s == s2 or d == d2)
        out = kill | kill.T | node
        np.fill_diagonal(out, False)
        return out

    def incidence(self):
        """(tx, rx) node-by-link 0/1 matrices."""
        L = self.num_links
        tx = np.zeros((self.num_nodes, L))
        rx = np.zeros((self.num_nodes, L))
        for e, (s, d) in enumerate(self.links):
            tx[s, e] = 1.0
            rx[d, e] = 1.0
        return tx, rx


@dataclass
class Schedule:
    delta: np.ndarray  # blocks x links, 0/1
    powers: np.ndarray  # blocks x links, mW
    block_slots: int = 1
    relaxed_objective: float = float("nan")  # sum of powers at the relaxed optimum (mW)
    penalized_objective: float = float("nan")  # P2* objective incl. binary penalty (mW)
    history: list = field(default_factory=list)  # (round, lambda, merit, total slack) per SCA step
    repairs: int = 0
    report: dict = field(default_factory=dict)

    @property
    def energy(self) -> float:
        return float(np.sum(self.powers) * self.block_slots)

    def to_csv_rows(self):
        nb, L = self.delta.shape
        for i in range(nb):
            for e in range(L):
                yield (i, e, int(self.delta[i, e]), float(self.powers[i, e]))


def sinr_hat(gains, delta_bound, powers, link, noise):
    """g_kk p_k / (W + sum_{j != k} (g + Delta)_jk p_j) for one block's power vector."""
    g = np.asarray(gains, dtype=float)
    ub = g if delta_bound is None else g + np.asarray(delta_bound, dtype=float)
    p = np.asarray(powers, dtype=float)
    k = int(link)
    interf = float(ub[:, k] @ p - ub[k, k] * p[k])
    return float(g[k, k] * p[k] / (noise + interf))


def surrogate(delta, a, phi):
    """Convex upper bound of delta * a used for the bilinear SINR term."""
    return phi * delta ** 2 / 2 + a ** 2 / (2 * phi)


# ---------------------------------------------------------------- checker


def check_schedule(problem: ScheduleProblem, delta, powers, tol=1e-6):
    """Independent constraint check (plain loops, no solver code).

    Returns {constraint: worst violation}; SINR violations are relative to gamma,
    power violations relative to P_max.
    """
    delta = np.asarray(delta)
    powers = np.asarray(powers, dtype=float)
    nb, L = delta.shape
    out = {"C1": 0.0, "C2": 0.0, "C3": 0.0, "C4": 0.0, "C5": 0.0, "C6": 0.0, "C7": 0.0}
    for i in range(nb):
        for z in range(problem.num_nodes):
            n_in = sum(int(delta[i, e]) for e in range(L) if problem.links[e][1] == z)
            n_out = sum(int(delta[i, e]) for e in range(L) if problem.links[e][0] == z)
            out["C1"] = max(out["C1"], n_in - 1.0)
            out["C2"] = max(out["C2"], n_out - 1.0)
    for i in range(nb):
        for e in range(L):
            if delta[i, e] not in (0, 1):
                out["C3"] = max(out["C3"], 1.0)
    for e in range(L):
        got = sum(int(delta[i, e]) for i in range(nb))
        out["C4"] = max(out["C4"], float(problem.required[e] - got))
    for i in range(nb):
        for e in range(L):
            p = powers[i, e]
            if delta[i, e]:
                out["C6"] = max(out["C6"], (problem.p_min - p) / problem.p_max)
                out["C7"] = max(out["C7"], (p - problem.p_max) / problem.p_max)
                interf = problem.noise[e]
                for j in range(L):
                    if j != e:
                        interf += problem.g_ub[j, e] * powers[i, j]
                sinr = problem.g_comm[e] * p / interf
                out["C5"] = max(out["C5"], 1.0 - sinr / problem.gamma[e])
            else:
                out["C7"] = max(out["C7"], abs(p) / problem.p_max)
    out = {k: max(0.0, v) for k, v in out.items()}
    out["ok"] = all(v <= tol for v in out.values())
    return out


# ---------------------------------------------------------------- P2*


def _check_demand(problem: ScheduleProblem):
    if np.any(problem.required > problem.n_blocks):
        raise Infeasible("a link needs more slots than the period holds")
    if not slots_feasible(problem.links, problem.required, problem.num_nodes, problem.n_blocks):
        raise Infeasible("node transmit/receive load exceeds the period")
    c, _ = problem.normalized()
    if np.any(c < 1.0 - 1e-12):
        raise Infeasible("a link misses its SINR threshold even alone at P_max")


def _node_rows(problem: ScheduleProblem):
    tx, rx = problem.incidence()
    keep_tx = tx.sum(axis=1) > 1
    keep_rx = rx.sum(axis=1) > 1
    I = sp.identity(problem.n_blocks, format="csr")
    return sp.kron(I, sp.csr_matrix(tx[keep_tx])), sp.kron(I, sp.csr_matrix(rx[keep_rx]))


def _solve(prog: ConicProgram, backend="clarabel", what="program"):
    sol = prog.solve(backend=backend)
    if sol.status == conic.NUMERICAL_FAILURE and backend == "clarabel":
        # a looser stopping rule usually gets past stalled steps on badly scaled rows;
        # near-degenerate LMIs (rank constraint almost active) need more regularization
        sol = prog.solve(backend=backend, tol=1e-7, max_iter=400)
        if sol.status == conic.NUMERICAL_FAILURE:
            sol = prog.solve(backend=backend, tol=1e-7, max_iter=400,
                             options={"static_regularization_constant": 1e-7})
    if sol.status != conic.OPTIMAL and backend == "clarabel":
        try:
            sol = prog.solve(backend="scs", tol=1e-7, max_iter=20000)
        except ImportError:
            pass
    if sol.status != conic.OPTIMAL:
        raise SolverFailure(f"{what}: solver status {sol.status} ({sol.info.get('raw_status')})")
    return sol


def _sca_step(problem, c, G, lam, d0, a0, slack_weight, backend):
    nb, L = problem.n_blocks, problem.num_links
    n = nb * L
    rho = problem.p_min / problem.p_max
    prog = ConicProgram()
    p = prog.variable("p", n)
    d = prog.variable("delta", n)
    prog.add_nonneg(d)
    prog.add_nonneg(1.0 - d)
    prog.add_nonneg(p - d * rho)  # C6
    prog.add_nonneg(d - p)  # C7
    Ttx, Trx = _node_rows(problem)
    if Ttx.shape[0]:
        prog.add_nonneg(1.0 - d.lmap(Ttx))  # C2
    if Trx.shape[0]:
        prog.add_nonneg(1.0 - d.lmap(Trx))  # C1
    S = sp.kron(sp.csr_matrix(np.ones((1, nb))), sp.identity(L), format="csr")
    prog.add_nonneg(d.lmap(S) - problem.required.astype(float))  # C4
    pairs = _signal_conflicts(problem)
    if len(pairs):
        K = np.zeros((len(pairs), L))
        K[np.arange(len(pairs)), pairs[:, 0]] = 1.0
        K[np.arange(len(pairs)), pairs[:, 1]] = 1.0
        prog.add_nonneg(1.0 - d.lmap(sp.kron(sp.identity(nb), sp.csr_matrix(K), format="csr")))
    # C5.1 substituted: a = 1 + sum_j G_je p_j (per block); C5.3 as a rotated cone
    # links whose SINR holds at p >= rho * delta whatever their non-conflicting
    # neighbours do need no cone (these rows are also the badly scaled ones)
    idx = np.flatnonzero(np.tile(_sinr_binding(problem, c, G), nb))
    m = len(idx)
    sl = prog.variable("slack", m)
    if m:
        M = sp.kron(sp.identity(nb), sp.csr_matrix(G.T), format="csr")[idx]
        a = p.lmap(M) + 1.0
        ce = np.tile(c, nb)[idx]
        # elastic slack: the surrogate is loose away from the expansion point and
        # would otherwise pin every entry above zero on the first steps
        prog.add_nonneg(sl)
        w = p[idx] * (2.0 * d0[idx] * ce / a0[idx]) + sl
        y = a * (d0[idx] / a0[idx])
        E = AffExpr.vstack([(w + 1.0) * 0.5, d[idx], y, (w - 1.0) * 0.5])
        perm = (np.arange(4)[None, :] * m + np.arange(m)[:, None]).ravel()
        prog.add_soc_many(E[perm], 4, "C5.3")
    obj = p.sum() + d.dot(lam * (1.0 - 2.0 * d0))
    prog.minimize(obj + sl.sum() * slack_weight if m else obj)
    _solve(prog, backend, "P2* SCA step")
    slack = np.zeros(n)
    if m:
        slack[idx] = np.maximum(prog.value("slack"), 0.0)
    return prog.value("p"), np.clip(prog.value("delta"), 0.0, 1.0), slack


def _sinr_binding(problem, c, G):
    """Links whose SINR constraint is not implied by C6 (G has conflicts removed)."""
    rho = problem.p_min / problem.p_max
    return c * rho < 1.0 + G.sum(axis=0)


def _signal_conflicts(problem):
    """Pairs (j, e), j < e, excluded by interference alone (node clashes are C1/C2 rows)."""
    cf = problem.conflicts()
    L = problem.num_links
    out = []
    for j in range(L):
        for e in range(j + 1, L):
            s, d = problem.links[j]
            s2, d2 = problem.links[e]
            if cf[j, e] and not (s == s2 or d == d2):
                out.append((j, e))
    return np.array(out, dtype=int).reshape(-1, 2)


def _coupling(problem):
    """Normalized cross gains with never-co-active pairs removed."""
    c, G = problem.normalized()
    G = np.where(problem.conflicts(), 0.0, G)
    return c, G


def _penalized(p, d, lam, slack=None, slack_weight=0.0):
    f = float(np.sum(p) + lam * (np.sum(d) - np.sum(d ** 2)))
    return f if slack is None else f + slack_weight * float(np.sum(slack))


def _polish(problem, delta, backend="clarabel"):
    """Minimum total power for a fixed binary schedule (LP); None if infeasible."""
    nb, L = delta.shape
    c, G = problem.normalized()
    rho = problem.p_min / problem.p_max
    act = np.argwhere(delta > 0)
    if not len(act):
        return np.zeros((nb, L))
    pos = {(int(i), int(e)): k for k, (i, e) in enumerate(act)}
    prog = ConicProgram()
    p = prog.variable("p", len(act))
    prog.add_nonneg(p - rho)
    prog.add_nonneg(1.0 - p)
    rows, cols, vals = [], [], []
    for k, (i, e) in enumerate(act):
        rows.append(k); cols.append(k); vals.append(c[e])
        for j in range(L):
            if j != e and (int(i), j) in pos and G[j, e] > 0:
                rows.append(k); cols.append(pos[(int(i), j)]); vals.append(-G[j, e])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(len(act), len(act)))
    prog.add_nonneg(p.lmap(A) - 1.0)
    prog.minimize(p.sum())
    sol = prog.solve(backend=backend)
    if sol.status == conic.INFEASIBLE:
        return None
    if sol.status != conic.OPTIMAL:
        raise SolverFailure(f"power polish: {sol.status}")
    out = np.zeros((nb, L))
    pv = _refine_binding(A.toarray(), np.clip(prog.value("p"), rho, 1.0), rho)
    for k, (i, e) in enumerate(act):
        out[i, e] = pv[k]
    return out * problem.p_max


def _refine_binding(A, p, rho, tol=1e-6):
    """At minimum power every SINR row is tight unless the power sits on p_min.

    Re-solve those rows exactly (the interior-point answer carries an absolute
    error that is large relative to tiny optimal powers); keep the solver's
    point if the linear solve leaves the box or breaks a constraint.
    """
    free = p > rho + tol * max(rho, p.max())
    if not free.any():
        return p
    q = p.copy()
    q[~free] = rho
    rhs = 1.0 - A[np.ix_(free, ~free)] @ q[~free]
    try:
        q[free] = np.linalg.solve(A[np.ix_(free, free)], rhs)
    except np.linalg.LinAlgError:
        return p
    if np.all(q >= rho - 1e-12) and np.all(q <= 1.0 + 1e-12) and np.all(A @ q >= 1.0 - 1e-9):
        return np.clip(q, rho, 1.0)
    return p


def _allowed(problem, delta, i, e, conflicts=None):
    cf = problem.conflicts() if conflicts is None else conflicts
    return not np.any(cf[e] & (np.asarray(delta[i]) > 0))


def _round(problem, d_rel, p_rel):
    nb, L = d_rel.shape
    order = np.argsort(-d_rel, axis=None, kind="stable")
    delta = np.zeros((nb, L), dtype=int)
    count = np.zeros(L, dtype=int)
    _, G = problem.normalized()
    # greedy by relaxed value: keeps C1/C2 and never exceeds the demand
    for flat in order:
        i, e = divmod(int(flat), L)
        if d_rel[i, e] < 0.5:
            break
        if count[e] < problem.required[e] and _allowed(problem, delta, i, e):
            delta[i, e] = 1
            count[e] += 1
    # top up links short of their demand
    for e in range(L):
        while count[e] < problem.required[e]:
            cand = [i for i in range(nb) if not delta[i, e] and _allowed(problem, delta, i, e)]
            if not cand:
                raise RoundingInfeasible(f"no free block left for link {e}")
            i = max(cand, key=lambda i: (d_rel[i, e], -_block_coupling(G, delta[i], e)))
            delta[i, e] = 1
            count[e] += 1
    return delta


def _block_coupling(G, row, e):
    act = np.flatnonzero(row)
    return float(np.sum(G[act, e]) + np.sum(G[e, act]))


def _repair(problem, delta, p_rel):
    """Move the lowest-margin activation to the least coupled compatible block."""
    nb, L = delta.shape
    c, G = problem.normalized()
    P = np.where(delta > 0, np.clip(p_rel, problem.p_min / problem.p_max, 1.0), 0.0)
    worst, where = np.inf, None
    for i, e in np.argwhere(delta > 0):
        margin = c[e] * P[i, e] / (1.0 + G[:, e] @ P[i])
        if margin < worst:
            worst, where = margin, (int(i), int(e))
    i0, e = where
    delta = delta.copy()
    delta[i0, e] = 0
    cand = [i for i in range(nb) if i != i0 and not delta[i, e] and _allowed(problem, delta, i, e)]
    if not cand:
        raise RoundingInfeasible(f"link {e} has no alternative block")
    i1 = min(cand, key=lambda i: _block_coupling(G, delta[i], e))
    delta[i1, e] = 1
    return delta


def solve_p2_sca(problem: ScheduleProblem, lam0=None, max_rounds=8, max_iter=50, tol_obj=1e-4, tol_bin=1e-3,
                 max_repairs=3, slack_weight=1e3, seed=0, backend="clarabel") -> Schedule:
    """Penalized SCA for the relaxed scheduling problem, then rounding and power polish.

    The start spreads each link's demand over the blocks with a seeded random
    tilt; a perfectly uniform start is a fixed point of the linearized penalty
    (interior-point solvers return the centre of the tied optimal face).
    """
    _check_demand(problem)
    nb, L = problem.n_blocks, problem.num_links
    c, G = _coupling(problem)
    lam = 0.05 * nb if lam0 is None else lam0 / problem.p_max
    rng = np.random.default_rng([seed, 0x5CA])
    tilt = rng.uniform(0.5, 1.5, (nb, L))
    d = np.clip(problem.required[None, :] * tilt / tilt.sum(axis=0), 0.0, 1.0).ravel()
    p = d * max(problem.p_min / problem.p_max, 0.5)
    M = sp.kron(sp.identity(nb), sp.csr_matrix(G.T), format="csr")
    history, relaxed, failed = [], None, None
    for rnd in range(max_rounds):
        prev = None
        for _ in range(max_iter):
            d0 = np.maximum(d, DELTA_FLOOR)
            a0 = 1.0 + M @ p
            try:
                p, d, sl = _sca_step(problem, c, G, lam, d0, a0, slack_weight, backend)
            except SolverFailure as exc:
                if not history:
                    raise
                # every earlier iterate is feasible; round from the last good one
                failed = str(exc)
                break
            f = _penalized(p, d, lam, sl, slack_weight)
            history.append((rnd, lam * problem.p_max, f * problem.p_max, float(np.sum(sl))))
            if relaxed is None:
                relaxed = float(np.sum(p))
            if prev is not None and abs(prev - f) <= tol_obj * max(abs(prev), 1e-12):
                break
            prev = f
        if failed or np.max(np.minimum(d, 1.0 - d)) < tol_bin:
            break
        lam *= 2.0
    d_rel = d.reshape(nb, L)
    p_rel = p.reshape(nb, L)
    delta = _round(problem, d_rel, p_rel)
    powers = _polish(problem, delta, backend)
    repairs = 0
    while powers is None:
        if repairs >= max_repairs:
            raise RoundingInfeasible("rounded schedule violates SINR after repairs")
        delta = _repair(problem, delta, p_rel)
        repairs += 1
        powers = _polish(problem, delta, backend)
    sched = Schedule(delta=delta, powers=powers, block_slots=problem.block_slots,
                     relaxed_objective=relaxed * problem.p_max, penalized_objective=history[-1][2],
                     history=history, repairs=repairs)
    sched.report = check_schedule(problem, delta, powers)
    sched.report["sca_stopped"] = failed
    return sched


def ensure_identifiable(problem: ScheduleProblem, delta, backend="clarabel", max_steps=None):
    """Make the support admit a well-posed full-column-rank power matrix.

    Phase one raises the structural rank (bipartite matching size) until
    some power matrix on the support has full column rank; this is required.
    Phase two, best effort, raises the rank of the 0/1 support itself: two
    links active in exactly the same blocks are only told apart through
    power ratios inside [p_min, p_max], which costs a lot of power once P3
    asks for a decent condition number. Each step prefers moving an existing
    activation to another block, which keeps the demand and the energy
    unchanged, over adding one. Moves and additions respect C1/C2 and the
    interference conflicts, and must leave the schedule SINR-feasible.
    Returns (delta, list of ("move"|"add", block, link)).
    """
    delta = np.array(delta, dtype=int)
    nb, L = delta.shape
    if nb < L:
        raise RankDeficient(f"{nb} blocks cannot identify {L} links")
    log = []
    delta = _raise_rank(problem, delta, structural_rank, log, backend, max_steps, required=True)
    delta = _raise_rank(problem, delta, _support_rank, log, backend, max_steps, required=False)
    return delta, log


def _support_rank(delta) -> int:
    return int(np.linalg.matrix_rank(np.asarray(delta, dtype=float)))


def _raise_rank(problem, delta, rank, log, backend, max_steps, required):
    nb, L = delta.shape
    _, G = problem.normalized()
    cf = problem.conflicts()
    tabu = set()
    steps = 0
    while rank(delta) < L:
        steps += 1
        if max_steps is not None and steps > max_steps:
            if required:
                raise RankDeficient("identifiability repair did not finish")
            return delta
        base = rank(delta)
        cands = []
        for e in range(L):
            for i in range(nb):
                if delta[i, e] or not _allowed(problem, delta, i, e, cf):
                    continue
                cost = _block_coupling(G, delta[i], e)
                for i0 in np.flatnonzero(delta[:, e]):
                    if (e, i0, i) in tabu:
                        continue
                    delta[i0, e], delta[i, e] = 0, 1
                    # a move may trade structural rank for support rank; only phase one may not lose it
                    if rank(delta) > base and (required or structural_rank(delta) == L):
                        cands.append((0, cost, e, int(i0), i))
                    delta[i0, e], delta[i, e] = 1, 0
                if (e, -1, i) not in tabu:
                    delta[i, e] = 1
                    if rank(delta) > base:
                        cands.append((1, cost, e, -1, i))
                    delta[i, e] = 0
        cands.sort()
        for kind, _, e, i0, i in cands:
            trial = delta.copy()
            if i0 >= 0:
                trial[i0, e] = 0
            trial[i, e] = 1
            if _polish(problem, trial, backend) is not None:
                delta = trial
                log.append(("move" if i0 >= 0 else "add", i, e))
                break
            tabu.add((e, i0, i))
        else:
            if required:
                raise RankDeficient("every rank-raising step breaks SINR feasibility" if cands
                                    else "no compatible activation raises the structural rank")
            return delta
    return delta


# ---------------------------------------------------------------- P3


@dataclass
class SdpState:
    t: int
    P_tilde: np.ndarray
    Z: np.ndarray
    U: np.ndarray
    e: float
    gamma: float
    nu: float
    V: np.ndarray
    W: np.ndarray
    w: float
    p_star: float
    alpha: float


@dataclass
class P3Result:
    P: np.ndarray  # blocks x links, mW
    gamma: float
    kappa: float
    e_history: list
    objective_history: list
    iterations: int
    converged: bool
    tol_e: float
    states: list = field(default_factory=list, repr=False)

    @property
    def kappa_bound(self) -> float:
        return float(np.sqrt(self.gamma))


def _reference_powers(problem, delta, base, rng, tries=20):
    """Best-conditioned of ``tries`` random feasible power matrices on the support.

    A single draw on a sparse support is sometimes nearly singular, which
    wrecks the scaling of everything normalized by it (fallback: the given one).
    """
    rho = problem.p_min / problem.p_max
    lo = np.where(delta > 0, np.maximum(base / problem.p_max, rho), 0.0)
    best, best_k = lo, np.inf
    for _ in range(tries):
        P = np.where(delta > 0, lo + rng.uniform(0, 1, delta.shape) * (1.0 - lo), 0.0)
        if check_schedule(problem, delta, P * problem.p_max)["C5"] <= 1e-9:
            k = condition_number(P)
            if k < best_k:
                best, best_k = P, k
    return best


def _centre(P0, Pref, ref, alpha):
    """Best point of the P3 scalarization on the segment P0 -> Pref.

    Both ends are feasible and the SINR constraints are linear on a fixed
    support, so every point in between is too. P0 (minimum power) is often
    singular on dense supports, Pref is well conditioned but costs power.
    """
    def f(s):
        P = P0 + s * (Pref - P0)
        sv = np.linalg.svd(P, compute_uv=False)
        if sv[-1] <= 1e-9 * sv[0]:
            return np.inf
        return alpha * (sv[0] / sv[-1]) ** 2 / ref["gamma"] + (1.0 - alpha) * P.sum() / ref["p_star"]

    cands = [0.0, 1.0]
    r = minimize_scalar(f, bounds=(0.0, 1.0), method="bounded", options={"xatol": 1e-4})
    if np.isfinite(r.fun):
        cands.append(float(r.x))
    s = min(cands, key=f)
    return P0 + s * (Pref - P0)


def _rotated(prog, x, u, v, name=""):
    """||x||^2 <= u v (u, v >= 0) as a second-order cone."""
    x = AffExpr.lift(x)
    prog.add_soc((AffExpr.lift(u) + v) * 0.5, AffExpr.vstack([x, (AffExpr.lift(u) - v) * 0.5]), name)


def _p3_program(problem, delta, act, ref, V, W, e_prev, weight, alpha, margin):
    nb, L = delta.shape
    c, G = problem.normalized()
    rho = problem.p_min / problem.p_max
    m = len(act)
    prog = ConicProgram()
    pt = prog.variable("pt", m)
    nu = prog.variable("nu")
    gam = prog.variable("gamma")
    Z = prog.symmetric("Z", nb)
    nu_rep = nu.repeat(m)
    prog.add_nonneg(pt - nu_rep * rho)  # C6*
    prog.add_nonneg(nu_rep - pt)  # C7*
    # mu <= lambda_min(P^T P) <= smallest column norm^2 <= fewest activations
    prog.add_nonneg(nu - 1.0 / ref["min_count"])
    pos = {(int(i), int(e)): k for k, (i, e) in enumerate(act)}
    rows, cols, vals = [], [], []
    for k, (i, e) in enumerate(act):
        rows.append(k); cols.append(k); vals.append(c[e])
        for j in range(L):
            if j != e and (int(i), j) in pos and G[j, e] > 0:
                rows.append(k); cols.append(pos[(int(i), j)]); vals.append(-G[j, e])
    A = sp.csr_matrix((vals, (rows, cols)), shape=(m, m))
    prog.add_nonneg(pt.lmap(A) - nu_rep)  # C5* scaled by nu
    flat = act[:, 0] * L + act[:, 1]
    Sel = sp.csr_matrix((np.ones(m), (flat, np.arange(m))), shape=(nb * L, m))
    Pt = MatExpr(pt.lmap(Sel), (nb, L))
    U = MatExpr.bmat([[MatExpr.eye_times(nu, L), Pt.T], [Pt, Z]])
    prog.add_psd(U, "U")
    prog.add_psd(MatExpr.eye_times(gam, nb) - Z, "Z<=gamma")
    prog.add_psd(Z.congruence(V) - MatExpr.const((1.0 + margin) * np.eye(L)), "VZV>=1")
    # true power sum(pt)/nu, majorized at the previous iterate:
    # x/y <= theta x^2/2 + 1/(2 theta y^2), tight at theta = 1/(x0 y0)
    tq = prog.variable("tq")
    q = prog.variable("q")
    s = prog.variable("s")
    _rotated(prog, pt * np.sqrt(ref["theta"]), tq, 1.0, "power-quad")
    _rotated(prog, 1.0, q, nu, "q>=1/nu")
    _rotated(prog, q, s, 1.0, "s>=q^2")
    power = (tq + s * float(np.sum(1.0 / ref["theta"]))) * 0.5
    obj = gam * (alpha / ref["gamma"]) + power * ((1.0 - alpha) / ref["p_star"])
    if W is not None:
        e = prog.variable("e")
        prog.add_psd(MatExpr.eye_times(e, W.shape[1]) - U.congruence(W), "rank")
        prog.add_nonneg(e)
        prog.add_nonneg(e_prev - e)
        obj = obj + e * weight
    prog.minimize(obj)
    return prog, U, Z


def solve_p3(delta, problem: ScheduleProblem, alpha=0.2, p_star=None, base_powers=None, w0=None, tol_e_rel=1e-6,
             max_iter=50, margin=1e-6, seed=0, backend="clarabel", keep_states=False) -> P3Result:
    """Iterative rank-constrained SDP for a fixed schedule.

    ``alpha`` weighs the condition-number proxy gamma (normalized by its value
    at a random feasible reference), 1 - alpha the energy (normalized by
    ``p_star``, the stage-one total power). U = [[nu I, P~^T], [P~, Z~]] has
    rank |E| exactly when its Schur complement S = Z~ - P~ P~^T / nu vanishes;
    then Z~ = nu P P^T with P = P~ / nu, its top-|E| eigenspace is range(P)
    (used for the lower spectral bound V^T Z~ V >= 1 + margin) and the null
    space of U is spanned by W = [-P^T; I].
    Each iteration takes W from the previous iterate and imposes
    e I - W^T U W >= 0; since W^T U W = S + nu (P~/nu - P)(P~/nu - P)^T >= S,
    this caps the largest eigenvalue of S, keeps the previous iterate
    feasible (so e never increases) and, once e <= margin, makes gamma an
    upper bound on kappa(P)^2.
    """
    delta = (np.asarray(delta) > 0).astype(int)
    nb, L = delta.shape
    if nb < L:
        raise RankDeficient("n_b must be at least the number of links")
    if structural_rank(delta) < L:
        raise RankDeficient("schedule support cannot give a full-rank power matrix")
    rng = np.random.default_rng([seed, 0x93])
    base = _polish(problem, delta, backend) if base_powers is None else np.asarray(base_powers, dtype=float)
    if base is None:
        raise Infeasible("schedule admits no SINR-feasible powers")
    p_star_n = (np.sum(base) if p_star is None else p_star) / problem.p_max
    act = np.argwhere(delta > 0)
    rho = problem.p_min / problem.p_max
    Pref = _reference_powers(problem, delta, base, rng)
    sv = np.linalg.svd(Pref, compute_uv=False)
    mu_ref = max(sv[-1] ** 2, 1e-12 * sv[0] ** 2)
    nu0 = 1.0 / mu_ref
    ref = {"gamma": sv[0] ** 2 / mu_ref, "p_star": p_star_n, "min_count": int(delta.sum(axis=0).min()),
           "theta": 1.0 / (nu0 ** 2 * Pref[act[:, 0], act[:, 1]])}
    Uz, _, _ = np.linalg.svd(Pref, full_matrices=True)
    V = Uz[:, :L]

    prog, Uexpr, Zexpr = _p3_program(problem, delta, act, ref, V, None, None, 0.0, alpha, margin)
    sol = _solve(prog, backend, "P3 (t=0)")
    x = sol.x
    Uv = Uexpr.value(x)
    Uv = (Uv + Uv.T) / 2
    lam = np.linalg.eigvalsh(Uv)
    tol_e = tol_e_rel * float(np.max(np.abs(lam)))
    # (|E|+1)-th largest eigenvalue of U^0; raised to lambda_max(S^0) if needed so U^0 is feasible at t=1
    e_prev = max(float(lam[::-1][L]), _schur_max(Uv, L))
    weight = max(abs(sol.objective), 1e-12) if w0 is None else w0
    margin = max(margin, tol_e)
    e_hist, obj_hist, states = [e_prev], [sol.objective], []
    converged = e_prev < tol_e
    t = 0
    while not converged and t < max_iter:
        t += 1
        if t == 1:
            # the relaxed U^0 lets S soak up the spectrum, so P~^0 can be nearly
            # singular; centre the first linearization on a feasible full-rank
            # point instead (nu P0, Z = nu P0 P0^T is feasible there with e = 0)
            P_prev = _centre(np.where(delta > 0, np.maximum(base / problem.p_max, rho), 0.0), Pref, ref, alpha)
            sv0 = np.linalg.svd(P_prev, compute_uv=False)
            nu_c = 1.0 / sv0[-1] ** 2
            ref["theta"] = 1.0 / (nu_c ** 2 * P_prev[act[:, 0], act[:, 1]])
        else:
            nu = float(prog.value("nu", x)[0])
            ref["theta"] = 1.0 / np.maximum(prog.value("pt", x) * nu, 1e-12)
            P_prev = Uv[L:, :L] / nu
        # range of the previous power matrix: the top-|E| eigenspace of Z~ once S vanishes
        V = np.linalg.svd(P_prev, full_matrices=False)[0]
        W = np.vstack([-P_prev.T, np.eye(nb)])
        w_t = weight * 2.0 ** min(t, W_DOUBLINGS)
        prog, Uexpr, Zexpr = _p3_program(problem, delta, act, ref, V, W, e_prev, w_t, alpha, margin)
        sol = _solve(prog, backend, f"P3 (t={t})")
        x = sol.x
        e_t = float(max(prog.value("e", x)[0], 0.0))
        e_t = min(e_t, e_prev)
        Uv = Uexpr.value(x)
        Uv = (Uv + Uv.T) / 2
        e_hist.append(e_t)
        obj_hist.append(sol.objective)
        if keep_states:
            states.append(SdpState(t=t, P_tilde=Uv[L:, :L].copy(), Z=Uv[L:, L:].copy(), U=Uv, e=e_t,
                                   gamma=float(prog.value("gamma", x)[0]), nu=float(prog.value("nu", x)[0]),
                                   V=V, W=W, w=w_t, p_star=p_star_n, alpha=alpha))
        e_prev = e_t
        converged = e_t < tol_e
    nu = float(prog.value("nu", x)[0])
    gam = float(prog.value("gamma", x)[0])
    Pn = np.zeros((nb, L))
    Pn[act[:, 0], act[:, 1]] = prog.value("pt", x) / nu
    rho = problem.p_min / problem.p_max
    Pn = np.where(delta > 0, np.clip(Pn, rho, 1.0), 0.0)
    P = Pn * problem.p_max
    kappa = condition_number(P)
    res = P3Result(P=P, gamma=gam, kappa=kappa, e_history=e_hist, objective_history=obj_hist,
                   iterations=t, converged=converged, tol_e=tol_e, states=states)
    if not converged:
        raise _stalled(res)
    return res


def _schur_max(U, L):
    nu = U[0, 0]
    Pt = U[L:, :L]
    S = U[L:, L:] - Pt @ Pt.T / nu
    return float(np.linalg.eigvalsh((S + S.T) / 2)[-1])


def _stalled(res):
    err = StalledRank(f"e stalled at {res.e_history[-1]:.3g} > {res.tol_e:.3g} after {res.iterations} iterations")
    err.result = res
    return err


# ---------------------------------------------------------------- joint + metrics


@dataclass
class JointResult:
    schedule: Schedule  # stage one, without IGE
    delta: np.ndarray  # support after identifiability repair
    p3: P3Result
    added: list
    f2: float  # stage-one energy (mW * slots)
    f3: float  # stage-two energy (mW * slots)

    @property
    def power_overhead(self) -> float:
        return (self.f3 - self.f2) / self.f2

    def gap_json(self, oracle=None) -> str:
        doc = {"f2": self.f2, "f3": self.f3, "kappa": self.p3.kappa, "gamma": self.p3.gamma,
               "power_overhead": self.power_overhead, "oracle": oracle}
        return json.dumps(doc, indent=2)


def joint_schedule(problem: ScheduleProblem, alpha=0.2, seed=0, backend="clarabel", sca_kw=None, p3_kw=None):
    sched = solve_p2_sca(problem, seed=seed, backend=backend, **(sca_kw or {}))
    delta, added = ensure_identifiable(problem, sched.delta, backend)
    base = sched.powers if not added else _polish(problem, delta, backend)
    if base is None:
        raise RoundingInfeasible("identifiability repair broke SINR feasibility")
    p3 = solve_p3(delta, problem, alpha=alpha, p_star=float(np.sum(sched.powers)), base_powers=base, seed=seed,
                  backend=backend, **(p3_kw or {}))
    tau = problem.block_slots
    return JointResult(schedule=sched, delta=delta, p3=p3, added=added,
                       f2=float(np.sum(sched.powers) * tau), f3=float(np.sum(p3.P) * tau))


def evaluate_schedule(powers, true_gains, noise, gamma, powers_without_ige=None, block_slots=1):
    """Overhead (P1 - P0)/P0 and unsatisfied ratio with true gains.

    A link counts as unsatisfied when any of its active blocks misses gamma.
    """
    P = np.asarray(powers, dtype=float)
    g = np.asarray(true_gains, dtype=float)
    nb, L = P.shape
    noise = np.broadcast_to(np.asarray(noise, dtype=float), (L,))
    margin = np.full((nb, L), np.nan)
    for i in range(nb):
        for e in range(L):
            if P[i, e] > 0:
                margin[i, e] = sinr_hat(g, None, P[i], e, noise[e]) / gamma[e]
    active = P > 0
    used = active.any(axis=0)
    bad = np.array([np.any(margin[active[:, e], e] < 1.0 - 1e-9) for e in range(L)])
    out = {
        "unsatisfied_ratio": float(np.sum(bad & used) / max(np.sum(used), 1)),
        "min_margin_db": float(10 * np.log10(np.nanmin(margin))) if np.any(active) else float("nan"),
        "margin_db": 10 * np.log10(margin),
    }
    if powers_without_ige is not None:
        p0 = float(np.sum(powers_without_ige) * block_slots)
        p1 = float(np.sum(P) * block_slots)
        out["power_overhead"] = (p1 - p0) / p0
    return out


# ---------------------------------------------------------------- oracle


def _min_power_lp(problem, active):
    """Minimum-power SINR solution for links ``active`` sharing one block (scipy HiGHS)."""
    from scipy.optimize import linprog

    S = list(active)
    if not S:
        return 0.0, {}
    k = len(S)
    c_lin = np.ones(k)
    A = np.zeros((k, k))
    b = np.zeros(k)
    for r, e in enumerate(S):
        # gamma (W + sum g p_j) - g_ee p_e <= 0, in units of P_max and W_e
        A[r, r] = -problem.g_comm[e] * problem.p_max / problem.noise[e]
        for q, j in enumerate(S):
            if j != e:
                A[r, q] = problem.gamma[e] * problem.g_ub[j, e] * problem.p_max / problem.noise[e]
        b[r] = -problem.gamma[e]
    lo = problem.p_min / problem.p_max
    res = linprog(c_lin, A_ub=A, b_ub=b, bounds=[(lo, 1.0)] * k, method="highs")
    if res.status != 0:
        return np.inf, {}
    return float(res.fun * problem.p_max), {e: float(v * problem.p_max) for e, v in zip(S, res.x)}


def brute_force_oracle(problem: ScheduleProblem, max_links=4, max_blocks=6):
    """Exhaustive search over binary schedules meeting C1-C4.

    Extra activations only add power and interference, so each link gets
    exactly its required number of blocks. Blocks decouple given the schedule,
    so per-block minimum powers are cached by active set.
    """
    L, nb = problem.num_links, problem.n_blocks
    if L > max_links or nb > max_blocks:
        raise TooLarge(f"{L} links x {nb} blocks exceeds the exhaustive limit")
    if np.any(problem.required > nb):
        raise Infeasible("a link needs more slots than the period holds")
    cache = {}

    def block_cost(S):
        if S not in cache:
            ok = all(
                not (problem.links[a][0] == problem.links[b][0] or problem.links[a][1] == problem.links[b][1])
                for a, b in itertools.combinations(S, 2)
            )
            cache[S] = _min_power_lp(problem, S) if ok else (np.inf, {})
        return cache[S]

    choices = [list(itertools.combinations(range(nb), int(r))) for r in problem.required]
    best = (np.inf, None)
    for combo in itertools.product(*choices):
        sets = [[] for _ in range(nb)]
        for e, blocks in enumerate(combo):
            for i in blocks:
                sets[i].append(e)
        total = 0.0
        for S in sets:
            total += block_cost(tuple(S))[0]
            if total >= best[0]:
                break
        if total < best[0]:
            best = (total, [tuple(S) for S in sets])
    if best[1] is None:
        raise Infeasible("no schedule satisfies the constraints")
    delta = np.zeros((nb, L), dtype=int)
    powers = np.zeros((nb, L))
    for i, S in enumerate(best[1]):
        _, pw = block_cost(S)
        for e in S:
            delta[i, e] = 1
            powers[i, e] = pw[e]
    return delta, powers, best[0] * problem.block_slots
