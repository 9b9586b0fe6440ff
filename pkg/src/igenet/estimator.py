"""Power-domain interference graph estimation: power matrices, least squares
recovery of equivalent gains, condition numbers and the error bounds."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
from scipy.optimize import minimize_scalar
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_bipartite_matching

from .waveform import Constellation, DimensionMismatch, FrameConfig, measure_received_powers, qam


class RankDeficient(np.linalg.LinAlgError):
    pass


class BadTolerance(ValueError):
    pass


# ---------------------------------------------------------------- power matrices


@dataclass(frozen=True)
class PowerMatrix:
    """Blocks x links transmit powers (mW); zero where the link is idle."""

    P: np.ndarray
    block_slots: int = 1
    strategy: str = "given"

    def __array__(self, dtype=None, copy=None):
        return self.P if dtype is None else self.P.astype(dtype)

    @property
    def shape(self):
        return self.P.shape

    @property
    def delta(self) -> np.ndarray:
        return (self.P > 0).astype(int)

    @property
    def kappa(self) -> float:
        return condition_number(self.P)


def condition_number(P) -> float:
    P = np.asarray(P, dtype=float)
    if P.size == 0 or not np.any(P):
        raise RankDeficient("power matrix is empty or all zero")
    s = np.linalg.svd(P, compute_uv=False)
    if P.shape[0] < P.shape[1] or s[-1] <= max(P.shape) * np.finfo(float).eps * s[0]:
        raise RankDeficient("power matrix does not have full column rank")
    return float(s[0] / s[-1])


def structural_rank(support) -> int:
    """Largest rank any matrix with this zero pattern can reach (bipartite matching)."""
    S = csr_matrix(np.asarray(support, dtype=bool).T.astype(np.int8))  # links x blocks
    match = maximum_bipartite_matching(S, perm_type="column")
    return int(np.sum(match >= 0))


def _fill(support, rng, p_min, p_max):
    return support * rng.uniform(p_min, p_max, size=support.shape)


def _append_singular_row(P, support_row, p_min, p_max):
    """Row aligned with the weakest right-singular direction of P, mapped into [p_min, p_max]."""
    _, _, vt = np.linalg.svd(P, full_matrices=False)
    v = vt[-1]
    on = support_row > 0
    best, best_k = None, np.inf
    for sgn in (1.0, -1.0):
        u = sgn * v[on]
        row = np.zeros(P.shape[1])
        span = np.ptp(u)
        row[on] = p_max if span <= 0 else p_min + (u - u.min()) / span * (p_max - p_min)
        try:
            k = condition_number(np.vstack([P, row]))
        except RankDeficient:
            continue
        if k < best_k:
            best, best_k = row, k
    if best is None:
        raise RankDeficient("no admissible surplus row")
    return best


def build_power_matrix(delta=None, n_b=None, strategy="random", seed=None, p_min=800.0, p_max=1200.0,
                       num_links=None, retries=20, block_slots=1, problem=None, **p3_kwargs) -> PowerMatrix:
    """Transmit power matrix for an IGE period.

    ``delta`` is a blocks x links 0/1 schedule (None: every link active in
    every block). Strategies: ``random`` (uniform on the support),
    ``append-singular`` (random square head, then rows steered at the
    smallest right-singular vector) and ``optimized`` (the iterative SDP,
    needs ``problem``).
    """
    if delta is None:
        if n_b is None or num_links is None:
            raise ValueError("without a schedule both n_b and num_links are required")
        delta = np.ones((n_b, num_links), dtype=int)
    delta = np.asarray(delta, dtype=int)
    n_b = delta.shape[0] if n_b is None else n_b
    if delta.shape[0] != n_b:
        raise DimensionMismatch(f"schedule has {delta.shape[0]} blocks, expected {n_b}")
    nl = delta.shape[1]
    if n_b < nl:
        raise RankDeficient(f"{n_b} blocks cannot identify {nl} links")
    if strategy == "optimized":
        from .optimizer import solve_p3

        if problem is None:
            raise ValueError("the optimized strategy needs a ScheduleProblem")
        res = solve_p3(delta, problem, **p3_kwargs)
        return PowerMatrix(res.P, block_slots, strategy)
    if structural_rank(delta) < nl:
        raise RankDeficient("schedule support cannot give a full-rank power matrix")
    rng = np.random.default_rng(seed)
    for _ in range(retries):
        if strategy == "random":
            P = _fill(delta, rng, p_min, p_max)
        elif strategy == "append-singular":
            P = _fill(delta[:nl], rng, p_min, p_max)
            try:
                condition_number(P)
            except RankDeficient:
                continue
            for i in range(nl, n_b):
                P = np.vstack([P, _append_singular_row(P, delta[i], p_min, p_max)])
        else:
            raise ValueError(f"unknown power strategy {strategy!r}")
        try:
            condition_number(P)
        except RankDeficient:
            continue
        return PowerMatrix(P, block_slots, strategy)
    raise RankDeficient(f"no full-rank matrix after {retries} draws")


# ---------------------------------------------------------------- least squares


def left_inverse(P) -> np.ndarray:
    condition_number(P)
    return np.linalg.pinv(np.asarray(P, dtype=float))


def estimate_gains(P, b_bar, w=0.0, clip=True):
    """Least squares ĝ = P^+ (b̄ - w) through a thin QR factorization.

    ``b_bar`` may be a vector or a blocks x receivers matrix (one column per
    receiving link). Non-positive estimates are raised to the smallest
    positive estimate of the same receiver when ``clip`` is set.
    """
    P = np.asarray(P, dtype=float)
    b = np.asarray(b_bar, dtype=float)
    if b.shape[0] != P.shape[0]:
        raise DimensionMismatch(f"{b.shape[0]} block powers for {P.shape[0]} blocks")
    if P.shape[0] < P.shape[1]:
        raise RankDeficient("fewer blocks than links")
    Q, R = sla.qr(P, mode="economic")
    d = np.abs(np.diag(R))
    if d.min() <= max(P.shape) * np.finfo(float).eps * d.max():
        raise RankDeficient("power matrix does not have full column rank")
    rhs = Q.T @ (b - np.asarray(w, dtype=float))
    g = sla.solve_triangular(R, rhs)
    return clip_estimates(g) if clip else g


def clip_estimates(g):
    g = np.array(g, dtype=float)
    cols = g.reshape(g.shape[0], -1)
    for c in cols.T:
        bad = c <= 0
        if bad.any():
            pos = c[~bad]
            c[bad] = pos.min() if pos.size else 0.0
    return cols.reshape(g.shape)


# ---------------------------------------------------------------- bounds


def per_link_error_bound(kappa, g_norm, eps_b):
    if kappa < 0 or g_norm < 0 or eps_b < 0:
        raise ValueError("inputs must be non-negative")
    return float(kappa * g_norm * eps_b)


@dataclass(frozen=True)
class DeviationBoundInputs:
    sigma2: float  # per real dimension
    i_max: float
    fourth_moment: float
    n_c: int = 1024
    n_g: int = 72
    n_k: int = 14
    delta: float = 0.01

    @classmethod
    def from_constellation(cls, c: Constellation, **kw):
        return cls(sigma2=c.sigma2, i_max=c.i_max, fourth_moment=c.fourth_moment, **kw)

    @property
    def n_s(self):
        return self.n_c + self.n_g

    @property
    def mu(self):
        return 2.0 * self.sigma2

    @property
    def b(self):
        return 2.0 * self.i_max ** 2 - 2.0 * self.sigma2

    @property
    def eta2(self):
        return self.fourth_moment - 4.0 * self.sigma2 ** 2

    @property
    def B1(self):
        return 2.0 * self.i_max ** 2


def _Q(t, printed=False):
    # Bennett's h(t) = (1+t)log(1+t) - t; the "printed" variant drops the -t
    # and makes the bound vacuous-small (threshold of one symbol).
    q = (1.0 + t) * np.log1p(t)
    return q if printed else q - t


def deviation_exponents(inp: DeviationBoundInputs, dev, printed_q=False):
    """(f1, f2) at split point ``dev`` in (0, mu*delta)."""
    s4 = inp.sigma2 ** 2
    x2 = inp.i_max ** 2
    nc, ng, nk = inp.n_c, inp.n_g, inp.n_k
    if ng > 0:
        f1 = -nk * ng * (nc * nc - nc) * s4 / (4 * x2 * x2) * _Q(x2 * inp.n_s * dev / (ng * (nc - 1) * s4), printed_q)
    else:
        f1 = -np.inf  # no CP: the cyclic term vanishes
    f2 = -nk * nc * inp.eta2 / inp.b ** 2 * _Q(inp.b * (inp.mu * inp.delta - dev) / inp.eta2, printed_q)
    return f1, f2


def tx_power_deviation_bound(inp: DeviationBoundInputs, grid: int = 256, printed_q: bool = False) -> float:
    """Upper bound on P[|p̄ - mu| >= mu*delta]; 0 for constant-modulus constellations."""
    if not 0 < inp.delta <= 1:
        raise BadTolerance(f"delta must lie in (0, 1], got {inp.delta}")
    if inp.n_k < 1:
        raise BadTolerance("need at least one OFDM symbol")
    if inp.eta2 <= 1e-12 * inp.sigma2 ** 2 or inp.b <= 1e-12 * inp.sigma2:
        return 0.0
    hi = inp.mu * inp.delta

    def obj(x):
        f1, f2 = deviation_exponents(inp, x, printed_q)
        return np.logaddexp(f1, f2)

    xs = hi * (np.arange(1, grid) / grid)
    vals = np.array([obj(x) for x in xs])
    k = int(np.argmin(vals))
    lo_b = xs[k - 1] if k > 0 else 0.0
    hi_b = xs[k + 1] if k + 1 < len(xs) else hi
    res = minimize_scalar(obj, bounds=(lo_b, hi_b), method="bounded", options={"xatol": 1e-6 * hi})
    best = min(vals[k], float(res.fun))
    return float(min(1.0, 2.0 * np.exp(best)))


def deviation_threshold(c: Constellation, target=0.01, delta=0.01, n_c=1024, n_g=72, n_max=4096):
    """Smallest N_k whose bound is <= target (bound is monotone in N_k)."""
    def bound(n):
        return tx_power_deviation_bound(DeviationBoundInputs.from_constellation(c, n_c=n_c, n_g=n_g, n_k=n, delta=delta))

    if bound(1) <= target:
        return 1
    if bound(n_max) > target:
        return None
    lo, hi = 1, n_max
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if bound(mid) <= target:
            hi = mid
        else:
            lo = mid
    return hi


def empirical_deviation_probability(c: Constellation, n_k, delta=0.01, n_c=1024, n_g=72, trials=10_000,
                                    seed=0, chunk=500):
    """Monte-Carlo P[|p̄ - mu| >= mu*delta] over random symbol draws, CP samples included."""
    rng = np.random.default_rng(seed)
    mu = c.mean_power
    hits = 0
    done = 0
    while done < trials:
        m = min(chunk, trials - done)
        X = c.draw(rng, (m, n_k, n_c))
        body = np.sum(np.abs(X) ** 2, axis=(1, 2))  # Parseval: time-domain energy of the body
        if n_g:
            x = np.fft.ifft(X, axis=-1)[..., n_c - n_g:] * np.sqrt(n_c)
            body = body + np.sum(np.abs(x) ** 2, axis=(1, 2))
        p_bar = body / (n_k * (n_c + n_g))
        hits += int(np.sum(np.abs(p_bar - mu) >= mu * delta))
        done += m
    return hits / trials


def split_beta(beta: float):
    """Equal split with prod(1 - beta_j) = 1 - beta."""
    if not 0 < beta < 1:
        raise ValueError("beta must lie in (0, 1)")
    bj = 1.0 - (1.0 - beta) ** (1.0 / 3.0)
    return (bj, bj, bj)


@dataclass(frozen=True)
class ErrorBoundParams:
    m: tuple = (14 * 1096,) * 3
    beta: float = 0.05
    betas: tuple = field(default=None)

    def __post_init__(self):
        if self.betas is None:
            object.__setattr__(self, "betas", split_beta(self.beta))
        if any(not 0 < b < 1 for b in self.betas):
            raise ValueError("each beta_j must lie in (0, 1)")
        if any(m < 1 for m in self.m):
            raise ValueError("sample counts must be >= 1")

    @property
    def guarantee(self) -> float:
        return float(np.prod([1.0 - b for b in self.betas]))


def compute_A_terms(mean_gain, mean_gain_sq, sigma2, noise_mw, m, betas, n_c):
    """(A1, A2, A3) for one receiver.

    ``sigma2`` is the per-real-dimension sample variance of each link's
    transmission (p/2 for power p).
    """
    Eg = np.asarray(mean_gain, dtype=float)
    Eg2 = np.asarray(mean_gain_sq, dtype=float)
    s2 = np.asarray(sigma2, dtype=float)
    m1, m2, m3 = m
    b1, b2, b3 = betas
    t = s2 * Eg
    cross = max(float(t.sum() ** 2 - np.sum(t * t)), 0.0)  # sum over ordered pairs e != e'
    A1 = np.sqrt(4.0 / (m1 * b1) * cross)
    A2 = np.sqrt(1.0 / (m2 * b2) * float(np.sum(Eg2 * (4 * s2 ** 2 - 4 * s2 ** 2 / n_c))))
    A3 = np.sqrt(noise_mw ** 2 / (m3 * b3))
    return float(A1), float(A2), float(A3)


def per_pair_error_bound(P, i, A, betas):
    """(Δ, 1 - β) with Δ = ||row i of P^+|| * sum(A)."""
    r = left_inverse(P)[i]
    return float(np.linalg.norm(r) * sum(A)), float(np.prod([1.0 - b for b in betas]))


def per_pair_bounds(P, A_by_receiver):
    """Δ[j, i] for every (source link j, receiver link i)."""
    rn = np.linalg.norm(left_inverse(P), axis=1)
    A = np.asarray(A_by_receiver, dtype=float).reshape(len(A_by_receiver), 3)
    return np.outer(rn, A.sum(axis=1))


# ---------------------------------------------------------------- pipeline


@dataclass(frozen=True)
class GraphEstimate:
    links: tuple
    g_hat: np.ndarray  # [source link, receiver link]
    delta: np.ndarray  # per-pair bounds, same layout
    kappa: float
    guarantee: float
    P: np.ndarray
    b_bar: np.ndarray  # blocks x receivers, noise not removed
    residual: np.ndarray  # b̄ - w - P ĝ (before clipping)
    g_true: np.ndarray | None = None

    @property
    def f(self):
        """Deviation of measured from expected block power (needs true gains)."""
        if self.g_true is None:
            return None
        return self.b_bar - self.P @ self.g_true

    def errors_db(self, g_true=None):
        g = self.g_true if g_true is None else np.asarray(g_true)
        return 10.0 * np.log10(self.g_hat / g)

    def to_csv_rows(self, g_true=None):
        g = self.g_true if g_true is None else np.asarray(g_true)
        for i, dst in enumerate(self.links):
            for j, src in enumerate(self.links):
                t = 10 * np.log10(g[j, i]) if g is not None else float("nan")
                e = 10 * np.log10(self.g_hat[j, i])
                yield (f"{src[0]}-{src[1]}", f"{dst[0]}-{dst[1]}", t, e, e - t, self.delta[j, i])


def run_ige(gains, P, frame: FrameConfig, qam_orders, noise_mw, seed, cfo=None, delays=None,
            bound_params: ErrorBoundParams | None = None, prior=None, expected=False) -> GraphEstimate:
    """Measure every receiver over the period and recover the interference graph.

    ``gains`` is a channel.GainTable (ground truth used only to synthesize
    samples and to attach the true gains). ``P`` is a power matrix or a
    strategy name. ``prior`` supplies E[g] for the A-terms (defaults to the
    current estimate). ``expected`` replaces measurements by the noiseless
    linear model.
    """
    nl = len(gains.links)
    if isinstance(P, str):
        P = build_power_matrix(None, frame.num_blocks, P, seed, num_links=nl)
    P = np.asarray(P, dtype=float)
    if P.shape != (frame.num_blocks, nl):
        raise DimensionMismatch(f"power matrix {P.shape} vs {frame.num_blocks} blocks x {nl} links")
    if expected:
        b = P @ gains.g + noise_mw
    else:
        b = measure_received_powers(P, gains, frame, qam_orders, noise_mw, seed, delays=delays, cfo=cfo)
    raw = estimate_gains(P, b, noise_mw, clip=False)
    g_hat = clip_estimates(raw)
    kappa = condition_number(P)
    bp = bound_params or ErrorBoundParams(m=(frame.block_samples - frame.to_guard,) * 3)
    Eg = g_hat if prior is None else np.asarray(prior)
    sigma2 = P.max(axis=0) / 2.0
    A = [compute_A_terms(Eg[:, i], Eg[:, i] ** 2, sigma2, noise_mw, bp.m, bp.betas, frame.subcarriers)
         for i in range(nl)]
    return GraphEstimate(
        links=tuple(gains.links),
        g_hat=g_hat,
        delta=per_pair_bounds(P, A),
        kappa=kappa,
        guarantee=bp.guarantee,
        P=P,
        b_bar=b,
        residual=b - noise_mw - P @ raw,
        g_true=np.asarray(gains.g),
    )


def bound_curve_rows(orders=(4, 16, 64, 256), deltas=(0.01, 0.02), n_ks=range(1, 101), n_c=1024, n_g=72,
                     trials=2000, seed=0):
    """(modulation, delta, N_k, upper bound, empirical P[E]) rows for bound-vs-symbols curves."""
    for q in orders:
        c = qam(q)
        for d in deltas:
            for n in n_ks:
                ub = tx_power_deviation_bound(DeviationBoundInputs.from_constellation(c, n_c=n_c, n_g=n_g, n_k=n, delta=d))
                emp = empirical_deviation_probability(c, n, d, n_c, n_g, trials, seed=[seed, q, n]) if trials else float("nan")
                yield (f"{q}-QAM", d, n, ub, emp)
