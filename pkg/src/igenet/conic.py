"""Small conic-program layer: affine expressions over one variable vector,
linear objective, zero / nonnegative / second-order / PSD cones.

The default backend is Clarabel (interior point); SCS is the first-order
fallback. Symmetric matrix variables keep one entry per lower-triangular
position; PSD rows are emitted in the backend's scaled-triangle layout.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
UNBOUNDED = "Unbounded"
NUMERICAL_FAILURE = "NumericalFailure"

SQRT2 = np.sqrt(2.0)


class NumericalFailure(RuntimeError):
    def __init__(self, msg, diagnostics=None):
        super().__init__(msg)
        self.diagnostics = diagnostics or {}


def _pad(A, n):
    if A.shape[1] == n:
        return A
    if A.shape[1] > n:
        raise ValueError("expression refers to undeclared variables")
    A = A.tocsr()
    return sp.csr_matrix((A.data, A.indices, A.indptr), shape=(A.shape[0], n))


class AffExpr:
    """Vector-valued affine map x -> A x + b."""

    __array_priority__ = 100

    def __init__(self, A, b):
        self.A = sp.csr_matrix(A)
        self.b = np.asarray(b, dtype=float).reshape(-1)
        if self.A.shape[0] != self.b.size:
            raise ValueError("coefficient rows and constant length differ")

    @property
    def size(self) -> int:
        return self.b.size

    def __len__(self):
        return self.size

    @staticmethod
    def const(v, n=0):
        v = np.atleast_1d(np.asarray(v, dtype=float)).reshape(-1)
        return AffExpr(sp.csr_matrix((v.size, n)), v)

    @staticmethod
    def lift(x, n=0):
        return x if isinstance(x, AffExpr) else AffExpr.const(x, n)

    @staticmethod
    def vstack(items):
        items = [AffExpr.lift(i) for i in items]
        n = max(i.A.shape[1] for i in items)
        return AffExpr(sp.vstack([_pad(i.A, n) for i in items], format="csr"), np.concatenate([i.b for i in items]))

    def _binary(self, other, sign):
        other = AffExpr.lift(other)
        if other.size == 1 and self.size > 1:
            other = other.repeat(self.size)
        elif self.size == 1 and other.size > 1:
            return self.repeat(other.size)._binary(other, sign)
        if other.size != self.size:
            raise ValueError(f"size mismatch {self.size} vs {other.size}")
        n = max(self.A.shape[1], other.A.shape[1])
        return AffExpr(_pad(self.A, n) + sign * _pad(other.A, n), self.b + sign * other.b)

    def repeat(self, k):
        idx = np.zeros(k, dtype=int)
        return self[idx]

    def __add__(self, other):
        return self._binary(other, 1.0)

    __radd__ = __add__

    def __sub__(self, other):
        return self._binary(other, -1.0)

    def __rsub__(self, other):
        return (-self)._binary(other, 1.0)

    def __neg__(self):
        return AffExpr(-self.A, -self.b)

    def __mul__(self, c):
        c = np.asarray(c, dtype=float)
        if c.ndim == 0:
            return AffExpr(self.A * float(c), self.b * float(c))
        c = c.reshape(-1)
        if c.size != self.size:
            raise ValueError("elementwise scale has the wrong length")
        return AffExpr(sp.diags(c) @ self.A, c * self.b)

    __rmul__ = __mul__

    def __truediv__(self, c):
        return self * (1.0 / float(c))

    def lmap(self, M):
        """Constant linear map applied on the left: M (A x + b)."""
        M = sp.csr_matrix(M) if not sp.issparse(M) else M.tocsr()
        return AffExpr(M @ self.A, M @ self.b)

    def __rmatmul__(self, M):
        return self.lmap(M)

    def __getitem__(self, idx):
        rows = np.arange(self.size)[idx]
        rows = np.atleast_1d(rows)
        return AffExpr(self.A[rows], self.b[rows])

    def sum(self):
        return self.lmap(np.ones((1, self.size)))

    def dot(self, c):
        return self.lmap(np.asarray(c, dtype=float).reshape(1, -1))

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return _pad(self.A, x.size) @ x + self.b


class MatExpr:
    """Matrix-valued affine expression stored row-major as an AffExpr."""

    def __init__(self, expr: AffExpr, shape):
        if expr.size != shape[0] * shape[1]:
            raise ValueError("shape does not match expression length")
        self.expr = expr
        self.shape = tuple(shape)

    @staticmethod
    def const(M):
        M = np.atleast_2d(np.asarray(M, dtype=float))
        return MatExpr(AffExpr.const(M.ravel()), M.shape)

    @staticmethod
    def lift(M):
        return M if isinstance(M, MatExpr) else MatExpr.const(M)

    @staticmethod
    def from_entries(entries, shape):
        """Matrix whose (i, j) entry is a scalar AffExpr (or number, 0 if absent)."""
        r, c = shape
        rows = []
        for i in range(r):
            for j in range(c):
                rows.append(AffExpr.lift(entries.get((i, j), 0.0)))
        return MatExpr(AffExpr.vstack(rows), shape)

    @staticmethod
    def eye_times(scalar, k):
        """scalar * I_k for a scalar AffExpr."""
        s = AffExpr.lift(scalar)
        sel = sp.csr_matrix((np.ones(k), (np.arange(k) * (k + 1), np.zeros(k, dtype=int))), shape=(k * k, 1))
        return MatExpr(s.lmap(sel), (k, k))

    @staticmethod
    def bmat(blocks):
        """Block matrix from a nested list of MatExpr / arrays / None (zero)."""
        heights = [next(MatExpr.lift(b).shape[0] for b in row if b is not None) for row in blocks]
        widths = [next(MatExpr.lift(row[j]).shape[1] for row in blocks if row[j] is not None)
                  for j in range(len(blocks[0]))]
        R, C = sum(heights), sum(widths)
        parts, rows_idx = [], []
        r0 = 0
        for bi, row in enumerate(blocks):
            c0 = 0
            for bj, blk in enumerate(row):
                h, w = heights[bi], widths[bj]
                if blk is not None:
                    blk = MatExpr.lift(blk)
                    if blk.shape != (h, w):
                        raise ValueError("inconsistent block sizes")
                    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
                    rows_idx.append(((r0 + ii) * C + (c0 + jj)).ravel())
                    parts.append(blk.expr)
                c0 += w
            r0 += h
        stacked = AffExpr.vstack(parts)
        dest = np.concatenate(rows_idx)
        S = sp.csr_matrix((np.ones(dest.size), (dest, np.arange(dest.size))), shape=(R * C, dest.size))
        return MatExpr(stacked.lmap(S), (R, C))

    @property
    def T(self):
        r, c = self.shape
        perm = np.arange(r * c).reshape(r, c).T.ravel()
        return MatExpr(self.expr[perm], (c, r))

    def __add__(self, other):
        other = MatExpr.lift(other)
        if other.shape != self.shape:
            raise ValueError("shape mismatch")
        return MatExpr(self.expr + other.expr, self.shape)

    __radd__ = __add__

    def __sub__(self, other):
        return self + (-1.0) * MatExpr.lift(other)

    def __rsub__(self, other):
        return MatExpr.lift(other) - self

    def __mul__(self, c):
        return MatExpr(self.expr * float(c), self.shape)

    __rmul__ = __mul__

    def lmul(self, L):
        """L @ X for a constant matrix L."""
        L = np.atleast_2d(np.asarray(L, dtype=float))
        K = sp.kron(sp.csr_matrix(L), sp.identity(self.shape[1]), format="csr")
        return MatExpr(self.expr.lmap(K), (L.shape[0], self.shape[1]))

    def rmul(self, R):
        """X @ R for a constant matrix R."""
        R = np.atleast_2d(np.asarray(R, dtype=float))
        K = sp.kron(sp.identity(self.shape[0]), sp.csr_matrix(R.T), format="csr")
        return MatExpr(self.expr.lmap(K), (self.shape[0], R.shape[1]))

    def congruence(self, W):
        """W^T X W."""
        W = np.atleast_2d(np.asarray(W, dtype=float))
        return self.lmul(W.T).rmul(W)

    def trace(self):
        r, c = self.shape
        k = min(r, c)
        return self.expr[np.arange(k) * (c + 1)].sum()

    def value(self, x):
        return self.expr.value(x).reshape(self.shape)


def tri_rows(n):
    """Row-major flat indices of the lower triangle in (row, col<=row) order.

    This equals the column-major upper triangle Clarabel's PSD cone reads.
    """
    out = []
    for i in range(n):
        for j in range(i + 1):
            out.append((i, j))
    return out


@dataclass
class _Cone:
    kind: str  # "zero" | "nonneg" | "soc" | "psd"
    expr: AffExpr
    dim: int
    name: str = ""
    count: int = 1  # consecutive second-order cones of equal dim sharing one expression


@dataclass
class Solution:
    status: str
    x: np.ndarray | None
    objective: float | None
    info: dict = field(default_factory=dict)


class ConicProgram:
    """min c^T x subject to affine expressions lying in cones."""

    def __init__(self):
        self.n = 0
        self._vars = {}
        self._obj = AffExpr.const(0.0)
        self.cones: list[_Cone] = []
        self.solution: Solution | None = None

    # ---- declarations
    def variable(self, name, size=1) -> AffExpr:
        if name in self._vars:
            raise ValueError(f"variable {name!r} already declared")
        start = self.n
        self.n += int(size)
        self._vars[name] = ("vec", start, int(size))
        A = sp.csr_matrix((np.ones(size), (np.arange(size), start + np.arange(size))), shape=(size, self.n))
        return AffExpr(A, np.zeros(size))

    def symmetric(self, name, k) -> MatExpr:
        """k x k symmetric matrix variable (one scalar per lower-triangular entry)."""
        m = k * (k + 1) // 2
        if name in self._vars:
            raise ValueError(f"variable {name!r} already declared")
        start = self.n
        self.n += m
        self._vars[name] = ("sym", start, k)
        pos = {}
        for t, (i, j) in enumerate(tri_rows(k)):
            pos[(i, j)] = pos[(j, i)] = start + t
        cols = np.array([pos[(i, j)] for i in range(k) for j in range(k)])
        A = sp.csr_matrix((np.ones(k * k), (np.arange(k * k), cols)), shape=(k * k, self.n))
        return MatExpr(AffExpr(A, np.zeros(k * k)), (k, k))

    def value(self, name, x=None):
        x = self.solution.x if x is None else x
        kind, start, size = self._vars[name]
        if kind == "vec":
            return x[start:start + size].copy()
        k = size
        M = np.zeros((k, k))
        for t, (i, j) in enumerate(tri_rows(k)):
            M[i, j] = M[j, i] = x[start + t]
        return M

    # ---- objective and constraints
    def minimize(self, expr):
        expr = AffExpr.lift(expr)
        if expr.size != 1:
            raise ValueError("objective must be scalar")
        self._obj = expr

    def add_eq(self, expr, name=""):
        expr = AffExpr.lift(expr)
        self.cones.append(_Cone("zero", expr, expr.size, name))

    def add_nonneg(self, expr, name=""):
        """expr >= 0 elementwise."""
        expr = AffExpr.lift(expr)
        self.cones.append(_Cone("nonneg", expr, expr.size, name))

    def add_le(self, lhs, rhs, name=""):
        self.add_nonneg(AffExpr.lift(rhs) - lhs, name)

    def add_soc(self, t, x, name=""):
        """||x|| <= t."""
        e = AffExpr.vstack([AffExpr.lift(t), AffExpr.lift(x)])
        self.cones.append(_Cone("soc", e, e.size, name))

    def add_soc_many(self, expr, dim, name=""):
        """Consecutive groups of ``dim`` rows, each [t, x...] with ||x|| <= t."""
        expr = AffExpr.lift(expr)
        if expr.size % dim:
            raise ValueError("expression length is not a multiple of the cone size")
        self.cones.append(_Cone("soc", expr, dim, name, expr.size // dim))

    def add_psd(self, M: MatExpr, name=""):
        """Symmetric part of M is positive semidefinite."""
        k = M.shape[0]
        if M.shape != (k, k):
            raise ValueError("PSD constraint needs a square matrix")
        rows_a, rows_b, w = [], [], []
        for i, j in tri_rows(k):
            rows_a.append(i * k + j)
            rows_b.append(j * k + i)
            w.append(1.0 if i == j else SQRT2)
        w = np.array(w)
        e = (M.expr[np.array(rows_a)] + M.expr[np.array(rows_b)]) * (0.5 * w)
        self.cones.append(_Cone("psd", e, k, name))

    # ---- assembly and solve
    def _stack(self):
        A = sp.vstack([_pad(c.expr.A, self.n) for c in self.cones], format="csc") if self.cones else sp.csc_matrix((0, self.n))
        h = np.concatenate([c.expr.b for c in self.cones]) if self.cones else np.zeros(0)
        return A, h

    def solve(self, backend="clarabel", tol=1e-8, max_iter=200, verbose=False, options=None) -> Solution:
        """``options`` are extra backend settings (clarabel attribute names), e.g. to switch off chordal decomposition."""
        if not self.cones:
            c = _pad(self._obj.A, self.n)
            if c.nnz and np.any(c.data):
                sol = Solution(UNBOUNDED, None, None, {"raw_status": "no constraints"})
            else:
                x = np.zeros(self.n)
                sol = Solution(OPTIMAL, x, float(self._obj.value(x)[0]), {"raw_status": "no constraints"})
            self.solution = sol
            return sol
        if backend == "clarabel":
            sol = self._solve_clarabel(tol, max_iter, verbose, options)
        elif backend == "scs":
            sol = self._solve_scs(tol, max_iter, verbose)
        else:
            raise ValueError(f"unknown backend {backend!r}")
        self.solution = sol
        return sol

    def _solve_clarabel(self, tol, max_iter, verbose, options=None):
        import clarabel

        G, h = self._stack()
        # cone membership G x + h in K  <=>  A x + s = b with A = -G, b = h
        cones = []
        for c in self.cones:
            if c.kind == "zero":
                cones.append(clarabel.ZeroConeT(c.dim))
            elif c.kind == "nonneg":
                cones.append(clarabel.NonnegativeConeT(c.dim))
            elif c.kind == "soc":
                cones.extend(clarabel.SecondOrderConeT(c.dim) for _ in range(c.count))
            else:
                cones.append(clarabel.PSDTriangleConeT(c.dim))
        q = np.asarray(_pad(self._obj.A, self.n).todense()).ravel()
        settings = clarabel.DefaultSettings()
        settings.verbose = verbose
        settings.max_iter = max_iter
        settings.tol_feas = tol
        settings.tol_gap_abs = tol
        settings.tol_gap_rel = tol
        settings.presolve_enable = True
        for k, v in (options or {}).items():
            setattr(settings, k, v)
        solver = clarabel.DefaultSolver(sp.csc_matrix((self.n, self.n)), q, (-G).tocsc(), h, cones, settings)
        res = solver.solve()
        status = str(res.status).split(".")[-1]
        info = {"raw_status": status, "iterations": res.iterations, "solve_time": res.solve_time}
        if status in ("Solved", "AlmostSolved"):
            x = np.asarray(res.x)
            return Solution(OPTIMAL, x, float(self._obj.value(x)[0]), info)
        if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            return Solution(INFEASIBLE, None, None, info)
        if status in ("DualInfeasible", "AlmostDualInfeasible"):
            return Solution(UNBOUNDED, None, None, info)
        return Solution(NUMERICAL_FAILURE, np.asarray(res.x), None, info)

    def _solve_scs(self, tol, max_iter, verbose):
        import scs

        order = {"zero": 0, "nonneg": 1, "soc": 2, "psd": 3}
        cones = sorted(self.cones, key=lambda c: order[c.kind])
        blocks, h = [], []
        for c in cones:
            e = c.expr
            if c.kind == "psd":
                # SCS reads the lower triangle column by column
                k = c.dim
                ours = {ij: t for t, ij in enumerate(tri_rows(k))}
                perm = [ours[(i, j)] for j in range(k) for i in range(j, k)]
                e = e[np.array(perm)]
            blocks.append(_pad(e.A, self.n))
            h.append(e.b)
        G = sp.vstack(blocks, format="csc")
        data = {"A": (-G).tocsc(), "b": np.concatenate(h),
                "c": np.asarray(_pad(self._obj.A, self.n).todense()).ravel()}
        cone = {
            "z": sum(c.dim for c in cones if c.kind == "zero"),
            "l": sum(c.dim for c in cones if c.kind == "nonneg"),
            "q": [c.dim for c in cones if c.kind == "soc" for _ in range(c.count)],
            "s": [c.dim for c in cones if c.kind == "psd"],
        }
        solver = scs.SCS(data, cone, verbose=verbose, eps_abs=tol, eps_rel=tol, max_iters=max(max_iter, 100_000))
        res = solver.solve()
        status = res["info"]["status"]
        info = {"raw_status": status, "iterations": res["info"]["iter"]}
        # SCS reports e.g. "solved (inaccurate - reached max_iters)"; only a clean verdict counts
        if status == "solved":
            x = res["x"]
            return Solution(OPTIMAL, x, float(self._obj.value(x)[0]), info)
        if status == "infeasible":
            return Solution(INFEASIBLE, None, None, info)
        if status == "unbounded":
            return Solution(UNBOUNDED, None, None, info)
        return Solution(NUMERICAL_FAILURE, res.get("x"), None, info)

    # ---- diagnostics
    def residuals(self, x=None):
        """Worst violation per cone, computed directly from the expressions."""
        x = self.solution.x if x is None else x
        out = []
        for c in self.cones:
            v = c.expr.value(x)
            if c.kind == "zero":
                r = float(np.max(np.abs(v), initial=0.0))
            elif c.kind == "nonneg":
                r = float(max(0.0, -v.min(initial=0.0)))
            elif c.kind == "soc":
                v = v.reshape(c.count, c.dim)
                r = float(max(0.0, np.max(np.linalg.norm(v[:, 1:], axis=1) - v[:, 0])))
            else:
                r = float(max(0.0, -np.linalg.eigvalsh(unpack_tri(v, c.dim)).min()))
            out.append((c.kind, c.name, r))
        return out

    def max_residual(self, x=None, scaled=True):
        x = self.solution.x if x is None else x
        worst = 0.0
        for (kind, _, r), c in zip(self.residuals(x), self.cones):
            scale = 1.0 + (np.max(np.abs(c.expr.b), initial=0.0) if scaled else 0.0)
            worst = max(worst, r / scale)
        return worst

    def dump(self, path):
        """Sparse text format:

        ``n <vars>`` / ``c <j> <v>`` objective / ``K <kind> <dim> <name>`` cone
        header followed by ``a <row> <j> <v>`` and ``h <row> <v>`` lines, rows
        local to the cone (membership: a x + h in K).
        """
        with open(path, "w") as fh:
            fh.write(f"n {self.n}\n")
            A = _pad(self._obj.A, self.n).tocoo()
            for j, v in zip(A.col, A.data):
                fh.write(f"c {j} {v:.17g}\n")
            fh.write(f"c0 {self._obj.b[0]:.17g}\n")
            for c in self.cones:
                fh.write(f"K {c.kind} {c.dim}x{c.count} {c.name or '-'}\n")
                M = _pad(c.expr.A, self.n).tocoo()
                for i, j, v in zip(M.row, M.col, M.data):
                    fh.write(f"a {i} {j} {v:.17g}\n")
                for i, v in enumerate(c.expr.b):
                    if v != 0:
                        fh.write(f"h {i} {v:.17g}\n")


def unpack_tri(v, k):
    """Inverse of the scaled triangle packing used for PSD rows."""
    M = np.zeros((k, k))
    for t, (i, j) in enumerate(tri_rows(k)):
        if i == j:
            M[i, i] = v[t]
        else:
            M[i, j] = M[j, i] = v[t] / SQRT2
    return M
