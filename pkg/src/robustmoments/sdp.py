"""Dense semidefinite programming backend.

Solves min <C,X> s.t. <A_i,X> = b_i, X PSD with block-diagonal X.  The
algorithm is a primal-dual interior-point method in the homogeneous self-dual
embedding, with HKM search directions, Mehrotra predictor-corrector steps,
and a dense Cholesky factorization of the Schur complement.  The embedding
lets the same iteration converge either to an optimal pair or to a Farkas
ray proving infeasibility, which downstream certificate searches rely on to
distinguish "no certificate exists" from "solver trouble".

Problems are small (blocks up to a few hundred rows, a few thousand
constraints), so everything is dense per block and deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

DEFAULT_CONSTRAINT_CAP = 20_000


@dataclass
class SdpConfig:
    max_iters: int = 200
    tol: float = 1e-7
    constraint_cap: int = DEFAULT_CONSTRAINT_CAP
    step_fraction: float = 0.98


class SdpSizeError(ValueError):
    """Problem exceeds the configured desk-scale caps."""


class SdpProblem:
    """Standard-form SDP data.

    constraints entries are (mats, rhs) where mats is a list with one
    symmetric matrix (or None) per block.  Matrices are checked for symmetry
    on construction.
    """

    def __init__(self, block_sizes, objective=None, constraints=None):
        self.block_sizes = [int(s) for s in block_sizes]
        if any(s < 1 for s in self.block_sizes):
            raise ValueError("block sizes must be positive")
        nb = len(self.block_sizes)
        self.objective = []
        objective = objective if objective is not None else [None] * nb
        for size, mat in zip(self.block_sizes, objective):
            self.objective.append(_as_symmetric(mat, size))
        self.constraints = []
        self.rhs = []
        for mats, b in constraints or []:
            self.add_constraint(mats, b)

    def add_constraint(self, mats, rhs):
        row = []
        for size, mat in zip(self.block_sizes, mats):
            row.append(None if mat is None else _as_symmetric(mat, size))
        if all(m is None for m in row):
            raise ValueError("constraint touches no block")
        self.constraints.append(row)
        self.rhs.append(float(rhs))

    def add_constraint_entries(self, entries, rhs):
        """Sparse constraint: entries are (block, i, j, value) with (i, j) unordered.

        The constraint functional is sum of value * X[block][i, j]; off-diagonal
        entries read the symmetric matrix entry once (not the (i,j)+(j,i) pair).
        Keeps large relaxations out of dense per-constraint storage.
        """
        acc = {}
        for bi, i, j, val in entries:
            bi, i, j = int(bi), int(i), int(j)
            if not 0 <= bi < len(self.block_sizes):
                raise ValueError(f"block index {bi} out of range")
            size = self.block_sizes[bi]
            if not (0 <= i < size and 0 <= j < size):
                raise ValueError(f"entry ({i},{j}) outside block of size {size}")
            if i > j:
                i, j = j, i
            key = (bi, i, j)
            acc[key] = acc.get(key, 0.0) + float(val)
        if not acc:
            raise ValueError("constraint touches no block")
        self.constraints.append(_EntryRow(acc))
        self.rhs.append(float(rhs))

    @property
    def num_constraints(self):
        return len(self.constraints)

    def dump(self):
        """Line-based sparse text dump for cross-checking with other solvers."""
        lines = [f"blocks {' '.join(str(s) for s in self.block_sizes)}"]
        for bi, mat in enumerate(self.objective):
            if mat is None:
                continue
            for i, j in zip(*np.nonzero(np.triu(mat))):
                lines.append(f"obj {bi} {i} {j} {mat[i, j]!r}")
        for ci, row in enumerate(self.constraints):
            lines.append(f"rhs {ci} {self.rhs[ci]!r}")
            if isinstance(row, _EntryRow):
                for (bi, i, j), val in sorted(row.entries.items()):
                    lines.append(f"con {ci} {bi} {i} {j} {val!r}")
                continue
            for bi, mat in enumerate(row):
                if mat is None:
                    continue
                for i, j in zip(*np.nonzero(np.triu(mat))):
                    lines.append(f"con {ci} {bi} {i} {j} {mat[i, j]!r}")
        return "\n".join(lines) + "\n"


class _EntryRow:
    """Compact constraint row: dict (block, i<=j) -> coefficient."""

    __slots__ = ("entries",)

    def __init__(self, entries):
        self.entries = entries


def _as_symmetric(mat, size):
    if mat is None:
        return None
    mat = np.asarray(mat, dtype=float)
    if mat.shape != (size, size):
        raise ValueError(f"matrix shape {mat.shape} does not match block size {size}")
    if np.max(np.abs(mat - mat.T), initial=0.0) > 1e-12:
        raise ValueError("constraint/objective matrices must be symmetric")
    return 0.5 * (mat + mat.T)


@dataclass
class SdpSolution:
    primal_blocks: list
    dual: np.ndarray
    status: str  # Optimal | Infeasible | MaxIterations
    primal_residual: float
    dual_residual: float
    duality_gap: float
    min_eigenvalue: float
    iterations: int
    primal_objective: float
    dual_objective: float
    infeasibility_ray: np.ndarray | None = None
    ray_residual: float | None = None
    detail: str = ""


def solve(problem, config=None):
    config = config or SdpConfig()
    if problem.num_constraints > config.constraint_cap:
        raise SdpSizeError(
            f"{problem.num_constraints} constraints exceed cap {config.constraint_cap}"
        )
    return _HsdSolver(problem, config).run()


class _HsdSolver:
    def __init__(self, problem, config):
        self.problem = problem
        self.config = config
        self.sizes = problem.block_sizes
        self.m = problem.num_constraints
        self.b = np.array(problem.rhs, dtype=float)
        self.C = [
            np.zeros((s, s)) if mat is None else mat
            for s, mat in zip(self.sizes, problem.objective)
        ]
        self.offsets = np.cumsum([0] + [s * s for s in self.sizes])
        self.vec_len = int(self.offsets[-1])
        self.A_sparse = self._build_sparse_rows()
        self.N = sum(self.sizes)
        # Dense per-block constraint stacks make the Schur assembly a single
        # batched matmul; only built while the memory footprint stays modest.
        # Larger problems fall back to a column-wise sparse assembly driven by
        # the per-row coordinate lists below.
        self.A_stacks = None
        self._row_coo = None
        if self.m * self.vec_len <= 12_000_000:
            self.A_stacks = []
            for bi, s in enumerate(self.sizes):
                cols = self.A_sparse[:, self.offsets[bi]: self.offsets[bi + 1]]
                self.A_stacks.append(np.asarray(cols.todense()).reshape(self.m, s, s))
        else:
            self._row_coo = self._build_row_coo()

    def _build_sparse_rows(self):
        """Rows of vec'd constraint matrices; tr(A_k M) = A_sparse[k] @ vec(M)."""
        data, rows, cols = [], [], []
        for k, row in enumerate(self.problem.constraints):
            if isinstance(row, _EntryRow):
                for (bi, i, j), val in row.entries.items():
                    base = self.offsets[bi]
                    size = self.sizes[bi]
                    if i == j:
                        rows.append(k)
                        cols.append(base + i * size + i)
                        data.append(val)
                    else:
                        # half on each orientation so the functional reads the
                        # symmetric entry once
                        rows.append(k)
                        cols.append(base + i * size + j)
                        data.append(0.5 * val)
                        rows.append(k)
                        cols.append(base + j * size + i)
                        data.append(0.5 * val)
                continue
            for bi, mat in enumerate(row):
                if mat is None:
                    continue
                nz_i, nz_j = np.nonzero(mat)
                base = self.offsets[bi]
                size = self.sizes[bi]
                for i, j in zip(nz_i, nz_j):
                    rows.append(k)
                    cols.append(base + i * size + j)
                    data.append(mat[i, j])
        return sparse.csr_matrix(
            (data, (rows, cols)), shape=(self.m, self.vec_len)
        )

    def _build_row_coo(self):
        """Per-constraint (block, row-idx, col-idx, values) arrays from A_sparse."""
        csr = self.A_sparse
        out = []
        for k in range(self.m):
            lo, hi = csr.indptr[k], csr.indptr[k + 1]
            idx = csr.indices[lo:hi]
            val = csr.data[lo:hi]
            per_block = []
            for bi, s in enumerate(self.sizes):
                mask = (idx >= self.offsets[bi]) & (idx < self.offsets[bi + 1])
                if not np.any(mask):
                    continue
                local = idx[mask] - self.offsets[bi]
                per_block.append((bi, local // s, local % s, val[mask]))
            out.append(per_block)
        return out

    # -- block helpers ------------------------------------------------------

    def _vec(self, blocks):
        return np.concatenate([blk.ravel() for blk in blocks])

    def _apply_A(self, blocks):
        return self.A_sparse @ self._vec(blocks)

    def _apply_At(self, y):
        """A^T(y) as a list of blocks."""
        if self.m == 0:
            return [np.zeros((s, s)) for s in self.sizes]
        flat = self.A_sparse.T @ y
        out = []
        for bi, s in enumerate(self.sizes):
            out.append(flat[self.offsets[bi]: self.offsets[bi + 1]].reshape(s, s))
        return out

    def _inner(self, blocks1, blocks2):
        return float(sum(np.sum(a * b) for a, b in zip(blocks1, blocks2)))

    # -- main loop ----------------------------------------------------------

    def run(self):
        cfg = self.config
        X = [np.eye(s) for s in self.sizes]
        S = [np.eye(s) for s in self.sizes]
        y = np.zeros(self.m)
        tau, kappa = 1.0, 1.0
        status, detail = "MaxIterations", ""
        it = 0

        for it in range(1, cfg.max_iters + 1):
            mu = (self._inner(X, S) + tau * kappa) / (self.N + 1)

            r_P = self._apply_A(X) - self.b * tau
            At_y = self._apply_At(y)
            R_D = [c * tau - a - s for c, a, s in zip(self.C, At_y, S)]
            cx = self._inner(self.C, X)
            by = float(self.b @ y)
            r_G = by - cx - kappa

            term = self._check_termination(X, S, y, tau, kappa, r_P, R_D, cx, by)
            if term is not None:
                status, detail, payload = term
                return self._finish(status, detail, payload, X, S, y, tau, it)

            try:
                Sinv = [_sym_inverse(s_blk) for s_blk in S]
                Xch = None
                factor = self._schur_factor(Sinv, X)
            except np.linalg.LinAlgError:
                detail = "iterate left the cone numerically"
                return self._finish("MaxIterations", detail, None, X, S, y, tau, it)

            # affine probe: aim straight at mu = 0 to gauge achievable progress,
            # then re-solve with the centering weight that probe suggests.  The
            # second-order Mehrotra term is deliberately omitted: at these
            # problem sizes the extra solve per iteration is cheap and the
            # plain direction is markedly more robust near the cone boundary.
            aff = self._direction(
                X, S, y, tau, kappa, Sinv, factor, r_P, R_D, r_G,
                sigma=0.0, eta=1.0,
            )
            if aff is None:
                detail = "singular Newton system"
                return self._finish("MaxIterations", detail, None, X, S, y, tau, it)
            alpha_aff = self._max_step(X, S, tau, kappa, aff)
            mu_aff = self._mu_after(X, S, tau, kappa, aff, alpha_aff)
            sigma = min(1.0, max((mu_aff / mu) ** 3 if mu > 0 else 0.0, 1e-8))

            corr = self._direction(
                X, S, y, tau, kappa, Sinv, factor, r_P, R_D, r_G,
                sigma=sigma, eta=1.0 - sigma,
            )
            if corr is None:
                detail = "singular Newton system"
                return self._finish("MaxIterations", detail, None, X, S, y, tau, it)
            alpha = cfg.step_fraction * self._max_step(X, S, tau, kappa, corr)
            alpha = min(alpha, 1.0)
            if alpha < 1e-10:
                detail = "step length collapsed"
                return self._finish("MaxIterations", detail, None, X, S, y, tau, it)

            dX, dy, dS, dtau, dkappa = corr
            X = [_symmetrize(x + alpha * dx) for x, dx in zip(X, dX)]
            S = [_symmetrize(s + alpha * ds) for s, ds in zip(S, dS)]
            y = y + alpha * dy
            tau += alpha * dtau
            kappa += alpha * dkappa

        return self._finish("MaxIterations", "iteration limit", None, X, S, y, tau, it)

    # -- termination --------------------------------------------------------

    def _check_termination(self, X, S, y, tau, kappa, r_P, R_D, cx, by):
        tol = self.config.tol
        bnorm = 1.0 + float(np.linalg.norm(self.b))
        cnorm = 1.0 + max(float(np.linalg.norm(c)) for c in self.C)

        if tau > 1e-10:
            pres_abs = float(np.linalg.norm(r_P)) / tau
            pres = pres_abs / bnorm
            dres = max(float(np.linalg.norm(r)) for r in R_D) / tau / cnorm
            pobj, dobj = cx / tau, by / tau
            gap = abs(pobj - dobj) / (1.0 + abs(pobj) + abs(dobj))
            if (
                pres <= tol
                and dres <= tol
                and gap <= max(tol, 1e-9)
                and pres_abs <= 10 * tol
            ):
                return ("Optimal", "", None)

        # Farkas tests for infeasibility: A^T(y) + S ~ 0 with <b,y> > 0
        if by > tol:
            At_y = self._apply_At(y)
            cert = max(
                float(np.linalg.norm(a + s)) for a, s in zip(At_y, S)
            ) / by
            if cert <= tol * cnorm * 10:
                return ("Infeasible", "primal infeasibility certificate", (y / by, cert))
        # unbounded primal (dual infeasible): A(X) ~ 0 with <C,X> < 0
        if cx < -tol:
            cert = float(np.linalg.norm(self._apply_A(X))) / (-cx)
            if cert <= tol * bnorm * 10:
                return (
                    "MaxIterations",
                    "primal appears unbounded (dual infeasible ray found)",
                    None,
                )
        return None

    def _finish(self, status, detail, payload, X, S, y, tau, iterations):
        scale = tau if (status == "Optimal" and tau > 1e-10) else max(tau, 1e-10)
        Xh = [x / scale for x in X]
        yh = y / scale
        Sh = [s / scale for s in S]
        r_P = self._apply_A(Xh) - self.b
        At_y = self._apply_At(yh)
        R_D = [c - a - s for c, a, s in zip(self.C, At_y, Sh)]
        pobj = self._inner(self.C, Xh)
        dobj = float(self.b @ yh)
        min_eig = min(
            float(np.linalg.eigvalsh(blk).min()) for blk in Xh
        )
        ray, ray_res = (payload if payload is not None else (None, None))
        return SdpSolution(
            primal_blocks=Xh,
            dual=yh,
            status=status,
            primal_residual=float(np.linalg.norm(r_P)),
            dual_residual=max(float(np.linalg.norm(r)) for r in R_D),
            duality_gap=abs(pobj - dobj),
            min_eigenvalue=min_eig,
            iterations=iterations,
            primal_objective=pobj,
            dual_objective=dobj,
            infeasibility_ray=ray,
            ray_residual=ray_res,
            detail=detail,
        )

    # -- Newton system ------------------------------------------------------

    def _schur_factor(self, Sinv, X):
        """Cholesky factor of M[i,j] = tr(A_i S^{-1} A_j X), plus cached pieces."""
        m = self.m
        if self.A_stacks is not None:
            tvecs = np.empty((m, self.vec_len))
            for bi, s in enumerate(self.sizes):
                lo, hi = self.offsets[bi], self.offsets[bi + 1]
                stack = self.A_stacks[bi]
                # S^{-1} A_k X for every k via two batched BLAS products
                right = (stack.reshape(m * s, s) @ X[bi]).reshape(m, s, s)
                left = Sinv[bi] @ right.transpose(1, 0, 2).reshape(s, m * s)
                tvecs[:, lo:hi] = (
                    left.reshape(s, m, s).transpose(1, 0, 2).reshape(m, s * s)
                )
            M = np.asarray(self.A_sparse @ tvecs.T)
        else:
            # column-at-a-time keeps memory at O(m^2) instead of m * vec_len
            M = np.empty((m, m))
            t = np.zeros(self.vec_len)
            for l in range(m):
                t[:] = 0.0
                for bi, rows_idx, cols_idx, vals in self._row_coo[l]:
                    s = self.sizes[bi]
                    lo = self.offsets[bi]
                    T_blk = (Sinv[bi][:, rows_idx] * vals) @ X[bi][cols_idx, :]
                    t[lo: lo + s * s] = T_blk.ravel()
                M[:, l] = self.A_sparse @ t
        M = 0.5 * (M + M.T)
        jitter = 0.0
        base = max(np.trace(M) / max(m, 1), 1.0) if m else 1.0
        for attempt in range(8):
            try:
                L = np.linalg.cholesky(M + jitter * np.eye(m)) if m else None
                return (L,)
            except np.linalg.LinAlgError:
                jitter = base * (1e-14 * 10 ** attempt)
        raise np.linalg.LinAlgError("Schur complement not PD")

    def _schur_solve(self, factor, rhs):
        (L,) = factor
        if L is None:
            return np.zeros(0)
        z = np.linalg.solve(L, rhs)
        return np.linalg.solve(L.T, z)

    def _direction(self, X, S, y, tau, kappa, Sinv, factor, r_P, R_D, r_G,
                   sigma, eta):
        mu = (self._inner(X, S) + tau * kappa) / (self.N + 1)

        Xi = [sigma * mu * si - x for si, x in zip(Sinv, X)]
        rc_t = sigma * mu - tau * kappa

        # with P = S^{-1} C X and Q = S^{-1} R_D X:
        P = [si @ c @ x for si, c, x in zip(Sinv, self.C, X)]
        Q = [si @ r @ x for si, r, x in zip(Sinv, R_D, X)]
        g = self._apply_A(P)
        h = self._apply_A(Q)
        A_Xi = self._apply_A(Xi)
        cbar = self._inner(self.C, P)
        e = self._inner(self.C, Q)
        c_Xi = self._inner(self.C, Xi)

        v = eta * (h - r_P) - A_Xi
        u = -eta * r_G + c_Xi - eta * e + rc_t / tau

        w1 = self._schur_solve(factor, self.b + g)
        w2 = self._schur_solve(factor, v)
        den = float((self.b - g) @ w1) + cbar + kappa / tau
        if abs(den) < 1e-300:
            return None
        dtau = (u - float((self.b - g) @ w2)) / den
        dy = w1 * dtau + w2
        At_dy = self._apply_At(dy)
        dS = [c * dtau - a + eta * r for c, a, r in zip(self.C, At_dy, R_D)]
        dX = [
            _symmetrize(xi - si @ ds @ x)
            for xi, si, ds, x in zip(Xi, Sinv, dS, X)
        ]
        dkappa = rc_t / tau - (kappa / tau) * dtau
        return (dX, dy, dS, dtau, dkappa)

    # -- step sizes ---------------------------------------------------------

    def _max_step(self, X, S, tau, kappa, direction):
        dX, _, dS, dtau, dkappa = direction
        alpha = 1e30
        for x, dx in zip(X, dX):
            alpha = min(alpha, _cone_step(x, dx))
        for s, ds in zip(S, dS):
            alpha = min(alpha, _cone_step(s, ds))
        if dtau < 0:
            alpha = min(alpha, -tau / dtau)
        if dkappa < 0:
            alpha = min(alpha, -kappa / dkappa)
        return alpha

    def _mu_after(self, X, S, tau, kappa, direction, alpha):
        dX, _, dS, dtau, dkappa = direction
        alpha = min(alpha * self.config.step_fraction, 1.0)
        tot = 0.0
        for x, dx, s, ds in zip(X, dX, S, dS):
            tot += float(np.sum((x + alpha * dx) * (s + alpha * ds)))
        tot += (tau + alpha * dtau) * (kappa + alpha * dkappa)
        return tot / (self.N + 1)


def _symmetrize(mat):
    return 0.5 * (mat + mat.T)


def _sym_inverse(mat):
    L = np.linalg.cholesky(mat)
    inv_L = np.linalg.inv(L)
    return inv_L.T @ inv_L


def _cone_step(blk, dblk):
    """Largest alpha with blk + alpha*dblk still PSD (up to the boundary)."""
    try:
        L = np.linalg.cholesky(blk)
    except np.linalg.LinAlgError:
        # fall back: perturb slightly toward PD
        w, V = np.linalg.eigh(blk)
        w = np.clip(w, 1e-14, None)
        L = np.linalg.cholesky(V @ np.diag(w) @ V.T)
    Linv = np.linalg.inv(L)
    G = _symmetrize(Linv @ dblk @ Linv.T)
    lam = float(np.linalg.eigvalsh(G).min())
    if lam >= 0:
        return 1e30
    return -1.0 / lam
