"""Crossbar resistive-network solver.

Topology: each row i is a chain of top nodes T(i,0)..T(i,n-1) joined by
r_wire segments; the source v_in[i] drives T(i,0) through r_in plus one edge
wire segment. Each column j is a chain of bottom nodes B(0,j)..B(m-1,j);
B(m-1,j) sinks to ground through one edge wire segment plus r_out. The device
at (i,j) joins T(i,j) and B(i,j) with resistance 1/g[i,j] + r_transistor_on.

The solver assembles the Kirchhoff-current-law system over the 2*m*n grid
nodes (zero-resistance edges collapse nodes), factorizes it once per
conductance matrix, and reuses the factorization for any number of input
vectors. A dense reference solve (`oracle_solve`) with independently derived
assembly is provided for small arrays.
"""

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import CrossbarConfig
from .errors import SolverError, ValidationError

RESIDUAL_TOL = 1e-10
ORACLE_MAX_CELLS = 64

_FREE, _SRC, _GND = 0, 1, 2


def check_conductances(config, g, tol=1e-9):
    """Validate a conductance matrix against config dimensions and bounds."""
    g = np.asarray(g, dtype=float)
    if g.shape != (config.rows, config.cols):
        raise ValidationError(
            f"conductance matrix shape {g.shape} does not match "
            f"{config.rows}x{config.cols} crossbar")
    if not np.all(np.isfinite(g)):
        raise ValidationError("conductance matrix contains non-finite entries")
    lo = config.g_min * (1.0 - tol)
    hi = config.g_max * (1.0 + tol)
    if g.min() < lo or g.max() > hi:
        raise ValidationError(
            f"conductances [{g.min():.4g}, {g.max():.4g}] outside device range "
            f"[{config.g_min:.4g}, {config.g_max:.4g}]")
    return g


def _check_inputs(config, v_in, slack=1e-9):
    v_in = np.asarray(v_in, dtype=float)
    if v_in.shape != (config.rows,):
        raise ValidationError(
            f"input vector length {v_in.shape} does not match {config.rows} rows")
    if v_in.min() < -slack or v_in.max() > config.v_sense_max * (1.0 + slack):
        raise ValidationError(
            f"inputs [{v_in.min():.4g}, {v_in.max():.4g}] outside "
            f"[0, {config.v_sense_max}] V")
    return v_in


@dataclass
class NodeSolution:
    """Solved node voltages and column output currents of one crossbar solve."""

    v_top: np.ndarray    # (rows, cols) top-wire node voltages, V
    v_bot: np.ndarray    # (rows, cols) bottom-wire node voltages, V
    i_out: np.ndarray    # (cols,) column output currents, A
    residual: float      # relative residual of the linear solve


class _UnionFind:
    def __init__(self, n):
        self.parent = list(range(n))

    def find(self, a):
        p = self.parent
        root = a
        while p[root] != root:
            root = p[root]
        while p[a] != root:
            p[a], a = root, p[a]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            # deterministic: smaller id wins
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


class CrossbarSolver:
    """Factorized nodal solver for one (config, conductance matrix) pair.

    Building the solver validates inputs, assembles and LU-factorizes the
    sparse KCL system once; `solve`/`currents` then only back-substitute, so
    many input vectors against the same conductances are cheap.
    """

    def __init__(self, config: CrossbarConfig, g):
        self.config = config
        self.g = check_conductances(config, g)
        m, n = config.rows, config.cols
        if config.r_transistor_on > 0.0:
            self.g_dev = 1.0 / (1.0 / self.g + config.r_transistor_on)
        else:
            self.g_dev = self.g
        # terminal paths include the edge wire segment
        self.r_src = config.r_in + config.r_wire
        self.r_term = config.r_out + config.r_wire
        self._ideal_path = (config.r_wire == 0.0 and config.r_in == 0.0
                            and config.r_out == 0.0)
        if not self._ideal_path:
            self._build(m, n)

    # node ids: top (i,j) -> i*n + j; bottom (i,j) -> m*n + i*n + j;
    # source of row i -> 2*m*n + i; ground -> 2*m*n + m
    def _build(self, m, n):
        cfg = self.config
        top = lambda i, j: i * n + j
        bot = lambda i, j: m * n + i * n + j
        src = lambda i: 2 * m * n + i
        gnd = 2 * m * n + m
        total = gnd + 1

        edges = []   # (u, v, conductance) with positive resistance
        merges = []  # zero-resistance pairs
        def add(u, v, r):
            if r == 0.0:
                merges.append((u, v))
            else:
                edges.append((u, v, 1.0 / r))

        for i in range(m):
            add(src(i), top(i, 0), self.r_src)
            for j in range(n - 1):
                add(top(i, j), top(i, j + 1), cfg.r_wire)
        for j in range(n):
            for i in range(m - 1):
                add(bot(i, j), bot(i + 1, j), cfg.r_wire)
            add(bot(m - 1, j), gnd, self.r_term)
        for i in range(m):
            for j in range(n):
                edges.append((top(i, j), bot(i, j), self.g_dev[i, j]))

        uf = _UnionFind(total)
        for u, v in merges:
            uf.union(u, v)

        kind = np.full(total, _FREE, dtype=np.int8)
        ref = np.full(total, -1, dtype=np.int64)
        gnd_rep = uf.find(gnd)
        kind_rep = {gnd_rep: (_GND, 0)}
        for i in range(m):
            r = uf.find(src(i))
            if r == gnd_rep:
                raise SolverError("source node shorted to ground")
            if r in kind_rep:
                raise SolverError("two sources shorted together")
            kind_rep[r] = (_SRC, i)

        free_index = {}
        for node in range(total):
            r = uf.find(node)
            if r in kind_rep:
                k, idx = kind_rep[r]
            else:
                if r not in free_index:
                    free_index[r] = len(free_index)
                k, idx = _FREE, free_index[r]
            kind[node] = k
            ref[node] = idx
        nfree = len(free_index)
        self._nfree = nfree

        rows_a, cols_a, vals_a = [], [], []
        rows_s, cols_s, vals_s = [], [], []
        for u, v, gc in edges:
            ku, iu = kind[u], ref[u]
            kv, iv = kind[v], ref[v]
            if ku == _FREE and kv == _FREE and iu == iv:
                continue  # edge inside a collapsed node group
            for (ka, ia), (kb, ib) in (((ku, iu), (kv, iv)), ((kv, iv), (ku, iu))):
                if ka != _FREE:
                    continue
                rows_a.append(ia); cols_a.append(ia); vals_a.append(gc)
                if kb == _FREE:
                    rows_a.append(ia); cols_a.append(ib); vals_a.append(-gc)
                elif kb == _SRC:
                    rows_s.append(ia); cols_s.append(ib); vals_s.append(gc)
                # ground: only the diagonal term

        self._kind_top = kind[:m * n].reshape(m, n)
        self._ref_top = ref[:m * n].reshape(m, n)
        self._kind_bot = kind[m * n:2 * m * n].reshape(m, n)
        self._ref_bot = ref[m * n:2 * m * n].reshape(m, n)

        if nfree == 0:
            self._lu = None
            return
        A = sp.coo_matrix((vals_a, (rows_a, cols_a)), shape=(nfree, nfree)).tocsc()
        self._S = sp.coo_matrix((vals_s, (rows_s, cols_s)), shape=(nfree, m)).tocsc()
        self._A = A
        try:
            self._lu = spla.splu(A)
        except RuntimeError as exc:
            raise SolverError(f"singular crossbar system: {exc}") from exc

    def _gather(self, kind, ref, x, V):
        """Node voltages (k, m, n) from free solution x (nfree, k) and inputs V (k, m)."""
        k = V.shape[0]
        out = np.zeros((k, kind.shape[0], kind.shape[1]))
        free = kind == _FREE
        if x is not None and free.any():
            out[:, free] = x[ref[free], :].T
        srcm = kind == _SRC
        if srcm.any():
            out[:, srcm] = V[:, ref[srcm]]
        return out

    def _solve_nodes(self, V):
        """V (k, rows) -> (v_top, v_bot) each (k, rows, cols), residuals (k,)."""
        m, n = self.config.rows, self.config.cols
        k = V.shape[0]
        if self._ideal_path:
            v_top = np.repeat(V[:, :, None], n, axis=2)
            return v_top, np.zeros((k, m, n)), np.zeros(k)
        if self._nfree == 0:
            x = None
            residuals = np.zeros(k)
        else:
            rhs = self._S @ V.T  # (nfree, k)
            rhs = np.asarray(rhs)
            x = self._lu.solve(rhs)
            res = self._A @ x - rhs
            num = np.linalg.norm(res, axis=0)
            den = np.linalg.norm(rhs, axis=0)
            residuals = np.where(den > 0, num / np.maximum(den, 1e-300), 0.0)
        v_top = self._gather(self._kind_top, self._ref_top, x, V)
        v_bot = self._gather(self._kind_bot, self._ref_bot, x, V)
        return v_top, v_bot, residuals

    def _output_currents(self, v_top, v_bot):
        m = self.config.rows
        if self.r_term > 0.0:
            return v_bot[:, m - 1, :] / self.r_term
        # direct branch currents, fixed ascending-row accumulation
        k, _, n = v_top.shape
        acc = np.zeros((k, n))
        for i in range(m):
            acc += self.g_dev[i, :] * (v_top[:, i, :] - v_bot[:, i, :])
        return acc

    def transfer_matrix(self):
        """Exact input-to-output linear map T, (rows, cols): i_out = T' v_in.

        Computed by adjoint back-substitutions on the existing factorization
        (the nodal matrix is symmetric), one per column; falls back to basis
        inputs for terminal-shorted configurations.
        """
        m, n = self.config.rows, self.config.cols
        if self._ideal_path:
            return self.g_dev.copy()
        if self.r_term > 0.0 and self._nfree > 0:
            E = np.zeros((self._nfree, n))
            ok = True
            for j in range(n):
                if self._kind_bot[m - 1, j] != _FREE:
                    ok = False
                    break
                E[self._ref_bot[m - 1, j], j] += 1.0 / self.r_term
            if ok:
                Z = self._lu.solve(E)
                return np.asarray(self._S.T @ Z)
        return self.currents(np.eye(m) * self.config.v_sense_max,
                             check_range=False) / self.config.v_sense_max

    def currents(self, V, check_range=True):
        """Batch solve: V (k, rows) -> output currents (k, cols)."""
        V = np.atleast_2d(np.asarray(V, dtype=float))
        if check_range:
            for v in V:
                _check_inputs(self.config, v)
        v_top, v_bot, residuals = self._solve_nodes(V)
        worst = float(residuals.max()) if len(residuals) else 0.0
        if worst > RESIDUAL_TOL:
            raise SolverError(f"solver residual {worst:.3g} above {RESIDUAL_TOL:.3g}",
                              residual=worst)
        return self._output_currents(v_top, v_bot)

    def solve(self, v_in, check_range=True) -> NodeSolution:
        v_in = np.asarray(v_in, dtype=float)
        if check_range:
            _check_inputs(self.config, v_in)
        V = v_in[None, :]
        v_top, v_bot, residuals = self._solve_nodes(V)
        residual = float(residuals[0])
        if residual > RESIDUAL_TOL:
            raise SolverError(f"solver residual {residual:.3g} above {RESIDUAL_TOL:.3g}",
                              residual=residual)
        i_out = self._output_currents(v_top, v_bot)[0]
        return NodeSolution(v_top=v_top[0], v_bot=v_bot[0], i_out=i_out,
                            residual=residual)


def simulate(config: CrossbarConfig, g, v_in) -> NodeSolution:
    """Solve the crossbar network for one input vector. Deterministic."""
    return CrossbarSolver(config, g).solve(v_in)


def ideal_vmm(v_in, g):
    """Exact v_in' * g with fixed ascending-row summation order."""
    v_in = np.asarray(v_in, dtype=float)
    g = np.asarray(g, dtype=float)
    if v_in.ndim != 1 or g.ndim != 2 or v_in.shape[0] != g.shape[0]:
        raise ValidationError(
            f"dimension mismatch: v_in {v_in.shape} vs g {g.shape}")
    acc = np.zeros(g.shape[1])
    for i in range(g.shape[0]):
        acc += v_in[i] * g[i, :]
    return acc


def oracle_solve(config: CrossbarConfig, g, v_in) -> NodeSolution:
    """Dense reference solve for small crossbars (rows*cols <= 64).

    Independently assembled: full 2*m*n nodal matrix solved by LAPACK
    partial-pivoting elimination when r_wire > 0; when r_wire == 0 each row
    and column collapses to a single node and the reduced (m+n) system is
    solved instead.
    """
    m, n = config.rows, config.cols
    if m * n > ORACLE_MAX_CELLS:
        raise ValidationError(f"oracle limited to {ORACLE_MAX_CELLS} cells, got {m * n}")
    g = check_conductances(config, g)
    v_in = _check_inputs(config, v_in)
    if config.r_transistor_on > 0.0:
        gd = 1.0 / (1.0 / g + config.r_transistor_on)
    else:
        gd = g

    if config.r_wire > 0.0:
        g_src = 1.0 / (config.r_in + config.r_wire)
        g_term = 1.0 / (config.r_out + config.r_wire)
        g_w = 1.0 / config.r_wire
        N = 2 * m * n
        top = lambda i, j: i * n + j
        bot = lambda i, j: m * n + i * n + j
        A = np.zeros((N, N))
        b = np.zeros(N)

        def stamp(u, v, gc):
            A[u, u] += gc
            A[v, v] += gc
            A[u, v] -= gc
            A[v, u] -= gc

        for i in range(m):
            A[top(i, 0), top(i, 0)] += g_src
            b[top(i, 0)] += g_src * v_in[i]
            for j in range(n - 1):
                stamp(top(i, j), top(i, j + 1), g_w)
        for j in range(n):
            for i in range(m - 1):
                stamp(bot(i, j), bot(i + 1, j), g_w)
            A[bot(m - 1, j), bot(m - 1, j)] += g_term
        for i in range(m):
            for j in range(n):
                stamp(top(i, j), bot(i, j), gd[i, j])

        try:
            x = np.linalg.solve(A, b)
        except np.linalg.LinAlgError as exc:
            raise SolverError(f"singular dense system: {exc}") from exc
        v_top = x[:m * n].reshape(m, n)
        v_bot = x[m * n:].reshape(m, n)
        i_out = v_bot[m - 1, :] * g_term
        residual = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
        return NodeSolution(v_top=v_top, v_bot=v_bot, i_out=i_out, residual=residual)

    # r_wire == 0: one top node per row, one bottom node per column
    row_fixed = config.r_in == 0.0
    col_gnd = config.r_out == 0.0
    if row_fixed and col_gnd:
        i_out = np.array([float(np.dot(v_in, gd[:, j])) for j in range(n)])
        v_top = np.repeat(v_in[:, None], n, axis=1)
        return NodeSolution(v_top=v_top, v_bot=np.zeros((m, n)), i_out=i_out,
                            residual=0.0)

    # unknowns: v_t (m, unless fixed) then v_b (n, unless grounded)
    nt = 0 if row_fixed else m
    nb = 0 if col_gnd else n
    A = np.zeros((nt + nb, nt + nb))
    b = np.zeros(nt + nb)
    g_in = 0.0 if row_fixed else 1.0 / config.r_in
    g_out = 0.0 if col_gnd else 1.0 / config.r_out
    if not row_fixed:
        for i in range(m):
            A[i, i] += g_in + gd[i, :].sum()
            b[i] += g_in * v_in[i]
            if not col_gnd:
                for j in range(n):
                    A[i, nt + j] -= gd[i, j]
    if not col_gnd:
        for j in range(n):
            A[nt + j, nt + j] += g_out + gd[:, j].sum()
            if row_fixed:
                b[nt + j] += float(np.dot(v_in, gd[:, j]))
            else:
                for i in range(m):
                    A[nt + j, i] -= gd[i, j]
    try:
        x = np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise SolverError(f"singular dense system: {exc}") from exc
    v_t = v_in if row_fixed else x[:nt]
    v_b = np.zeros(n) if col_gnd else x[nt:]
    v_top = np.repeat(np.asarray(v_t)[:, None], n, axis=1)
    v_bot = np.repeat(np.asarray(v_b)[None, :], m, axis=0)
    if col_gnd:
        i_out = np.array([float(np.dot(v_t, gd[:, j])) for j in range(n)])
    else:
        i_out = v_b * g_out
    residual = float(np.linalg.norm(A @ x - b) / max(np.linalg.norm(b), 1e-300))
    return NodeSolution(v_top=v_top, v_bot=v_bot, i_out=i_out, residual=residual)
