"""Continuous SOCP solving and a branch-and-bound layer for binary MISOCPs.

This is the only module that knows how conic programs are solved.  The
continuous backend is Clarabel (an interior-point conic solver); it sits
behind `solve_socp`, so swapping backends means reimplementing that one
function.  `solve_misocp` adds best-bound branch-and-bound over binary
variables, with optional "support partition" branching for groups of
continuous weights that must concentrate on a single group (the
tap-selection structure of voltage regulators).

Conventions (minimization):

    minimize    c'x
    subject to  A_eq x  = b_eq          (duals tau, free)
                A_in x >= b_in          (duals xi >= 0)
                ||G_l x|| <= g_l' x     (duals (sigma_l, mu_l), ||sigma||<=mu)
                lb <= x <= ub           (duals lam_lo, lam_hi >= 0)

    stationarity:  A_eq' tau + A_in' xi + sum_l (G_l' sigma_l + mu_l g_l)
                   + lam_lo - lam_hi = c
"""

from __future__ import annotations

import heapq
import logging
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

import clarabel

log = logging.getLogger("voltvar.conic")

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
ITERATION_LIMIT = "iteration-limit"

# residual / duality-gap level a solve must certify to be called optimal
SOLVE_TOL = 1e-8
# coefficient magnitude that triggers row equilibration before solving
SCALE_TRIGGER = 1e5
INT_TOL = 1e-6


class SolverError(RuntimeError):
    """Internal assembly error (dimension mismatch, bad cone reference)."""


@dataclass
class SocCone:
    """Membership ||G x||_2 <= g' x; G has one row per norm component."""

    G: sp.csr_matrix
    g: np.ndarray


@dataclass
class ConicProgram:
    """Sparse conic program with optional binary mask and support partitions.

    `partitions` lists SOS-like structures: each partition is an ordered
    list of index groups; a solution is integral only when at most one
    group per partition has nonzero support.  Branch-and-bound branches on
    prefix/suffix splits of the group order.
    """

    c: np.ndarray
    A_eq: sp.csr_matrix
    b_eq: np.ndarray
    A_in: sp.csr_matrix
    b_in: np.ndarray
    cones: list[SocCone]
    lb: np.ndarray
    ub: np.ndarray
    binary: np.ndarray  # bool mask
    partitions: list[list[list[int]]] = field(default_factory=list)
    eq_tags: list[str] | None = None
    in_tags: list[str] | None = None

    @property
    def n(self) -> int:
        return self.c.shape[0]

    def validate(self) -> None:
        n = self.n
        if self.A_eq.shape != (self.b_eq.shape[0], n):
            raise SolverError("equality block dimensions inconsistent")
        if self.A_in.shape != (self.b_in.shape[0], n):
            raise SolverError("inequality block dimensions inconsistent")
        if self.lb.shape != (n,) or self.ub.shape != (n,) or self.binary.shape != (n,):
            raise SolverError("bound/mask dimensions inconsistent")
        for k, cone in enumerate(self.cones):
            if cone.G.shape[1] != n or cone.g.shape != (n,):
                raise SolverError(f"cone {k} references dead variables")
        if np.any(self.lb > self.ub + 1e-15):
            # empty box is a legitimate (infeasible) program, not an error
            pass
        bin_idx = np.flatnonzero(self.binary)
        if bin_idx.size and (
            np.any(self.lb[bin_idx] < -1e-12) or np.any(self.ub[bin_idx] > 1 + 1e-12)
        ):
            raise SolverError("binary variables must carry [0, 1] bounds")

    def with_bounds(self, lb: np.ndarray, ub: np.ndarray) -> "ConicProgram":
        out = ConicProgram(
            c=self.c, A_eq=self.A_eq, b_eq=self.b_eq, A_in=self.A_in, b_in=self.b_in,
            cones=self.cones, lb=lb, ub=ub, binary=self.binary,
            partitions=self.partitions, eq_tags=self.eq_tags, in_tags=self.in_tags,
        )
        return out

    def to_sparse_json(self) -> dict:
        """Row/col/val triplet dump for external cross-checking."""
        def triplets(m: sp.spmatrix) -> dict:
            coo = m.tocoo()
            return {
                "shape": list(coo.shape),
                "rows": coo.row.tolist(),
                "cols": coo.col.tolist(),
                "vals": coo.data.tolist(),
            }

        return {
            "c": self.c.tolist(),
            "A_eq": triplets(self.A_eq),
            "b_eq": self.b_eq.tolist(),
            "A_in": triplets(self.A_in),
            "b_in": self.b_in.tolist(),
            "cones": [
                {"G": triplets(cn.G), "g": cn.g.tolist()} for cn in self.cones
            ],
            "lb": [None if not np.isfinite(v) else v for v in self.lb],
            "ub": [None if not np.isfinite(v) else v for v in self.ub],
            "binary": np.flatnonzero(self.binary).tolist(),
        }


@dataclass
class PrimalDualSolution:
    status: str
    x: np.ndarray | None = None
    objective: float | None = None
    eq_dual: np.ndarray | None = None
    in_dual: np.ndarray | None = None
    cone_duals: list[tuple[np.ndarray, float]] | None = None
    lb_dual: np.ndarray | None = None
    ub_dual: np.ndarray | None = None
    certificate: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    @property
    def is_optimal(self) -> bool:
        return self.status == OPTIMAL


# ---------------------------------------------------------------------------
# continuous solves
# ---------------------------------------------------------------------------


def _row_scales(A_eq: sp.csr_matrix, A_in: sp.csr_matrix) -> tuple[np.ndarray, np.ndarray] | None:
    """Equilibration factors when any coefficient exceeds the trigger."""
    mx = 0.0
    for A in (A_eq, A_in):
        if A.nnz:
            mx = max(mx, float(np.abs(A.data).max()))
    if mx < SCALE_TRIGGER:
        return None

    def scales(A: sp.csr_matrix) -> np.ndarray:
        s = np.ones(A.shape[0])
        if A.nnz == 0:
            return s
        absA = sp.csr_matrix((np.abs(A.data), A.indices, A.indptr), shape=A.shape)
        norms = absA.max(axis=1).toarray().ravel()
        big = norms > 1.0
        s[big] = 1.0 / norms[big]
        return s

    return scales(A_eq), scales(A_in)


class _Template:
    """Clarabel matrices for a ConicProgram; bounds live in dedicated rows
    so branch-and-bound nodes only patch the right-hand side."""

    def __init__(self, p: ConicProgram):
        p.validate()
        n = p.n
        self.program = p
        self.scale = _row_scales(p.A_eq, p.A_in)

        A_eq, b_eq = p.A_eq, p.b_eq
        A_in, b_in = p.A_in, p.b_in
        if self.scale is not None:
            s_eq, s_in = self.scale
            A_eq = sp.diags(s_eq) @ A_eq
            b_eq = s_eq * b_eq
            A_in = sp.diags(s_in) @ A_in
            b_in = s_in * b_in

        blocks = [A_eq.tocsr()]
        rhs = [b_eq]
        cones = [clarabel.ZeroConeT(A_eq.shape[0])] if A_eq.shape[0] else []

        # inequalities: -A_in x + s = -b_in, s >= 0
        nn_rows = []
        nn_rhs = []
        if A_in.shape[0]:
            nn_rows.append(-A_in.tocsr())
            nn_rhs.append(-b_in)

        # bound rows (finite only); remember positions for patching
        self.lb_row: dict[int, int] = {}
        self.ub_row: dict[int, int] = {}
        lb_idx = np.flatnonzero(np.isfinite(p.lb))
        ub_idx = np.flatnonzero(np.isfinite(p.ub))
        m_in = A_in.shape[0]
        if lb_idx.size:
            rows = sp.csr_matrix(
                (-np.ones(lb_idx.size), (np.arange(lb_idx.size), lb_idx)),
                shape=(lb_idx.size, n),
            )
            nn_rows.append(rows)
            nn_rhs.append(-p.lb[lb_idx])
            for j, var in enumerate(lb_idx):
                self.lb_row[int(var)] = m_in + j
        if ub_idx.size:
            rows = sp.csr_matrix(
                (np.ones(ub_idx.size), (np.arange(ub_idx.size), ub_idx)),
                shape=(ub_idx.size, n),
            )
            nn_rows.append(rows)
            nn_rhs.append(p.ub[ub_idx])
            for j, var in enumerate(ub_idx):
                self.ub_row[int(var)] = m_in + lb_idx.size + j

        self.m_eq = A_eq.shape[0]
        self.m_in = m_in
        self.n_lb = lb_idx.size
        self.n_ub = ub_idx.size
        m_nn = m_in + lb_idx.size + ub_idx.size
        if m_nn:
            blocks.append(sp.vstack(nn_rows, format="csr"))
            rhs.append(np.concatenate(nn_rhs))
            cones.append(clarabel.NonnegativeConeT(m_nn))

        # cones: s = (g'x, Gx) in SOC  =>  rows -[g'; G] x + s = 0
        self.cone_starts = []
        row_at = self.m_eq + m_nn
        for cone in p.cones:
            k = cone.G.shape[0]
            block = sp.vstack(
                [sp.csr_matrix(-cone.g.reshape(1, n)), -cone.G.tocsr()], format="csr"
            )
            blocks.append(block)
            rhs.append(np.zeros(k + 1))
            cones.append(clarabel.SecondOrderConeT(k + 1))
            self.cone_starts.append(row_at)
            row_at += k + 1

        self.A = sp.vstack(blocks, format="csc") if blocks else sp.csc_matrix((0, n))
        self.b = np.concatenate(rhs) if rhs else np.zeros(0)
        self.cone_spec = cones
        self.P = sp.csc_matrix((n, n))
        self.q = np.asarray(p.c, dtype=float)

    def solve(self, lb: np.ndarray | None = None, ub: np.ndarray | None = None,
              max_iter: int = 200) -> PrimalDualSolution:
        p = self.program
        b = self.b.copy()
        use_lb = p.lb if lb is None else lb
        use_ub = p.ub if ub is None else ub
        if lb is not None:
            for var, row in self.lb_row.items():
                b[self.m_eq + row] = -use_lb[var]
        if ub is not None:
            for var, row in self.ub_row.items():
                b[self.m_eq + row] = use_ub[var]
        # quick reject: crossed bounds make the program trivially infeasible
        if np.any(use_lb > use_ub + 1e-12):
            return PrimalDualSolution(status=INFEASIBLE, info={"reason": "empty box"})

        settings = clarabel.DefaultSettings()
        settings.verbose = False
        settings.max_iter = max_iter
        settings.tol_gap_abs = 1e-10
        settings.tol_gap_rel = 1e-10
        settings.tol_feas = 1e-10
        solver = clarabel.DefaultSolver(self.P, self.q, self.A, b, self.cone_spec, settings)
        raw = solver.solve()
        return self._extract(raw, b, use_lb, use_ub)

    def _extract(self, raw, b, lb, ub) -> PrimalDualSolution:
        p = self.program
        status = str(raw.status)
        x = np.asarray(raw.x, dtype=float) if raw.x is not None else None
        z = np.asarray(raw.z, dtype=float) if raw.z is not None else None

        if status in ("Solved", "AlmostSolved"):
            sol = self._full_solution(x, z, lb, ub)
            ok, resid = _verify(p, sol, lb, ub)
            sol.info["residual"] = resid
            if not ok:
                sol.status = ITERATION_LIMIT
                sol.info["reason"] = f"residual {resid:.2e} above {SOLVE_TOL:.0e}"
            return sol
        if status in ("PrimalInfeasible", "AlmostPrimalInfeasible"):
            return PrimalDualSolution(status=INFEASIBLE, certificate=z,
                                      info={"backend_status": status})
        if status in ("DualInfeasible", "AlmostDualInfeasible"):
            return PrimalDualSolution(status=UNBOUNDED, certificate=x,
                                      info={"backend_status": status})
        return PrimalDualSolution(status=ITERATION_LIMIT, x=x,
                                  objective=float(raw.obj_val) if x is not None else None,
                                  info={"backend_status": status})

    def _full_solution(self, x, z, lb, ub) -> PrimalDualSolution:
        p = self.program
        eq_dual = -z[: self.m_eq]
        if self.scale is not None:
            eq_dual = eq_dual * self.scale[0]
        pos = self.m_eq
        in_dual = z[pos: pos + self.m_in]
        if self.scale is not None:
            in_dual = in_dual * self.scale[1]
        lb_dual = np.zeros(p.n)
        ub_dual = np.zeros(p.n)
        for var, row in self.lb_row.items():
            lb_dual[var] = z[self.m_eq + row]
        for var, row in self.ub_row.items():
            ub_dual[var] = z[self.m_eq + row]
        cone_duals = []
        for start, cone in zip(self.cone_starts, p.cones):
            k = cone.G.shape[0]
            mu = float(z[start])
            sigma = z[start + 1: start + 1 + k].copy()
            cone_duals.append((sigma, mu))
        return PrimalDualSolution(
            status=OPTIMAL,
            x=x,
            objective=float(p.c @ x),
            eq_dual=eq_dual,
            in_dual=in_dual,
            cone_duals=cone_duals,
            lb_dual=lb_dual,
            ub_dual=ub_dual,
        )


def _verify(p: ConicProgram, sol: PrimalDualSolution, lb, ub) -> tuple[bool, float]:
    """Primal residuals and duality gap, normalized; never trust the backend."""
    x = sol.x
    resid = 0.0
    if p.b_eq.size:
        r = p.A_eq @ x - p.b_eq
        resid = max(resid, float(np.abs(r).max()) / (1.0 + float(np.abs(p.b_eq).max())))
    if p.b_in.size:
        r = p.b_in - p.A_in @ x
        resid = max(resid, float(r.max(initial=0.0)) / (1.0 + float(np.abs(p.b_in).max())))
    for cone in p.cones:
        viol = float(np.linalg.norm(cone.G @ x) - cone.g @ x)
        resid = max(resid, viol / (1.0 + abs(float(cone.g @ x))))
    fin = np.isfinite(lb)
    if fin.any():
        resid = max(resid, float((lb[fin] - x[fin]).max(initial=0.0)))
    fin = np.isfinite(ub)
    if fin.any():
        resid = max(resid, float((x[fin] - ub[fin]).max(initial=0.0)))

    dual_obj = 0.0
    if sol.eq_dual is not None and p.b_eq.size:
        dual_obj += float(p.b_eq @ sol.eq_dual)
    if sol.in_dual is not None and p.b_in.size:
        dual_obj += float(p.b_in @ sol.in_dual)
    if sol.lb_dual is not None:
        finl = np.isfinite(lb)
        dual_obj += float(lb[finl] @ sol.lb_dual[finl])
    if sol.ub_dual is not None:
        finu = np.isfinite(ub)
        dual_obj -= float(ub[finu] @ sol.ub_dual[finu])
    gap = abs(sol.objective - dual_obj) / (1.0 + abs(sol.objective))
    return (resid <= SOLVE_TOL and gap <= SOLVE_TOL), max(resid, gap)


def solve_socp(p: ConicProgram, max_iter: int = 200) -> PrimalDualSolution:
    """Solve a continuous SOCP to high accuracy with verified residuals."""
    if p.binary.any():
        raise SolverError("solve_socp requires an empty integrality mask")
    return _Template(p).solve(max_iter=max_iter)


# ---------------------------------------------------------------------------
# branch and bound
# ---------------------------------------------------------------------------


@dataclass(order=True)
class _Node:
    bound: float
    seq: int
    lb: np.ndarray = field(compare=False)
    ub: np.ndarray = field(compare=False)
    depth: int = field(compare=False, default=0)


def _fractional_binary(p: ConicProgram, x: np.ndarray, lb, ub) -> int | None:
    """Most fractional unfixed binary; ties broken by lowest index."""
    best, best_score = None, INT_TOL
    for i in np.flatnonzero(p.binary):
        if ub[i] - lb[i] < 1e-12:
            continue
        score = min(x[i], 1.0 - x[i])
        if score > best_score + 1e-12:
            best, best_score = int(i), score
    return best


def _partition_support(x: np.ndarray, groups: list[list[int]], lb, ub) -> list[float]:
    out = []
    for g in groups:
        live = [i for i in g if ub[i] > 1e-12]
        out.append(sum(abs(x[i]) for i in live))
    return out


def _fractional_partition(p: ConicProgram, x, lb, ub) -> tuple[int, list[float]] | None:
    for k, groups in enumerate(p.partitions):
        supp = _partition_support(x, groups, lb, ub)
        if sum(s > INT_TOL for s in supp) > 1:
            return k, supp
    return None


def _is_integral(p: ConicProgram, x, lb, ub) -> bool:
    for i in np.flatnonzero(p.binary):
        if min(x[i], 1.0 - x[i]) > INT_TOL:
            return False
    return _fractional_partition(p, x, lb, ub) is None


def solve_misocp(
    p: ConicProgram,
    node_limit: int = 2000,
    abs_gap: float | None = None,
    time_limit: float | None = None,
    suggest: Callable[[PrimalDualSolution], list[dict[int, float]]] | None = None,
    dive: bool = True,
) -> PrimalDualSolution:
    """Best-bound branch-and-bound over `solve_socp` relaxations.

    Branching: support-partition splits when a declared partition is
    unresolved, otherwise the most fractional binary (ties by lowest
    index).  `suggest` may propose full binary fixings from a relaxation
    solution; each is probed with one continuous solve and kept when it
    beats the incumbent.  Deterministic under fixed inputs.

    Returns the incumbent solution; `info` carries `nodes`, `best_bound`
    and `gap`.  Status is `iteration-limit` when the node or time budget
    expires before the gap is proven.
    """
    p.validate()
    if not p.binary.any() and not p.partitions:
        return solve_socp(p)

    tmpl = _Template(p)
    t0 = time.monotonic()

    def out_of_budget(nodes_used: int) -> bool:
        if nodes_used >= node_limit:
            return True
        return time_limit is not None and (time.monotonic() - t0) > time_limit

    def gap_target(incumbent_val: float) -> float:
        if abs_gap is not None:
            return abs_gap
        return 1e-6 * abs(incumbent_val) + 1e-9

    incumbent: PrimalDualSolution | None = None
    incumbent_val = np.inf
    nodes_used = 0

    def try_fixing(fix: dict[int, float]) -> None:
        """Probe a full fixing of all binaries/partitions: one SOCP."""
        nonlocal incumbent, incumbent_val, nodes_used
        lb2, ub2 = p.lb.copy(), p.ub.copy()
        for i, val in fix.items():
            lb2[i] = max(lb2[i], val)
            ub2[i] = min(ub2[i], val)
        sol = tmpl.solve(lb2, ub2)
        nodes_used += 1
        if sol.is_optimal and sol.objective < incumbent_val - 1e-12:
            if _is_integral(p, sol.x, lb2, ub2):
                incumbent, incumbent_val = sol, sol.objective

    root = tmpl.solve(p.lb, p.ub)
    if root.status == INFEASIBLE:
        return root
    if root.status == UNBOUNDED:
        return root
    root_bound = root.objective if root.is_optimal else -np.inf

    if root.is_optimal and _is_integral(p, root.x, p.lb, p.ub):
        root.info.update(nodes=1, best_bound=root.objective, gap=0.0)
        return root

    if suggest is not None and root.is_optimal:
        for fix in suggest(root):
            try_fixing(fix)

    # dive heuristic: greedily round the most fractional choice to get an
    # early incumbent for pruning
    if dive and root.is_optimal:
        lb2, ub2 = p.lb.copy(), p.ub.copy()
        cur = root
        for _ in range(min(64, 4 + 2 * int(p.binary.sum()) + 8 * len(p.partitions))):
            if not cur.is_optimal:
                break
            frac_part = _fractional_partition(p, cur.x, lb2, ub2)
            if frac_part is not None:
                k, supp = frac_part
                keep = int(np.argmax(supp))
                for gi, group in enumerate(p.partitions[k]):
                    if gi != keep:
                        for i in group:
                            ub2[i] = 0.0
                            lb2[i] = min(lb2[i], 0.0)
            else:
                i = _fractional_binary(p, cur.x, lb2, ub2)
                if i is None:
                    if _is_integral(p, cur.x, lb2, ub2) and cur.objective < incumbent_val - 1e-12:
                        incumbent, incumbent_val = cur, cur.objective
                    break
                val = 1.0 if cur.x[i] >= 0.5 else 0.0
                lb2[i] = ub2[i] = val
            cur = tmpl.solve(lb2, ub2)
            nodes_used += 1
            if cur.is_optimal and _is_integral(p, cur.x, lb2, ub2):
                if cur.objective < incumbent_val - 1e-12:
                    incumbent, incumbent_val = cur, cur.objective
                break

    seq = 0
    heap: list[_Node] = []
    heapq.heappush(heap, _Node(root_bound, seq, p.lb.copy(), p.ub.copy(), 0))
    best_bound = root_bound
    status = OPTIMAL

    while heap:
        best_bound = heap[0].bound
        if incumbent is not None and incumbent_val - best_bound <= gap_target(incumbent_val):
            break
        if out_of_budget(nodes_used):
            status = ITERATION_LIMIT
            break
        node = heapq.heappop(heap)
        if incumbent is not None and node.bound >= incumbent_val - gap_target(incumbent_val):
            continue

        sol = tmpl.solve(node.lb, node.ub)
        nodes_used += 1
        if sol.status == INFEASIBLE:
            continue
        if sol.status == UNBOUNDED:
            # relaxation unbounded below a bounded root cannot happen for
            # our programs; treat as a hard error rather than guessing
            raise SolverError("relaxation unbounded below the root")
        if not sol.is_optimal:
            # numerical trouble: cannot prune, branch on parent info
            x_guess = sol.x if sol.x is not None else (node.lb + node.ub) / 2.0
            node_val = node.bound
        else:
            node_val = sol.objective
            x_guess = sol.x
            if incumbent is not None and node_val >= incumbent_val - gap_target(incumbent_val):
                continue
            if _is_integral(p, sol.x, node.lb, node.ub):
                if node_val < incumbent_val - 1e-12:
                    incumbent, incumbent_val = sol, node_val
                continue
            if suggest is not None and nodes_used % 8 == 1:
                for fix in suggest(sol):
                    try_fixing(fix)

        frac_part = _fractional_partition(p, x_guess, node.lb, node.ub)
        if frac_part is not None:
            k, supp = frac_part
            groups = p.partitions[k]
            live = [gi for gi in range(len(groups)) if supp[gi] > 0 or
                    any(node.ub[i] > 1e-12 for i in groups[gi])]
            total = sum(supp)
            acc, split = 0.0, live[0]
            for gi in live[:-1]:
                acc += supp[gi]
                split = gi
                if acc >= total / 2.0:
                    break
            for zero_right in (True, False):
                lb2, ub2 = node.lb.copy(), node.ub.copy()
                for gi, group in enumerate(groups):
                    kill = gi > split if zero_right else gi <= split
                    if kill:
                        for i in group:
                            ub2[i] = 0.0
                            lb2[i] = min(lb2[i], 0.0)
                seq += 1
                heapq.heappush(heap, _Node(node_val, seq, lb2, ub2, node.depth + 1))
            continue

        i = _fractional_binary(p, x_guess, node.lb, node.ub)
        if i is None:
            # numerically integral but not caught above; accept as incumbent
            if sol.is_optimal and node_val < incumbent_val - 1e-12:
                incumbent, incumbent_val = sol, node_val
            continue
        for val in (0.0, 1.0):
            lb2, ub2 = node.lb.copy(), node.ub.copy()
            lb2[i] = ub2[i] = val
            seq += 1
            heapq.heappush(heap, _Node(node_val, seq, lb2, ub2, node.depth + 1))

    if not heap:
        best_bound = incumbent_val if incumbent is not None else np.inf

    if incumbent is None:
        if status == ITERATION_LIMIT:
            return PrimalDualSolution(status=ITERATION_LIMIT,
                                      info={"nodes": nodes_used, "best_bound": best_bound,
                                            "gap": np.inf})
        return PrimalDualSolution(status=INFEASIBLE, info={"nodes": nodes_used})

    gap = incumbent_val - best_bound
    # monotonicity guard: the root relaxation can never beat the incumbent
    if root.is_optimal and incumbent_val < root_bound - 1e-6 * (1 + abs(root_bound)):
        raise SolverError(
            f"incumbent {incumbent_val:.9g} below root relaxation {root_bound:.9g}"
        )
    incumbent.info.update(nodes=nodes_used, best_bound=best_bound, gap=float(max(gap, 0.0)))
    incumbent.status = OPTIMAL if status == OPTIMAL else ITERATION_LIMIT
    return incumbent
