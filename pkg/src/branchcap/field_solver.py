"""Deterministic lattice solves for tree-indexed hitting probabilities.

Given a finite set K, a critical offspring law mu and a step law theta,
four probability fields are computed on a symmetry-reduced box:

    p_c     hit probability of the walk indexed by a critical tree,
            fixed point of 1 - p = f(theta * (1 - p)) off K, p = 1 on K;
    p_adj   same for the tree whose root draws from the tail-sum law,
            1 - p_adj = f~(theta * (1 - p_c)) off K;
    p_I     for the infinite spine-with-bushes tree,
            p_I = p_adj + (1 - p_adj) p_minus off K, 1 on K;
    p_minus = theta * p_I everywhere (spine started one step out), and
    e_K     = 1 - p_minus, the escape probability.

All maps are monotone from the from-below start 1_K, so every iterate
is a certified lower bound.  Out-of-box closure is either dirichlet
(zero; a certified global lower bound) or matched-asymptotic: c * g(x)
for the c-decaying fields and c * G(x) for p_I, with c refit from the
field's own far zone and then frozen before the final convergence push.

The killed walk S^kappa (killed at x with probability p_adj(x)) has
Green function G_K solving G = delta_y + (1 - p_adj) theta * G; its
columns, harmonic measures on small balls and the associated exact
identities are all evaluated here against the solved fields.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import ValidationError, NonConvergenceError
from .lattice import GreenFunction
from .offspring import adjoint
from .symgrid import OrbitBox


# ---------------------------------------------------------------------------
# lattice sets
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LatticeSet:
    """Finite set of lattice points with its enclosing radius."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.int64)
        if pts.ndim != 2 or len(pts) == 0:
            raise ValidationError("lattice set must be a nonempty (n, d) array")
        pts = np.unique(pts, axis=0)
        object.__setattr__(self, "points", pts)

    @property
    def d(self):
        return self.points.shape[1]

    @property
    def size(self):
        return len(self.points)

    @property
    def radius(self):
        return float(np.sqrt(np.einsum("ij,ij->i", self.points, self.points).max()))

    def translated(self, a):
        return LatticeSet(self.points + np.asarray(a, dtype=np.int64))


def lattice_ball(d, rho, center=None):
    """B(0, rho) intersected with Z^d (closed euclidean ball)."""
    n = int(math.floor(rho))
    axes = [np.arange(-n, n + 1)] * d
    grid = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([g.ravel() for g in grid], axis=-1)
    pts = pts[np.einsum("ij,ij->i", pts, pts) <= rho * rho + 1e-9]
    if center is not None:
        pts = pts + np.asarray(center, dtype=np.int64)
    return LatticeSet(pts)


# ---------------------------------------------------------------------------
# fields
# ---------------------------------------------------------------------------


@dataclass
class LatticeField:
    box: OrbitBox
    values: np.ndarray
    quantity: str
    policy: str
    closure_coeff: float = 0.0

    def at(self, pts):
        idx = self.box.index_of(pts)
        if np.any(idx < 0):
            raise ValidationError("point outside the solved box")
        out = self.values[idx]
        return out if out.size > 1 else float(out[0])


def _fit_coeff(box, values, profile, zone):
    num = float(np.sum(box.mult[zone] * values[zone] * profile[zone]))
    den = float(np.sum(box.mult[zone] * profile[zone] ** 2))
    return num / den if den > 0 else 0.0


def _extrapolated_push(apply_map, u, tol, max_sweeps, accel_every=250):
    """Iterate u <- F(u) to sup-update < tol with safeguarded geometric
    extrapolation of the dominant mode."""
    prev_delta = None
    for sweep in range(1, max_sweeps + 1):
        nu = apply_map(u)
        delta = nu - u
        err = float(np.max(np.abs(delta)))
        u = nu
        if err < tol:
            return u, sweep, err
        if sweep % accel_every == 0 and prev_delta is not None:
            num = float(delta @ prev_delta)
            den = float(prev_delta @ prev_delta)
            rho = num / den if den > 0 else 0.0
            if 0.2 < rho < 0.99999:
                cand = u + delta * (rho / (1.0 - rho))
                cu = apply_map(cand)
                if float(np.max(np.abs(cu - cand))) < err:
                    u = cu
        prev_delta = delta
    return u, max_sweeps, err


# ---------------------------------------------------------------------------
# the coupled hitting-field solve
# ---------------------------------------------------------------------------


@dataclass
class HittingFields:
    law: object
    step: object
    K: LatticeSet
    box: OrbitBox
    policy: str
    p_c: LatticeField
    p_adj: LatticeField
    p_I: LatticeField
    p_minus: LatticeField
    e_K: LatticeField
    g_box: np.ndarray
    G_box: np.ndarray
    bnd_g: np.ndarray
    bnd_G: np.ndarray
    k_mask: np.ndarray
    gf: GreenFunction
    info: dict = dc_field(default_factory=dict)

    def bcap_sum_escape(self):
        """Bcap(K) = sum over a in K of e_K(a) (on the solved fields)."""
        return float(np.sum(self.box.mult[self.k_mask] * self.e_K.values[self.k_mask]))


def solve_hitting_fields(K, law, step, R_box, policy="matched", tol=1e-12,
                         max_sweeps=200_000, fit_lo=0.8, fit_hi=1.0,
                         outer_rounds=30, inner_sweeps=400):
    """Solve p_c, p_adj, p_I, p_minus, e_K on a symmetry-reduced box.

    policy 'dirichlet': out-of-box values 0 (all fields are certified
    lower bounds).  policy 'matched': closure c*g for p_c and c*G for
    p_I, c refit every inner block until stable, then frozen for the
    final convergence push so paired identity fields see the identical
    discrete system.
    """
    if policy not in ("matched", "dirichlet"):
        raise ValidationError(f"unknown boundary policy {policy!r}")
    d = step.d
    K = K if isinstance(K, LatticeSet) else LatticeSet(K)
    if K.d != d:
        raise ValidationError("K dimension mismatch")
    margin = 2 * step.support_radius
    if np.max(np.abs(K.points)) + margin > R_box:
        raise ValidationError("K must sit at least 2 support radii inside the box")

    box = OrbitBox(step, R_box)
    box.build_neighbors()
    kidx = box.index_of(K.points)
    k_mask = np.zeros(box.n, dtype=bool)
    k_mask[kidx] = True
    if int(round(box.weighted_sum(k_mask.astype(float)))) != K.size:
        raise ValidationError("K is not invariant under the box symmetry group")

    gf = GreenFunction(step)
    g_box = gf.green(box.reps)
    bnd_g = box.boundary_profile(gf.green)
    if policy == "matched":
        G_box = gf.second_kernel(box.reps)
        bnd_G = box.boundary_profile(gf.second_kernel)
    else:
        G_box = np.zeros(box.n)
        bnd_G = np.zeros(box.n)

    rnorm = box.euclid_norm()
    zone = (rnorm >= fit_lo * R_box) & (rnorm <= fit_hi * R_box) & ~k_mask

    adj_law = adjoint(law)
    f = law.gen_func
    ftil = adj_law.gen_func
    offk = ~k_mask

    # ---- p_c ----
    def pc_map(coeff):
        def apply(p):
            conv_p = box.convolve(p, bnd_g, coeff)
            out = np.ones(box.n)
            out[offk] = 1.0 - f(1.0 - conv_p[offk])
            return out
        return apply

    p = k_mask.astype(np.float64)
    c_pc = 0.0
    sweeps_pc = 0
    if policy == "matched":
        for _ in range(outer_rounds):
            p, s, _ = _extrapolated_push(pc_map(c_pc), p, tol * 10, inner_sweeps)
            sweeps_pc += s
            c_new = _fit_coeff(box, p, g_box, zone)
            if abs(c_new - c_pc) <= 1e-10 * max(c_new, 1e-30):
                c_pc = c_new
                break
            c_pc = c_new
    p, s, err = _extrapolated_push(pc_map(c_pc), p, tol, max_sweeps)
    sweeps_pc += s
    if err >= tol:
        raise NonConvergenceError(f"p_c stalled at sup-update {err:.3e}")
    p_c_vals = p

    # ---- p_adj (single evaluation given p_c) ----
    conv_pc = box.convolve(p_c_vals, bnd_g, c_pc)
    p_adj_vals = np.ones(box.n)
    p_adj_vals[offk] = 1.0 - ftil(1.0 - conv_pc[offk])

    # ---- p_I / p_minus ----
    def pi_map(coeff):
        def apply(q):
            conv_q = box.convolve(q, bnd_G, coeff)
            out = np.ones(box.n)
            out[offk] = p_adj_vals[offk] + (1.0 - p_adj_vals[offk]) * conv_q[offk]
            return out
        return apply

    q = k_mask.astype(np.float64)
    c_I = 0.0
    sweeps_pi = 0
    if policy == "matched":
        for _ in range(outer_rounds):
            q, s, _ = _extrapolated_push(pi_map(c_I), q, tol * 10, inner_sweeps)
            sweeps_pi += s
            c_new = _fit_coeff(box, q, G_box, zone)
            if abs(c_new - c_I) <= 1e-10 * max(c_new, 1e-30):
                c_I = c_new
                break
            c_I = c_new
    q, s, err = _extrapolated_push(pi_map(c_I), q, tol, max_sweeps)
    sweeps_pi += s
    if err >= tol:
        raise NonConvergenceError(f"p_I stalled at sup-update {err:.3e}")
    p_I_vals = q
    p_minus_vals = box.convolve(p_I_vals, bnd_G, c_I)
    e_K_vals = 1.0 - p_minus_vals

    mk = lambda v, name, coeff=0.0: LatticeField(box, v, name, policy, coeff)
    return HittingFields(
        law=law,
        step=step,
        K=K,
        box=box,
        policy=policy,
        p_c=mk(p_c_vals, "p_c", c_pc),
        p_adj=mk(p_adj_vals, "p_adj"),
        p_I=mk(p_I_vals, "p_I", c_I),
        p_minus=mk(p_minus_vals, "p_minus", c_I),
        e_K=mk(e_K_vals, "e_K", c_I),
        g_box=g_box,
        G_box=G_box,
        bnd_g=bnd_g,
        bnd_G=bnd_G,
        k_mask=k_mask,
        gf=gf,
        info={
            "sweeps_pc": sweeps_pc,
            "sweeps_pi": sweeps_pi,
            "closure_pc": c_pc,
            "closure_pI": c_I,
            "R_box": R_box,
            "tol": tol,
        },
    )


# ---------------------------------------------------------------------------
# linear fields of the killed walk
# ---------------------------------------------------------------------------


def _solve_linear_prekill(box, padj_on_box, source, bnd=None, coeff=0.0,
                          tol=1e-12, max_sweeps=200_000):
    """Solve u = source + (1 - padj) * (theta * u + coeff * bnd).

    This is the generating recursion of the killed-walk Green function:
    columns, partial sums and harmonic decompositions are all of this
    form.  Jacobi iteration with safeguarded geometric extrapolation;
    monotone from u = source when everything is nonnegative.
    """
    surv = 1.0 - padj_on_box

    def apply(u):
        conv = box.convolve(u, bnd, coeff)
        return source + surv * conv

    u0 = source.astype(np.float64).copy()
    u, sweeps, err = _extrapolated_push(apply, u0, tol, max_sweeps)
    if err >= tol:
        raise NonConvergenceError(f"linear field stalled at {err:.3e}")
    return u, sweeps


def defpkx_field(fields, tol=1e-12):
    """F(x) = sum_{a in K} G_K(x, a), solved with p_c's frozen closure."""
    src = fields.k_mask.astype(np.float64)
    # on K the walk is killed on arrival, so F = 1 there; off K the
    # recursion carries the (1 - p_adj) survival weight
    box = fields.box
    padj = fields.p_adj.values
    coeff = fields.p_c.closure_coeff
    vals, sweeps = _solve_linear_prekill(
        box, padj, src, fields.bnd_g, coeff, tol=tol
    )
    return LatticeField(box, vals, "sum_GK_over_K", fields.policy, coeff), sweeps


def qgr1_field(fields, tol=1e-12):
    """W(x) = sum_y G_K(x, y) p_adj(y), solved with p_I's frozen closure."""
    box = fields.box
    padj = fields.p_adj.values
    coeff = fields.p_I.closure_coeff
    vals, sweeps = _solve_linear_prekill(
        box, padj, padj.copy(), fields.bnd_G, coeff, tol=tol
    )
    return LatticeField(box, vals, "sum_GK_padj", fields.policy, coeff), sweeps


def _marked_box_for(fields, y, R_col=None):
    y = np.asarray(y, dtype=np.int64)
    nz = np.nonzero(y)[0]
    if len(nz) > 1:
        raise ValidationError("column/row targets must lie on a coordinate axis")
    axis = int(nz[0]) if len(nz) else 0
    R = R_col or fields.box.R
    if R > fields.box.R:
        raise ValidationError("marked box cannot exceed the solved box")
    mbox = OrbitBox(fields.step, R, marked_axis=axis)
    mbox.build_neighbors()
    padj_m = fields.p_adj.values[fields.box.index_of(mbox.reps)]
    src = np.zeros(mbox.n)
    src[int(mbox.index_of(y[None, :])[0])] = 1.0
    return mbox, padj_m, src


def green_killed_column(fields, y, tol=1e-12, R_col=None):
    """Column G_K(., y) on a marked-axis box (dirichlet closure).

    y must lie on a coordinate axis so the stabilizer subgroup of the
    pair (K, y) still collapses the box.  The dirichlet closure keeps
    the column a certified lower bound, hence G_K <= g exactly.
    """
    y = np.asarray(y, dtype=np.int64)
    mbox, padj_m, src = _marked_box_for(fields, y, R_col)
    vals, sweeps = _solve_linear_prekill(mbox, padj_m, src, tol=tol)
    return LatticeField(mbox, vals, f"G_K(.,{y.tolist()})", "dirichlet", 0.0), sweeps


def green_killed_row(fields, y, tol=1e-12, R_col=None):
    """Row G_K(y, .) via the forward recursion
    R(x) = delta_{xy} + sum_z R(z) (1 - p_adj(z)) theta(x - z)."""
    y = np.asarray(y, dtype=np.int64)
    mbox, padj_m, src = _marked_box_for(fields, y, R_col)
    surv = 1.0 - padj_m

    def apply(u):
        return src + mbox.convolve(surv * u)

    vals, sweeps, err = _extrapolated_push(apply, src.copy(), tol, 200_000)
    if err >= tol:
        raise NonConvergenceError(f"row field stalled at {err:.3e}")
    return LatticeField(mbox, vals, f"G_K({y.tolist()},.)", "dirichlet", 0.0), sweeps


# ---------------------------------------------------------------------------
# ball-local solves and harmonic measure
# ---------------------------------------------------------------------------


class BallSolver:
    """Absorbing solves on a small ball B for killed-walk functionals.

    Computes E_x[prod (1 - p_adj(S_i)) * b(S_tau)] with tau the first
    exit of B, for either weighting convention: 'include_end' weights
    i = 1..tau (the harmonic-measure reversal H^B_K(b, a)), while
    'include_start' weights i = 0..tau-1 (the exit decomposition
    H^B_K(x, z) for x in B).
    """

    def __init__(self, fields, radius, center=None):
        self.fields = fields
        d = fields.step.d
        self.B = lattice_ball(d, radius, center)
        box = fields.box
        if np.max(np.abs(self.B.points)) + fields.step.support_radius > box.R:
            raise ValidationError("ball plus one step must stay inside the box")
        self.idx_in_box = box.index_of(self.B.points)
        self.padj = fields.p_adj.values[self.idx_in_box]
        # local index over B
        self._key = {tuple(p): i for i, p in enumerate(self.B.points.tolist())}
        sup = fields.step.support.astype(np.int64)
        nbr = np.full((self.B.size, len(sup)), -1, dtype=np.int64)
        exits = []
        exit_ids = {}
        for k, z in enumerate(sup):
            for i, p in enumerate(self.B.points):
                q = tuple((p + z).tolist())
                j = self._key.get(q)
                if j is None:
                    if q not in exit_ids:
                        exit_ids[q] = len(exits)
                        exits.append(q)
                    nbr[i, k] = -1 - exit_ids[q]
                else:
                    nbr[i, k] = j
        self.nbr = nbr
        self.exit_points = np.array(exits, dtype=np.int64).reshape(-1, fields.step.d)
        self.exit_padj = fields.p_adj.values[box.index_of(self.exit_points)]

    def solve(self, boundary_values, mode="include_end", tol=1e-14, max_sweeps=60_000):
        """U on B given boundary data at the one-step exit shell."""
        probs = self.fields.step.probs
        b = np.asarray(boundary_values, dtype=np.float64)
        if b.shape != (len(self.exit_points),):
            raise ValidationError("boundary data must match the exit shell")
        inside = self.nbr >= 0
        in_idx = np.where(inside, self.nbr, 0)
        out_idx = np.where(~inside, -1 - self.nbr, 0)
        if mode == "include_end":
            # U(x) = sum_w theta(w-x) (1-padj(w)) [w in B ? U(w) : b(w)]
            fixed = (
                probs[None, :]
                * np.where(~inside, (1.0 - self.exit_padj[out_idx]) * b[out_idx], 0.0)
            ).sum(axis=1)

            def apply(u):
                gathered = np.where(
                    inside, (1.0 - self.padj[in_idx]) * u[in_idx], 0.0
                )
                return fixed + (probs[None, :] * gathered).sum(axis=1)

        elif mode == "include_start":
            # U(x) = (1-padj(x)) sum_w theta(w-x) [w in B ? U(w) : b(w)]
            fixed_raw = (
                probs[None, :] * np.where(~inside, b[out_idx], 0.0)
            ).sum(axis=1)

            def apply(u):
                gathered = np.where(inside, u[in_idx], 0.0)
                s = fixed_raw + (probs[None, :] * gathered).sum(axis=1)
                return (1.0 - self.padj) * s

        else:
            raise ValidationError(f"unknown mode {mode!r}")
        u, sweeps, err = _extrapolated_push(apply, np.zeros(self.B.size), tol, max_sweeps)
        if err >= tol:
            raise NonConvergenceError(f"ball solve stalled at {err:.3e}")
        return u

    def value_at(self, u, pts):
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        out = np.array([u[self._key[tuple(p.tolist())]] for p in pts])
        return out if out.size > 1 else float(out[0])


def harmonic_measure_capacity(fields, B_radius, tol=1e-14):
    """Bcap(K) via the finite-window formula
    sum_{a in K} sum_{b notin B} H^B_K(b, a) e_K(b),
    evaluated as the B-local absorbing functional with boundary data e_K.
    """
    solver = BallSolver(fields, B_radius)
    eK_shell = fields.e_K.values[fields.box.index_of(solver.exit_points)]
    u = solver.solve(eK_shell, mode="include_end", tol=tol)
    vals = solver.value_at(u, fields.K.points)
    vals = np.atleast_1d(vals)
    return float(np.sum(vals))


def exit_identity_residuals(fields, y, B_radius, x_probes, tol=1e-13):
    """Absolute residuals of the first-entrance / last-exit decompositions.

    exit1: G_K(x, y) = sum_{z notin B} H^B_K(x, z) G_K(z, y), x in B;
    exit2: G_K(y, x) = sum_{z notin B} G_K(y, z) H^B_K(z, x), with the
    row field solved directly and H^B_K(z, x) realized as the
    endpoint-weighted absorbing functional on B.
    """
    y = np.asarray(y, dtype=np.int64)
    col, _ = green_killed_column(fields, y, tol=tol)
    row, _ = green_killed_row(fields, y, tol=tol)
    solver = BallSolver(fields, B_radius)
    shell_pts = solver.exit_points
    col_shell = np.atleast_1d(col.at(shell_pts))
    row_shell = np.atleast_1d(row.at(shell_pts))

    # exit1: boundary data G_K(z, y), start-weighted exit decomposition
    u1 = solver.solve(col_shell, mode="include_start", tol=tol)
    res1 = 0.0
    for x in np.atleast_2d(x_probes):
        lhs = float(col.at(x[None, :]))
        rhs = solver.value_at(u1, x)
        res1 = max(res1, abs(lhs - rhs))

    # exit2: boundary data G_K(y, z), endpoint-weighted functional
    u2 = solver.solve(row_shell, mode="include_end", tol=tol)
    res2 = 0.0
    for x in np.atleast_2d(x_probes):
        lhs = float(row.at(x[None, :]))
        rhs = solver.value_at(u2, x)
        res2 = max(res2, abs(lhs - rhs))
    return {"exit1": res1, "exit2": res2, "column": col, "row": row}


def identity_report(fields, ys=((16,),), B_radius=5, tol=1e-12):
    """Residuals of the exact killed-walk identities on solved fields."""
    box = fields.box
    F, _ = defpkx_field(fields, tol=tol)
    W, _ = qgr1_field(fields, tol=tol)
    report = {
        "def_pKx": float(np.max(np.abs(F.values - fields.p_c.values))),
        "q_gr1": float(np.max(np.abs(W.values - fields.p_I.values))),
    }
    bcap_sum = fields.bcap_sum_escape()
    bcap_harm = harmonic_measure_capacity(fields, B_radius)
    report["bcap_harmonic_vs_sum"] = abs(bcap_harm - bcap_sum)
    report["bcap_sum_escape"] = bcap_sum
    report["bcap_harmonic"] = bcap_harm
    d = fields.step.d
    probes = np.vstack(
        [np.zeros(d, dtype=np.int64)]
        + [np.eye(d, dtype=np.int64)[0] * 2]
        + [np.eye(d, dtype=np.int64)[1] + np.eye(d, dtype=np.int64)[0]]
    )
    exit_res = {}
    gk_margin = math.inf
    for yt in ys:
        yv = np.zeros(d, dtype=np.int64)
        yv[0] = yt[0] if hasattr(yt, "__len__") else yt
        out = exit_identity_residuals(fields, yv, B_radius, probes, tol=tol)
        exit_res[int(yv[0])] = {"exit1": out["exit1"], "exit2": out["exit2"]}
        col = out["column"]
        # G_K <= g exactly: dirichlet column vs exact g(x - y)
        gvals = fields.gf.green(col.box.reps.astype(np.int64) - yv[None, :])
        gk_margin = min(gk_margin, float(np.min(gvals - col.values)))
    report["exit"] = exit_res
    report["min_g_minus_GK"] = gk_margin
    return report
