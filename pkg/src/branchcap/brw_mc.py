"""Monte Carlo estimation of tree-indexed hitting and escape probabilities.

Estimates p_c, p_adj (hit of K by a finite-tree walk), p_I, p_minus
(infinite spine-with-bushes tree) and the escape probability e_K by
direct simulation.  Everything unexplored is bounded, never dropped:

* finite-tree vertices leaving a pruning ball contribute the analytic
  subtree bound  C_rem * Bcap_up * g(v)  to a per-sample remainder;
* entire bushes rooted at far spine sites are pruned at spawn with the
  bound  C_rem * (sigma^2/2) * Bcap_up * g(site);
* the spine is stopped at radius R_stop with the remainder bound
  C_rem * (sigma^2/2) * Bcap_up * G(site) for the unexplored tail,
* a per-sample vertex budget marks rare overruns as capped (counted
  both as hit and as miss).

g and G are evaluated exactly by the continuous-time product quadrature,
so the bracket [hits/S, (hits+capped)/S + mean remainder] is explicit.
The order-of-magnitude constants in the bounds are not available from
theory with explicit values; C_rem (default 10) is a recorded safety
factor of the harness.

All randomness is counter-based: draw = f(seed, sample, bush, vertex,
channel).  Batching, pruning schedules and thread counts cannot change
any sample's outcome.

While the spine wanders far from K with no live bushes, it advances in
leaps of floor((|pos| - W_bush)/s_max) steps: no site in such a block
can enter the bush-simulation ball, so every skipped site is exactly a
whole-bush prune and the leap changes nothing but the speed.
"""

import math
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import rng
from .errors import ValidationError
from .lattice import GreenFunction
from .offspring import adjoint

_MAX_LEAP = 256


@dataclass
class McConfig:
    r_stop: float = 512.0          # spine stopping radius
    w_bush: float = 32.0           # bushes rooted beyond this are bound, not run
    w_vertex: float = 64.0         # tree vertices beyond this are bound, not run
    v_max: int = 200_000           # per-sample vertex budget
    c_remainder: float = 10.0      # safety factor on the order-of-magnitude bounds
    bcap_upper: float | None = None  # default min(|K|, spec envelope)
    batch: int = 4096


@dataclass
class HitEstimate:
    """Point estimate with binomial CI and a deterministic bracket."""

    quantity: str
    x: tuple
    p_hat: float
    ci95: float
    samples: int
    capped: int
    remainder: float
    p_low: float
    p_high: float
    hits: int

    def as_dict(self):
        return {
            "quantity": self.quantity,
            "x": list(self.x),
            "p_hat": self.p_hat,
            "ci95": self.ci95,
            "samples": self.samples,
            "capped": self.capped,
            "remainder": self.remainder,
            "bracket": [self.p_low, self.p_high],
        }


class _Kindex:
    """Membership test for K via packed integer keys."""

    def __init__(self, points, span):
        pts = np.asarray(points, dtype=np.int64)
        self.d = pts.shape[1]
        self.span = int(span)
        self.base = np.int64(2 * self.span + 3)
        if float(self.base) ** self.d >= 2 ** 62:
            raise ValidationError("R_stop too large for packed membership keys")
        self.keys = np.sort(self._pack(pts))
        self.radius = float(np.sqrt(np.einsum("ij,ij->i", pts, pts).max()))

    def _pack(self, pts):
        key = np.zeros(len(pts), dtype=np.int64)
        for j in range(self.d):
            key = key * self.base + (pts[:, j] + self.span + 1)
        return key

    def contains(self, pts):
        pts = np.atleast_2d(pts)
        if len(pts) == 0:
            return np.zeros(0, dtype=bool)
        if np.max(np.abs(pts)) > self.span:
            raise ValidationError("position escaped the key span")
        keys = self._pack(np.asarray(pts, dtype=np.int64))
        pos = np.searchsorted(self.keys, keys)
        pos = np.clip(pos, 0, len(self.keys) - 1)
        return self.keys[pos] == keys


class _Engine:
    """Shared state for one batch of samples."""

    def __init__(self, kind, K, x, law, step, n_samples, sample_offset, seed, cfg):
        self.kind = kind
        self.law = law
        self.adj = adjoint(law)
        self.step = step
        self.cfg = cfg
        self.seed = seed
        self.d = step.d
        self.S = n_samples
        self.ids = np.arange(sample_offset, sample_offset + n_samples, dtype=np.int64)
        span = int(cfg.r_stop + cfg.w_vertex + 4 * step.support_radius + 8)
        self.kset = _Kindex(K, span)
        self.gf = GreenFunction(step)
        self.sigma2 = law.variance
        r = max(self.kset.radius, 1.0)
        env = cfg.bcap_upper
        if env is None:
            env = min(float(len(K)), 2.0 * r ** (self.d - 4))
        self.bcap_up = env
        self.x0 = np.asarray(x, dtype=np.int64)

        self.hit = np.zeros(n_samples, dtype=bool)
        self.capped = np.zeros(n_samples, dtype=bool)
        self.delta = np.zeros(n_samples, dtype=np.float64)
        self.used = np.zeros(n_samples, dtype=np.int64)
        self._step_cdf = np.cumsum(step.probs)

        # calibrated far-field envelopes: exact kernels at probe radii set
        # the constants, an extra 1.2 margin covers lattice corrections
        cand = []
        for rr in (8, 12, 16, 24, 32):
            e1 = np.zeros(self.d, dtype=np.int64)
            e1[0] = rr
            cand.append(float(self.gf.green(e1)) * rr ** (self.d - 2))
        self._cg_env = 1.2 * max(cand)
        cand = []
        for rr in (8, 16, 32):
            e1 = np.zeros(self.d, dtype=np.int64)
            e1[0] = rr
            cand.append(float(self.gf.second_kernel(e1)) * rr ** (self.d - 4))
        self._cG_env = 1.2 * max(cand)

        # active tree vertices, flat across samples; a vertex is identified
        # for RNG purposes by (sample, bush, generation, rank), all intrinsic
        # to its own tree so batching cannot change any draw
        self.v_samp = np.zeros(0, dtype=np.int64)   # local sample row
        self.v_bush = np.zeros(0, dtype=np.int64)
        self.v_gen = np.zeros(0, dtype=np.int64)
        self.v_rank = np.zeros(0, dtype=np.int64)
        self.v_pos = np.zeros((0, self.d), dtype=np.int64)

        self.has_spine = kind in ("p_minus", "p_I", "escape")
        if self.has_spine:
            self.sp_pos = np.tile(self.x0, (n_samples, 1))
            self.sp_idx = np.zeros(n_samples, dtype=np.int64)
            self.sp_alive = np.ones(n_samples, dtype=bool)
            in_k = self.kset.contains(self.x0[None, :])[0]
            if kind == "p_I":
                if in_k:
                    self.hit[:] = True
                else:
                    self._spawn_bushes(np.arange(n_samples), np.tile(self.x0, (n_samples, 1)),
                                       np.zeros(n_samples, dtype=np.int64))
        else:
            rows = np.arange(n_samples)
            if self.kset.contains(self.x0[None, :])[0]:
                self.hit[:] = True
            else:
                self._spawn_roots(rows)

    # -- RNG helpers -------------------------------------------------------

    def _root_counts(self, rows, bushes, adjoint_root):
        u = rng.counter_uniform(self.seed, self.ids[rows], bushes, rng.CH_ROOT)
        law = self.adj if adjoint_root else self.law
        return law.offspring_from_uniform(u)

    def _offspring_counts(self, rows, bushes, gens, ranks):
        u = rng.counter_uniform(
            self.seed, self.ids[rows], bushes, gens, ranks, rng.CH_OFFSPRING
        )
        return self.law.offspring_from_uniform(u)

    def _steps(self, rows, bushes, gens, ranks):
        u = rng.counter_uniform(
            self.seed, self.ids[rows], bushes, gens, ranks, rng.CH_STEP
        )
        k = np.searchsorted(self._step_cdf, u, side="left")
        return self.step.support[k]

    @staticmethod
    def _ranks_within(keys):
        """Rank of each element among equal keys, preserving array order."""
        order = np.argsort(keys, kind="stable")
        sk = keys[order]
        starts = np.r_[0, np.nonzero(sk[1:] != sk[:-1])[0] + 1] if len(sk) else np.zeros(0, int)
        sizes = np.diff(np.r_[starts, len(sk)])
        offset = np.repeat(starts, sizes)
        ranks = np.empty(len(sk), dtype=np.int64)
        ranks[order] = np.arange(len(sk)) - offset
        return ranks

    # -- bounds -------------------------------------------------------------
    # closed-form far-field envelopes keep the per-round cost trivial; the
    # envelope constants are calibrated once against the exact kernels

    def _g_env(self, pts):
        r2 = np.einsum("ij,ij->i", pts, pts).astype(np.float64)
        return self._cg_env * np.maximum(r2, 1.0) ** (-(self.d - 2) / 2.0)

    def _G_env(self, pts):
        r2 = np.einsum("ij,ij->i", pts, pts).astype(np.float64)
        return self._cG_env * np.maximum(r2, 1.0) ** (-(self.d - 4) / 2.0)

    def _bound_subtree(self, pts):
        """Upper bound on a critical subtree from pts hitting K."""
        return self.cfg.c_remainder * self.bcap_up * self._g_env(np.atleast_2d(pts))

    def _bound_bush(self, pts):
        """Upper bound on a whole adjoint bush rooted at pts hitting K."""
        return (
            self.cfg.c_remainder * (self.sigma2 / 2.0) * self.bcap_up
            * self._g_env(np.atleast_2d(pts))
        )

    def _bound_spine_tail(self, pts):
        """Upper bound on the not-yet-explored spine tail hitting K."""
        return (
            self.cfg.c_remainder * (self.sigma2 / 2.0) * self.bcap_up
            * self._G_env(np.atleast_2d(pts))
        )

    # -- spawning ------------------------------------------------------------

    def _spawn_roots(self, rows):
        """Finite-tree mode: root at x0 with mu (critical) or mu~ (adjoint)."""
        counts = self._root_counts(rows, np.zeros(len(rows), dtype=np.int64),
                                   adjoint_root=(self.kind == "adjoint"))
        self.used[rows] += 1
        self._emit_children(rows, np.zeros(len(rows), dtype=np.int64),
                            np.zeros(len(rows), dtype=np.int64),
                            np.tile(self.x0, (len(rows), 1)), counts)

    def _spawn_bushes(self, rows, sites, bush_ids):
        """Adjoint bushes at spine sites (roots are the sites themselves)."""
        counts = self._root_counts(rows, bush_ids, adjoint_root=True)
        self.used[rows] += 1
        self._emit_children(rows, bush_ids, np.zeros(len(rows), dtype=np.int64),
                            sites, counts)

    def _emit_children(self, rows, bush_ids, parent_gen, parent_pos, counts):
        keep = counts > 0
        if not keep.any():
            return
        rows, bush_ids, parent_gen, parent_pos, counts = (
            rows[keep], bush_ids[keep], parent_gen[keep], parent_pos[keep], counts[keep],
        )
        r_rep = np.repeat(rows, counts)
        b_rep = np.repeat(bush_ids, counts)
        g_rep = np.repeat(parent_gen, counts) + 1
        p_rep = np.repeat(parent_pos, counts, axis=0)
        # rank children within (sample, bush): with one generation per
        # round the (generation, rank) pair is unique and intrinsic
        key = r_rep * np.int64(1 << 40) + b_rep
        ranks = self._ranks_within(key)
        steps = self._steps(r_rep, b_rep, g_rep, ranks)
        pos = p_rep + steps
        self._admit(r_rep, b_rep, g_rep, ranks, pos)

    def _admit(self, rows, bushes, gens, ranks, pos):
        """Hit test, prune test and budget for freshly placed vertices."""
        alive = ~self.hit[rows] & ~self.capped[rows]
        rows, bushes, gens, ranks, pos = (
            rows[alive], bushes[alive], gens[alive], ranks[alive], pos[alive],
        )
        if len(rows) == 0:
            return
        hits = self.kset.contains(pos)
        if hits.any():
            self.hit[rows[hits]] = True
        rows, bushes, gens, ranks, pos = (
            rows[~hits], bushes[~hits], gens[~hits], ranks[~hits], pos[~hits],
        )
        if len(rows) == 0:
            return
        rad2 = np.einsum("ij,ij->i", pos, pos)
        far = rad2 >= self.cfg.w_vertex ** 2
        if far.any():
            np.add.at(self.delta, rows[far], self._bound_subtree(pos[far]))
        rows, bushes, gens, ranks, pos = (
            rows[~far], bushes[~far], gens[~far], ranks[~far], pos[~far],
        )
        if len(rows) == 0:
            return
        np.add.at(self.used, rows, 1)
        over = self.used[rows] > self.cfg.v_max
        if over.any():
            self.capped[rows[over]] = True
        self.v_samp = np.concatenate([self.v_samp, rows])
        self.v_bush = np.concatenate([self.v_bush, bushes])
        self.v_gen = np.concatenate([self.v_gen, gens])
        self.v_rank = np.concatenate([self.v_rank, ranks])
        self.v_pos = np.vstack([self.v_pos, pos])

    # -- rounds ----------------------------------------------------------------

    def _advance_vertices(self):
        live = ~self.hit[self.v_samp] & ~self.capped[self.v_samp]
        self.v_samp, self.v_bush, self.v_gen, self.v_rank, self.v_pos = (
            self.v_samp[live], self.v_bush[live], self.v_gen[live],
            self.v_rank[live], self.v_pos[live],
        )
        if len(self.v_samp) == 0:
            return
        counts = self._offspring_counts(self.v_samp, self.v_bush, self.v_gen, self.v_rank)
        rows, bushes, gens, pos = self.v_samp, self.v_bush, self.v_gen, self.v_pos
        self.v_samp = np.zeros(0, dtype=np.int64)
        self.v_bush = np.zeros(0, dtype=np.int64)
        self.v_gen = np.zeros(0, dtype=np.int64)
        self.v_rank = np.zeros(0, dtype=np.int64)
        self.v_pos = np.zeros((0, self.d), dtype=np.int64)
        self._emit_children(rows, bushes, gens, pos, counts)

    def _advance_spine(self):
        act = self.sp_alive & ~self.hit & ~self.capped
        if not act.any():
            return
        rows = np.nonzero(act)[0]
        pos = self.sp_pos[rows]
        rad = np.sqrt(np.einsum("ij,ij->i", pos, pos).astype(float))
        smax = self.step.support_radius
        leaps = np.maximum(
            1, np.minimum(_MAX_LEAP, ((rad - self.cfg.w_bush) / smax - 1).astype(np.int64))
        )
        kmax = int(leaps.max())
        cols = np.arange(kmax)
        idx = self.sp_idx[rows, None] + cols[None, :]
        u = rng.counter_uniform(self.seed, self.ids[rows, None], rng.CH_SPINE, idx)
        stepk = np.searchsorted(self._step_cdf, u, side="left")
        disp = self.step.support[stepk]                  # (n, kmax, d)
        sites = pos[:, None, :] + np.cumsum(disp, axis=1)
        valid = cols[None, :] < leaps[:, None]
        srad2 = np.einsum("ijk,ijk->ij", sites, sites).astype(float)
        crossed = (srad2 >= self.cfg.r_stop ** 2) & valid
        first_cross = np.where(crossed.any(axis=1), crossed.argmax(axis=1), kmax)
        live_site = valid & (cols[None, :] < first_cross[:, None] + 1)

        near = (srad2 <= self.cfg.w_bush ** 2) & live_site
        # by construction of the leap length only a leap of 1 can be near;
        # those sites become real bushes, every other live site is bound
        bound_mask = live_site & ~near & ~crossed
        if bound_mask.any():
            flat_sites = sites[bound_mask]
            flat_rows = np.repeat(rows, live_site.shape[1])[bound_mask.ravel()]
            np.add.at(self.delta, flat_rows, self._bound_bush(flat_sites))

        # where R_stop was crossed: bound the bush at the crossing site plus
        # the entire unexplored spine tail beyond it
        xrows = rows[first_cross < kmax]
        if len(xrows):
            xsites = sites[first_cross < kmax, first_cross[first_cross < kmax]]
            self.delta[xrows] += self._bound_spine_tail(xsites)
            self.delta[xrows] += self._bound_bush(xsites)
            self.sp_alive[xrows] = False

        # hits on spine sites (bush roots sit on the spine)
        in_k = self.kset.contains(sites[live_site])
        if in_k.any():
            flat_rows = np.repeat(rows, live_site.shape[1])[live_site.ravel()]
            self.hit[flat_rows[in_k]] = True

        # spawn bushes at near sites of still-live samples
        nrows_mask = near.any(axis=1)
        if nrows_mask.any():
            srows = rows[nrows_mask]
            scols = near.argmax(axis=1)[nrows_mask]
            ssites = sites[nrows_mask, scols]
            sbush = self.sp_idx[srows] + scols + 1
            ok = ~self.hit[srows] & ~self.capped[srows] & self.sp_alive[srows]
            if ok.any():
                self._spawn_bushes(srows[ok], ssites[ok], sbush[ok])

        # advance positions and indices to the consumed prefix
        consumed = np.minimum(leaps, first_cross + 1)
        self.sp_pos[rows] = sites[np.arange(len(rows)), consumed - 1]
        self.sp_idx[rows] += consumed

    def exhausted(self):
        running = ~self.hit & ~self.capped
        if self.has_spine:
            busy = self.sp_alive & running
        else:
            busy = np.zeros(self.S, dtype=bool)
        if len(self.v_samp):
            act = running[self.v_samp]
            busy_v = np.zeros(self.S, dtype=bool)
            busy_v[self.v_samp[act]] = True
            busy |= busy_v
        return not busy.any()

    def run(self, max_rounds=10_000_000):
        for _ in range(max_rounds):
            if self.exhausted():
                break
            if self.has_spine:
                self._advance_spine()
            self._advance_vertices()
        return self


def _estimate(kind, K, x, law, step, samples, seed, cfg):
    hits = 0
    capped = 0
    delta_sum = 0.0
    done = 0
    while done < samples:
        n = min(cfg.batch, samples - done)
        eng = _Engine(kind, K, x, law, step, n, done, seed, cfg).run()
        hits += int(eng.hit.sum())
        capped += int((eng.capped & ~eng.hit).sum())
        delta_sum += float(eng.delta[~eng.hit & ~eng.capped].sum())
        done += n
    p_hat = hits / samples
    ci = 1.96 * math.sqrt(max(p_hat * (1 - p_hat), 1e-300) / samples)
    p_low = p_hat
    p_high = min(1.0, (hits + capped + delta_sum) / samples)
    return HitEstimate(
        quantity=kind,
        x=tuple(int(v) for v in np.atleast_1d(x)),
        p_hat=p_hat,
        ci95=ci,
        samples=samples,
        capped=capped,
        remainder=delta_sum / samples,
        p_low=p_low,
        p_high=p_high,
        hits=hits,
    )


def _as_points(K):
    pts = np.asarray(getattr(K, "points", K), dtype=np.int64)
    return np.atleast_2d(pts)


def hit_probability(kind, K, x, law, step, samples, seed, config=None):
    """p_c (kind='critical') or p_adj (kind='adjoint') at x by simulation."""
    if kind not in ("critical", "adjoint"):
        raise ValidationError("kind must be 'critical' or 'adjoint'")
    if samples < 1:
        raise ValidationError("samples >= 1")
    cfg = config or McConfig()
    tag = "p_c" if kind == "critical" else "p_adj"
    est = _estimate(kind, _as_points(K), x, law, step, samples, seed, cfg)
    est.quantity = tag
    return est


def escape_probability(K, x, law, step, samples, seed, config=None):
    """e_K(x) = 1 - p_minus(x); simulated via the spine-with-bushes walk."""
    cfg = config or McConfig()
    est = _estimate("p_minus", _as_points(K), x, law, step, samples, seed, cfg)
    lo = 1.0 - est.p_high
    hi = 1.0 - est.p_low
    return HitEstimate(
        quantity="e_K",
        x=est.x,
        p_hat=1.0 - est.p_hat,
        ci95=est.ci95,
        samples=est.samples,
        capped=est.capped,
        remainder=est.remainder,
        p_low=lo,
        p_high=hi,
        hits=est.samples - est.hits,
    )


def p_minus(K, x, law, step, samples, seed, config=None):
    cfg = config or McConfig()
    return _estimate("p_minus", _as_points(K), x, law, step, samples, seed, cfg)


def p_infinite(K, x, law, step, samples, seed, config=None):
    """p_I(x): one adjoint bush at x plus the escape walk."""
    cfg = config or McConfig()
    est = _estimate("p_I", _as_points(K), x, law, step, samples, seed, cfg)
    est.quantity = "p_I"
    return est
