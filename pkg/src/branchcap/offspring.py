"""Critical offspring laws, the adjoint (tail-sum) law, and tree samplers.

An offspring law mu is critical (mean 1) with variance sigma^2 in
(0, inf).  Its adjoint is the tail-sum pmf

    mu~(k) = sum_{j > k} mu(j),

which is again a probability law (its total mass is the mean of mu) and
has mean sigma^2/2.  Bush trees rooted on the infinite spine draw their
root degree from mu~ and everything below the root from mu.

Samplers are pure functions of (law, budget, seed, index) built on the
counter-based RNG, so parallel fan-out cannot change any sample.  Tree
sizes are heavy tailed (P(#T = n) ~ n^'s-3/2); budgets cap exploration
and the cap is always reported, never silently dropped.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from . import rng
from .errors import ValidationError


@dataclass(frozen=True)
class OffspringLaw:
    """Critical offspring pmf with cached moments and samplers."""

    kind: str
    pmf: np.ndarray | None       # finite support; None for geometric_half
    mean: float
    variance: float
    third_moment_finite: bool = True

    def __post_init__(self):
        if self.pmf is not None:
            object.__setattr__(self, "pmf", np.asarray(self.pmf, dtype=np.float64))

    @property
    def sigma2(self):
        return self.variance

    def prob(self, k):
        k = np.asarray(k)
        if self.pmf is None:
            return np.where(k >= 0, 0.5 ** (k + 1.0), 0.0)
        out = np.zeros(k.shape if k.shape else (1,))
        mask = (k >= 0) & (k < len(self.pmf))
        out[mask] = self.pmf[np.asarray(k)[mask]]
        return out if k.shape else float(out[0])

    def gen_func(self, s):
        """f(s) = sum mu(k) s^k, vectorized in s (s in [0, 1])."""
        s = np.asarray(s, dtype=np.float64)
        if self.pmf is None:
            return 1.0 / (2.0 - s)
        ks = np.arange(len(self.pmf))
        return (self.pmf * s[..., None] ** ks).sum(-1)

    def offspring_from_uniform(self, u):
        """Inverse-CDF offspring draw from uniforms in (0, 1]."""
        if self.pmf is None:
            return np.floor(-np.log2(u)).astype(np.int64)
        cdf = np.cumsum(self.pmf)
        return np.searchsorted(cdf, u, side="left").astype(np.int64)

    @property
    def max_children(self):
        return None if self.pmf is None else len(self.pmf) - 1


@dataclass(frozen=True)
class AdjointLaw:
    """Tail-sum law mu~(k) = sum_{j>k} mu(j); mean sigma^2/2."""

    base: OffspringLaw
    pmf: np.ndarray | None

    @property
    def mean(self):
        return self.base.variance / 2.0

    def prob(self, k):
        k = np.asarray(k)
        if self.pmf is None:
            return np.where(k >= 0, 0.5 ** (k + 1.0), 0.0)
        out = np.zeros(k.shape if k.shape else (1,))
        mask = (k >= 0) & (k < len(self.pmf))
        out[mask] = self.pmf[np.asarray(k)[mask]]
        return out if k.shape else float(out[0])

    def gen_func(self, s):
        """f~(s) = (1 - f(s)) / (1 - s), continuous at s = 1."""
        s = np.asarray(s, dtype=np.float64)
        if self.pmf is None:
            return 1.0 / (2.0 - s)
        ks = np.arange(len(self.pmf))
        return (self.pmf * s[..., None] ** ks).sum(-1)

    def offspring_from_uniform(self, u):
        if self.pmf is None:
            return np.floor(-np.log2(u)).astype(np.int64)
        cdf = np.cumsum(self.pmf)
        return np.searchsorted(cdf, u, side="left").astype(np.int64)


def make_offspring(kind, params=None):
    """Construct a validated critical offspring law.

    kinds: 'binary_critical' (mu(0)=mu(2)=1/2), 'geometric_half'
    (mu(k)=2^-(k+1)), 'poisson_trunc' (Poisson(1) cut at params['kmax'],
    top atom and zero atom adjusted so the mean is exactly 1), 'custom'
    (params['pmf'] explicit).
    """
    params = params or {}
    if kind == "binary_critical":
        pmf = np.array([0.5, 0.0, 0.5])
    elif kind == "geometric_half":
        law = OffspringLaw(kind=kind, pmf=None, mean=1.0, variance=2.0)
        return law
    elif kind == "poisson_trunc":
        K = int(params.get("kmax", 8))
        if K < 2:
            raise ValidationError("poisson_trunc needs kmax >= 2")
        base = np.array([math.exp(-1.0) / math.factorial(k) for k in range(K)])
        a = base[1:K].sum()
        b = float(np.arange(1, K) @ base[1:K])
        pK = (1.0 - b) / K
        p0 = 1.0 - a - pK
        if pK < 0 or p0 < 0:
            raise ValidationError("poisson_trunc adjustment infeasible at this kmax")
        pmf = np.concatenate([[p0], base[1:K], [pK]])
    elif kind == "custom":
        pmf = np.asarray(params["pmf"], dtype=np.float64)
    else:
        raise ValidationError(f"unknown offspring kind {kind!r}")

    if np.any(pmf < -1e-15):
        raise ValidationError("negative offspring probability")
    pmf = np.clip(pmf, 0.0, None)
    total = pmf.sum()
    if abs(total - 1.0) > 1e-12:
        raise ValidationError(f"offspring pmf sums to {total!r}")
    ks = np.arange(len(pmf))
    mean = float(ks @ pmf)
    if abs(mean - 1.0) > 1e-12:
        raise ValidationError(f"offspring mean is {mean!r}, not critical")
    if len(pmf) > 1 and pmf[1] >= 1.0 - 1e-15:
        raise ValidationError("mu(1) = 1 gives an infinite stick of a tree")
    var = float((ks - 1.0) ** 2 @ pmf)
    if var <= 0:
        raise ValidationError("zero-variance offspring law")
    return OffspringLaw(kind=kind, pmf=pmf, mean=mean, variance=var)


def adjoint(law):
    """Tail-sum adjoint law; exact partial sums for finite supports."""
    if law.pmf is None:
        return AdjointLaw(base=law, pmf=None)  # geometric(1/2) is self-adjoint
    # mu~(k) = sum_{j >= k+1} mu(j), support 0 .. kmax-1
    tail = np.cumsum(law.pmf[::-1])[::-1]
    pmf = tail[1:]
    s = pmf.sum()
    if abs(s - 1.0) > 1e-12:
        raise ValidationError("adjoint mass != 1; offspring law not critical?")
    return AdjointLaw(base=law, pmf=pmf / s)


# ---------------------------------------------------------------------------
# samplers
# ---------------------------------------------------------------------------


@dataclass
class TreeBudget:
    v_max: int

    def __post_init__(self):
        if self.v_max < 1:
            raise ValidationError("v_max >= 1 required")


def _grow_tree(root_draw, law, v_max, gen):
    """Generic BFS tree builder; returns (parents, outcome)."""
    parents = [-1]
    frontier = [0]
    first = True
    while frontier:
        counts = []
        for _ in frontier:
            if first:
                counts.append(root_draw(gen))
                first = False
            else:
                counts.append(int(law.offspring_from_uniform(np.array([gen.uniform(0, 1) or 1.0]))[0]))
        nxt = []
        for v, c in zip(frontier, counts):
            for _ in range(c):
                if len(parents) >= v_max:
                    return np.array(parents, dtype=np.int64), "capped"
                parents.append(v)
                nxt.append(len(parents) - 1)
        frontier = nxt
    return np.array(parents, dtype=np.int64), "completed"


def sample_critical_tree(law, budget, seed, index=0):
    """One critical tree as a BFS parent array; honest 'capped' outcome."""
    budget = budget if isinstance(budget, TreeBudget) else TreeBudget(budget)
    gen = rng.spawn_generator(seed, index, 0xC)

    def root(g):
        return int(law.offspring_from_uniform(np.array([g.uniform(0, 1) or 1.0]))[0])

    return _grow_tree(root, law, budget.v_max, gen)


def sample_adjoint_tree(law, budget, seed, index=0):
    """Adjoint tree: root degree from mu~, the rest from mu."""
    budget = budget if isinstance(budget, TreeBudget) else TreeBudget(budget)
    adj = adjoint(law)
    gen = rng.spawn_generator(seed, index, 0xA)

    def root(g):
        return int(adj.offspring_from_uniform(np.array([g.uniform(0, 1) or 1.0]))[0])

    return _grow_tree(root, law, budget.v_max, gen)


def spine_iterator(law, seed, start=0, budget=None):
    """Lazy stream of independent adjoint trees indexed by spine depth.

    Item i is fully determined by (seed, i); consuming the stream twice
    (or out of order) replays identical trees.  For the walk indexed by
    the spine-minus-first-bush tree, start at index 1.
    """
    budget = budget or TreeBudget(1_000_000)
    i = start
    while True:
        yield sample_adjoint_tree(law, budget, seed, index=i)
        i += 1


# ---------------------------------------------------------------------------
# batched size sampling (Lukasiewicz first passage)
# ---------------------------------------------------------------------------


def tree_sizes(law, n_samples, v_max, seed, adjoint_root=False, chunk=None):
    """Sizes of n_samples independent trees, vectorized.

    Uses the depth-first queue walk: with X_i i.i.d. offspring draws,
    #T = min{n : 1 + sum_{i<=n} (X_i - 1) = 0}.  Draw i for sample s is
    keyed by (seed, s, i), so results do not depend on chunking; the
    chunk width grows as the surviving (heavy-tailed) population thins.
    Returns (sizes, capped) with sizes clipped at v_max.
    """
    sizes = np.zeros(n_samples, dtype=np.int64)
    capped = np.zeros(n_samples, dtype=bool)
    alive = np.arange(n_samples, dtype=np.int64)
    queue = np.ones(n_samples, dtype=np.int64)     # pending vertices
    adj = adjoint(law) if adjoint_root else None
    done = 0          # draws consumed so far, identical across alive samples
    step = 0
    while alive.size and done < v_max:
        chunk_now = chunk if chunk else min(8192, 2 << min(step, 24))
        chunk_now = min(chunk_now, v_max - done)
        step += 1
        idx = done + np.arange(chunk_now)[None, :]
        u = rng.counter_uniform(seed, alive[:, None], rng.CH_OFFSPRING, idx)
        draws = law.offspring_from_uniform(u)
        if adj is not None and done == 0:
            u0 = rng.counter_uniform(seed, alive, rng.CH_ROOT, 0)
            draws[:, 0] = adj.offspring_from_uniform(u0)
        walk = queue[alive, None] + np.cumsum(draws - 1, axis=1)
        hit = walk <= 0
        any_hit = hit.any(axis=1)
        first_hit = np.where(any_hit, hit.argmax(axis=1), chunk_now - 1)
        fin = any_hit
        sizes[alive[fin]] = done + first_hit[fin] + 1
        cont = ~fin
        queue[alive[cont]] = walk[cont, -1]
        done += chunk_now
        alive = alive[cont]
    sizes[alive] = v_max
    capped[alive] = True
    return sizes, capped


def size_pmf_exact_geometric(n):
    """P(#T = n) for geometric(1/2) offspring: Dwass + negative binomial.

    P(#T = n) = (1/n) C(2n-2, n-1) 2^-(2n-1); an exact oracle for the
    n^-3/2 size-law normalization test.
    """
    n = np.asarray(n, dtype=np.float64)
    from scipy import special as sp

    logp = (
        -np.log(n)
        + sp.gammaln(2 * n - 1)
        - 2 * sp.gammaln(n)
        - (2 * n - 1) * math.log(2.0)
    )
    return np.exp(logp)
