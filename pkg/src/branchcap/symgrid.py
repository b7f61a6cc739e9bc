"""Symmetry-reduced sup-norm boxes of Z^d for lattice field solves.

For hyperoctahedrally symmetric data (step law invariant under per-axis
sign flips and permutations of equal-marginal axes), a scalar field on
the box of radius R is constant on group orbits.  Storing one value per
orbit shrinks d = 5 boxes by a factor of ~3800, which is what makes
radius-24..32 solves fit in memory on one machine.

Two group modes:

* full: sign flips on every axis, permutations within each axis class.
* marked axis: one axis (carrying a distinguished point such as the
  target of a Green-function column) keeps its sign and identity; the
  remaining axes are reduced as above.

The neighbor table maps (orbit, support vector) -> orbit index, with -1
for out-of-box neighbors; closures are handled by per-orbit boundary
profile sums so that one sweep is a gather, a weighted sum and an add.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError


class OrbitBox:
    """One representative per symmetry orbit of [-R, R]^d."""

    def __init__(self, law, R, marked_axis=None):
        if not law.axis_aligned:
            raise ValidationError("orbit reduction requires an axis-aligned law")
        self.law = law
        self.R = int(R)
        self.d = law.d
        self.marked_axis = marked_axis
        cls = list(law.axis_classes)
        if marked_axis is not None:
            cls[marked_axis] = -1  # its own singleton class, signed
        self._cls = np.asarray(cls)
        self._groups = [
            np.nonzero(self._cls == c)[0]
            for c in sorted(set(cls))
            if c != -1
        ]
        self.reps = self._enumerate()
        self._keys = self._encode(self.reps)
        order = np.argsort(self._keys)
        self._keys_sorted = self._keys[order]
        self._order = order
        self.mult = self._multiplicities(self.reps)
        self.n = len(self.reps)
        self.nbr = None
        self.out_mask = None

    # -- enumeration ------------------------------------------------------

    def _enumerate(self):
        from itertools import combinations_with_replacement

        R, d = self.R, self.d
        blocks = [
            np.array(
                list(combinations_with_replacement(range(R + 1), len(g))),
                dtype=np.int16,
            )
            for g in self._groups
        ]
        if self.marked_axis is not None:
            blocks.append(np.arange(-R, R + 1, dtype=np.int16)[:, None])
        # cartesian product of the per-group sorted tuples, vectorized
        sizes = [len(b) for b in blocks]
        total = int(np.prod(sizes))
        reps = np.zeros((total, d), dtype=np.int16)
        rep_cols = [list(g) for g in self._groups]
        if self.marked_axis is not None:
            rep_cols.append([self.marked_axis])
        tile = total
        repeat = 1
        for b, cols in zip(blocks, rep_cols):
            tile //= len(b)
            expanded = np.repeat(np.tile(b, (tile, 1)), repeat, axis=0)
            reps[:, cols] = expanded
            repeat *= len(b)
        return reps

    # -- canonical form and keys ------------------------------------------

    def canonicalize(self, pts):
        """Map arbitrary lattice points to orbit representatives."""
        pts = np.asarray(pts, dtype=np.int64)
        single = pts.ndim == 1
        pts = np.atleast_2d(pts).copy()
        out = np.empty_like(pts)
        out[:] = 0
        if self.marked_axis is not None:
            out[:, self.marked_axis] = pts[:, self.marked_axis]
        for g in self._groups:
            vals = np.sort(np.abs(pts[:, g]), axis=1)
            out[:, g] = vals
        return out[0] if single else out

    def _encode(self, canon):
        canon = np.atleast_2d(np.asarray(canon, dtype=np.int64))
        base = np.int64(2 * self.R + 5)
        off = np.int64(self.R + 2)
        key = np.zeros(len(canon), dtype=np.int64)
        for j in range(self.d):
            key = key * base + (canon[:, j] + off)
        return key

    def index_of(self, pts, strict=True):
        """Orbit indices of lattice points; -1 when outside the box."""
        pts = np.atleast_2d(np.asarray(pts, dtype=np.int64))
        inside = np.max(np.abs(pts), axis=1) <= self.R
        idx = np.full(len(pts), -1, dtype=np.int64)
        if inside.any():
            keys = self._encode(self.canonicalize(pts[inside]))
            pos = np.searchsorted(self._keys_sorted, keys)
            pos = np.clip(pos, 0, len(self._keys_sorted) - 1)
            ok = self._keys_sorted[pos] == keys
            got = np.where(ok, self._order[pos], -1)
            idx[inside] = got
        if strict and np.any(idx[inside] < 0):
            raise ValidationError("point failed orbit lookup (corrupt box)")
        return idx

    def _multiplicities(self, reps):
        mult = np.ones(len(reps), dtype=np.float64)
        for g in self._groups:
            vals = reps[:, g]
            k = len(g)
            perm = np.full(len(reps), math.factorial(k), dtype=np.float64)
            # divide by repeats: product over runs of equal sorted values
            for v in range(0, self.R + 1):
                cnt = (vals == v).sum(axis=1)
                perm /= np.array([math.factorial(c) for c in cnt])
            flips = 2.0 ** (vals != 0).sum(axis=1)
            mult *= perm * flips
        return mult

    # -- neighbor structure -------------------------------------------------

    def build_neighbors(self):
        """nbr[i, k] = orbit index of rep_i + z_k (or -1 out of box)."""
        sup = self.law.support.astype(np.int64)
        n, m = len(self.reps), len(sup)
        nbr = np.empty((n, m), dtype=np.int32)
        for k in range(m):
            pts = self.reps.astype(np.int64) + sup[k][None, :]
            nbr[:, k] = self.index_of(pts, strict=False).astype(np.int32)
        self.nbr = nbr
        self.out_mask = nbr < 0
        return nbr

    def out_points(self, k_vec_index):
        """Lattice points rep_i + z_k for the out-of-box entries of column k."""
        sup = self.law.support.astype(np.int64)
        rows = np.nonzero(self.out_mask[:, k_vec_index])[0]
        return rows, self.reps[rows].astype(np.int64) + sup[k_vec_index][None, :]

    def boundary_profile(self, profile_fn):
        """bnd[i] = sum over out-of-box neighbors of theta_k * profile(x).

        profile_fn maps an (m, d) array of lattice points to values; the
        result lets a sweep add closure_coeff * bnd for matched closures.
        """
        if self.nbr is None:
            self.build_neighbors()
        bnd = np.zeros(self.n, dtype=np.float64)
        for k, p in enumerate(self.law.probs):
            rows, pts = self.out_points(k)
            if len(rows):
                bnd[rows] += p * profile_fn(pts)
        return bnd

    def convolve(self, field, bnd=None, coeff=0.0):
        """(theta * field)(x) per orbit, with closure coeff * profile outside."""
        if self.nbr is None:
            self.build_neighbors()
        padded = np.concatenate([field, [0.0]])
        idx = np.where(self.nbr >= 0, self.nbr, self.n)
        acc = (padded[idx] * self.law.probs[None, :]).sum(axis=1)
        if bnd is not None and coeff != 0.0:
            acc = acc + coeff * bnd
        return acc

    def weighted_sum(self, field):
        """sum over the full box of the field (orbit values times counts)."""
        return float(np.dot(self.mult, field))

    def euclid_norm(self):
        return np.sqrt(np.einsum("ij,ij->i", self.reps.astype(float), self.reps.astype(float)))
