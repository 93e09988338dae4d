"""Symbolic oracles: pressure and equilibrium states on finite-type shifts.

The built-in open maps have Markov holes, so their survivor dynamics are
conjugate to full shifts (or subshifts of finite type) on the surviving
branches.  For a weight matrix psi[a][b] on symbol transitions, the pressure
is the log Perron root of A = exp(psi), and the equilibrium state is the
Parry-type Gibbs measure built from the Perron data of A:

    p_a = l_a r_a / <l, r>,      Q[a][b] = A[a][b] r_b / (lam r_a),
    mass[a_0 ... a_{k-1}] = p_{a_0} prod_i Q[a_i][a_{i+1}].

These are desk-scale exact references for the grid pipeline, so the Perron
data here comes from a dense full-spectrum solve (numpy), deliberately not
from the power iteration used on the grid side.

The module also provides the measure-comparison metrics used by the
stability experiments: exact 1-Wasserstein distance in 1d via CDFs, and a
weak-* discrepancy over a fixed Fourier dictionary of Lipschitz-1 functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from itertools import product

import numpy as np

from .ulam import GridPartition

Array = np.ndarray


@dataclass(frozen=True)
class MarkovModel:
    """Weighted transition structure on the surviving branches.

    ``log_weights[a][b]`` is psi on the transition a -> b, with -inf marking
    a forbidden transition.  ``digits``/``base``/``offset`` describe the
    cylinder geometry when the symbols are digits of a linear mod-1 map:
    symbol a occupies the branch interval [digit_a / base, (digit_a+1)/base)
    shifted by ``offset``.  Models without geometry (None) still support
    pressure and cylinder masses.
    """

    log_weights: Array
    digits: tuple[int, ...] | None = None
    base: int | None = None
    offset: float = 0.0

    def __post_init__(self):
        lw = np.asarray(self.log_weights, dtype=float)
        object.__setattr__(self, "log_weights", lw)
        if lw.ndim != 2 or lw.shape[0] != lw.shape[1]:
            raise ValueError("log_weights must be a square matrix")
        if not np.any(np.isfinite(lw)):
            raise ValueError("all transitions forbidden")

    @property
    def n_states(self) -> int:
        return self.log_weights.shape[0]

    def transition_matrix(self) -> Array:
        A = np.exp(self.log_weights)
        A[~np.isfinite(self.log_weights)] = 0.0
        return A

    @staticmethod
    def from_matrix(A, digits=None, base=None, offset=0.0) -> "MarkovModel":
        """Build from the nonnegative matrix A = exp(psi); zeros forbid."""
        A = np.asarray(A, dtype=float)
        with np.errstate(divide="ignore"):
            lw = np.where(A > 0.0, np.log(np.maximum(A, 1e-300)), -np.inf)
        return MarkovModel(lw, digits=digits, base=base, offset=offset)

    def cylinder_interval(self, word: tuple[int, ...]) -> tuple[float, float]:
        """Geometric interval of the cylinder [a_0 ... a_{k-1}]."""
        if self.digits is None or self.base is None:
            raise ValueError("model has no cylinder geometry")
        lo = self.offset
        for i, a in enumerate(word):
            lo += self.digits[a] * self.base ** -(i + 1)
        return lo, lo + self.base ** -len(word)


def full_shift_model(digits, base: int, log_weight: float,
                     offset: float = 0.0) -> MarkovModel:
    """Full shift on the given digits with constant transition weight."""
    s = len(digits)
    return MarkovModel(np.full((s, s), float(log_weight)),
                       digits=tuple(int(d) for d in digits),
                       base=int(base), offset=float(offset))


def model_for(label: str, log_weight_shift: float = 0.0) -> MarkovModel:
    """Symbolic model of a built-in system for the geometric weight.

    psi = phi - log|slope| with constant phi = ``log_weight_shift``; the
    open_baker shares the ternary x-structure (its contracting direction
    carries no expansion).
    """
    if label in ("ternary_hole", "open_baker"):
        return full_shift_model((0, 2), 3, log_weight_shift - math.log(3.0))
    if label == "five_hole":
        return full_shift_model((0, 1, 2), 5, log_weight_shift - math.log(5.0))
    raise KeyError(f"no symbolic model for {label!r}")


def _perron_index(vals: Array) -> int:
    """Index of the Perron root: the largest (essentially) real eigenvalue."""
    real = np.abs(vals.imag) <= 1e-9 * (1.0 + np.abs(vals.real))
    idx = np.flatnonzero(real)
    return int(idx[np.argmax(vals.real[idx])])


def _perron_data(A: Array) -> tuple[float, Array, Array]:
    """Perron root with positive right/left vectors via a dense solve."""
    vals, vecs = np.linalg.eig(A)
    i = _perron_index(vals)
    lam = float(vals[i].real)
    r = np.abs(vecs[:, i].real)
    valsT, vecsT = np.linalg.eig(A.T)
    l = np.abs(vecsT[:, _perron_index(valsT)].real)
    return lam, r, l


def _irreducible(A: Array) -> bool:
    n = A.shape[0]
    reach = (A > 0).astype(np.int64) + np.eye(n, dtype=np.int64)
    for _ in range(int(math.ceil(math.log2(max(n, 2))))):
        reach = np.minimum(reach @ reach, 1)
    return bool(np.all(reach > 0))


def pressure_sft(model: MarkovModel) -> float:
    """Topological pressure: log of the Perron root of exp(log_weights).

    For a reducible weight matrix the spectral radius equals the maximum over
    its irreducible blocks, which is the right notion here (the dominant
    component wins).
    """
    A = model.transition_matrix()
    rho = float(np.max(np.abs(np.linalg.eigvals(A))))
    if rho <= 0.0:
        raise ValueError("zero transition matrix has no pressure")
    return math.log(rho)


@dataclass(eq=False)
class ReferenceMeasure:
    """Cylinder-level equilibrium measure at a fixed depth."""

    model: MarkovModel
    depth: int
    words: list[tuple[int, ...]]
    masses: Array

    def mass(self, word: tuple[int, ...]) -> float:
        try:
            return float(self.masses[self.words.index(tuple(word))])
        except ValueError:
            return 0.0

    def marginalize(self) -> "ReferenceMeasure":
        """Sum depth-k masses over the last symbol (yields depth k-1)."""
        if self.depth < 2:
            raise ValueError("cannot marginalize below depth 1")
        agg: dict[tuple[int, ...], float] = {}
        for w, m in zip(self.words, self.masses):
            agg[w[:-1]] = agg.get(w[:-1], 0.0) + float(m)
        words = sorted(agg)
        return ReferenceMeasure(self.model, self.depth - 1, words,
                                np.asarray([agg[w] for w in words]))

    def intervals(self) -> Array:
        return np.asarray([self.model.cylinder_interval(w) for w in self.words])

    def grid_projection(self, grid: GridPartition) -> Array:
        """Project onto grid cells, splitting each cylinder by overlap (1d)."""
        if grid.dimension != 1:
            raise ValueError("grid projection implemented for 1d grids")
        out = np.zeros(grid.n_cells)
        centers = grid.centers()[:, 0]
        h = grid.cell_volume
        lows = centers - h / 2.0
        for (lo, hi), m in zip(self.intervals(), self.masses):
            overlap = np.minimum(hi, lows + h) - np.maximum(lo, lows)
            overlap[overlap < 1e-12 * h] = 0.0  # drop roundoff slivers
            total = overlap.sum()
            if total > 0:
                out += m * overlap / total
        return out

    def write_csv(self, path, grid: GridPartition | None = None) -> None:
        """Write ``cylinder,mass`` rows; with a grid, append its projection."""
        from pathlib import Path

        lines = ["cylinder,mass"]
        lines.extend(f"{''.join(map(str, w))},{float(m)!r}"
                     for w, m in zip(self.words, self.masses))
        Path(path).write_text("\n".join(lines) + "\n")
        if grid is not None:
            proj = self.grid_projection(grid)
            out = Path(path).with_suffix(".projection.csv")
            rows = ["cell_index,mass"]
            rows.extend(f"{i},{float(v)!r}" for i, v in enumerate(proj))
            out.write_text("\n".join(rows) + "\n")

    def mean(self) -> float:
        iv = self.intervals()
        return float(np.sum(self.masses * iv.mean(axis=1)))

    def variance(self) -> float:
        """Variance with each cylinder's mass spread uniformly over its box."""
        iv = self.intervals()
        mid = iv.mean(axis=1)
        w = iv[:, 1] - iv[:, 0]
        second = float(np.sum(self.masses * (mid ** 2 + w ** 2 / 12.0)))
        return second - self.mean() ** 2


def equilibrium_cylinder_measure(model: MarkovModel, depth: int) -> ReferenceMeasure:
    """Parry-type Gibbs measure on depth-k cylinders.

    Requires the positive part of the transition matrix to be irreducible,
    so the Perron vectors are strictly positive and the chain (p, Q) below is
    well defined.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    A = model.transition_matrix()
    if not _irreducible(A):
        raise ValueError("transition matrix is reducible on its positive part")
    lam, r, l = _perron_data(A)
    p = l * r / float(l @ r)
    Q = A * r[None, :] / (lam * r[:, None])
    words: list[tuple[int, ...]] = []
    masses: list[float] = []
    for word in product(range(model.n_states), repeat=depth):
        m = p[word[0]]
        for a, b in zip(word, word[1:]):
            m *= Q[a][b]
        if m > 0.0:
            words.append(word)
            masses.append(float(m))
    return ReferenceMeasure(model, depth, words, np.asarray(masses))


# ---------------------------------------------------------------------------
# measure comparison
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TestDictionary:
    """Fixed dictionary {1} u {cos(2 pi k x_j)/(2 pi k), sin(...)/(2 pi k)}.

    Every non-constant member has Lipschitz constant at most 1 on the unit
    box, so the dictionary maximum is a weak-* discrepancy surrogate.
    """

    __test__ = False  # not a pytest class, despite the name

    k_max: int = 8
    dimension: int = 1

    def members(self):
        out = [("one", lambda x: np.ones(np.atleast_2d(x).shape[0]))]
        for j in range(self.dimension):
            for k in range(1, self.k_max + 1):
                c = 2.0 * math.pi * k
                out.append((f"cos{k}_x{j}",
                            lambda x, c=c, j=j: np.cos(c * np.atleast_2d(x)[:, j]) / c))
                out.append((f"sin{k}_x{j}",
                            lambda x, c=c, j=j: np.sin(c * np.atleast_2d(x)[:, j]) / c))
        return out


def weak_star_discrepancy(mu: Array, nu: Array, dictionary: TestDictionary,
                          grid: GridPartition) -> float:
    """max over dictionary members f of |sum_i (mu_i - nu_i) f(center_i)|."""
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != (grid.n_cells,) or nu.shape != (grid.n_cells,):
        raise ValueError("vectors do not match the grid")
    diff = mu - nu
    centers = grid.centers()
    return max(abs(float(np.dot(diff, f(centers))))
               for _, f in dictionary.members())


def w1_1d(mu: Array, nu: Array, grid: GridPartition) -> float:
    """Exact 1-Wasserstein distance between two grid vectors (1d).

    Computed as the integral of |CDF_mu - CDF_nu| with cell masses placed at
    cell centers; gaps between grid boxes contribute their own segments.
    """
    if grid.dimension != 1:
        raise ValueError("w1_1d requires a 1d grid")
    mu = np.asarray(mu, dtype=float)
    nu = np.asarray(nu, dtype=float)
    if mu.shape != (grid.n_cells,) or nu.shape != (grid.n_cells,):
        raise ValueError("vectors do not match the grid")
    centers = grid.centers()[:, 0]
    order = np.argsort(centers)
    h = grid.cell_volume
    cdf_diff = np.cumsum(mu[order] - nu[order])
    dist = float(np.sum(np.abs(cdf_diff)) * h)
    x = centers[order]
    gaps = x[1:] - x[:-1] - h
    big = gaps > 1e-12
    if np.any(big):
        dist += float(np.sum(np.abs(cdf_diff[:-1][big]) * gaps[big]))
    return dist
