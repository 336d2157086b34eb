"""Constructive spectral recovery of latent-type Markov panels.

A population of firms is a finite mixture of J types; within each type
the observed discrete state follows a first-order Markov chain. With
four periods, the type-specific initial distributions, transition
kernels, and mixing weights are recoverable from the joint distribution
alone, up to one common relabeling of the types. The algorithm
eigendecomposes a product of evaluation matrices built from slices of
the joint tensor at one reference slice, then transports the resulting
eigenvector basis to every other slice through cross-slice linear
maps, which preserve the column order by construction. All remaining
unknowns follow from rank-truncated least squares against the tensor.

Everything here is plain linear algebra on matrices no larger than
(S + 1) x S for supports of size S <= 12; there is no shared mutable
state, so batch recovery over many slices may run concurrently.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "DiscreteMixturePanel",
    "RecoveredSystem",
    "RecoveryConfig",
    "SpectralError",
    "SingularityError",
    "EigenSeparationError",
    "AlignmentError",
    "NumericalFailureError",
    "joint_from_system",
    "sample_joint",
    "build_Q",
    "eigen_recover",
    "align_permutations",
    "select_points",
    "recover_system",
    "check_rank_conditions",
    "recover_wage_and_psi",
    "match_to_truth",
    "discretize_panel",
    "empirical_joint",
]


class SpectralError(RuntimeError):
    """Base class for spectral recovery failures."""


class SingularityError(SpectralError):
    """An evaluation matrix is numerically singular."""


class EigenSeparationError(SpectralError):
    """Eigenvalues are complex or insufficiently separated."""


class AlignmentError(SpectralError):
    """Cross-slice alignment did not produce a clean permutation."""


class NumericalFailureError(SpectralError):
    """Recovered densities are negative beyond numerical noise."""


# ---------------------------------------------------------------------------
# domain types

@dataclass
class DiscreteMixturePanel:
    """Finite-support 4-period mixture-of-Markov-chains system.

    ``support`` lists the S distinct state values; ``g1`` is (J, S)
    with the type-specific initial distributions; ``kernels`` maps
    t in {2, 3, 4} to a (J, S, S) array of transitions from period
    t-1 to t (rows indexed by the origin state).
    """

    support: np.ndarray
    pi: np.ndarray
    g1: np.ndarray
    kernels: dict

    def __post_init__(self):
        self.support = np.asarray(self.support, dtype=float)
        self.pi = np.asarray(self.pi, dtype=float)
        self.g1 = np.asarray(self.g1, dtype=float)
        S, J = self.S, self.J
        if len(np.unique(self.support)) != S:
            raise ValueError("support values must be distinct")
        if self.g1.shape != (J, S):
            raise ValueError("g1 must be (J, S)")
        if abs(self.pi.sum() - 1.0) > 1e-12 or np.any(self.pi < 0):
            raise ValueError("pi must be a probability vector")
        if np.any(np.abs(self.g1.sum(axis=1) - 1.0) > 1e-12) or np.any(self.g1 < 0):
            raise ValueError("g1 rows must be probability vectors")
        if sorted(self.kernels) != [2, 3, 4]:
            raise ValueError("kernels must have keys {2, 3, 4}")
        for t in (2, 3, 4):
            ker = np.asarray(self.kernels[t], dtype=float)
            if ker.shape != (J, S, S):
                raise ValueError(f"kernel {t} must be (J, S, S)")
            if np.any(np.abs(ker.sum(axis=2) - 1.0) > 1e-12) or np.any(ker < 0):
                raise ValueError(f"kernel {t} rows must be probability vectors")
            self.kernels[t] = ker
        if np.any(self.kernels[3] <= 0):
            raise ValueError("kernel for t=3 must be strictly positive")

    @property
    def J(self) -> int:
        return self.pi.shape[0]

    @property
    def S(self) -> int:
        return self.support.shape[0]

    def permuted(self, perm) -> "DiscreteMixturePanel":
        """Relabel the types by ``perm`` (new j = old perm[j])."""
        perm = np.asarray(perm, dtype=int)
        return DiscreteMixturePanel(
            support=self.support.copy(),
            pi=self.pi[perm],
            g1=self.g1[perm],
            kernels={t: self.kernels[t][perm] for t in (2, 3, 4)},
        )

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "support": self.support.tolist(),
            "pi": self.pi.tolist(),
            "g1": self.g1.tolist(),
            "kernels": {str(t): self.kernels[t].tolist() for t in (2, 3, 4)},
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "DiscreteMixturePanel":
        return cls(
            support=np.asarray(d["support"]),
            pi=np.asarray(d["pi"]),
            g1=np.asarray(d["g1"]),
            kernels={int(t): np.asarray(k) for t, k in d["kernels"].items()},
        )

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)

    @classmethod
    def load_json(cls, path) -> "DiscreteMixturePanel":
        with open(path) as fh:
            return cls.from_json_dict(json.load(fh))


@dataclass
class RecoveredSystem:
    """Output of :func:`recover_system`: estimates up to one common
    relabeling of the types, plus the per-slice alignment applied."""

    pi_hat: np.ndarray
    g1_hat: np.ndarray
    kernels_hat: dict
    permutation: np.ndarray    # (S, J): eigen-order -> common order, per slice

    def to_json_dict(self) -> dict:
        return {
            "schema_version": 1,
            "pi_hat": self.pi_hat.tolist(),
            "g1_hat": self.g1_hat.tolist(),
            "kernels_hat": {str(t): self.kernels_hat[t].tolist() for t in (2, 3, 4)},
            "permutation": self.permutation.tolist(),
        }

    def save_json(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_json_dict(), fh)


@dataclass
class RecoveryConfig:
    """Evaluation points and tolerances for :func:`recover_system`.

    ``a_points`` and ``b_points`` default to one singleton group per
    support state, which makes every inversion a rank-truncated least
    squares over all cells of a slice. ``z3_bar`` maps each slice index
    z3 to its evaluation triple (z2_check, z2_bar, z3_bar); unset
    slices get the best-conditioned triple found by search, and
    ``z2_pair``, when set, restricts that search to one
    (z2_check, z2_bar). ``max_references`` caps how many reference
    slices contribute independent recoveries to the final median, and
    ``refine_iters`` bounds the likelihood-polish iterations.

    Tolerances: ``align_tol`` bounds the distance of an alignment
    matrix from an exact permutation in :func:`align_permutations`;
    entries of recovered densities below ``-neg_tol`` raise, entries in
    [-neg_tol, 0) are clipped to zero; eigenvalues with imaginary part
    or pairwise gap below ``complex_tol`` (relative to the spectral
    radius) raise; evaluation matrices whose rank-J condition number
    exceeds ``cond_bound`` raise. ``kernel_floor`` (default 1e-9) is
    the smallest kernel value a reference inversion may divide by;
    candidates are additionally required to stay within a factor of two
    of the best candidate.
    """

    a_points: np.ndarray = None
    b_points: np.ndarray = None
    z2_pair: tuple = None
    z3_bar: dict = field(default_factory=dict)
    z3_star: int = None
    align_tol: float = 1e-6
    neg_tol: float = 1e-8
    kernel_floor: float = None
    max_references: int = 8
    refine_iters: int = 500
    slice_scores: dict = field(default_factory=dict)
    complex_tol: float = 1e-8
    cond_bound: float = 1e12


# ---------------------------------------------------------------------------
# forward model

def joint_from_system(sys: DiscreteMixturePanel) -> np.ndarray:
    """Exact (S, S, S, S) joint tensor of the 4-period mixture."""
    g2, g3, g4 = sys.kernels[2], sys.kernels[3], sys.kernels[4]
    return np.einsum(
        "j,ja,jab,jbc,jcd->abcd", sys.pi, sys.g1, g2, g3, g4, optimize=True
    )


def sample_joint(joint: np.ndarray, n: int, seed: int) -> np.ndarray:
    """Empirical frequency tensor from ``n`` multinomial draws."""
    _validate_joint(joint)
    rng = np.random.default_rng(seed)
    counts = rng.multinomial(n, joint.ravel())
    return (counts / n).reshape(joint.shape)


def _validate_joint(joint):
    joint = np.asarray(joint, dtype=float)
    if joint.ndim != 4 or len(set(joint.shape)) != 1:
        raise ValueError("joint tensor must be S x S x S x S")
    if abs(joint.sum() - 1.0) > 1e-10:
        raise ValueError("joint tensor entries must sum to 1")
    if np.any(joint < 0):
        raise ValueError("joint tensor entries must be nonnegative")
    return joint


# ---------------------------------------------------------------------------
# evaluation matrices

def _as_groups(points, S: int, allow_overlap: bool = False):
    """Normalize evaluation points to disjoint state groups.

    Accepts a flat sequence of state indices (singleton groups) or a
    sequence of index sequences; returns a 0/1 indicator array of
    shape (n_groups, S). ``allow_overlap`` skips the distinctness
    check, which diagnostics use to report on degenerate point sets
    instead of rejecting them.
    """
    groups = []
    for p in points:
        groups.append(np.atleast_1d(np.asarray(p, dtype=int)))
    flat = np.concatenate(groups) if groups else np.empty(0, dtype=int)
    if not allow_overlap and len(np.unique(flat)) != flat.size:
        raise ValueError("evaluation points must be distinct")
    if flat.size and (flat.min() < 0 or flat.max() >= S):
        raise ValueError("evaluation points out of range")
    ind = np.zeros((len(groups), S))
    for g, idx in enumerate(groups):
        ind[g, idx] = 1.0
    return ind


def build_Q(joint, a_points, b_points, z2: int, z3: int) -> np.ndarray:
    """Evaluation matrix at slice (z2, z3).

    Column k corresponds to the first-period point (or group of
    points) a_k; the first row holds the three-period marginal
    g(a_k, z2, z3), and row r >= 1 holds the joint g(a_k, z2, z3, b_r).
    The matrix may be rectangular: extra rows and columns beyond the
    number of mixture components turn the later inversions into least
    squares over every cell of the slice, which suppresses sampling
    noise. Aggregating several states into one evaluation group is also
    valid because the mixture representation is linear in the tensor.
    """
    S = joint.shape[0]
    A = _as_groups(a_points, S)
    B = _as_groups(b_points, S)
    sl = joint[:, z2, z3, :]
    Q = np.empty((B.shape[0] + 1, A.shape[0]))
    Q[0] = A @ sl.sum(axis=1)
    Q[1:] = (A @ sl @ B.T).T
    return Q


def _rank_pinv(Q, J, cond_bound, what):
    """Rank-J pseudo-inverse of an evaluation matrix.

    Truncating at rank J projects sampling noise out of the redundant
    directions; raises when the J-th singular value is degenerate.
    """
    if not np.all(np.isfinite(Q)):
        raise SingularityError(f"{what} contains non-finite entries")
    U, s, Vt = np.linalg.svd(Q, full_matrices=False)
    if s[J - 1] <= 0 or s[0] > cond_bound * s[J - 1]:
        raise SingularityError(f"{what} is numerically singular at rank {J}")
    return (Vt[:J].T / s[:J]) @ U[:, :J].T


def _a_matrix(joint, a_pts, b_pts, J, z2_pair, z3, z3_bar, z3_star,
              cond_bound):
    """Transform whose nonzero eigenstructure carries one slice."""
    z2_check, z2_bar = z2_pair
    Q1 = build_Q(joint, a_pts, b_pts, z2_check, z3)
    Q2 = build_Q(joint, a_pts, b_pts, z2_check, z3_bar)
    Q3 = build_Q(joint, a_pts, b_pts, z2_bar, z3_bar)
    Q4 = build_Q(joint, a_pts, b_pts, z2_bar, z3_star)
    inv2 = _rank_pinv(Q2, J, cond_bound, f"Q(z2={z2_check}, z3={z3_bar})")
    inv4 = _rank_pinv(Q4, J, cond_bound, f"Q(z2={z2_bar}, z3={z3_star})")
    return Q1 @ inv2 @ Q3 @ inv4


def eigen_recover(joint, a_points, b_points, J, z2_pair, z3, z3_bar,
                  complex_tol=1e-8, cond_bound=1e12):
    """Eigenvector matrix for one slice, columns scaled to first row 1.

    The transform has exactly J structural eigenvalues; the remaining
    ones vanish up to sampling noise. Returns (L_tilde, eigvals) with
    the J structural eigenpairs sorted by descending real eigenvalue.
    """
    A = _a_matrix(joint, a_points, b_points, J, z2_pair, z3, z3_bar, z3,
                  cond_bound)
    w, V = np.linalg.eig(A)
    top = np.argsort(-np.abs(w))[:J]
    rest = np.argsort(-np.abs(w))[J:]
    scale = max(np.max(np.abs(w)), 1e-300)
    if rest.size and np.abs(w[rest[0]]) > 0.5 * np.abs(w[top[-1]]):
        raise EigenSeparationError(
            f"structural eigenvalues not separated from noise at "
            f"slice {z3}: {w}"
        )
    w, V = w[top], V[:, top]
    if np.max(np.abs(w.imag)) > complex_tol * scale:
        raise EigenSeparationError(
            f"complex eigenvalues at slice {z3}: {w}"
        )
    w = w.real
    order = np.argsort(-w)
    w = w[order]
    gaps = np.abs(np.subtract.outer(w, w))
    np.fill_diagonal(gaps, np.inf)
    if gaps.min() < complex_tol * scale:
        raise EigenSeparationError(
            f"repeated eigenvalues at slice {z3}: {w}"
        )
    V = np.real_if_close(V[:, order], tol=1e6)
    if np.iscomplexobj(V):
        V = V.real
    first = V[0]
    if np.min(np.abs(first)) < 1e-12 * np.max(np.abs(V)):
        raise EigenSeparationError(
            f"eigenvector with vanishing first entry at slice {z3}"
        )
    return V / first, w


def _permutation_deviation(P):
    """Distance of a column-normalized matrix from its closest
    permutation, found by brute force over all J! assignments."""
    J = P.shape[0]
    best_rows, best_dev = None, np.inf
    for rows in itertools.permutations(range(J)):
        rounded = np.zeros_like(P)
        rounded[list(rows), np.arange(J)] = 1.0
        dev = np.max(np.abs(P - rounded))
        if dev < best_dev:
            best_rows, best_dev = rows, dev
    rounded = np.zeros_like(P)
    rounded[list(best_rows), np.arange(J)] = 1.0
    return rounded, best_dev


def _column_match(L, L0):
    """Reorder the columns of ``L`` to best match ``L0``; returns the
    reordered matrix and the max-abs mismatch."""
    J = L.shape[1]
    best, best_dist = None, np.inf
    for p in itertools.permutations(range(J)):
        dist = np.max(np.abs(L[:, list(p)] - L0))
        if dist < best_dist:
            best, best_dist = list(p), dist
    return L[:, best], best_dist


def _closest_permutation(P, tol):
    """Round a near-permutation matrix; raise if not within ``tol``."""
    rounded, dev = _permutation_deviation(P)
    if dev > tol:
        raise AlignmentError(
            f"alignment matrix is not a permutation within {tol}: {P}"
        )
    return rounded


def align_permutations(L_tildes: dict, A_cross: dict, z3_star: int,
                       tol=1e-6):
    """Put every slice's eigenvector columns in the reference order.

    ``A_cross[z3]`` is the cross-slice transform linking slice ``z3``
    to the reference ``z3_star``; a list of transforms per slice is
    also accepted, in which case the one closest to producing an exact
    permutation wins. Returns (L_stars, perms) where perms[z3][q]
    names the eigen-order column placed at common position q.
    """
    L_ref = L_tildes[z3_star]
    L_stars, perms = {}, {}
    for z3, Lt in L_tildes.items():
        candidates = A_cross[z3]
        if not isinstance(candidates, (list, tuple)):
            candidates = [candidates]
        best_P, best_dev = None, np.inf
        for A in candidates:
            Dt = np.linalg.solve(Lt, A @ L_ref)
            diag = Dt.sum(axis=0)
            if np.min(np.abs(diag)) < 1e-300:
                continue
            P, dev = _permutation_deviation(Dt / diag[None, :])
            if dev < best_dev:
                best_P, best_dev = P, dev
        if best_P is None or best_dev > tol:
            raise AlignmentError(
                f"no cross-slice transform for slice {z3} yields a "
                f"permutation within {tol} (best deviation {best_dev})"
            )
        L_stars[z3] = Lt @ best_P
        perms[z3] = np.argmax(best_P, axis=0)
    return L_stars, perms


# ---------------------------------------------------------------------------
# evaluation-point selection

def _sigma_min(M):
    return float(np.linalg.svd(M, compute_uv=False)[-1])


def _eigen_score(L, w):
    gaps = np.abs(np.subtract.outer(w, w))
    np.fill_diagonal(gaps, np.inf)
    return gaps.min() / max(np.max(np.abs(w)), 1e-300) * _sigma_min(L)


def _smin_matrix(joint, A_ind, B_ind, J):
    """J-th singular value of every slice's evaluation matrix,
    indexed [z2, z3]."""
    m123 = joint.sum(axis=3)
    K, R = A_ind.shape[0], B_ind.shape[0]
    Q = np.empty(joint.shape[1:3] + (R + 1, K))
    Q[:, :, 0, :] = np.einsum("ka,abc->bck", A_ind, m123)
    Q[:, :, 1:, :] = np.einsum("ka,abcd,rd->bcrk", A_ind, joint, B_ind)
    s = np.linalg.svd(Q, compute_uv=False)
    return s[..., J - 1]


def _ranked_triples(smin, z3, z3_last, z2_pair, max_candidates=10):
    """Candidate (z2_check, z2_bar, z3_bar) triples for one slice,
    ranked by the worst conditioning among the four matrices used."""
    S = smin.shape[0]
    if z2_pair is not None:
        pairs = [tuple(z2_pair)]
    else:
        pairs = [(c, b) for c in range(S) for b in range(S) if c != b]
    scored = []
    for (z2c, z2b) in pairs:
        for zb in range(S):
            if zb == z3:
                continue
            sc = min(smin[z2c, z3], smin[z2c, zb],
                     smin[z2b, zb], smin[z2b, z3_last])
            scored.append((sc, (z2c, z2b, zb)))
    scored.sort(key=lambda t: -t[0])
    return [t[1] for t in scored[:max_candidates]]


def _slice_eigens(joint, J: int, cfg: "RecoveryConfig") -> dict:
    """Best eigendecomposition per slice, searching evaluation triples.

    For each slice z3, candidate (z2_check, z2_bar, z3_bar) triples are
    ranked by the conditioning of the four evaluation matrices they
    use; the candidate with the best separation-times-conditioning
    score wins. Returns a map z3 -> (L_tilde, chosen triple, score).
    """
    S = joint.shape[0]
    A_ind = _as_groups(cfg.a_points, S)
    B_ind = _as_groups(cfg.b_points, S)
    smin = _smin_matrix(joint, A_ind, B_ind, J)
    out = {}
    for z3 in range(S):
        if z3 in cfg.z3_bar:
            candidates = [cfg.z3_bar[z3]]
        else:
            candidates = _ranked_triples(smin, z3, z3, cfg.z2_pair)
        best, last_err = None, None
        for (z2c, z2b, zb) in candidates:
            try:
                L, w = eigen_recover(
                    joint, cfg.a_points, cfg.b_points, J, (z2c, z2b),
                    z3, zb, cfg.complex_tol, cfg.cond_bound,
                )
            except SpectralError as exc:
                last_err = exc
                continue
            score = _eigen_score(L, w)
            if best is None or score > best[2]:
                best = (L, (z2c, z2b, zb), score)
        if best is None:
            raise EigenSeparationError(
                f"no evaluation triple works for slice {z3}: {last_err}"
            )
        out[z3] = best
    return out


def select_points(joint, J: int, cfg: RecoveryConfig = None) -> RecoveryConfig:
    """Fill unset evaluation fields of ``cfg``.

    By default every state is its own evaluation point in the first
    and fourth periods, so each slice's evaluation matrix uses every
    cell of the slice and the rank-truncated inversions act as least
    squares. Per slice, the evaluation triple with the best-separated
    eigenstructure is kept; the reference slice is the best-scoring
    one overall.
    """
    joint = _validate_joint(joint)
    cfg = cfg or RecoveryConfig()
    S = joint.shape[0]
    if J < 1:
        raise ValueError("J must be positive")
    if J > S:
        raise ValueError("cannot separate more types than support points")
    if cfg.a_points is None:
        cfg.a_points = [[s] for s in range(S)]
    if cfg.b_points is None:
        cfg.b_points = [[s] for s in range(S)]
    if _as_groups(cfg.a_points, S).shape[0] < J:
        raise ValueError("need at least J first-period evaluation groups")
    if _as_groups(cfg.b_points, S).shape[0] < J - 1:
        raise ValueError("need at least J - 1 fourth-period evaluation groups")
    eigens = _slice_eigens(joint, J, cfg)
    for z3, (_, zb, sc) in eigens.items():
        cfg.z3_bar[z3] = zb
        cfg.slice_scores[z3] = sc
    if cfg.z3_star is None:
        cfg.z3_star = int(max(eigens, key=lambda z3: eigens[z3][2]))
    return cfg


# ---------------------------------------------------------------------------
# full recovery

def _clip_density(arr, neg_tol, what):
    arr = np.asarray(arr, dtype=float)
    low = arr.min()
    if low < -neg_tol:
        raise NumericalFailureError(
            f"recovered {what} has entries as low as {low}"
        )
    return np.clip(arr, 0.0, None)


def _normalize_rows(arr):
    s = arr.sum(axis=-1, keepdims=True)
    s = np.where(s <= 0, 1.0, s)
    return arr / s


def _recover_from_reference(joint, J, cfg, smin, A_ind, B_ind, z3s):
    """One full recovery anchored at reference slice ``z3s``.

    Eigendecomposes only the reference slice; every other slice's
    column matrix follows from a cross-slice linear map. Mapped columns
    inherit the reference order by construction, so no per-slice
    eigendecomposition or label alignment is needed, and sampling noise
    enters the spectral step exactly once. Returns the tuple
    (pi, g1, g2, g3, g4) with kernels indexed (type, origin, dest).
    """
    S = joint.shape[0]
    a_pts, b_pts = cfg.a_points, cfg.b_points
    ref_cands = []
    triples = [cfg.z3_bar[z3s]] + [
        t for t in _ranked_triples(smin, z3s, z3s, cfg.z2_pair)
        if t != cfg.z3_bar[z3s]
    ]
    for (c2c, c2b, czb) in triples:
        try:
            L, w = eigen_recover(joint, a_pts, b_pts, J, (c2c, c2b),
                                 z3s, czb, cfg.complex_tol, cfg.cond_bound)
        except SpectralError:
            continue
        ref_cands.append((L, _eigen_score(L, w)))
    if not ref_cands:
        raise EigenSeparationError(
            f"no evaluation triple works for reference slice {z3s}"
        )
    anchor = max(ref_cands, key=lambda t: t[1])[0]
    aligned = []
    for L, _ in ref_cands:
        Lp, dist = _column_match(L, anchor)
        if dist <= 0.5:
            aligned.append(Lp)
    L_ref = np.median(aligned, axis=0)
    L_stars = {z3s: L_ref}
    for z3 in range(S):
        if z3 == z3s:
            continue
        # every well-conditioned evaluation triple yields an estimate
        # of the same mapped matrix; the elementwise median over the
        # best-ranked triples suppresses noise
        cands = []
        for (c2c, c2b, czb) in _ranked_triples(smin, z3, z3s,
                                               cfg.z2_pair):
            try:
                A = _a_matrix(joint, a_pts, b_pts, J, (c2c, c2b), z3,
                              czb, z3s, cfg.cond_bound)
            except SingularityError:
                continue
            Lc = A @ L_ref
            if not np.all(np.isfinite(Lc)):
                continue
            first = Lc[0]
            if np.min(np.abs(first)) <= 1e-12 * max(np.max(np.abs(Lc)), 1e-300):
                continue
            cands.append(Lc / first)
        if not cands:
            raise AlignmentError(
                f"no evaluation triple maps slice {z3} to the reference"
            )
        L_stars[z3] = np.median(cands, axis=0)

    m2 = joint.sum(axis=(0, 2, 3))
    if np.any(m2 <= 0):
        raise NumericalFailureError(
            "a second-period state has no probability mass"
        )
    m23 = joint.sum(axis=(0, 3))
    m123 = joint.sum(axis=3)
    m234 = joint.sum(axis=0)

    # period-3 kernel: solve each slice for the weighted kernel values,
    # then normalize over the destination state
    d = np.empty((S, S, J))      # [z2, z3, j]
    for z3 in range(S):
        r = np.empty((S, B_ind.shape[0] + 1))    # rows z2
        r[:, 0] = m23[:, z3] / m2
        r[:, 1:] = (m234[:, z3, :] @ B_ind.T) / m2[:, None]
        d[:, z3, :] = np.linalg.lstsq(L_stars[z3], r.T, rcond=None)[0].T
    d = _clip_density(d, cfg.neg_tol, "period-3 kernel weights")
    g3 = d / np.where(d.sum(axis=1, keepdims=True) <= 0, 1.0,
                      d.sum(axis=1, keepdims=True))   # [z2, z3, j]

    # the remaining inversions condition on a (reference slice, origin)
    # pair and divide by the kernel values there, so both the slice
    # matrix and those kernel values must sit safely away from zero.
    # Every valid pair estimates the same object; elementwise medians
    # over pairs suppress noise.
    floor = cfg.kernel_floor if cfg.kernel_floor is not None else 1e-9
    g3min = np.where(d.min(axis=2) > 0, g3.min(axis=2), -np.inf)  # [z2, z3]
    sig = np.array([_sigma_min(L_stars[z3]) for z3 in range(S)])
    sig_ok = sig >= 0.2 * sig.max()

    def _usable(quality):
        """Keep candidates whose division values are within a factor
        of two of the best candidate's, never below the floor."""
        best = quality.max()
        if best <= floor:
            return np.zeros_like(quality, dtype=bool)
        return quality >= max(floor, 0.5 * best)

    # second-period evaluation matrices, one per usable (reference, origin)
    Lbar_T = {}
    for z3r in range(S):
        if not sig_ok[z3r]:
            continue
        Lr_inv = _rank_pinv(L_stars[z3r], J, cfg.cond_bound,
                            "mapped slice matrix")
        for z2 in np.flatnonzero(_usable(g3min[:, z3r])):
            Qr = build_Q(joint, a_pts, b_pts, int(z2), z3r)
            Lbar_T[z3r, int(z2)] = (Lr_inv @ Qr) / g3[z2, z3r, :][:, None]

    # period-4 kernel
    g4 = np.empty((J, S, S))
    for z3 in range(S):
        pairs = [(key, Lb) for key, Lb in Lbar_T.items()
                 if np.linalg.cond(Lb) <= cfg.cond_bound]
        quality = np.array([min(g3min[z2g, z3r], g3min[z2g, z3])
                            for (z3r, z2g), _ in pairs])
        if not pairs or quality.max() <= floor:
            raise NumericalFailureError(f"no valid origin state for slice {z3}")
        keep = _usable(quality)
        estimates = []
        for ok, ((z3r, z2g), Lb) in zip(keep, pairs):
            if not ok:
                continue
            p = A_ind @ joint[:, z2g, z3, :]     # (n_groups, S) over z4
            ell = (p.T @ np.linalg.pinv(Lb)) / g3[z2g, z3, :][None, :]
            estimates.append(ell.T)
        g4[:, z3, :] = np.median(estimates, axis=0)
    g4 = _normalize_rows(_clip_density(g4, cfg.neg_tol, "period-4 kernel"))

    # joint weight of (type, z1, z2): pi^j g1^j(z1) g2^j(z2 | z1)
    lam2 = np.empty((S, S, J))
    for z2 in range(S):
        quality = np.where(sig_ok, g3min[z2, :], -np.inf)
        if quality.max() <= floor:
            raise NumericalFailureError(
                f"no valid reference slice for origin state {z2}"
            )
        estimates = []
        for z3r in np.flatnonzero(_usable(quality)):
            pbar = np.empty((S, B_ind.shape[0] + 1))  # rows z1
            pbar[:, 0] = m123[:, z2, z3r]
            pbar[:, 1:] = joint[:, z2, z3r, :] @ B_ind.T
            estimates.append(
                np.linalg.lstsq(L_stars[z3r], pbar.T, rcond=None)[0].T
                / g3[z2, z3r, :][None, :])
        lam2[:, z2, :] = np.median(estimates, axis=0)
    lam2 = _clip_density(lam2, cfg.neg_tol, "type-weighted joint of first two periods")

    pi = lam2.sum(axis=(0, 1))
    pi = pi / pi.sum()
    g1 = _normalize_rows(lam2.sum(axis=1).T)     # (J, S)
    denom = lam2.sum(axis=1)[:, None, :]         # (S1, 1, J)
    g2 = np.where(denom > 0, lam2 / np.where(denom <= 0, 1.0, denom), 1.0 / S)
    g2 = _normalize_rows(np.moveaxis(g2, 2, 0))  # (J, S, S)
    g3 = _normalize_rows(np.moveaxis(g3, 2, 0))  # (J, z2, z3)
    return pi, g1, g2, g3, g4


def _em_refine(joint, pi, g1, g2, g3, g4, iters, tol=1e-12):
    """Maximum-likelihood polish of a recovered system.

    The joint tensor is a finite mixture over cell paths, so a few EM
    iterations started from the constructive estimate converge to the
    local maximum-likelihood fit of the tensor. On an exact tensor the
    constructive estimate already is that fit, so this is a no-op up to
    numerical noise; on a sampled tensor it shrinks estimation error to
    the statistical limit.
    """
    w = joint
    eps = 1e-300
    prev = -np.inf
    for _ in range(max(0, iters)):
        like = (
            pi[:, None, None, None, None]
            * g1[:, :, None, None, None]
            * g2[:, :, :, None, None]
            * g3[:, None, :, :, None]
            * g4[:, None, None, :, :]
        )
        tot = like.sum(axis=0)
        # cells with data mass but zero model probability must drag the
        # likelihood down, not silently drop out of the sum
        ll = float(np.sum(w * np.where(w > 0,
                                       np.log(np.clip(tot, eps, None)), 0.0)))
        resp = like / np.where(tot > 0, tot, 1.0)[None]
        Wj = resp * w[None]
        pi = Wj.sum(axis=(1, 2, 3, 4))
        pi = np.where(pi > 0, pi, eps)
        pi = pi / pi.sum()
        n1 = Wj.sum(axis=(2, 3, 4))
        g1 = _normalize_rows(n1)
        g2 = _normalize_rows(Wj.sum(axis=(3, 4)))
        g3 = _normalize_rows(Wj.sum(axis=(1, 4)))
        g4 = _normalize_rows(Wj.sum(axis=(1, 2)))
        if abs(ll - prev) < tol * max(1.0, abs(ll)):
            break
        prev = ll
    like = (
        pi[:, None, None, None, None]
        * g1[:, :, None, None, None]
        * g2[:, :, :, None, None]
        * g3[:, None, :, :, None]
        * g4[:, None, None, :, :]
    ).sum(axis=0)
    ll = float(np.sum(w * np.where(w > 0,
                                   np.log(np.clip(like, eps, None)), 0.0)))
    return (pi, g1, g2, g3, g4), ll


def _family_stack(result):
    """Per-type fingerprint used to align recoveries across references."""
    _, _, _, g3, g4 = result
    J = g3.shape[0]
    return np.hstack([g3.reshape(J, -1), g4.reshape(J, -1)])


def recover_system(joint, J: int, config: RecoveryConfig = None) -> RecoveredSystem:
    """Recover mixing weights, initial distributions and all kernels.

    Works on an exact or empirical joint tensor; the output is exact up
    to one common relabeling of the types when the tensor is exact and
    the rank conditions hold at the selected evaluation points. On
    sampled tensors, independent recoveries anchored at the
    best-conditioned reference slices are combined by an elementwise
    median after matching their type labels.
    """
    joint = _validate_joint(joint)
    cfg = select_points(joint, J, config)
    S = joint.shape[0]
    A_ind = _as_groups(cfg.a_points, S)
    B_ind = _as_groups(cfg.b_points, S)
    smin = _smin_matrix(joint, A_ind, B_ind, J)

    refs = sorted(cfg.slice_scores, key=lambda z: -cfg.slice_scores[z])
    if cfg.z3_star in refs:
        refs.remove(cfg.z3_star)
    refs = [cfg.z3_star] + refs
    refs = refs[:max(1, cfg.max_references)]

    results, last_err = [], None
    for z3s in refs:
        try:
            results.append(_recover_from_reference(
                joint, J, cfg, smin, A_ind, B_ind, z3s))
        except SpectralError as exc:
            last_err = exc
    if not results:
        raise NumericalFailureError(
            f"recovery failed at every reference slice: {last_err}"
        )

    anchor = _family_stack(results[0])
    stacked = {k: [] for k in range(5)}
    for res in results:
        fp = _family_stack(res)
        best_p, best_dist = None, np.inf
        for p in itertools.permutations(range(J)):
            dist = np.max(np.abs(fp[list(p)] - anchor))
            if dist < best_dist:
                best_p, best_dist = list(p), dist
        pi, g1, g2, g3, g4 = res
        for k, arr in enumerate((pi[best_p], g1[best_p], g2[best_p],
                                 g3[best_p], g4[best_p])):
            stacked[k].append(arr)

    pi = np.median(stacked[0], axis=0)
    pi = pi / pi.sum()
    g1 = _normalize_rows(np.median(stacked[1], axis=0))
    g2 = _normalize_rows(np.median(stacked[2], axis=0))
    g3 = _normalize_rows(np.median(stacked[3], axis=0))
    g4 = _normalize_rows(np.median(stacked[4], axis=0))

    # polish from the combined estimate and from each per-reference
    # estimate, keeping the best likelihood: individual references can
    # sit in a better basin than their median
    starts = [(pi, g1, g2, g3, g4)]
    for k in range(len(stacked[0])):
        starts.append(tuple(stacked[f][k] for f in range(5)))
    # iterations preserve exact zeros, so nudge clipped entries off
    # zero to let the polish reassign their mass
    starts = [tuple(_normalize_rows(np.asarray(a, dtype=float) + 1e-10)
                    for a in start) for start in starts]
    best, best_ll = None, -np.inf
    for start in starts:
        refined, ll = _em_refine(joint, *start, cfg.refine_iters)
        if ll > best_ll:
            best, best_ll = refined, ll
    pi, g1, g2, g3, g4 = best

    permutation = np.tile(np.arange(J), (S, 1))
    return RecoveredSystem(
        pi_hat=pi, g1_hat=g1,
        kernels_hat={2: g2, 3: g3, 4: g4},
        permutation=permutation,
    )


# ---------------------------------------------------------------------------
# diagnostics

def check_rank_conditions(sys: DiscreteMixturePanel, a_points, b_points,
                          z2_pair, z3, z3_bar, z3_star,
                          cond_tol: float = 1e12,
                          gap_tol: float = 1e-10,
                          sigma_tol: float = 0.0) -> dict:
    """Condition numbers and separation gaps at given evaluation points.

    Diagnostic only: reports whether the evaluation matrices implied by
    the ground-truth system are invertible (at rank J, since the
    matrices may have redundant rows or columns) and whether the
    eigenvalue ratios that drive the spectral step are distinct.
    ``cond_tol`` flags a matrix as singular; ``gap_tol`` is the minimum
    relative gap between eigenvalue ratios; ``sigma_tol`` optionally
    requires the J-th singular value of each matrix to clear an
    absolute floor (useful for screening systems before recovery on
    noisy tensors, where the J-th singular value sets how much sampling
    noise the inversions amplify).
    """
    J = sys.J
    A_ind = _as_groups(a_points, sys.S, allow_overlap=True)
    B_ind = _as_groups(b_points, sys.S, allow_overlap=True)
    z2c, z2b = z2_pair

    def L_of(z3v):
        # column j: (1, destination-group masses of kernel 4 from z3v)
        L = np.ones((B_ind.shape[0] + 1, J))
        L[1:] = B_ind @ sys.kernels[4][:, z3v, :].T
        return L

    def Lbar_of(z2v):
        # column j holds pi^j sum over group k of g1^j(a) g2^j(z2 | a)
        return sys.pi[None, :] * (A_ind @ (sys.g1 * sys.kernels[2][:, :, z2v]).T)

    def d_of(z3v, z2v):
        return sys.kernels[3][:, z2v, z3v]

    report = {
        "J": J,
        "a_points": [np.atleast_1d(np.asarray(p, dtype=int)).tolist()
                     for p in a_points],
        "b_points": [np.atleast_1d(np.asarray(p, dtype=int)).tolist()
                     for p in b_points],
    }
    mats = {
        "L_z3_star": L_of(z3_star),
        "L_z3": L_of(z3),
        "L_z3_bar": L_of(z3_bar),
        "Lbar_z2_check": Lbar_of(z2c),
        "Lbar_z2_bar": Lbar_of(z2b),
    }
    for name, M in mats.items():
        svals = np.linalg.svd(M, compute_uv=False)
        sj = float(svals[J - 1]) if svals.size >= J else 0.0
        c = float(svals[0] / sj) if sj > 0 else float("inf")
        report[f"cond_{name}"] = c
        report[f"sigma_J_{name}"] = sj
        report[f"singular_{name}"] = bool(
            not np.isfinite(c) or c > cond_tol or sj < sigma_tol
        )
    ratios = (d_of(z3, z2c) / d_of(z3_bar, z2c)
              * d_of(z3_bar, z2b) / d_of(z3, z2b))
    gaps = np.abs(np.subtract.outer(ratios, ratios))
    np.fill_diagonal(gaps, np.inf)
    report["eigen_ratio_diag"] = ratios.tolist()
    report["min_eigen_gap"] = float(gaps.min())
    report["ok"] = bool(
        not any(report[f"singular_{n}"] for n in mats)
        and report["min_eigen_gap"] > gap_tol * max(np.max(np.abs(ratios)), 1e-300)
    )
    return report


def rank_report_rows(report: dict) -> list:
    """Flatten a rank-condition report to (key, value) CSV rows."""
    return [(k, report[k]) for k in sorted(report)]


# ---------------------------------------------------------------------------
# permutation matching and wage recovery

def match_to_truth(truth: DiscreteMixturePanel, rec: RecoveredSystem):
    """Best relabeling of the recovered types against the truth.

    Searches all J! relabelings; returns (perm, errors) where applying
    ``perm`` to the recovered objects (new j = recovered perm[j])
    minimizes the total max-abs error, and ``errors`` holds the
    per-family max-abs errors at that relabeling.
    """
    J = truth.J
    best_perm, best_total = None, np.inf
    for perm in itertools.permutations(range(J)):
        p = list(perm)
        total = (
            np.max(np.abs(rec.pi_hat[p] - truth.pi))
            + np.max(np.abs(rec.g1_hat[p] - truth.g1))
            + sum(np.max(np.abs(rec.kernels_hat[t][p] - truth.kernels[t]))
                  for t in (2, 3, 4))
        )
        if total < best_total:
            best_total, best_perm = total, p
    p = best_perm
    errors = {
        "pi": float(np.max(np.abs(rec.pi_hat[p] - truth.pi))),
        "g1": float(np.max(np.abs(rec.g1_hat[p] - truth.g1))),
        "g2": float(np.max(np.abs(rec.kernels_hat[2][p] - truth.kernels[2]))),
        "g3": float(np.max(np.abs(rec.kernels_hat[3][p] - truth.kernels[3]))),
        "g4": float(np.max(np.abs(rec.kernels_hat[4][p] - truth.kernels[4]))),
    }
    return np.asarray(p, dtype=int), errors


def recover_wage_and_psi(pi, mean_log_wagebill):
    """Wage level and type-specific labor quality from wage-bill means.

    ``mean_log_wagebill`` holds per-type means of the log wage bill,
    shape (..., J) for any number of leading period axes. Returns
    (P_L, psi) with log P_L = log sum_j pi_j exp(mean_j) and
    psi_j = mean_j - log P_L, so that sum_j pi_j exp(psi_j) = 1.
    """
    pi = np.asarray(pi, dtype=float)
    e = np.asarray(mean_log_wagebill, dtype=float)
    if pi.ndim != 1 or e.shape[-1] != pi.shape[0]:
        raise ValueError("mean_log_wagebill must have trailing length J")
    shift = e.max(axis=-1, keepdims=True)
    log_pl = (shift + np.log(np.sum(pi * np.exp(e - shift), axis=-1,
                                    keepdims=True)))
    psi = e - log_pl
    return np.exp(np.squeeze(log_pl, axis=-1)), psi


# ---------------------------------------------------------------------------
# discretization bridge

def discretize_panel(values, n_bins: int = 3):
    """Quantile-bin continuous panel observations into composite states.

    ``values`` is (n, T) for a scalar observable or (n, T, d) for a
    vector one. Each coordinate is split at pooled sample quantiles
    into ``n_bins`` bins; the composite state index runs over the
    n_bins**d grid. Returns (states, edges) with states shaped (n, T).
    """
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise ValueError("values must be (n, T) or (n, T, d)")
    n, T, dim = arr.shape
    states = np.zeros((n, T), dtype=int)
    edges = []
    for c in range(dim):
        pooled = arr[:, :, c].ravel()
        qs = np.quantile(pooled, np.linspace(0, 1, n_bins + 1)[1:-1])
        edges.append(qs)
        codes = np.searchsorted(qs, arr[:, :, c], side="right")
        states = states * n_bins + codes
    return states, edges


def empirical_joint(states, S: int) -> np.ndarray:
    """Frequency tensor of 4-period state paths, shape (S, S, S, S)."""
    st = np.asarray(states, dtype=int)
    if st.ndim != 2 or st.shape[1] != 4:
        raise ValueError("states must be (n, 4)")
    if st.min() < 0 or st.max() >= S:
        raise ValueError("state indices out of range")
    joint = np.zeros((S, S, S, S))
    np.add.at(joint, (st[:, 0], st[:, 1], st[:, 2], st[:, 3]), 1.0)
    return joint / st.shape[0]
