"""Sparse symmetric linear algebra for Gaussian Markov random fields.

The precision matrices handled here are small to moderate (desk scale), so the
factorization is a plain left-looking sparse Cholesky written against CSC
arrays, preceded by a minimum-degree fill-reducing ordering. Marginal
variances come either from a dense inverse or from the Takahashi recursion
over the factor's sparsity pattern.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

from .errors import DimensionMismatch, NotPositiveDefinite, NotSymmetric, SingularConstraint

#: pivots at or below ``PIVOT_RTOL * max(diag)`` are treated as non-positive
PIVOT_RTOL = 1e-12
#: problems smaller than this keep their natural ordering
NATURAL_ORDER_BELOW = 64
#: marginal variances use a dense inverse up to this dimension
DENSE_THRESHOLD = 200

LOG_2PI = math.log(2.0 * math.pi)


@dataclass(frozen=True)
class SparsePrecision:
    """Symmetric sparse matrix stored as its lower triangle in CSC form.

    Structural symmetry holds by construction: only the lower triangle is
    kept and the upper triangle is implied. Use :meth:`from_matrix` to build
    one from any symmetric dense or sparse input.
    """

    lower: sp.csc_matrix

    def __post_init__(self):
        L = self.lower
        if L.shape[0] != L.shape[1]:
            raise DimensionMismatch(f"precision must be square, got {L.shape}")
        if L.shape[0] < 1:
            raise DimensionMismatch("precision must have n >= 1")

    @classmethod
    def from_matrix(cls, M, *, check_symmetric=True, atol=1e-12) -> "SparsePrecision":
        if sp.issparse(M):
            M = sp.csc_matrix(M, dtype=float)
        else:
            M = np.atleast_2d(np.asarray(M, dtype=float))
            if check_symmetric and M.shape[0] == M.shape[1]:
                if not np.allclose(M, M.T, rtol=0.0, atol=atol * max(1.0, np.abs(M).max())):
                    raise NotSymmetric("matrix is not symmetric")
            M = sp.csc_matrix(M)
        if M.shape[0] != M.shape[1]:
            raise DimensionMismatch(f"precision must be square, got {M.shape}")
        if check_symmetric and sp.issparse(M):
            diff = abs(M - M.T)
            scale = max(1.0, abs(M).max()) if M.nnz else 1.0
            if diff.nnz and diff.max() > atol * scale:
                raise NotSymmetric("matrix is not symmetric")
        lower = sp.tril(M, format="csc")
        lower.sort_indices()
        return cls(lower)

    @classmethod
    def identity(cls, n: int, scale: float = 1.0) -> "SparsePrecision":
        return cls(sp.identity(n, format="csc") * float(scale))

    @property
    def n(self) -> int:
        return self.lower.shape[0]

    @property
    def shape(self):
        return self.lower.shape

    @property
    def nnz(self) -> int:
        """Number of structural nonzeros of the full symmetric matrix."""
        cols = np.repeat(np.arange(self.n), np.diff(self.lower.indptr))
        n_diag = int(np.count_nonzero(self.lower.indices == cols))
        return 2 * self.lower.nnz - n_diag

    def full(self) -> sp.csc_matrix:
        L = self.lower
        upper = sp.triu(L.T, k=1, format="csc")
        out = (L + upper).tocsc()
        out.sort_indices()
        return out

    def toarray(self) -> np.ndarray:
        return self.full().toarray()

    def diagonal(self) -> np.ndarray:
        return self.lower.diagonal()

    def matvec(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[0] != self.n:
            raise DimensionMismatch(f"vector of length {x.shape[0]} for n={self.n}")
        return self.full() @ x

    def scaled(self, alpha: float) -> "SparsePrecision":
        return SparsePrecision((self.lower * float(alpha)).tocsc())

    def add_diagonal(self, d) -> "SparsePrecision":
        d = np.broadcast_to(np.asarray(d, dtype=float), (self.n,))
        return SparsePrecision((self.lower + sp.diags(d, format="csc")).tocsc())

    def __add__(self, other: "SparsePrecision") -> "SparsePrecision":
        if not isinstance(other, SparsePrecision):
            return NotImplemented
        if other.n != self.n:
            raise DimensionMismatch(f"cannot add n={self.n} and n={other.n}")
        return SparsePrecision((self.lower + other.lower).tocsc())

    def submatrix(self, keep) -> "SparsePrecision":
        """Principal submatrix on the (sorted) index set ``keep``."""
        keep = np.asarray(keep)
        full = self.full()[keep][:, keep]
        return SparsePrecision(sp.tril(full, format="csc"))


def block_diag(blocks) -> SparsePrecision:
    return SparsePrecision(sp.block_diag([b.lower for b in blocks], format="csc"))


@dataclass(frozen=True, eq=False)
class CholeskyFactor:
    """``P Q P^T = L L^T`` with ``L`` lower triangular.

    ``perm[i]`` is the original index placed at position ``i``, so the
    permuted matrix is ``Q[perm][:, perm]``.
    """

    n: int
    perm: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    logdet: float
    iperm: np.ndarray = field(repr=False)

    @property
    def L(self) -> sp.csc_matrix:
        return sp.csc_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    @property
    def diag(self) -> np.ndarray:
        return self.data[self.indptr[:-1]]

    def reconstruct(self) -> np.ndarray:
        """Dense ``P^T L L^T P``; intended for checks on small problems."""
        L = self.L.toarray()
        C = L @ L.T
        return C[np.ix_(self.iperm, self.iperm)]


def minimum_degree_order(Q: SparsePrecision) -> np.ndarray:
    """Greedy minimum-degree ordering on the explicit elimination graph.

    Ties are broken by the lowest index so the ordering is deterministic.
    """
    full = Q.full()
    n = Q.n
    adj = []
    for j in range(n):
        nb = set(full.indices[full.indptr[j]:full.indptr[j + 1]].tolist())
        nb.discard(j)
        adj.append(nb)
    heap = [(len(adj[v]), v) for v in range(n)]
    heapq.heapify(heap)
    done = np.zeros(n, dtype=bool)
    order = []
    while heap:
        deg, v = heapq.heappop(heap)
        if done[v] or deg != len(adj[v]):
            continue
        done[v] = True
        order.append(v)
        nbrs = adj[v]
        for u in nbrs:
            adj[u].discard(v)
            adj[u] |= nbrs
            adj[u].discard(u)
            heapq.heappush(heap, (len(adj[u]), u))
        adj[v] = set()
    return np.asarray(order, dtype=np.int64)


def _symbolic(C_lower_csr: sp.csr_matrix):
    """Column patterns of L and row patterns (left-looking update lists)."""
    n = C_lower_csr.shape[0]
    parent = np.full(n, -1, dtype=np.int64)
    mark = np.full(n, -1, dtype=np.int64)
    cols = [[] for _ in range(n)]
    rows = [[] for _ in range(n)]
    indptr, indices = C_lower_csr.indptr, C_lower_csr.indices
    for k in range(n):
        mark[k] = k
        for j in indices[indptr[k]:indptr[k + 1]]:
            if j >= k:
                continue
            while mark[j] != k:
                cols[j].append(k)
                rows[k].append(j)
                mark[j] = k
                if parent[j] == -1:
                    parent[j] = k
                j = parent[j]
    return cols, rows


def factorize(Q: SparsePrecision, ordering: str = "auto") -> CholeskyFactor:
    """Sparse Cholesky factorization with a fill-reducing permutation.

    Parameters
    ----------
    Q : SparsePrecision
    ordering : {"auto", "natural", "mindegree"}
        ``"auto"`` keeps the natural order below 64 unknowns and uses minimum
        degree otherwise.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is at or below ``1e-12 * max(diag(Q))``.
    """
    n = Q.n
    if ordering == "auto":
        ordering = "natural" if n < NATURAL_ORDER_BELOW else "mindegree"
    if ordering == "natural":
        perm = np.arange(n, dtype=np.int64)
    elif ordering == "mindegree":
        perm = minimum_degree_order(Q)
    else:
        raise ValueError(f"unknown ordering {ordering!r}")
    iperm = np.empty(n, dtype=np.int64)
    iperm[perm] = np.arange(n)

    full = Q.full()
    if ordering != "natural":
        full = full[perm][:, perm]
    C_lower = sp.tril(full, format="csc")
    C_lower.sort_indices()
    cols, rows = _symbolic(sp.tril(full, format="csr"))

    counts = np.fromiter((1 + len(c) for c in cols), dtype=np.int64, count=n)
    Lp = np.zeros(n + 1, dtype=np.int64)
    np.cumsum(counts, out=Lp[1:])
    Li = np.empty(Lp[-1], dtype=np.int64)
    for j in range(n):
        Li[Lp[j]] = j
        Li[Lp[j] + 1:Lp[j + 1]] = cols[j]
    Lx = np.zeros(Lp[-1])

    diag = C_lower.diagonal()
    max_diag = float(diag.max()) if n else 0.0
    tol = PIVOT_RTOL * max_diag if max_diag > 0 else 0.0
    nxt = Lp[:-1] + 1
    work = np.zeros(n)
    Cp, Ci, Cx = C_lower.indptr, C_lower.indices, C_lower.data
    for j in range(n):
        work[Ci[Cp[j]:Cp[j + 1]]] = Cx[Cp[j]:Cp[j + 1]]
        for k in rows[j]:
            q = nxt[k]
            end = Lp[k + 1]
            work[Li[q:end]] -= Lx[q] * Lx[q:end]
            nxt[k] = q + 1
        d = work[j]
        if not d > tol:
            raise NotPositiveDefinite(
                f"pivot {d:.3e} at column {int(perm[j])} is not above tolerance {tol:.3e}",
                column=int(perm[j]),
            )
        ljj = math.sqrt(d)
        s, e = Lp[j], Lp[j + 1]
        Lx[s] = ljj
        Lx[s + 1:e] = work[Li[s + 1:e]] / ljj
        work[Li[s:e]] = 0.0

    logdet = 2.0 * float(np.sum(np.log(Lx[Lp[:-1]])))
    return CholeskyFactor(n=n, perm=perm, indptr=Lp, indices=Li, data=Lx, logdet=logdet, iperm=iperm)


def _forward(F: CholeskyFactor, y):
    Lp, Li, Lx = F.indptr, F.indices, F.data
    for j in range(F.n):
        s, e = Lp[j], Lp[j + 1]
        y[j] /= Lx[s]
        if e > s + 1:
            y[Li[s + 1:e]] -= np.multiply.outer(Lx[s + 1:e], y[j])
    return y


def _backward(F: CholeskyFactor, y):
    Lp, Li, Lx = F.indptr, F.indices, F.data
    for j in range(F.n - 1, -1, -1):
        s, e = Lp[j], Lp[j + 1]
        if e > s + 1:
            y[j] -= Lx[s + 1:e] @ y[Li[s + 1:e]]
        y[j] /= Lx[s]
    return y


def solve(F: CholeskyFactor, b) -> np.ndarray:
    """Solve ``Q x = b`` for a vector or an ``n x m`` block of right-hand sides."""
    b = np.asarray(b, dtype=float)
    if b.ndim == 0 or b.shape[0] != F.n:
        raise DimensionMismatch(f"right-hand side has leading length {b.shape[:1]}, expected {F.n}")
    y = b[F.perm].copy()
    _forward(F, y)
    _backward(F, y)
    return y[F.iperm]


def sample(F: CholeskyFactor, mean, rng_seed: int | None = None, size: int | None = None) -> np.ndarray:
    """Draw from ``N(mean, Q^{-1})`` as ``mean + P^T L^{-T} z``.

    With ``size`` given the result has shape ``(size, n)``.
    """
    mean = np.asarray(mean, dtype=float)
    if mean.shape != (F.n,):
        raise DimensionMismatch(f"mean has shape {mean.shape}, expected ({F.n},)")
    rng = np.random.default_rng(rng_seed)
    if size is None:
        z = rng.standard_normal(F.n)
    else:
        z = rng.standard_normal((F.n, size))
    u = _backward(F, z)[F.iperm]
    if size is None:
        return mean + u
    return mean[None, :] + u.T


def selected_inverse(F: CholeskyFactor) -> np.ndarray:
    """Entries of ``(L L^T)^{-1}`` on the pattern of ``L`` (Takahashi recursion).

    The returned array is aligned with ``F.data``: position ``q`` holds
    ``Sigma[F.indices[q], j]`` for the column ``j`` owning ``q``, in the
    permuted ordering.
    """
    Lp, Li, Lx = F.indptr, F.indices, F.data
    S = np.zeros_like(Lx)
    col_pos = []
    for j in range(F.n):
        col_pos.append({int(r): q for q, r in zip(range(Lp[j], Lp[j + 1]), Li[Lp[j]:Lp[j + 1]])})
    for j in range(F.n - 1, -1, -1):
        s, e = Lp[j], Lp[j + 1]
        ljj = Lx[s]
        rows = Li[s + 1:e]
        lv = Lx[s + 1:e]
        if len(rows):
            # Sigma[k, i] for k, i in rows lives in column min(k, i), row max(k, i)
            m = len(rows)
            block = np.empty((m, m))
            for a in range(m):
                ka = int(rows[a])
                for b in range(a, m):
                    kb = int(rows[b])
                    block[a, b] = block[b, a] = S[col_pos[ka][kb]]
            S[s + 1:e] = -(lv @ block) / ljj
            S[s] = 1.0 / ljj**2 - (lv @ S[s + 1:e]) / ljj
        else:
            S[s] = 1.0 / ljj**2
    return S


def marginal_variances(F: CholeskyFactor, method: str = "auto", dense_threshold: int = DENSE_THRESHOLD) -> np.ndarray:
    """``diag(Q^{-1})`` from the factor.

    ``method="auto"`` inverts densely for ``n <= dense_threshold`` and runs
    the Takahashi recursion otherwise.
    """
    if method == "auto":
        method = "dense" if F.n <= dense_threshold else "takahashi"
    if method == "dense":
        Linv = sla.solve_triangular(F.L.toarray(), np.eye(F.n), lower=True)
        d = np.einsum("ij,ij->j", Linv, Linv)
    elif method == "takahashi":
        S = selected_inverse(F)
        d = S[F.indptr[:-1]]
    else:
        raise ValueError(f"unknown method {method!r}")
    return d[F.iperm]


@dataclass(frozen=True)
class ConstraintCorrection:
    """Bookkeeping for conditioning a Gaussian on ``A x = e``.

    ``V = Q^{-1} A^T`` and ``W = A V``. ``log_density_correction`` is
    ``-log pi(A x = e)`` under the unconstrained Gaussian, so that
    ``log pi(x | A x = e) = log pi(x) + log_density_correction`` for feasible x.
    """

    A: np.ndarray
    e: np.ndarray
    V: np.ndarray
    W: np.ndarray
    logdet_W: float
    log_density_correction: float
    _W_chol: tuple = field(repr=False)

    @property
    def k(self) -> int:
        return self.A.shape[0]

    def variance_reduction(self) -> np.ndarray:
        """``diag(V W^{-1} V^T)``, subtracted from unconstrained marginal variances."""
        WiVt = sla.cho_solve(self._W_chol, self.V.T)
        return np.einsum("ij,ji->i", self.V, WiVt)

    def apply(self, x) -> np.ndarray:
        r = self.A @ x - self.e
        return x - self.V @ sla.cho_solve(self._W_chol, r)


def constrain_sum_to_zero(mean, F: CholeskyFactor, constraint_rows, rhs=None):
    """Condition ``N(mean, Q^{-1})`` on ``A x = rhs`` by kriging.

    Returns the conditioned mean ``mean - Q^{-1} A^T (A Q^{-1} A^T)^{-1} (A mean - rhs)``
    and a :class:`ConstraintCorrection`. ``rhs`` defaults to zero, which gives
    the usual sum-to-zero conditioning when ``A`` holds rows of ones.
    """
    mean = np.asarray(mean, dtype=float)
    A = np.atleast_2d(np.asarray(constraint_rows, dtype=float))
    if A.shape[1] != F.n or mean.shape != (F.n,):
        raise DimensionMismatch(f"constraints {A.shape} / mean {mean.shape} do not match n={F.n}")
    k = A.shape[0]
    if k > F.n:
        raise SingularConstraint(f"{k} constraints on {F.n} unknowns")
    e = np.zeros(k) if rhs is None else np.asarray(rhs, dtype=float).reshape(k)
    V = solve(F, A.T)
    W = A @ V
    W = 0.5 * (W + W.T)
    try:
        Wc = sla.cho_factor(W, lower=True)
    except np.linalg.LinAlgError as exc:
        raise SingularConstraint("A Q^-1 A^T is not positive definite") from exc
    diagW = np.diag(Wc[0])
    if np.any(diagW <= math.sqrt(PIVOT_RTOL) * math.sqrt(np.max(np.diag(W)))):
        raise SingularConstraint("A Q^-1 A^T is numerically singular; constraint rows are dependent")
    logdet_W = 2.0 * float(np.sum(np.log(diagW)))
    r = A @ mean - e
    Wir = sla.cho_solve(Wc, r)
    corr = 0.5 * k * LOG_2PI + 0.5 * logdet_W + 0.5 * float(r @ Wir)
    info = ConstraintCorrection(A=A, e=e, V=V, W=W, logdet_W=logdet_W, log_density_correction=corr, _W_chol=Wc)
    return mean - V @ Wir, info
