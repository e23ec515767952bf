"""Latent-space kernel matrices built from softmax feature maps.

A kernel over an ``h x w`` grid is assembled from square patches centred on a
(possibly strided) subset of sites. For the linear family each softmax
feature ``m`` defines a rectangular matrix ``Kbar_m`` whose row for centre
``i`` holds ``b_m[j]`` for every member ``j`` of the patch, and

    K = sum_m Kbar_m^T diag(1 / rowsum(Kbar_m)) Kbar_m

The Gaussian family replaces ``Kbar`` by ``exp(-|b_i - b_j|^2 / (2 sigma))``
over the same patches and normalises by its row sums.

Three evaluation routes exist: :func:`build_kernel` assembles an explicit CSR
matrix, :func:`dense_oracle` evaluates the defining sums densely for tests,
and :func:`kernel_features` computes ``K @ alpha`` on batched tensors without
forming ``K`` so gradients reach both ``b`` and ``alpha``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal, Optional

import numpy as np
import scipy.sparse as sp

from .autodiff import Tensor, box_sum, clip, exp, shift, sparse_matvec
from .autodiff.tensor import ShapeError

Family = Literal["linear", "rbf"]
RBF_SIGMA = 0.01


class CoverageError(ValueError):
    """A grid pixel belongs to no patch."""


class KernelDomainError(ValueError):
    pass


def patch_offsets(p: int) -> tuple[int, int]:
    """Inclusive offset range ``(lo, hi)`` of a side-``p`` patch around its centre.

    Odd ``p`` is symmetric; even ``p`` extends one further towards +x/+y.
    """
    if p < 1:
        raise ValueError(f"patch side must be >= 1, got {p}")
    return -((p - 1) // 2), p // 2


def center_positions(h: int, w: int, s: int) -> tuple[np.ndarray, np.ndarray]:
    return np.arange(0, h, s), np.arange(0, w, s)


def center_mask(h: int, w: int, s: int, dtype=np.float64) -> np.ndarray:
    mask = np.zeros((h, w), dtype=dtype)
    mask[::s, ::s] = 1.0
    return mask


def check_coverage(h: int, w: int, p: int, s: int) -> None:
    """Raise :class:`CoverageError` naming the first pixel no patch covers."""
    lo, hi = patch_offsets(p)
    for size, axis in ((h, "y"), (w, "x")):
        covered = np.zeros(size, dtype=bool)
        for c in range(0, size, s):
            covered[max(c + lo, 0) : min(c + hi, size - 1) + 1] = True
        if not covered.all():
            missing = int(np.argmin(covered))
            other = "x=0" if axis == "y" else "y=0"
            raise CoverageError(
                f"pixel ({axis}={missing}, {other}) is covered by no patch (p={p}, s={s}, grid {h}x{w})"
            )


@dataclass(frozen=True)
class PatchTable:
    h: int
    w: int
    p: int
    s: int
    centers: np.ndarray
    members: tuple[np.ndarray, ...] = field(repr=False)

    @property
    def n(self) -> int:
        return self.h * self.w

    @property
    def n_centers(self) -> int:
        return len(self.centers)

    def coo(self) -> tuple[np.ndarray, np.ndarray]:
        """Row (centre ordinal) and column (pixel) index of every patch member."""
        rows = np.repeat(np.arange(self.n_centers), [len(m) for m in self.members])
        cols = np.concatenate(self.members) if self.members else np.zeros(0, dtype=np.int64)
        return rows, cols


def build_patch_table(h: int, w: int, p: int, s: int = 1) -> PatchTable:
    if h < 1 or w < 1:
        raise ValueError("grid must be non-empty")
    if p < 1:
        raise ValueError(f"patch side must be >= 1, got {p}")
    if not 1 <= s <= p:
        raise ValueError(f"stride must satisfy 1 <= s <= p, got s={s}, p={p}")
    check_coverage(h, w, p, s)
    lo, hi = patch_offsets(p)
    ys, xs = center_positions(h, w, s)
    centers, members = [], []
    for y in ys:
        my = np.arange(max(y + lo, 0), min(y + hi, h - 1) + 1)
        for x in xs:
            mx = np.arange(max(x + lo, 0), min(x + hi, w - 1) + 1)
            centers.append(y * w + x)
            members.append((my[:, None] * w + mx[None, :]).ravel())
    return PatchTable(h, w, p, s, np.asarray(centers, dtype=np.int64), tuple(members))


@dataclass(frozen=True)
class SparseKernel:
    """Immutable CSR kernel matrix plus its construction parameters."""

    h: int
    w: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray
    p: int
    s: int
    family: str = "linear"
    sigma: Optional[float] = None

    @property
    def n(self) -> int:
        return self.h * self.w

    def to_scipy(self) -> sp.csr_matrix:
        return sp.csr_matrix((self.data, self.indices, self.indptr), shape=(self.n, self.n))

    def todense(self) -> np.ndarray:
        return self.to_scipy().toarray()

    @property
    def nnz(self) -> int:
        return len(self.data)


def _validate_b(b: np.ndarray, table: PatchTable) -> np.ndarray:
    b = np.asarray(b, dtype=np.float64)
    if b.ndim != 3 or b.shape[:2] != (table.h, table.w):
        raise ShapeError(f"softmax features must be [{table.h},{table.w},Nb], got {b.shape}")
    return b


def _assemble(kbar: sp.csr_matrix, table: PatchTable) -> sp.csr_matrix:
    rowsum = np.asarray(kbar.sum(axis=1)).ravel()
    if np.any(rowsum <= 0):
        raise KernelDomainError("patch normaliser is not positive")
    return (kbar.T @ sp.diags(1.0 / rowsum) @ kbar).tocsr()


def _from_scipy(mat: sp.csr_matrix, table: PatchTable, family: str, sigma) -> SparseKernel:
    mat = mat.tocsr()
    mat.sum_duplicates()
    mat.sort_indices()
    return SparseKernel(
        table.h, table.w, mat.indptr.copy(), mat.indices.copy(), mat.data.copy(),
        table.p, table.s, family, sigma,
    )


def build_kernel(b, table: PatchTable) -> SparseKernel:
    """Linear latent-space kernel from softmax features ``b`` of shape ``[h, w, Nb]``."""
    b = _validate_b(b, table)
    if np.any(b <= 0):
        raise KernelDomainError("softmax features must be strictly positive")
    rows, cols = table.coo()
    flat = b.reshape(table.n, -1)
    shape = (table.n_centers, table.n)
    total = sp.csr_matrix((table.n, table.n))
    for m in range(flat.shape[1]):
        kbar = sp.csr_matrix((flat[cols, m], (rows, cols)), shape=shape)
        total = total + _assemble(kbar, table)
    return _from_scipy(total, table, "linear", None)


def rbf_affinity(bi, bj, sigma: float = RBF_SIGMA):
    """Gaussian affinity ``exp(-|bi - bj|^2 / (2 sigma))`` over the last axis."""
    d2 = np.sum((np.asarray(bi) - np.asarray(bj)) ** 2, axis=-1)
    return np.exp(-d2 / (2.0 * sigma))


def build_kernel_rbf(b, table: PatchTable, sigma: float = RBF_SIGMA) -> SparseKernel:
    if sigma <= 0:
        raise KernelDomainError(f"sigma must be positive, got {sigma}")
    b = _validate_b(b, table)
    rows, cols = table.coo()
    flat = b.reshape(table.n, -1)
    vals = rbf_affinity(flat[table.centers[rows]], flat[cols], sigma)
    kbar = sp.csr_matrix((vals, (rows, cols)), shape=(table.n_centers, table.n))
    return _from_scipy(_assemble(kbar, table), table, "rbf", sigma)


def make_kernel(b, table: PatchTable, family: Family = "linear", sigma: float = RBF_SIGMA) -> SparseKernel:
    if family == "linear":
        return build_kernel(b, table)
    if family == "rbf":
        return build_kernel_rbf(b, table, sigma)
    raise ValueError(f"unknown kernel family {family!r}")


def apply_kernel(kernel: SparseKernel, alpha):
    """``K @ vec(alpha)`` reshaped to the grid; accepts arrays or tensors."""
    as_tensor = isinstance(alpha, Tensor)
    t = alpha if as_tensor else Tensor(np.asarray(alpha, dtype=np.float64))
    if t.shape[-2:] != (kernel.h, kernel.w):
        raise ShapeError(f"code vector shape {t.shape} does not match grid {kernel.h}x{kernel.w}")
    flat_shape = t.shape[:-2] + (kernel.n,)
    out = sparse_matvec(kernel, t.reshape(flat_shape)).reshape(t.shape)
    return out if as_tensor else out.data


def kernel_row(kernel: SparseKernel, site: tuple[int, int]) -> np.ndarray:
    y, x = site
    if not (0 <= y < kernel.h and 0 <= x < kernel.w):
        raise IndexError(f"site {site} outside {kernel.h}x{kernel.w} grid")
    row = kernel.to_scipy().getrow(y * kernel.w + x).toarray().ravel()
    return row.reshape(kernel.h, kernel.w)


def check_kernel(kernel: SparseKernel, atol: float = 1e-6) -> None:
    """Assert symmetry, non-negativity and Chebyshev sparsity."""
    mat = kernel.to_scipy()
    if kernel.nnz and kernel.data.min() < 0:
        raise AssertionError("kernel has negative entries")
    asym = abs(mat - mat.T)
    if asym.nnz and asym.max() > atol:
        raise AssertionError(f"kernel asymmetric by {asym.max():.3g}")
    coo = mat.tocoo()
    cheb = np.maximum(
        abs(coo.row // kernel.w - coo.col // kernel.w),
        abs(coo.row % kernel.w - coo.col % kernel.w),
    )
    bad = (cheb > kernel.p - 1) & (coo.data != 0)
    if bad.any():
        raise AssertionError(f"{int(bad.sum())} entries outside Chebyshev radius {kernel.p - 1}")


def dense_oracle(b, table: PatchTable, family: Family = "linear", sigma: float = RBF_SIGMA) -> np.ndarray:
    """Literal dense evaluation of the kernel definition (verification only)."""
    b = _validate_b(b, table)
    h, w = table.h, table.w
    n = h * w
    lo, hi = patch_offsets(table.p)
    flat = b.reshape(n, -1)

    def member(i, j):
        dy = j // w - i // w
        dx = j % w - i % w
        return lo <= dy <= hi and lo <= dx <= hi

    if family == "linear":
        out = np.zeros((n, n))
        for m in range(flat.shape[1]):
            kbar = np.zeros((table.n_centers, n))
            for r, i in enumerate(table.centers):
                for j in range(n):
                    if member(i, j):
                        kbar[r, j] = flat[j, m]
            d = np.diag(1.0 / kbar.sum(axis=1))
            out += kbar.T @ d @ kbar
        return out
    if family == "rbf":
        kbar = np.zeros((table.n_centers, n))
        for r, i in enumerate(table.centers):
            for j in range(n):
                if member(i, j):
                    kbar[r, j] = np.exp(-np.sum((flat[i] - flat[j]) ** 2) / (2.0 * sigma))
        d = np.diag(1.0 / kbar.sum(axis=1))
        return kbar.T @ d @ kbar
    raise ValueError(f"unknown kernel family {family!r}")


def kernel_features(
    b: Tensor,
    alpha: Tensor,
    p: int,
    s: int = 1,
    family: Family = "linear",
    sigma: float = RBF_SIGMA,
) -> Tensor:
    """Batched, differentiable ``f_k = K(b) @ alpha`` per channel.

    ``b`` is ``[N, H, W, C, Nb]`` (softmax groups per channel) and ``alpha`` is
    ``[N, H, W, C]``. ``p == 1`` returns ``alpha`` unchanged, which is exact
    because each softmax group sums to one.
    """
    if b.ndim != 5 or alpha.ndim != 4 or b.shape[:4] != alpha.shape:
        raise ShapeError(f"kernel_features shapes b={b.shape}, alpha={alpha.shape}")
    if p == 1:
        return alpha
    n, h, w, c, nb = b.shape
    check_coverage(h, w, p, s)
    lo, hi = patch_offsets(p)
    mask = center_mask(h, w, s, dtype=alpha.dtype)[None, :, :, None]
    if family == "linear":
        a5 = alpha.reshape(n, h, w, c, 1)
        num = box_sum(b * a5, lo, hi)
        # float32 softmax can underflow to 0 over a whole patch (num is 0 there too);
        # an eps^2 floor keeps num/den and its gradient finite
        den = clip(box_sum(b, lo, hi), float(np.finfo(alpha.dtype).eps) ** 2, np.inf)
        v = num / den * mask[..., None]
        return (b * box_sum(v, -hi, -lo)).sum(axis=-1)
    if family == "rbf":
        if sigma <= 0:
            raise KernelDomainError(f"sigma must be positive, got {sigma}")
        scale = -1.0 / (2.0 * sigma)
        affinities = []
        num = den = None
        for dy in range(lo, hi + 1):
            for dx in range(lo, hi + 1):
                valid = _shift_valid(h, w, dy, dx, alpha.dtype)
                diff = b - shift(b, dy, dx)
                k = exp((diff * diff).sum(axis=-1) * scale) * valid
                affinities.append((dy, dx, k))
                term = k * shift(alpha, dy, dx)
                num = term if num is None else num + term
                den = k if den is None else den + k
        v = num / den * mask
        out = None
        for dy, dx, k in affinities:
            term = shift(k * v, -dy, -dx)
            out = term if out is None else out + term
        return out
    raise ValueError(f"unknown kernel family {family!r}")


def _shift_valid(h: int, w: int, dy: int, dx: int, dtype) -> np.ndarray:
    valid = np.zeros((1, h, w, 1), dtype=dtype)
    valid[:, max(-dy, 0) : h - max(dy, 0), max(-dx, 0) : w - max(dx, 0), :] = 1.0
    return valid
