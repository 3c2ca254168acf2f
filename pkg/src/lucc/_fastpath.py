"""Numba kernels for binned-KDE evaluation.

Two strategies:
  * lattice box-sums (box kernel, d <= 3): sweep along axis 0 while maintaining
    a Fenwick tree over the remaining axes; O((B + m) log^2) total.
  * cell-grid neighbor scan (any kernel, any d): bins are grouped into coarse
    cells the size of the kernel support; each query scans the 3^d surrounding
    cells.
"""

from __future__ import annotations

import numpy as np
from numba import njit

KERNEL_BOX = 0
KERNEL_TRIANGLE = 1
KERNEL_GAUSSIAN = 2


@njit(cache=True)
def _sweep_box_count_2d(di, dc, order_d, qu, order_q, q, L1, out):
    B = di.shape[0]
    m = qu.shape[0]
    tree = np.zeros(L1 + 1, dtype=np.int64)
    lo = 0
    hi = 0
    for k in range(m):
        j = order_q[k]
        u0 = qu[j, 0]
        while hi < B and di[order_d[hi], 0] <= u0 + q - 1:
            r = order_d[hi]
            a = di[r, 1] + 1
            while a <= L1:
                tree[a] += dc[r]
                a += a & (-a)
            hi += 1
        while lo < B and di[order_d[lo], 0] < u0 - q:
            r = order_d[lo]
            a = di[r, 1] + 1
            while a <= L1:
                tree[a] -= dc[r]
                a += a & (-a)
            lo += 1
        a1 = qu[j, 1] - q
        b1 = qu[j, 1] + q - 1
        if b1 < 0 or a1 > L1 - 1:
            out[j] = 0
            continue
        if a1 < 0:
            a1 = 0
        if b1 > L1 - 1:
            b1 = L1 - 1
        s = np.int64(0)
        a = b1 + 1
        while a > 0:
            s += tree[a]
            a -= a & (-a)
        a = a1
        while a > 0:
            s -= tree[a]
            a -= a & (-a)
        out[j] = s


@njit(cache=True)
def _sweep_box_count_3d(di, dc, order_d, qu, order_q, q, L1, L2, out):
    B = di.shape[0]
    m = qu.shape[0]
    stride = L2 + 1
    tree = np.zeros((L1 + 1) * stride, dtype=np.int64)
    lo = 0
    hi = 0
    for k in range(m):
        j = order_q[k]
        u0 = qu[j, 0]
        while hi < B and di[order_d[hi], 0] <= u0 + q - 1:
            r = order_d[hi]
            val = dc[r]
            a = di[r, 1] + 1
            while a <= L1:
                base = a * stride
                b = di[r, 2] + 1
                while b <= L2:
                    tree[base + b] += val
                    b += b & (-b)
                a += a & (-a)
            hi += 1
        while lo < B and di[order_d[lo], 0] < u0 - q:
            r = order_d[lo]
            val = dc[r]
            a = di[r, 1] + 1
            while a <= L1:
                base = a * stride
                b = di[r, 2] + 1
                while b <= L2:
                    tree[base + b] -= val
                    b += b & (-b)
                a += a & (-a)
            lo += 1
        a1 = qu[j, 1] - q
        b1 = qu[j, 1] + q - 1
        a2 = qu[j, 2] - q
        b2 = qu[j, 2] + q - 1
        if b1 < 0 or b2 < 0 or a1 > L1 - 1 or a2 > L2 - 1:
            out[j] = 0
            continue
        if a1 < 0:
            a1 = 0
        if a2 < 0:
            a2 = 0
        if b1 > L1 - 1:
            b1 = L1 - 1
        if b2 > L2 - 1:
            b2 = L2 - 1
        s = _prefix2(tree, stride, b1, b2)
        if a1 > 0:
            s -= _prefix2(tree, stride, a1 - 1, b2)
        if a2 > 0:
            s -= _prefix2(tree, stride, b1, a2 - 1)
        if a1 > 0 and a2 > 0:
            s += _prefix2(tree, stride, a1 - 1, a2 - 1)
        out[j] = s


@njit(cache=True, inline="always")
def _prefix2(tree, stride, i1, i2):
    s = np.int64(0)
    a = i1 + 1
    while a > 0:
        base = a * stride
        b = i2 + 1
        while b > 0:
            s += tree[base + b]
            b -= b & (-b)
        a -= a & (-a)
    return s


@njit(cache=True)
def _cell_eval(di, dc, order, cell_start, cell_dims, qpts, qu, qcell,
               q, delta, h, kernel_code, trunc, out):
    """Weighted kernel sums over bins, scanning the 3^d cells around each query.

    di: (B, d) bin indices; dc: (B,) counts; order/cell_start: CSR of bins by
    raveled cell id; cell_dims/cell_lo: cell grid extent and per-dim offset;
    qpts: (m, d) query points; qu: (m, d) query lattice corners (box kernel);
    qcell: (m, d) cell coordinates of each query.
    """
    m = qpts.shape[0]
    d = di.shape[1]
    noffs = 3 ** d
    for j in range(m):
        acc = 0.0
        for t in range(noffs):
            # decode the t-th neighbor offset in {-1,0,1}^d
            cid = 0
            ok = True
            tt = t
            for k in range(d):
                off = tt % 3 - 1
                tt //= 3
                c = qcell[j, k] + off
                if c < 0 or c >= cell_dims[k]:
                    ok = False
                    break
                cid = cid * cell_dims[k] + c
            if not ok:
                continue
            for r in range(cell_start[cid], cell_start[cid + 1]):
                b = order[r]
                if kernel_code == KERNEL_BOX:
                    inside = True
                    for k in range(d):
                        if di[b, k] < qu[j, k] - q or di[b, k] > qu[j, k] + q - 1:
                            inside = False
                            break
                    if inside:
                        acc += dc[b]
                else:
                    w = 1.0
                    for k in range(d):
                        tval = (qpts[j, k] - (di[b, k] + 0.5) * delta) / h
                        if tval < 0.0:
                            tval = -tval
                        if kernel_code == KERNEL_TRIANGLE:
                            if tval >= 1.0:
                                w = 0.0
                                break
                            w *= 1.0 - tval
                        else:  # gaussian, truncated
                            if tval >= trunc:
                                w = 0.0
                                break
                            w *= np.exp(-0.5 * tval * tval)
                    if w > 0.0:
                        acc += dc[b] * w
        out[j] = acc


def box_lattice_counts(di: np.ndarray, dc: np.ndarray, qu: np.ndarray, q: int) -> np.ndarray:
    """Count data-bin mass inside the integer window [u_k - q, u_k + q - 1] per query.

    di: (B, d) data bin indices, dc: (B,) counts, qu: (m, d) query corners.
    Exact, deterministic; d must be 1, 2 or 3.
    """
    d = di.shape[1]
    shift = di.min(axis=0)
    di = di - shift
    qu = qu - shift
    out = np.empty(qu.shape[0], dtype=np.int64)
    if d == 1:
        order = np.argsort(di[:, 0], kind="stable")
        sorted_i = di[order, 0]
        csum = np.concatenate([[0], np.cumsum(dc[order])])
        hi = np.searchsorted(sorted_i, qu[:, 0] + q - 1, side="right")
        lo = np.searchsorted(sorted_i, qu[:, 0] - q, side="left")
        out[:] = csum[hi] - csum[lo]
        return out
    order_d = np.argsort(di[:, 0], kind="stable")
    order_q = np.argsort(qu[:, 0], kind="stable")
    if d == 2:
        L1 = int(di[:, 1].max()) + 1
        _sweep_box_count_2d(di, dc, order_d, qu, order_q, q, L1, out)
    elif d == 3:
        L1 = int(di[:, 1].max()) + 1
        L2 = int(di[:, 2].max()) + 1
        _sweep_box_count_3d(di, dc, order_d, qu, order_q, q, L1, L2, out)
    else:
        raise ValueError(f"box_lattice_counts supports d <= 3, got {d}")
    return out


def cell_eval(di: np.ndarray, dc: np.ndarray, qpts: np.ndarray, qu: np.ndarray,
              q: int, delta: float, h: float, kernel_code: int,
              support_bins: int, trunc: float) -> np.ndarray:
    """Kernel-weighted (unnormalized) bin sums via the coarse cell grid.

    support_bins sizes the cells (>= kernel support in bin units); trunc is the
    truncation radius in bandwidth units.
    """
    d = di.shape[1]
    lo = np.minimum(di.min(axis=0), qu.min(axis=0))
    cells_d = (di - lo) // support_bins
    cells_q = np.clip((qu - lo) // support_bins, 0, None)
    cell_dims = (cells_d.max(axis=0) + 1).astype(np.int64)
    cells_q = np.minimum(cells_q, cell_dims - 1)
    cid_d = np.zeros(len(di), dtype=np.int64)
    for k in range(d):
        cid_d = cid_d * cell_dims[k] + cells_d[:, k]
    ncells = int(np.prod(cell_dims))
    order = np.argsort(cid_d, kind="stable").astype(np.int64)
    cell_start = np.zeros(ncells + 1, dtype=np.int64)
    np.add.at(cell_start, cid_d + 1, 1)
    cell_start = np.cumsum(cell_start)
    out = np.empty(qpts.shape[0], dtype=np.float64)
    _cell_eval(np.ascontiguousarray(di), np.ascontiguousarray(dc.astype(np.float64)),
               order, cell_start, cell_dims,
               np.ascontiguousarray(qpts, dtype=np.float64),
               np.ascontiguousarray(qu),
               np.ascontiguousarray(cells_q.astype(np.int64)),
               q, delta, h, kernel_code, trunc, out)
    return out
