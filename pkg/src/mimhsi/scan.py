"""Scan orderings that turn a p-by-p patch into sequences.

The centered snake design walks the grid so consecutive steps are always
spatially adjacent and the patch center sits at the exact middle step; the
raster / diagonal / zigzag designs exist for the scan-design comparison.
Each design comes in four types reaching the four start corners: type 1 is
the base order, type 2 its transpose, types 3 and 4 their horizontal mirrors.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad

DESIGNS = ("mamba", "raster", "diagonal", "zigzag")


@dataclass(frozen=True)
class ScanMap:
    p: int
    design: str
    type_id: int
    order: tuple  # ((row, col), ...) of length p*p

    @property
    def flat_indices(self):
        return np.array([r * self.p + c for r, c in self.order], dtype=np.intp)

    @property
    def inverse_indices(self):
        inv = np.empty(self.p * self.p, dtype=np.intp)
        inv[self.flat_indices] = np.arange(self.p * self.p)
        return inv


@dataclass(frozen=True)
class SplitMaps:
    """Two half-scans that both terminate on the center cell."""

    p: int
    forward: tuple
    backward: tuple


def _check_p(p):
    if p < 1 or p % 2 == 0:
        raise ValueError(f"patch size must be odd and positive, got {p}")


def _snake(p):
    order = []
    for r in range(p):
        cols = range(p) if r % 2 == 0 else range(p - 1, -1, -1)
        order.extend((r, c) for c in cols)
    return order


def _raster(p):
    return [(r, c) for r in range(p) for c in range(p)]


def _diagonal(p):
    # anti-diagonals r+c = d, every diagonal walked top-right to bottom-left
    order = []
    for d in range(2 * p - 1):
        rows = range(max(0, d - p + 1), min(d, p - 1) + 1)
        order.extend((r, d - r) for r in rows)
    return order


def _zigzag(p):
    # JPEG-style: alternate the walking direction per anti-diagonal
    order = []
    for d in range(2 * p - 1):
        rows = list(range(max(0, d - p + 1), min(d, p - 1) + 1))
        if d % 2 == 0:
            rows.reverse()
        order.extend((r, d - r) for r in rows)
    return order


_BASE = {"mamba": _snake, "raster": _raster, "diagonal": _diagonal, "zigzag": _zigzag}


def _transpose(order):
    return [(c, r) for r, c in order]


def _hflip(order, p):
    return [(r, p - 1 - c) for r, c in order]


def scan_map(p, design, type_id):
    """Scan order for (design, type) on an odd p-by-p grid."""
    _check_p(p)
    if design not in _BASE:
        raise ValueError(f"unknown scan design '{design}'")
    if type_id not in (1, 2, 3, 4):
        raise ValueError(f"type_id must be 1..4, got {type_id}")
    order = _BASE[design](p)
    if type_id == 2:
        order = _transpose(order)
    elif type_id == 3:
        order = _hflip(order, p)
    elif type_id == 4:
        order = _hflip(_transpose(order), p)
    return ScanMap(p=p, design=design, type_id=type_id, order=tuple(order))


def mcs_map(p, type_id):
    """Centered snake scan: type 1 row-wise from the top-left, type 2 its
    column-wise transpose, types 3/4 the same pair started from the top-right."""
    return scan_map(p, "mamba", type_id)


def alt_scan_map(p, design, type_id):
    if design == "mamba":
        raise ValueError("use mcs_map for the mamba design")
    return scan_map(p, design, type_id)


def split_center(m: ScanMap) -> SplitMaps:
    """Cut a complete scan at its middle step into the two center-terminated
    half-scans; both halves include the center, nothing else overlaps."""
    mid = (m.p * m.p - 1) // 2
    center = ((m.p - 1) // 2, (m.p - 1) // 2)
    if m.order[mid] != center:
        raise ValueError("scan's middle step is not the patch center")
    return SplitMaps(
        p=m.p,
        forward=m.order[: mid + 1],
        backward=tuple(reversed(m.order[mid:])),
    )


def _flat(p, order):
    return np.array([r * p + c for r, c in order], dtype=np.intp)


def gather_by_map(patch, m):
    """Reorder a [..., p, p, D] patch into a [..., L, D] sequence.

    Accepts a ScanMap (full scan) or a SplitMaps (returns the forward and
    backward half-sequences). Pure permutation, so the gradient is the
    inverse scatter.
    """
    if isinstance(m, SplitMaps):
        flat = _seq_view(patch, m.p)
        return (
            ad.index_select(flat, -2, _flat(m.p, m.forward)),
            ad.index_select(flat, -2, _flat(m.p, m.backward)),
        )
    flat = _seq_view(patch, m.p)
    return ad.index_select(flat, -2, m.flat_indices)


def _seq_view(patch, p):
    shape = patch.shape
    if shape[-3] != p or shape[-2] != p:
        raise ValueError(f"patch is not {p}x{p}")
    return ad.reshape(patch, shape[:-3] + (p * p, shape[-1]))


def scatter_by_map(seq, m: ScanMap):
    """Inverse of gather_by_map: place a [..., p*p, D] sequence back on the grid."""
    p = m.p
    shape = seq.shape
    if shape[-2] != p * p:
        raise ValueError(f"sequence length {shape[-2]} does not match p={p}")
    flat = ad.index_select(seq, -2, m.inverse_indices)
    return ad.reshape(flat, shape[:-2] + (p, p, shape[-1]))


def continuity_stats(m: ScanMap):
    """(number of jump connections, mean Manhattan step distance)."""
    if len(m.order) < 2:
        return 0, 0.0
    pts = np.asarray(m.order)
    d = np.abs(np.diff(pts, axis=0)).sum(axis=1)
    return int((d > 1).sum()), float(d.mean())
