"""Range image-guided KNN search plus KNN voting and nearest label assignment.

Neighbors of a query are the valid pixels inside an ``h x w`` window centred
on the query's pixel. Columns wrap around (the scan is a full ring), rows
outside the image are skipped. Candidates are ranked by ``|r_query - r_pixel|``
where ``r_query`` is the query point's own range; ties go to the smaller
row-major window offset.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from rangepdm.projection import IGNORE_LABEL, Lut, RangeImage

PDM_WINDOW = (5, 5)
PDM_K = 7
BASELINE_WINDOW = (7, 7)
BASELINE_K = 7
CHUNK = 16384


@dataclass(frozen=True, eq=False)
class NeighborSets:
    """Top-K neighbors for a batch of M queries.

    ``pixels`` holds flat pixel ids ``v * W + u`` and ``indices`` the kept
    point at that pixel; both are -1 in invalid slots. ``offsets`` are the
    row-major window positions the slots came from (-1 when invalid).
    ``padded`` marks slots filled with the query's own pixel because the
    window had fewer than K valid candidates.
    """

    queries: np.ndarray
    query_pixels: np.ndarray
    pixels: np.ndarray
    indices: np.ndarray
    valid: np.ndarray
    padded: np.ndarray
    offsets: np.ndarray
    window: tuple
    k: int

    def __len__(self):
        return self.queries.shape[0]


def _check_window(window, k):
    h, w = window
    if h < 1 or w < 1 or h % 2 == 0 or w % 2 == 0:
        raise ValueError(f"window dims must be odd and positive, got {h}x{w}")
    if not 1 <= k <= h * w:
        raise ValueError(f"k must be in [1, {h * w}] for a {h}x{w} window, got {k}")


def _search_chunk(img: RangeImage, u, v, rq, window, k):
    H, W = img.valid.shape
    wh, ww = window
    dy = np.repeat(np.arange(wh) - wh // 2, ww)
    dx = np.tile(np.arange(ww) - ww // 2, wh)
    rows = v[:, None] + dy[None, :]
    cols = np.mod(u[:, None] + dx[None, :], W)
    inside = (rows >= 0) & (rows < H)
    rows_c = np.clip(rows, 0, H - 1)
    cand = inside & img.valid[rows_c, cols]
    dist = np.abs(rq[:, None] - img.range[rows_c, cols])
    dist[~cand] = np.inf
    order = np.argsort(dist, axis=1, kind="stable")[:, :k]
    picked_valid = np.take_along_axis(cand, order, axis=1)
    pix = np.take_along_axis(rows_c * W + cols, order, axis=1)

    own_pix = v * W + u
    own_valid = img.valid[v, u]
    pad = ~picked_valid & own_valid[:, None]
    pix = np.where(pad, own_pix[:, None], pix)
    offsets = np.where(pad, (wh // 2) * ww + ww // 2, order)
    valid = picked_valid | pad
    pix = np.where(valid, pix, -1)
    offsets = np.where(valid, offsets, -1)
    flat_index = img.point_index.reshape(-1)
    indices = np.where(valid, flat_index[np.maximum(pix, 0)], -1)
    return pix, indices, valid, pad, offsets


def _run_chunks(fn, n, chunk, threads):
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if threads > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: fn(*b), bounds))
    return [fn(*b) for b in bounds]


def knn_search(
    img: RangeImage,
    lut: Lut,
    ranges: np.ndarray,
    queries: Optional[Sequence[int]] = None,
    window=PDM_WINDOW,
    k: int = PDM_K,
    threads: int = 1,
    chunk: int = CHUNK,
) -> NeighborSets:
    """Top-``k`` range-nearest neighbors for each query point (default: all)."""
    window = tuple(int(x) for x in window)
    _check_window(window, k)
    if img.width != lut.width:
        raise ValueError(f"lut width {lut.width} != image width {img.width}")
    q = np.arange(len(lut)) if queries is None else np.asarray(queries, dtype=np.int64).reshape(-1)
    u, v = lut.u[q], lut.v[q]
    if q.size and (u.min() < 0 or u.max() >= img.width or v.min() < 0 or v.max() >= img.height):
        raise RuntimeError("query pixel outside the range image: lut is inconsistent")
    rq = np.asarray(ranges, dtype=np.float64)[q]

    def work(s, e):
        return _search_chunk(img, u[s:e], v[s:e], rq[s:e], window, k)

    parts = _run_chunks(work, q.shape[0], chunk, threads)
    if parts:
        pix, idx, valid, pad, off = (np.concatenate(p) for p in zip(*parts))
    else:
        pix = idx = off = np.zeros((0, k), dtype=np.int64)
        valid = pad = np.zeros((0, k), dtype=bool)
    return NeighborSets(q, v * img.width + u, pix, idx, valid, pad, off, window, k)


def vote(neighbor_labels: np.ndarray, valid: np.ndarray, ignore: int = IGNORE_LABEL) -> np.ndarray:
    """Modal label per row; ties go to the tied label seen first (nearest)."""
    m, k = neighbor_labels.shape
    if m == 0:
        return np.zeros(0, dtype=np.int64)
    labels = np.where(valid, neighbor_labels, 0)
    n_cls = int(labels.max()) + 1
    counts = np.zeros((m, n_cls), dtype=np.int64)
    first = np.full((m, n_cls), k, dtype=np.int64)
    rows = np.arange(m)
    for j in range(k - 1, -1, -1):
        ok = valid[:, j]
        counts[rows[ok], labels[ok, j]] += 1
        first[rows[ok], labels[ok, j]] = j
    score = counts * (k + 1) - first
    out = np.argmax(score, axis=1).astype(np.int64)
    out[~valid.any(axis=1)] = ignore
    return out


def knn_vote(
    img: RangeImage,
    lut: Lut,
    ranges: np.ndarray,
    pred: np.ndarray,
    window=BASELINE_WINDOW,
    k: int = BASELINE_K,
    threads: int = 1,
) -> np.ndarray:
    """Per-point label by majority vote over the pixel predictions of the
    K range-image neighbors."""
    pred = np.asarray(pred, dtype=np.int64)
    if pred.shape != img.valid.shape:
        raise ValueError(f"prediction grid {pred.shape} does not match image {img.valid.shape}")
    sets = knn_search(img, lut, ranges, window=window, k=k, threads=threads)
    nbr = pred.reshape(-1)[np.maximum(sets.pixels, 0)]
    return vote(nbr, sets.valid)


def nla(
    img: RangeImage,
    lut: Lut,
    ranges: np.ndarray,
    pred: np.ndarray,
    window=BASELINE_WINDOW,
    threads: int = 1,
) -> np.ndarray:
    """Nearest label assignment: the prediction of the single nearest neighbor."""
    pred = np.asarray(pred, dtype=np.int64)
    if pred.shape != img.valid.shape:
        raise ValueError(f"prediction grid {pred.shape} does not match image {img.valid.shape}")
    sets = knn_search(img, lut, ranges, window=window, k=1, threads=threads)
    out = pred.reshape(-1)[np.maximum(sets.pixels[:, 0], 0)]
    return np.where(sets.valid[:, 0], out, IGNORE_LABEL)
