"""Numeric hot loops, each in two interchangeable flavors.

Every kernel has a pure-numpy implementation (``*_numpy``) and, when numba
is importable, a compiled twin (``*_numba``). The public names dispatch to
the compiled versions unless the environment variable ``PATCHBANK_NUMBA``
is set to ``0``/``false``/``off``/``no``. Both flavors are deterministic:
reductions run in a fixed sequential order and ties resolve to the lowest
index, so results do not depend on which flavor served a call (up to
float summation order, which only differs for vector dims >= 8).

All kernels take and return float64; callers own any float32 casting.
"""

import os

import numpy as np

# elements per temporary chunk in the numpy fallbacks (~16 MB of float64)
_CHUNK_BUDGET = 2_000_000


def _numba_requested() -> bool:
    flag = os.environ.get("PATCHBANK_NUMBA", "").strip().lower()
    if flag in ("0", "false", "off", "no"):
        return False
    try:
        import numba  # noqa: F401
    except ImportError:
        return False
    return True


USING_NUMBA = _numba_requested()


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------

def pairwise_sqdist_numpy(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances, shape (n, m).

    Uses direct differences rather than the ||a||^2 + ||b||^2 - 2ab
    expansion: the expansion loses the exact-zero property for identical
    rows, which the scoring contract depends on.
    """
    n, d = a.shape
    m = b.shape[0]
    out = np.empty((n, m), dtype=np.float64)
    step = max(1, _CHUNK_BUDGET // max(1, m * d))
    for i in range(0, n, step):
        diff = a[i:i + step, None, :] - b[None, :, :]
        out[i:i + step] = (diff * diff).sum(axis=-1)
    return out


def greedy_select_numpy(x: np.ndarray, n_select: int, first: int):
    """Greedy k-center selection.

    Returns (indices, radii): the chosen row indices in pick order and the
    coverage radius (max distance of any point to its nearest chosen
    center) after each pick. Selected points get a -1 sentinel in the
    min-distance array so they are never re-picked; argmax tie-break is
    the lowest index.
    """
    n = x.shape[0]
    idx = np.empty(n_select, dtype=np.int64)
    radii = np.empty(n_select, dtype=np.float64)
    min_sq = pairwise_sqdist_numpy(x, x[first:first + 1])[:, 0]
    min_sq[first] = -1.0
    idx[0] = first
    radii[0] = np.sqrt(max(float(min_sq.max()), 0.0))
    for t in range(1, n_select):
        j = int(np.argmax(min_sq))
        col = pairwise_sqdist_numpy(x, x[j:j + 1])[:, 0]
        np.minimum(min_sq, col, out=min_sq)
        min_sq[j] = -1.0
        idx[t] = j
        radii[t] = np.sqrt(max(float(min_sq.max()), 0.0))
    return idx, radii


def box_mean_numpy(x: np.ndarray, s: int) -> np.ndarray:
    """Mean over the s x s window centered at each cell of a (C, H, W) map.

    Windows shrink at borders (only in-bounds cells counted). Summed-area
    tables keep this O(C*H*W) regardless of s.
    """
    c, h, w = x.shape
    half = s // 2
    sat = np.pad(x, ((0, 0), (1, 0), (1, 0))).cumsum(axis=1).cumsum(axis=2)
    y0 = np.clip(np.arange(h) - half, 0, None)
    y1 = np.minimum(np.arange(h) + half, h - 1) + 1
    x0 = np.clip(np.arange(w) - half, 0, None)
    x1 = np.minimum(np.arange(w) + half, w - 1) + 1
    win = (sat[:, y1[:, None], x1[None, :]]
           - sat[:, y0[:, None], x1[None, :]]
           - sat[:, y1[:, None], x0[None, :]]
           + sat[:, y0[:, None], x0[None, :]])
    count = (y1 - y0)[:, None] * (x1 - x0)[None, :]
    return win / count


def bilinear_resize_numpy(x: np.ndarray, oh: int, ow: int) -> np.ndarray:
    """Bilinear resize of a (C, H, W) map with half-pixel centers."""
    c, h, w = x.shape
    sy = np.clip((np.arange(oh, dtype=np.float64) + 0.5) * (h / oh) - 0.5,
                 0.0, float(h - 1))
    sx = np.clip((np.arange(ow, dtype=np.float64) + 0.5) * (w / ow) - 0.5,
                 0.0, float(w - 1))
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (sy - y0)[None, :, None]
    wx = (sx - x0)[None, None, :]
    v00 = x[:, y0[:, None], x0[None, :]]
    v01 = x[:, y0[:, None], x1[None, :]]
    v10 = x[:, y1[:, None], x0[None, :]]
    v11 = x[:, y1[:, None], x1[None, :]]
    return (v00 * (1.0 - wy) * (1.0 - wx)
            + v01 * (1.0 - wy) * wx
            + v10 * wy * (1.0 - wx)
            + v11 * wy * wx)


def nn_table_numpy(bank: np.ndarray, b: int) -> np.ndarray:
    """Indices of each bank row's b nearest bank rows (self included).

    Rows are ordered by (distance, index); the stable argsort makes the
    tie order identical to the compiled twin's repeated strict-min scans.
    """
    m = bank.shape[0]
    out = np.empty((m, b), dtype=np.int64)
    step = max(1, _CHUNK_BUDGET // max(1, m))
    for i in range(0, m, step):
        d = pairwise_sqdist_numpy(bank[i:i + step], bank)
        out[i:i + step] = np.argsort(d, axis=1, kind="stable")[:, :b]
    return out


def score_patches_numpy(q: np.ndarray, bank: np.ndarray, nb: np.ndarray):
    """Nearest-bank-row scores with softmax reweighting.

    For each query: s' = distance to the nearest bank row r*; the final
    score is s = (1 - exp(s') / sum(exp(d(q, r')) for r' in N(r*))) * s',
    where N(r*) are the precomputed neighbor indices of r* (``nb``).
    Exponentials are shifted by the max neighbor distance for stability.
    Returns (s, s_prime).
    """
    n = q.shape[0]
    m = bank.shape[0]
    s = np.empty(n, dtype=np.float64)
    sp = np.empty(n, dtype=np.float64)
    step = max(1, _CHUNK_BUDGET // max(1, m))
    for i in range(0, n, step):
        d = np.sqrt(pairwise_sqdist_numpy(q[i:i + step], bank))
        rows = np.arange(d.shape[0])
        r = np.argmin(d, axis=1)
        sprime = d[rows, r]
        nd = d[rows[:, None], nb[r]]
        c = nd.max(axis=1)
        denom = np.exp(nd - c[:, None]).sum(axis=1)
        ratio = np.exp(sprime - c) / denom
        s[i:i + step] = (1.0 - ratio) * sprime
        sp[i:i + step] = sprime
    return s, sp


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised via PATCHBANK_NUMBA=0 path
    _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True)
    def pairwise_sqdist_numba(a, b):
        n, d = a.shape
        m = b.shape[0]
        out = np.empty((n, m), dtype=np.float64)
        for i in range(n):
            for j in range(m):
                acc = 0.0
                for t in range(d):
                    diff = a[i, t] - b[j, t]
                    acc += diff * diff
                out[i, j] = acc
        return out

    @njit(cache=True)
    def greedy_select_numba(x, n_select, first):
        n, d = x.shape
        idx = np.empty(n_select, dtype=np.int64)
        radii = np.empty(n_select, dtype=np.float64)
        min_sq = np.empty(n, dtype=np.float64)
        for i in range(n):
            acc = 0.0
            for t in range(d):
                diff = x[i, t] - x[first, t]
                acc += diff * diff
            min_sq[i] = acc
        min_sq[first] = -1.0
        idx[0] = first
        best = -1.0
        for i in range(n):
            if min_sq[i] > best:
                best = min_sq[i]
        radii[0] = np.sqrt(max(best, 0.0))
        for pick in range(1, n_select):
            j = 0
            best = min_sq[0]
            for i in range(1, n):
                if min_sq[i] > best:
                    best = min_sq[i]
                    j = i
            idx[pick] = j
            for i in range(n):
                acc = 0.0
                for t in range(d):
                    diff = x[i, t] - x[j, t]
                    acc += diff * diff
                if acc < min_sq[i]:
                    min_sq[i] = acc
            min_sq[j] = -1.0
            best = -1.0
            for i in range(n):
                if min_sq[i] > best:
                    best = min_sq[i]
            radii[pick] = np.sqrt(max(best, 0.0))
        return idx, radii

    @njit(cache=True)
    def box_mean_numba(x, s):
        c, h, w = x.shape
        half = s // 2
        out = np.empty((c, h, w), dtype=np.float64)
        for ch in range(c):
            for i in range(h):
                y0 = max(i - half, 0)
                y1 = min(i + half, h - 1)
                for j in range(w):
                    x0 = max(j - half, 0)
                    x1 = min(j + half, w - 1)
                    acc = 0.0
                    for yy in range(y0, y1 + 1):
                        for xx in range(x0, x1 + 1):
                            acc += x[ch, yy, xx]
                    out[ch, i, j] = acc / ((y1 - y0 + 1) * (x1 - x0 + 1))
        return out

    @njit(cache=True)
    def bilinear_resize_numba(x, oh, ow):
        c, h, w = x.shape
        out = np.empty((c, oh, ow), dtype=np.float64)
        for i in range(oh):
            sy = (i + 0.5) * (h / oh) - 0.5
            if sy < 0.0:
                sy = 0.0
            if sy > h - 1.0:
                sy = h - 1.0
            y0 = int(np.floor(sy))
            y1 = min(y0 + 1, h - 1)
            wy = sy - y0
            for j in range(ow):
                sx = (j + 0.5) * (w / ow) - 0.5
                if sx < 0.0:
                    sx = 0.0
                if sx > w - 1.0:
                    sx = w - 1.0
                x0 = int(np.floor(sx))
                x1 = min(x0 + 1, w - 1)
                wx = sx - x0
                for ch in range(c):
                    out[ch, i, j] = (x[ch, y0, x0] * (1.0 - wy) * (1.0 - wx)
                                     + x[ch, y0, x1] * (1.0 - wy) * wx
                                     + x[ch, y1, x0] * wy * (1.0 - wx)
                                     + x[ch, y1, x1] * wy * wx)
        return out

    @njit(cache=True)
    def nn_table_numba(bank, b):
        m, d = bank.shape
        out = np.empty((m, b), dtype=np.int64)
        dist = np.empty(m, dtype=np.float64)
        for i in range(m):
            for j in range(m):
                acc = 0.0
                for t in range(d):
                    diff = bank[i, t] - bank[j, t]
                    acc += diff * diff
                dist[j] = acc
            # repeated strict-min scans: equal distances come out in
            # ascending index order, matching the stable argsort flavor
            for pick in range(b):
                best = np.inf
                bj = -1
                for j in range(m):
                    if dist[j] < best:
                        best = dist[j]
                        bj = j
                out[i, pick] = bj
                dist[bj] = np.inf
        return out

    @njit(cache=True)
    def score_patches_numba(q, bank, nb):
        n, d = q.shape
        m = bank.shape[0]
        b = nb.shape[1]
        s = np.empty(n, dtype=np.float64)
        sp = np.empty(n, dtype=np.float64)
        for i in range(n):
            best = np.inf
            r = 0
            for j in range(m):
                acc = 0.0
                for t in range(d):
                    diff = q[i, t] - bank[j, t]
                    acc += diff * diff
                if acc < best:
                    best = acc
                    r = j
            sprime = np.sqrt(best)
            c = 0.0
            for p in range(b):
                j = nb[r, p]
                acc = 0.0
                for t in range(d):
                    diff = q[i, t] - bank[j, t]
                    acc += diff * diff
                dist = np.sqrt(acc)
                if p == 0 or dist > c:
                    c = dist
            denom = 0.0
            for p in range(b):
                j = nb[r, p]
                acc = 0.0
                for t in range(d):
                    diff = q[i, t] - bank[j, t]
                    acc += diff * diff
                denom += np.exp(np.sqrt(acc) - c)
            s[i] = (1.0 - np.exp(sprime - c) / denom) * sprime
            sp[i] = sprime
        return s, sp


if USING_NUMBA:
    pairwise_sqdist = pairwise_sqdist_numba
    greedy_select = greedy_select_numba
    box_mean = box_mean_numba
    bilinear_resize = bilinear_resize_numba
    nn_table = nn_table_numba
    score_patches = score_patches_numba
else:
    pairwise_sqdist = pairwise_sqdist_numpy
    greedy_select = greedy_select_numpy
    box_mean = box_mean_numpy
    bilinear_resize = bilinear_resize_numpy
    nn_table = nn_table_numpy
    score_patches = score_patches_numpy


def warmup():
    """Trigger compilation of every public kernel on tiny inputs.

    Cheap no-op in numpy mode; call before timing anything.
    """
    x = np.arange(12, dtype=np.float64).reshape(4, 3)
    pairwise_sqdist(x, x)
    greedy_select(x, 2, 0)
    m = np.arange(18, dtype=np.float64).reshape(2, 3, 3)
    box_mean(m, 3)
    bilinear_resize(m, 5, 4)
    nb = nn_table(x, 2)
    score_patches(x, x, nb)
