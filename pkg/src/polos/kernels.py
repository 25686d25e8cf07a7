"""Hot-loop kernels with an optional compiled fast path.

The Cython extension (polos._core) fuses the per-reference feature assembly
into a single pass and counts rank inversions in C. Equivalent numpy/Python
implementations are selected at import time when the extension is missing or
POLOS_NO_NATIVE is set; both paths produce bit-identical results.
"""

from __future__ import annotations

import os

import numpy as np

try:
    if os.environ.get("POLOS_NO_NATIVE"):
        raise ImportError("native kernels disabled by POLOS_NO_NATIVE")
    from polos import _core  # compiled extension

    HAVE_NATIVE = True
except ImportError:
    _core = None
    HAVE_NATIVE = False


def _assemble_unique_np(cand_clip, cand_rb, refs_clip, refs_rb, row_sample,
                        use_clip_text, use_roberta, full):
    parts = []
    if use_clip_text:
        c = cand_clip[row_sample]
        parts.append(refs_clip)
        if full:
            parts.append(np.abs(c - refs_clip))
            parts.append(c * refs_clip)
    if use_roberta:
        c = cand_rb[row_sample]
        parts.append(refs_rb)
        if full:
            parts.append(np.abs(c - refs_rb))
            parts.append(c * refs_rb)
    if not parts:
        return np.empty((len(row_sample), 0))
    return np.concatenate(parts, axis=1)


def _assemble_rows_np(cand_clip, cand_rb, img, refs_clip, refs_rb, row_sample,
                      use_clip_text, use_image, use_roberta, full):
    def pair(c, r):
        if full:
            return np.concatenate([c, r, np.abs(c - r), c * r], axis=1)
        return np.concatenate([c, r], axis=1)

    parts = []
    if use_clip_text:
        parts.append(pair(cand_clip[row_sample], refs_clip))
    if use_image:
        parts.append(pair(cand_clip, img)[row_sample])
    if use_roberta:
        parts.append(pair(cand_rb[row_sample], refs_rb))
    return np.concatenate(parts, axis=1)


def _count_inversions_py(values) -> int:
    """Pairs (i, j) with i < j and values[i] > values[j], by mergesort."""
    arr = list(values)
    n = len(arr)
    buf = arr[:]
    inversions = 0
    width = 1
    while width < n:
        for lo in range(0, n, 2 * width):
            mid = min(lo + width, n)
            hi = min(lo + 2 * width, n)
            i, j, k = lo, mid, lo
            while i < mid and j < hi:
                if arr[j] < arr[i]:
                    buf[k] = arr[j]
                    j += 1
                    inversions += mid - i
                else:
                    buf[k] = arr[i]
                    i += 1
                k += 1
            if i < mid:
                buf[k:hi] = arr[i:mid]
            elif j < hi:
                buf[k:hi] = arr[j:hi]
        arr, buf = buf, arr
        width *= 2
    return inversions


def _as_f64_2d(a) -> np.ndarray:
    return np.ascontiguousarray(a, dtype=np.float64)


if HAVE_NATIVE:

    def assemble_unique(cand_clip, cand_rb, refs_clip, refs_rb, row_sample,
                        use_clip_text, use_roberta, full):
        return _core.assemble_unique(
            _as_f64_2d(cand_clip), _as_f64_2d(cand_rb),
            _as_f64_2d(refs_clip), _as_f64_2d(refs_rb),
            np.ascontiguousarray(row_sample, dtype=np.int64),
            bool(use_clip_text), bool(use_roberta), bool(full),
        )

    def assemble_rows(cand_clip, cand_rb, img, refs_clip, refs_rb, row_sample,
                      use_clip_text, use_image, use_roberta, full):
        return _core.assemble_rows(
            _as_f64_2d(cand_clip), _as_f64_2d(cand_rb), _as_f64_2d(img),
            _as_f64_2d(refs_clip), _as_f64_2d(refs_rb),
            np.ascontiguousarray(row_sample, dtype=np.int64),
            bool(use_clip_text), bool(use_image), bool(use_roberta), bool(full),
        )

    def count_inversions(values) -> int:
        arr = np.ascontiguousarray(values, dtype=np.float64)
        return int(_core.count_inversions(arr))

else:
    assemble_unique = _assemble_unique_np
    assemble_rows = _assemble_rows_np

    def count_inversions(values) -> int:
        return _count_inversions_py(np.asarray(values, dtype=np.float64))
