"""Recognition and enhancement metrics.

Edit-distance metrics follow the convention that operations are applied to
the hypothesis to turn it into the reference; pixel metrics treat ink
(value 0) as foreground.
"""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import NamedTuple, Sequence

import numpy as np
from skimage.morphology import skeletonize

from .enhance import binarize
from .errors import DataError, DimensionError, MetricUndefinedError
from .imageops import Image


class EditCounts(NamedTuple):
    distance: int
    substitutions: int
    deletions: int
    insertions: int


def edit_distance(s1: Sequence, s2: Sequence) -> int:
    """Unit-cost Levenshtein distance (two-row DP)."""
    if len(s1) < len(s2):
        s1, s2 = s2, s1
    prev = list(range(len(s2) + 1))
    for i, a in enumerate(s1, 1):
        cur = [i]
        for j, b in enumerate(s2, 1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (a != b)))
        prev = cur
    return prev[-1]


def levenshtein(s1: Sequence, s2: Sequence) -> EditCounts:
    """Distance from ``s1`` to ``s2`` plus the S/D/I counts of one optimal alignment.

    Deletions remove tokens of ``s1``, insertions add tokens of ``s2``.  When
    several alignments are optimal the traceback prefers substitution (or
    match), then deletion, then insertion.
    """
    n, m = len(s1), len(s2)
    dp = [[0] * (m + 1) for _ in range(n + 1)]
    for i in range(n + 1):
        dp[i][0] = i
    for j in range(m + 1):
        dp[0][j] = j
    for i in range(1, n + 1):
        row, up, a = dp[i], dp[i - 1], s1[i - 1]
        for j in range(1, m + 1):
            row[j] = min(up[j] + 1, row[j - 1] + 1, up[j - 1] + (a != s2[j - 1]))
    s = d = ins = 0
    i, j = n, m
    while i or j:
        if i and j and dp[i][j] == dp[i - 1][j - 1] + (s1[i - 1] != s2[j - 1]):
            s += s1[i - 1] != s2[j - 1]
            i, j = i - 1, j - 1
        elif i and dp[i][j] == dp[i - 1][j] + 1:
            d += 1
            i -= 1
        else:
            ins += 1
            j -= 1
    return EditCounts(dp[n][m], s, d, ins)


def cer(hyp: str, ref: str) -> float:
    """``(S + D + I) / len(ref)``; may exceed 1."""
    if len(ref) == 0:
        raise MetricUndefinedError("CER is undefined for an empty reference")
    return edit_distance(hyp, ref) / len(ref)


def wer(hyp: str, ref: str) -> float:
    ref_words = ref.split()
    if not ref_words:
        raise MetricUndefinedError("WER is undefined for a reference without words")
    return edit_distance(hyp.split(), ref_words) / len(ref_words)


def ed1_accuracy(pairs) -> float:
    """Fraction of ``(hyp, ref)`` pairs within edit distance 1."""
    pairs = list(pairs)
    if not pairs:
        raise MetricUndefinedError("ED1 accuracy is undefined for an empty set")
    return sum(edit_distance(h, r) <= 1 for h, r in pairs) / len(pairs)


def corpus_cer(pairs) -> float:
    """Pooled CER: total edits over total reference characters."""
    pairs = list(pairs)
    total = sum(len(r) for _, r in pairs)
    if total == 0:
        raise MetricUndefinedError("corpus CER is undefined for empty references")
    return sum(edit_distance(h, r) for h, r in pairs) / total


def corpus_wer(pairs) -> float:
    pairs = list(pairs)
    total = sum(len(r.split()) for _, r in pairs)
    if total == 0:
        raise MetricUndefinedError("corpus WER is undefined for empty references")
    return sum(edit_distance(h.split(), r.split()) for h, r in pairs) / total


# ---------------------------------------------------------------------------
# pixel metrics
# ---------------------------------------------------------------------------

def psnr(a: Image, b: Image) -> float:
    """Peak signal-to-noise ratio in dB with MAX = 255; ``inf`` for identical images."""
    if a.shape != b.shape:
        raise DimensionError(f"psnr: image shapes differ {a.shape} vs {b.shape}")
    diff = a.pixels.astype(np.int64) - b.pixels.astype(np.int64)
    mse = float((diff * diff).sum()) / diff.size
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(255.0 ** 2 / mse)


def ink_mask(img: Image) -> np.ndarray:
    """Boolean foreground map of a binary single-channel image (ink = 0)."""
    if img.channels != 1:
        raise DataError(f"binary metrics need a single-channel image, got {img.channels} channels")
    px = img.pixels[:, :, 0]
    if not np.all((px == 0) | (px == 255)):
        raise DataError("binary metrics need pixel values in {0, 255}")
    return px == 0


class FMeasure(NamedTuple):
    fm: float
    precision: float
    recall: float
    degenerate: bool


def _harmonic(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def f_measure(binary: Image, gt: Image) -> FMeasure:
    """Pixel F-measure over ink; empty denominators give 0 and set ``degenerate``."""
    if binary.shape != gt.shape:
        raise DimensionError(f"f_measure: shapes differ {binary.shape} vs {gt.shape}")
    b, g = ink_mask(binary), ink_mask(gt)
    tp = int(np.count_nonzero(b & g))
    fp = int(np.count_nonzero(b & ~g))
    fn = int(np.count_nonzero(~b & g))
    degenerate = tp + fp == 0 or tp + fn == 0
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    return FMeasure(_harmonic(p, r), p, r, degenerate)


def skeleton(mask: np.ndarray) -> np.ndarray:
    return skeletonize(mask)


def pseudo_f_measure(binary: Image, gt: Image) -> float:
    """F-measure whose recall counts only the skeleton of the ground-truth ink.

    This is the skeleton-recall approximation of pseudo-FM (reported as
    ``pfm_skel``); the full weighting maps of the DIBCO tool are not modelled.
    """
    if binary.shape != gt.shape:
        raise DimensionError(f"pseudo_f_measure: shapes differ {binary.shape} vs {gt.shape}")
    b, g = ink_mask(binary), ink_mask(gt)
    skel = skeleton(g)
    tp = int(np.count_nonzero(b & g))
    fp = int(np.count_nonzero(b & ~g))
    p = tp / (tp + fp) if tp + fp else 0.0
    ns = int(np.count_nonzero(skel))
    r = int(np.count_nonzero(b & skel)) / ns if ns else 0.0
    return _harmonic(p, r)


def drd_weights(size: int = 5) -> np.ndarray:
    """Normalised inverse-distance matrix: centre 0, entries sum to 1."""
    c = size // 2
    raw = np.zeros((size, size))
    for i in range(size):
        for j in range(size):
            if (i, j) != (c, c):
                raw[i, j] = 1.0 / math.sqrt((i - c) ** 2 + (j - c) ** 2)
    return raw / math.fsum(raw.ravel())


def non_uniform_blocks(gt: np.ndarray, block: int = 8) -> int:
    """Number of ``block x block`` tiles of ``gt`` holding both values (edge tiles included)."""
    h, w = gt.shape
    count = 0
    for y in range(0, h, block):
        for x in range(0, w, block):
            tile = gt[y:y + block, x:x + block]
            if tile.any() and not tile.all():
                count += 1
    return count


def drd(binary: Image, gt: Image, block: int = 8) -> float:
    """Distance-reciprocal distortion.

    Each flipped pixel costs the weighted count of its 5x5 ground-truth
    neighbours that differ from its binarised value; neighbours outside the
    image cost nothing.  The total is divided by the number of non-uniform
    8x8 ground-truth blocks.  The sum over flipped pixels is exact (rational
    arithmetic on the float weights) and rounded once.
    """
    if binary.shape != gt.shape:
        raise DimensionError(f"drd: shapes differ {binary.shape} vs {gt.shape}")
    b = ink_mask(binary).astype(np.int8)
    g = ink_mask(gt).astype(np.int8)
    nb = non_uniform_blocks(g.astype(bool), block)
    if nb == 0:
        raise MetricUndefinedError("DRD is undefined for a uniform ground truth")
    w = drd_weights()
    h, wd = g.shape
    flipped = b != g
    if not flipped.any():
        return 0.0
    total = Fraction(0)
    gp = np.pad(g, 2, constant_values=-1)
    for di in range(5):
        for dj in range(5):
            if w[di, dj] == 0:
                continue
            neigh = gp[di:di + h, dj:dj + wd]
            # off-image neighbours (-1) never differ
            hits = int(np.count_nonzero(flipped & (neigh >= 0) & (neigh != b)))
            if hits:
                total += Fraction(w[di, dj]) * hits
    return float(total) / nb


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def _fmt(x):
    if x is None:
        return None
    if isinstance(x, float):
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        if math.isnan(x):
            return "nan"
        return float(f"{x:.6g}")
    return x


@dataclass
class MetricReport:
    """Per-sample rows plus aggregate means (and pooled CER/WER)."""

    samples: list = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.samples)

    def to_json(self) -> str:
        body = {k: _fmt(v) for k, v in self.aggregate.items()}
        body["n"] = self.n
        return json.dumps(body, indent=2, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.samples:
            cols = list(self.samples[0])
            wr = csv.writer(buf, lineterminator="\n")
            wr.writerow(cols)
            for row in self.samples:
                wr.writerow(["" if row[c] is None else _fmt(row[c]) for c in cols])
        return buf.getvalue()


def _mean(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None
    return math.fsum(vals) / len(vals)


def recognition_report(pairs, ids=None) -> MetricReport:
    """Report over ``(hyp, ref)`` pairs."""
    pairs = list(pairs)
    if not pairs:
        raise MetricUndefinedError("cannot evaluate an empty sample set")
    ids = ids or [str(i) for i in range(len(pairs))]
    rows = []
    for sid, (h, r) in zip(ids, pairs):
        rows.append({"id": sid, "hyp": h, "ref": r, "distance": edit_distance(h, r),
                     "cer": cer(h, r) if r else None, "wer": wer(h, r) if r.split() else None})
    agg = {
        "cer": _mean(r["cer"] for r in rows),
        "wer": _mean(r["wer"] for r in rows),
        "cer_pooled": corpus_cer(pairs),
        "wer_pooled": corpus_wer(pairs) if any(r.split() for _, r in pairs) else None,
        "ed1_accuracy": ed1_accuracy(pairs),
    }
    return MetricReport(rows, agg)


def enhancement_report(outputs, targets, ids=None, threshold: int = 128) -> MetricReport:
    """PSNR on the raw output plus FM / pFM / DRD after binarising both sides."""
    outputs, targets = list(outputs), list(targets)
    if not outputs:
        raise MetricUndefinedError("cannot evaluate an empty sample set")
    ids = ids or [str(i) for i in range(len(outputs))]
    rows = []
    for sid, out, tgt in zip(ids, outputs, targets):
        bo, bt = binarize(out, threshold), binarize(tgt, threshold)
        try:
            d = drd(bo, bt)
        except MetricUndefinedError:
            d = None
        rows.append({"id": sid, "psnr": psnr(out, tgt), "fm": f_measure(bo, bt).fm,
                     "pfm_skel": pseudo_f_measure(bo, bt), "drd": d})
    agg = {k: _mean(r[k] for r in rows) for k in ("psnr", "fm", "pfm_skel", "drd")}
    return MetricReport(rows, agg)
