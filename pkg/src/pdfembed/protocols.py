"""Evaluation protocols: PCC, relative deviation (RD) and replication ratio.

``RD`` averages the per-pair relative deviation
``S_i = |s_p - s_l| / max(N - s_l, s_l)``, which normalises by the largest
error still possible at that label. The absolute form ``T_i = |s_p - s_l| / N``
is exposed for comparison. Predictions are clamped to ``[0, N]`` before RD.
"""

from __future__ import annotations

import numpy as np

from .errors import InputError, LevelOutOfRange, ZeroVariance

UNDEFINED = "undefined"


def _series(s_p, s_l):
    s_p = np.asarray(s_p, dtype=np.float64).ravel()
    s_l = np.asarray(s_l, dtype=np.float64).ravel()
    if s_p.shape != s_l.shape:
        raise InputError(f"{s_p.size} predictions for {s_l.size} labels")
    return s_p, s_l


def pcc(s_p, s_l) -> float:
    """Pearson correlation of predictions and labels.

    Raises
    ------
    ZeroVariance
        If either sequence is constant or has fewer than two entries.
    """
    x, y = _series(s_p, s_l)
    if x.size < 2:
        raise ZeroVariance("PCC needs at least two pairs")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.dot(xc, xc)), np.sqrt(np.dot(yc, yc))
    if sx == 0 or sy == 0:
        raise ZeroVariance("PCC is undefined for a constant sequence")
    return float(np.clip(np.dot(xc, yc) / (sx * sy), -1.0, 1.0))


def _check_labels(s_l, N):
    if np.any(s_l < 0) or np.any(s_l > N):
        raise LevelOutOfRange(f"labels must lie in [0, {N}]")


def deviations(s_p, s_l, N: int):
    """Relative and absolute deviations ``(S, T)``, elementwise.

    Scalars in give scalars out.
    """
    p, l = np.asarray(s_p, dtype=np.float64), np.asarray(s_l, dtype=np.float64)
    _check_labels(l, N)
    err = np.abs(p - l)
    S, T = err / np.maximum(N - l, l), err / N
    if S.ndim == 0:
        return float(S), float(T)
    return S, T


def rd(s_p, s_l, N: int) -> float:
    p, l = _series(s_p, s_l)
    if p.size == 0:
        raise InputError("RD of an empty series")
    S, _ = deviations(np.clip(p, 0.0, N), l, N)
    return float(np.mean(S))


def scale_similarity(sim, N: int):
    """Map a similarity in ``[0, 1]`` onto the level scale."""
    sim = np.asarray(sim, dtype=np.float64)
    if not np.all(np.isfinite(sim)):
        raise InputError("non-finite similarity")
    out = N * sim
    return float(out) if out.ndim == 0 else out


def replication_ratio(levels, threshold: int = 4) -> float:
    """Fraction of predicted levels at or above ``threshold``."""
    levels = np.asarray(levels).ravel()
    if levels.size == 0:
        raise InputError("replication ratio of an empty set")
    return float(np.count_nonzero(levels >= threshold) / levels.size)


def level_histogram(levels, N: int) -> list[int]:
    idx = np.clip(np.rint(np.asarray(levels, dtype=np.float64)), 0, N).astype(int)
    return np.bincount(idx.ravel(), minlength=N + 1).tolist()


def eval_report(s_p, s_l, N: int, threshold: int = 4) -> dict:
    """Summary used by ``pdfembed eval``.

    ``pcc`` is the string ``"undefined"`` when either series is constant.
    """
    p, l = _series(s_p, s_l)
    try:
        r = pcc(p, l)
    except ZeroVariance:
        r = UNDEFINED
    return {
        "pcc": r,
        "rd": rd(p, l, N),
        "n": int(p.size),
        "per_level_histogram": level_histogram(p, N),
        "replication_ratio": replication_ratio(np.clip(np.rint(p), 0, N), threshold),
    }
