"""Input checks used by the estimator front end."""
from __future__ import annotations

from typing import List, Optional, Sequence

import numpy as np

from .data import ScanRecord, Volume, normalize_volume
from .errors import ValidationError


def check_volumes(X) -> np.ndarray:
    """Accept an array (n_cases, 2, depth, H, W) with T1 then T2 along axis 1."""
    X = np.asarray(X, dtype=np.float32)
    if X.ndim != 5 or X.shape[1] != 2:
        raise ValidationError(
            f"expected volumes shaped (n_cases, 2, depth, height, width), got {X.shape}"
        )
    if X.shape[0] < 1 or min(X.shape[2:]) < 1:
        raise ValidationError(f"empty volume array {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValidationError("volumes contain NaN or Inf")
    return X


def check_labels(y, n: int) -> np.ndarray:
    y = np.asarray(y)
    if y.shape != (n,):
        raise ValidationError(f"labels shape {y.shape} does not match {n} cases")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.all(np.mod(y, 1) == 0):
            raise ValidationError("labels must be integer class indices")
        y = y.astype(np.int64)
    if y.size and (y.min() < 0 or y.max() > 2):
        raise ValidationError("labels must lie in {0, 1, 2}")
    return y.astype(np.int64)


def as_records(X, y: Optional[Sequence[int]] = None, normalize: bool = True) -> List[ScanRecord]:
    """Turn a volume array or a list of ScanRecords into normalised ScanRecords.

    Without ``y`` the records carry label 0 (only used for prediction).
    """
    if isinstance(X, (list, tuple)) and X and isinstance(X[0], ScanRecord):
        recs = list(X)
        if y is not None:
            labels = check_labels(y, len(recs))
            recs = [ScanRecord(r.case_id, r.t1, r.t2, int(l)) for r, l in zip(recs, labels)]
        if normalize:
            recs = [ScanRecord(r.case_id, normalize_volume(r.t1), normalize_volume(r.t2), r.label)
                    for r in recs]
        return recs
    X = check_volumes(X)
    labels = check_labels(y, len(X)) if y is not None else np.zeros(len(X), dtype=np.int64)
    out = []
    for i, (vols, label) in enumerate(zip(X, labels)):
        cid = f"case{i}"
        t1, t2 = Volume(vols[0], "T1", cid), Volume(vols[1], "T2", cid)
        if normalize:
            t1, t2 = normalize_volume(t1), normalize_volume(t2)
        out.append(ScanRecord(cid, t1, t2, int(label)))
    return out
