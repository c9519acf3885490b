"""Input checks shared by the estimators and the CLI."""

import numpy as np

from .exceptions import DimensionError
from .metrics import ActionInstance


def check_sequences(X, seq_len=None, n_features=None):
    """Return ``X`` as a finite float64 array of shape ``[N, T, d_in]``."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim == 2:
        X = X[None]
    if X.ndim != 3:
        raise DimensionError(f"expected [N, T, d_in] sequences, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise ValueError("sequences contain NaN or Inf")
    if seq_len is not None and X.shape[1] != seq_len:
        raise DimensionError(f"expected sequence length {seq_len}, got {X.shape[1]}")
    if n_features is not None and X.shape[2] != n_features:
        raise DimensionError(f"expected {n_features} features, got {X.shape[2]}")
    return X


def _as_instance(item):
    if isinstance(item, ActionInstance):
        return item
    if isinstance(item, dict):
        return ActionInstance(float(item["start"]), float(item["end"]), int(item["class_id"]),
                              float(item.get("score", 1.0)))
    start, end, cls, *rest = item
    return ActionInstance(float(start), float(end), int(cls), float(rest[0]) if rest else 1.0)


def check_instances(y, n_samples=None, num_classes=None):
    """Normalise ground truth to one list of ``ActionInstance`` per sequence."""
    y = [[_as_instance(i) for i in seq] for seq in y]
    if n_samples is not None and len(y) != n_samples:
        raise ValueError(f"got {len(y)} instance lists for {n_samples} sequences")
    if num_classes is not None:
        for seq in y:
            for inst in seq:
                if inst.class_id >= num_classes:
                    raise ValueError(f"class_id {inst.class_id} >= num_classes {num_classes}")
    return y


def infer_num_classes(y):
    ids = [i.class_id for seq in y for i in seq]
    if not ids:
        raise ValueError("cannot infer the class count without any instances")
    return max(ids) + 1
