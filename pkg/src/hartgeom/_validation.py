"""Input validation shared by the estimators and functional entry points."""
import numpy as np
from sklearn.utils.validation import check_array


def check_points(X, name="X", min_rows=1, dim=3):
    """Return ``X`` as a finite float64 (n, dim) array."""
    X = check_array(X, dtype=np.float64, ensure_min_samples=min_rows, input_name=name)
    if X.shape[1] != dim:
        raise ValueError(f"{name} must have {dim} columns, got {X.shape[1]}")
    return X


def check_paired(X, Y, names=("X", "Y"), min_rows=1, dims=(3, 3)):
    X = check_points(X, names[0], min_rows, dims[0])
    Y = check_points(Y, names[1], min_rows, dims[1])
    if len(X) != len(Y):
        raise ValueError(f"{names[0]} and {names[1]} have {len(X)} and {len(Y)} rows")
    return X, Y


def check_power_of_two(r, minimum=16):
    r = int(r)
    return r >= minimum and (r & (r - 1)) == 0
