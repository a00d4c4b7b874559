"""Input validation helpers.

These play the role of ``sklearn.utils.check_array`` for the ragged
sequence data used throughout the package: a corpus is a list of
``(T_i, d)`` matrices whose ``T_i`` differ between utterances.
"""

import numpy as np

from .exceptions import InvalidInputError


def check_matrix(x, name="x", width=None, allow_empty=False, nonnegative=False):
    """Return ``x`` as a finite 2-D float64 array, raising on violations."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 1 and width == 1:
        arr = arr[:, None]
    if arr.ndim != 2:
        raise InvalidInputError(f"{name} must be 2-D, got shape {arr.shape}")
    if not allow_empty and arr.shape[0] == 0:
        raise InvalidInputError(f"{name} is empty")
    if width is not None and arr.shape[1] != width:
        raise InvalidInputError(f"{name} has width {arr.shape[1]}, expected {width}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if nonnegative and np.any(arr < 0):
        raise InvalidInputError(f"{name} must be nonnegative")
    return arr


def check_signal(x, name="waveform"):
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidInputError(f"{name} must be 1-D, got shape {arr.shape}")
    if arr.size == 0:
        raise InvalidInputError(f"{name} is empty")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    return arr


def check_sequences(X, name="X", width=None, nonnegative=False):
    """Validate a corpus given as one matrix or a list of matrices.

    Returns
    -------
    seqs : list of ndarray
    single : bool
        True when the caller passed one bare matrix, so results can be
        unwrapped symmetrically.
    """
    if isinstance(X, np.ndarray) and X.ndim == 2:
        return [check_matrix(X, name, width, nonnegative=nonnegative)], True
    seqs = [check_matrix(x, f"{name}[{i}]", width, nonnegative=nonnegative) for i, x in enumerate(X)]
    if not seqs:
        raise InvalidInputError(f"{name} contains no sequences")
    if width is None and len({s.shape[1] for s in seqs}) > 1:
        raise InvalidInputError(f"{name} mixes feature widths")
    return seqs, False


def check_paired(X, Y):
    if len(X) != len(Y):
        raise InvalidInputError(f"got {len(X)} inputs but {len(Y)} targets")
    for i, (x, y) in enumerate(zip(X, Y)):
        if x.shape[0] != y.shape[0]:
            raise InvalidInputError(
                f"sequence {i}: input has {x.shape[0]} frames, target has {y.shape[0]}"
            )
