"""Hankel (time-delay) embedding and DMDc snapshot construction."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class EmbeddingError(ValueError):
    pass


@dataclass(frozen=True)
class HankelMatrix:
    data: np.ndarray  # m x (N - m + 1); column j holds seq[j:j+m]
    source_len: int

    @property
    def m(self) -> int:
        return self.data.shape[0]

    @property
    def n_cols(self) -> int:
        return self.data.shape[1]

    def unembed(self) -> np.ndarray:
        """Recover the source sequence from the first row and last column."""
        return np.concatenate([self.data[0, :], self.data[1:, -1]])


def hankel(seq, m: int) -> HankelMatrix:
    seq = np.asarray(seq, dtype=float)
    if seq.ndim != 1:
        raise EmbeddingError("hankel expects a 1-D sequence")
    n = len(seq)
    if not 1 <= m <= n:
        raise EmbeddingError(f"embedding dimension m={m} must satisfy 1 <= m <= N={n}")
    view = np.lib.stride_tricks.sliding_window_view(seq, m)  # (n-m+1, m)
    return HankelMatrix(np.ascontiguousarray(view.T), n)


@dataclass(frozen=True)
class SnapshotTriple:
    X: np.ndarray
    Xp: np.ndarray
    U: np.ndarray

    def __post_init__(self):
        X, Xp, U = (np.atleast_2d(np.asarray(a, dtype=float)) for a in (self.X, self.Xp, self.U))
        if X.shape != Xp.shape:
            raise EmbeddingError(f"X {X.shape} and X' {Xp.shape} differ in shape")
        if U.shape[1] != X.shape[1]:
            raise EmbeddingError(f"U has {U.shape[1]} columns, X has {X.shape[1]}")
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Xp", Xp)
        object.__setattr__(self, "U", U)

    @property
    def m(self) -> int:
        return self.X.shape[0]

    @property
    def d_u(self) -> int:
        return self.U.shape[0]

    @property
    def K(self) -> int:
        return self.X.shape[1]


def snapshots_from_arrays(v, i, m: int, d_u: int) -> SnapshotTriple:
    """Build (X, X', U) with K = N - m shared columns.

    Column k of X stacks v[k:k+m]; X' is the same window one sample later;
    U stacks i[k+m-d_u:k+m], so its newest entry is the current at the
    newest observed voltage of X's column (not at the predicted sample).
    """
    v = np.asarray(v, dtype=float)
    i = np.asarray(i, dtype=float)
    n = len(v)
    if len(i) != n:
        raise EmbeddingError("voltage and current lengths differ")
    if m < 1 or m + 1 > n:
        raise EmbeddingError(f"series of length {n} too short for m={m}")
    if not 1 <= d_u <= m:
        raise EmbeddingError(f"d_u={d_u} must satisfy 1 <= d_u <= m={m}")
    K = n - m
    H = hankel(v, m).data
    Hu = hankel(i, d_u).data
    return SnapshotTriple(H[:, :K], H[:, 1:K + 1], Hu[:, m - d_u:m - d_u + K])


def snapshots(series, m: int, d_u: int) -> SnapshotTriple:
    return snapshots_from_arrays(series.v, series.i, m, d_u)


def input_windows(i, m: int, d_u: int, start: int, steps: int) -> np.ndarray:
    """Input vectors u_k for rollout steps k = start .. start+steps-1.

    Uses the same alignment as :func:`snapshots_from_arrays`; returns
    shape (steps, d_u).
    """
    i = np.asarray(i, dtype=float)
    lo = start + m - d_u
    if lo < 0 or lo + steps + d_u - 1 > len(i):
        raise EmbeddingError("not enough input samples for the requested steps")
    return np.lib.stride_tricks.sliding_window_view(i[lo:lo + steps + d_u - 1], d_u).copy()
