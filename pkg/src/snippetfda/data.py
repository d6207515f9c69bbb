"""Snippet datasets: storage, CSV I/O and raw covariance products."""

from __future__ import annotations

import csv
import enum
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .exceptions import DataError

CSV_HEADER = ("subject_id", "t", "y")


class Scheme(str, enum.Enum):
    """Weighting scheme: equal weight per observation or per subject."""

    OBS = "OBS"
    SUBJ = "SUBJ"


@dataclass(frozen=True, eq=False)
class Subject:
    id: str
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float).ravel()
        y = np.asarray(self.values, dtype=float).ravel()
        if t.size == 0:
            raise DataError(f"subject {self.id!r} has no observations")
        if t.size != y.size:
            raise DataError(f"subject {self.id!r}: times and values differ in length")
        if np.any(~np.isfinite(t)) or np.any(t < 0) or np.any(t > 1):
            raise DataError(f"subject {self.id!r}: time outside domain [0, 1]")
        if np.any(~np.isfinite(y)):
            raise DataError(f"subject {self.id!r}: non-finite response")
        order = np.argsort(t, kind="stable")
        t, y = t[order], y[order]
        t.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "times", t)
        object.__setattr__(self, "values", y)

    @property
    def m(self) -> int:
        return self.times.size

    def __eq__(self, other):
        if not isinstance(other, Subject):
            return NotImplemented
        return (
            self.id == other.id
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )


class SnippetDataset:
    """Per-subject observation times and responses on [0, 1].

    Parameters
    ----------
    subjects : iterable of Subject
        Subjects in order of appearance. Times are sorted within each subject.
    """

    def __init__(self, subjects: Iterable[Subject]):
        self.subjects = tuple(subjects)
        ids = [s.id for s in self.subjects]
        if len(set(ids)) != len(ids):
            raise DataError("duplicate subject ids")

    @classmethod
    def from_arrays(cls, ids: Sequence, times: Sequence, values: Sequence) -> "SnippetDataset":
        """Group long-format arrays by subject id, keeping first-appearance order."""
        groups: dict[str, tuple[list, list]] = {}
        for i, t, y in zip(ids, times, values):
            g = groups.setdefault(str(i), ([], []))
            g[0].append(t)
            g[1].append(y)
        return cls(Subject(k, np.array(v[0]), np.array(v[1])) for k, v in groups.items())

    def __len__(self) -> int:
        return len(self.subjects)

    def __iter__(self):
        return iter(self.subjects)

    def __getitem__(self, idx):
        return self.subjects[idx]

    def __eq__(self, other):
        if not isinstance(other, SnippetDataset):
            return NotImplemented
        return self.subjects == other.subjects

    def __repr__(self):
        return f"SnippetDataset(n={self.n}, observations={self.counts.sum()})"

    @property
    def n(self) -> int:
        return len(self.subjects)

    @property
    def counts(self) -> np.ndarray:
        return np.array([s.m for s in self.subjects], dtype=int)

    def subset(self, indices: Iterable[int]) -> "SnippetDataset":
        return SnippetDataset(self.subjects[i] for i in indices)

    def long_arrays(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``(subject_index, times, values)`` concatenated over subjects."""
        if not self.subjects:
            return np.empty(0, int), np.empty(0), np.empty(0)
        idx = np.repeat(np.arange(self.n), self.counts)
        t = np.concatenate([s.times for s in self.subjects])
        y = np.concatenate([s.values for s in self.subjects])
        return idx, t, y


def load_csv(path) -> SnippetDataset:
    """Read a dataset from a ``subject_id,t,y`` CSV file."""
    path = Path(path)
    ids, ts, ys = [], [], []
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise DataError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        if tuple(h.strip() for h in header) != CSV_HEADER:
            raise DataError(f"{path}: expected header {','.join(CSV_HEADER)}, got {','.join(header)}")
        for lineno, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != 3:
                raise DataError(f"{path}:{lineno}: malformed row (expected 3 fields)")
            try:
                t = float(row[1])
                y = float(row[2])
            except ValueError:
                raise DataError(f"{path}:{lineno}: malformed row (non-numeric field)") from None
            if not (0.0 <= t <= 1.0):
                raise DataError(f"{path}:{lineno}: time outside domain [0, 1]: {row[1]}")
            if not math.isfinite(y):
                raise DataError(f"{path}:{lineno}: non-finite response")
            ids.append(row[0].strip())
            ts.append(t)
            ys.append(y)
    if not ids:
        raise DataError(f"{path}: empty file")
    return SnippetDataset.from_arrays(ids, ts, ys)


def write_csv(dataset: SnippetDataset, path) -> None:
    """Write a dataset as ``subject_id,t,y`` with 17 significant digits."""
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        for s in dataset:
            for t, y in zip(s.times, s.values):
                w.writerow((s.id, format(t, ".17g"), format(y, ".17g")))


def estimate_delta(dataset: SnippetDataset) -> float:
    """Largest within-subject distance between observation times."""
    if dataset.n == 0:
        raise DataError("empty dataset")
    return float(max(s.times[-1] - s.times[0] for s in dataset))


def mean_weights(counts: np.ndarray, scheme: Scheme) -> np.ndarray:
    """Per-subject weights v_i with ``sum(v_i m_i) == 1``."""
    counts = np.asarray(counts, dtype=float)
    if Scheme(scheme) is Scheme.OBS:
        return np.full(counts.size, 1.0 / counts.sum())
    return 1.0 / (counts.size * counts)


def pair_weights(counts: np.ndarray, scheme: Scheme) -> np.ndarray:
    """Per-subject weights w_i with ``sum(m_i (m_i - 1) w_i) == 1``.

    Subjects with a single observation get weight zero and do not count
    towards ``n`` in the SUBJ scheme.
    """
    counts = np.asarray(counts, dtype=float)
    npairs = counts * (counts - 1)
    w = np.zeros(counts.size)
    has = npairs > 0
    if not has.any():
        return w
    if Scheme(scheme) is Scheme.OBS:
        w[has] = 1.0 / npairs.sum()
    else:
        w[has] = 1.0 / (has.sum() * npairs[has])
    return w


@dataclass(frozen=True)
class RawCovariances:
    """Raw covariance products, one row per ordered within-subject pair.

    Off-diagonal rows (``j != l``) are in ``s, t, gamma, subject, weight``;
    diagonal products ``Gamma_ijj`` are kept apart in ``diag_t, diag_gamma,
    diag_subject``.
    """

    s: np.ndarray
    t: np.ndarray
    gamma: np.ndarray
    subject: np.ndarray
    weight: np.ndarray
    diag_t: np.ndarray
    diag_gamma: np.ndarray
    diag_subject: np.ndarray
    subject_weights: np.ndarray

    def __len__(self) -> int:
        return self.s.size


def raw_covariances(
    dataset: SnippetDataset,
    mean_fn: Callable[[np.ndarray], np.ndarray],
    scheme: Scheme = Scheme.OBS,
) -> RawCovariances:
    """Products of mean-centred responses for all ordered pairs within subjects.

    Parameters
    ----------
    dataset : SnippetDataset
    mean_fn : callable
        Vectorised mean function on [0, 1].
    scheme : Scheme
        Pair weighting scheme (OBS or SUBJ).
    """
    counts = dataset.counts
    wsub = pair_weights(counts, scheme)
    S, T, G, I = [], [], [], []
    Dt, Dg, Di = [], [], []
    for i, subj in enumerate(dataset):
        if subj.m < 2:
            continue
        r = subj.values - np.asarray(mean_fn(subj.times), dtype=float)
        j, l = np.nonzero(~np.eye(subj.m, dtype=bool))
        S.append(subj.times[j])
        T.append(subj.times[l])
        G.append(r[j] * r[l])
        I.append(np.full(j.size, i))
        Dt.append(subj.times)
        Dg.append(r * r)
        Di.append(np.full(subj.m, i))

    def cat(parts, dtype=float):
        return np.concatenate(parts).astype(dtype) if parts else np.empty(0, dtype)

    subject = cat(I, int)
    return RawCovariances(
        s=cat(S),
        t=cat(T),
        gamma=cat(G),
        subject=subject,
        weight=wsub[subject],
        diag_t=cat(Dt),
        diag_gamma=cat(Dg),
        diag_subject=cat(Di, int),
        subject_weights=wsub,
    )
