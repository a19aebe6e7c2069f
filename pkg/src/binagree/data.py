"""Measurement records, CSV ingestion and the wide-to-long reshape.

A study is recorded "wide": one row per (subject, time) holding the paired
outcomes of both methods and the two raters who produced them.  The fitter
consumes the "long" layout, one record per (subject, rater, method, time).
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "DataError",
    "PairedRecord",
    "MeasurementRecord",
    "LongDataset",
    "ValidationReport",
    "DEFAULT_COLUMNS",
    "parse_wide_csv",
    "read_wide_csv",
    "widen_to_long",
    "pair_up",
    "validate",
]

DEFAULT_COLUMNS = {
    "id": "id",
    "time": "time",
    "outcome_m1": "method1",
    "outcome_m2": "method2",
    "rater_m1": "rater1",
    "rater_m2": "rater2",
}


class DataError(ValueError):
    """Raised for malformed or inconsistent input data."""


@dataclass(frozen=True)
class PairedRecord:
    subject_id: str
    time: float
    outcome_m1: int
    outcome_m2: int
    rater_m1: str
    rater_m2: str


@dataclass(frozen=True)
class MeasurementRecord:
    subject_index: int
    rater_index: int
    method: int  # 1 or 2
    time: float
    outcome: int


@dataclass(frozen=True)
class LongDataset:
    """Long-format data, sorted by (subject, method, time).

    The per-record arrays (``subject``, ``rater``, ``method``, ``time``, ``y``)
    are the working representation; ``records`` rebuilds the record view.
    """

    subject: np.ndarray
    rater: np.ndarray
    method: np.ndarray
    time: np.ndarray
    y: np.ndarray
    subject_labels: tuple[str, ...]
    rater_labels: tuple[str, ...]

    def __post_init__(self):
        n = len(self.y)
        for name in ("subject", "rater", "method", "time"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name!r} has inconsistent length")
        for arr in (self.subject, self.rater, self.method, self.time, self.y):
            arr.setflags(write=False)

    @property
    def n_subjects(self) -> int:
        return len(self.subject_labels)

    @property
    def n_raters(self) -> int:
        return len(self.rater_labels)

    def __len__(self) -> int:
        return len(self.y)

    @property
    def records(self) -> list[MeasurementRecord]:
        return [
            MeasurementRecord(int(s), int(r), int(m), float(t), int(v))
            for s, r, m, t, v in zip(self.subject, self.rater, self.method, self.time, self.y)
        ]

    def times_for(self, subject: int) -> np.ndarray:
        """Distinct observed times of one subject, sorted."""
        return np.unique(self.time[self.subject == subject])

    @property
    def n_times(self) -> np.ndarray:
        """Number of distinct time points per subject (T_i)."""
        return np.array([len(self.times_for(i)) for i in range(self.n_subjects)])

    @classmethod
    def from_arrays(
        cls,
        subject,
        rater,
        method,
        time,
        y,
        subject_labels: Sequence[str] | None = None,
        rater_labels: Sequence[str] | None = None,
    ) -> "LongDataset":
        """Build a dataset from parallel arrays, sorting into canonical order."""
        subject = np.asarray(subject, dtype=np.int64)
        rater = np.asarray(rater, dtype=np.int64)
        method = np.asarray(method, dtype=np.int64)
        time = np.asarray(time, dtype=float)
        y = np.asarray(y, dtype=np.int64)
        if len(y) == 0:
            raise DataError("empty dataset")
        if not np.isin(method, (1, 2)).all():
            raise DataError("method must be 1 or 2")
        if not np.isin(y, (0, 1)).all():
            raise DataError("outcomes must be 0 or 1")
        if not np.isfinite(time).all():
            raise DataError("times must be finite")
        n_sub = int(subject.max()) + 1
        n_rat = int(rater.max()) + 1
        if subject.min() < 0 or rater.min() < 0:
            raise DataError("negative index")
        if subject_labels is None:
            subject_labels = [str(i) for i in range(n_sub)]
        if rater_labels is None:
            rater_labels = [str(j) for j in range(n_rat)]
        if len(subject_labels) != n_sub or len(set(np.unique(subject))) != n_sub:
            raise DataError("subject index map is not dense")
        if len(rater_labels) != n_rat or len(np.unique(rater)) != n_rat:
            raise DataError("rater index map is not dense")
        order = np.lexsort((time, method, subject))
        key = np.stack([subject[order], method[order], time[order]], axis=1)
        if len(key) > 1 and (np.diff(key, axis=0) == 0).all(axis=1).any():
            raise DataError("duplicate (subject, method, time) record")
        return cls(
            subject[order],
            rater[order],
            method[order],
            time[order],
            y[order],
            tuple(subject_labels),
            tuple(rater_labels),
        )


def _outcome(token: str, positive: str, negative: str | None, line: int) -> int:
    if token == positive:
        return 1
    if negative is None or token == negative:
        return 0
    raise DataError(f"line {line}: unknown outcome label {token!r}")


def parse_wide_csv(
    text: str | bytes,
    label_positive: str = "Positive",
    label_negative: str | None = "Negative",
    columns: dict[str, str] | None = None,
) -> list[PairedRecord]:
    """Parse the paired (wide) CSV layout.

    Outcome labels are matched case-sensitively: ``label_positive`` maps to 1,
    ``label_negative`` maps to 0 and anything else is rejected.  Passing
    ``label_negative=None`` treats every non-positive label as 0.
    """
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    cols = dict(DEFAULT_COLUMNS)
    cols.update(columns or {})
    reader = csv.reader(io.StringIO(text), skipinitialspace=True)
    try:
        header = [h.strip() for h in next(reader)]
    except StopIteration:
        raise DataError("empty input: header row missing") from None
    try:
        pos = {k: header.index(v) for k, v in cols.items()}
    except ValueError as exc:
        raise DataError(f"header {header} lacks a required column: {exc}") from None

    out: list[PairedRecord] = []
    seen: set[tuple[str, float]] = set()
    for row in reader:
        line = reader.line_num
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise DataError(f"line {line}: expected {len(header)} fields, got {len(row)}")
        row = [c.strip() for c in row]
        try:
            t = float(row[pos["time"]])
        except ValueError:
            raise DataError(f"line {line}: time {row[pos['time']]!r} is not a number") from None
        sid = row[pos["id"]]
        if (sid, t) in seen:
            raise DataError(f"line {line}: duplicate (id, time) = ({sid}, {t:g})")
        seen.add((sid, t))
        out.append(
            PairedRecord(
                subject_id=sid,
                time=t,
                outcome_m1=_outcome(row[pos["outcome_m1"]], label_positive, label_negative, line),
                outcome_m2=_outcome(row[pos["outcome_m2"]], label_positive, label_negative, line),
                rater_m1=row[pos["rater_m1"]],
                rater_m2=row[pos["rater_m2"]],
            )
        )
    if not out:
        raise DataError("empty dataset")
    return out


def read_wide_csv(path, **kwargs) -> list[PairedRecord]:
    with open(path, "rb") as fh:
        return parse_wide_csv(fh.read(), **kwargs)


def _label_index(labels: Iterable[str]) -> dict[str, int]:
    # first-appearance order keeps indices stable under row permutations of a sorted file
    index: dict[str, int] = {}
    for lab in labels:
        index.setdefault(lab, len(index))
    return index


def widen_to_long(paired: Sequence[PairedRecord]) -> LongDataset:
    """Reshape paired records into one record per (subject, method, time).

    Raters share one index space across both methods.
    """
    if not paired:
        raise DataError("empty dataset")
    sub_idx = _label_index(p.subject_id for p in paired)
    rat_idx = _label_index(r for p in paired for r in (p.rater_m1, p.rater_m2))
    n = len(paired)
    subject = np.empty(2 * n, dtype=np.int64)
    rater = np.empty(2 * n, dtype=np.int64)
    method = np.empty(2 * n, dtype=np.int64)
    time = np.empty(2 * n)
    y = np.empty(2 * n, dtype=np.int64)
    for k, p in enumerate(paired):
        for m, (out, rat) in enumerate(((p.outcome_m1, p.rater_m1), (p.outcome_m2, p.rater_m2)), 1):
            i = 2 * k + m - 1
            subject[i] = sub_idx[p.subject_id]
            rater[i] = rat_idx[rat]
            method[i] = m
            time[i] = p.time
            y[i] = out
    return LongDataset.from_arrays(
        subject, rater, method, time, y, list(sub_idx), list(rat_idx)
    )


def pair_up(ds: LongDataset) -> list[PairedRecord]:
    """Inverse of :func:`widen_to_long` for fully paired data."""
    m1 = {}
    m2 = {}
    for s, r, m, t, v in zip(ds.subject, ds.rater, ds.method, ds.time, ds.y):
        (m1 if m == 1 else m2)[(int(s), float(t))] = (int(v), int(r))
    if m1.keys() != m2.keys():
        raise DataError("dataset is not fully paired")
    out = []
    for key in sorted(m1):
        s, t = key
        (y1, r1), (y2, r2) = m1[key], m2[key]
        out.append(
            PairedRecord(
                ds.subject_labels[s], t, y1, y2, ds.rater_labels[r1], ds.rater_labels[r2]
            )
        )
    return out


@dataclass
class ValidationReport:
    n_records: int
    n_subjects: int
    n_raters: int
    min_times: int
    max_times: int
    prevalence: dict[int, float]
    constant_subjects: list[str] = field(default_factory=list)
    single_method_raters: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)

    @property
    def balanced(self) -> bool:
        return self.min_times == self.max_times

    def as_dict(self) -> dict[str, object]:
        return {
            "n_records": self.n_records,
            "n_subjects": self.n_subjects,
            "n_raters": self.n_raters,
            "min_times": self.min_times,
            "max_times": self.max_times,
            "balanced": self.balanced,
            "prevalence_m1": self.prevalence[1],
            "prevalence_m2": self.prevalence[2],
            "n_constant_subjects": len(self.constant_subjects),
            "constant_subjects": ";".join(self.constant_subjects),
            "single_method_raters": ";".join(self.single_method_raters),
            "flags": ";".join(self.flags),
        }


def validate(ds: LongDataset) -> ValidationReport:
    """Summarize data quality issues; never raises."""
    n_times = ds.n_times
    prevalence = {
        m: float(ds.y[ds.method == m].mean()) if (ds.method == m).any() else float("nan")
        for m in (1, 2)
    }
    constant = [
        ds.subject_labels[i]
        for i in range(ds.n_subjects)
        if len(np.unique(ds.y[ds.subject == i])) == 1
    ]
    single = [
        ds.rater_labels[j]
        for j in range(ds.n_raters)
        if len(np.unique(ds.method[ds.rater == j])) == 1
    ]
    flags = []
    if len(np.unique(ds.y)) == 1:
        flags.append("complete separation: constant response")
    else:
        for m in (1, 2):
            ym = ds.y[ds.method == m]
            if len(ym) and len(np.unique(ym)) == 1:
                flags.append(f"complete separation: constant response under method {m}")
    if ds.n_subjects < 2:
        flags.append("fewer than 2 subjects")
    if ds.n_raters < 2:
        flags.append("fewer than 2 raters")
    return ValidationReport(
        n_records=len(ds),
        n_subjects=ds.n_subjects,
        n_raters=ds.n_raters,
        min_times=int(n_times.min()),
        max_times=int(n_times.max()),
        prevalence=prevalence,
        constant_subjects=constant,
        single_method_raters=single,
        flags=flags,
    )
