"""Longitudinal dataset types, CSV ingestion, and structural validation.

The on-disk format is long: one row per (participant, visit) with columns
``pid, time_years, u_<item>..., z_<drug>..., x_<covariate>...``. Missing
ordinal scores are empty cells. Covariates include an explicit intercept
column (all ones) as the first x_ column.
"""

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DuplicateVisitTime,
    MissingColumn,
    NonBinaryDrugValue,
    ScoreOutOfRange,
)

VALID_SCORES = (0.0, 1.0, 2.0, 3.0)


@dataclass
class Visit:
    """One clinic visit: time since the participant's first visit (years),
    covariate vector (intercept first), binary drug indicators, and ordinal
    item scores with NaN marking a missing score."""

    time_years: float
    covariates: np.ndarray
    drugs: np.ndarray
    scores: np.ndarray


@dataclass
class Participant:
    id: str
    visits: list[Visit]

    @property
    def n_visits(self):
        return len(self.visits)


@dataclass
class Dataset:
    participants: list[Participant]
    drug_names: list[str]
    item_names: list[str]
    covariate_names: list[str]

    @property
    def n(self):
        return len(self.participants)

    @property
    def n_drugs(self):
        return len(self.drug_names)

    @property
    def n_items(self):
        return len(self.item_names)

    @property
    def n_covariates(self):
        return len(self.covariate_names)

    @property
    def total_visits(self):
        return sum(p.n_visits for p in self.participants)

    def iter_visits(self):
        """Yield (participant_index, visit_index, visit) in storage order."""
        for i, p in enumerate(self.participants):
            for j, v in enumerate(p.visits):
                yield i, j, v

    def participant_index(self, pid):
        for i, p in enumerate(self.participants):
            if p.id == pid:
                return i
        raise KeyError(pid)

    def max_time(self):
        return max(v.time_years for p in self.participants for v in p.visits)

    def median_gap(self):
        """Median inter-visit gap pooled over participants (>= 2 visits)."""
        gaps = [
            p.visits[j + 1].time_years - p.visits[j].time_years
            for p in self.participants
            for j in range(p.n_visits - 1)
        ]
        return float(np.median(gaps)) if gaps else 1.0


@dataclass
class ColumnSchema:
    """Column-name mapping for CSV ingestion."""

    pid: str = "pid"
    time: str = "time_years"
    score_prefix: str = "u_"
    drug_prefix: str = "z_"
    covariate_prefix: str = "x_"


@dataclass
class Violation:
    kind: str
    where: str
    message: str

    def __str__(self):
        return f"{self.kind}({self.where}): {self.message}"


def _parse_score(cell, where):
    if cell is None or cell.strip() == "":
        return math.nan
    try:
        v = float(cell)
    except ValueError:
        raise ScoreOutOfRange(f"{where}: non-numeric score {cell!r}")
    if v not in VALID_SCORES:
        raise ScoreOutOfRange(f"{where}: score {cell!r} not in {{0,1,2,3}}")
    return v


def _parse_drug(cell, where):
    try:
        v = float(cell)
    except (TypeError, ValueError):
        raise NonBinaryDrugValue(f"{where}: non-numeric drug indicator {cell!r}")
    if v not in (0.0, 1.0):
        raise NonBinaryDrugValue(f"{where}: drug indicator {cell!r} not 0/1")
    return v


def load_dataset(path, schema=None):
    """Read a long-format CSV into a Dataset.

    Visits are sorted by time within participant and times re-based so each
    participant's first visit is at 0. Participants keep file order (first
    appearance). Raises MissingColumn, ScoreOutOfRange, NonBinaryDrugValue,
    or DuplicateVisitTime on malformed input.
    """
    schema = schema or ColumnSchema()
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise MissingColumn(f"{path}: empty file")
        cols = reader.fieldnames
        for required in (schema.pid, schema.time):
            if required not in cols:
                raise MissingColumn(f"{path}: missing column {required!r}")
        item_cols = [c for c in cols if c.startswith(schema.score_prefix)]
        drug_cols = [c for c in cols if c.startswith(schema.drug_prefix)]
        covar_cols = [c for c in cols if c.startswith(schema.covariate_prefix)]
        if not item_cols:
            raise MissingColumn(f"{path}: no {schema.score_prefix}* score columns")
        if not covar_cols:
            raise MissingColumn(f"{path}: no {schema.covariate_prefix}* covariate columns")

        rows_by_pid = {}
        for lineno, row in enumerate(reader, start=2):
            pid = row[schema.pid]
            where = f"{path}:{lineno}"
            try:
                t = float(row[schema.time])
            except (TypeError, ValueError):
                raise DuplicateVisitTime(f"{where}: unparseable time {row[schema.time]!r}")
            visit = Visit(
                time_years=t,
                covariates=np.array([float(row[c]) for c in covar_cols]),
                drugs=np.array([_parse_drug(row[c], where) for c in drug_cols]),
                scores=np.array([_parse_score(row[c], where) for c in item_cols]),
            )
            rows_by_pid.setdefault(pid, []).append(visit)

    participants = []
    for pid, visits in rows_by_pid.items():
        visits.sort(key=lambda v: v.time_years)
        times = [v.time_years for v in visits]
        for a, b in zip(times, times[1:]):
            if a == b:
                raise DuplicateVisitTime(f"participant {pid!r}: repeated visit time {a}")
        t0 = times[0]
        for v in visits:
            v.time_years = v.time_years - t0
        participants.append(Participant(id=pid, visits=visits))

    strip = len(schema.score_prefix)
    return Dataset(
        participants=participants,
        drug_names=[c[len(schema.drug_prefix):] for c in drug_cols],
        item_names=[c[strip:] for c in item_cols],
        covariate_names=[c[len(schema.covariate_prefix):] for c in covar_cols],
    )


def save_dataset(ds, path, schema=None):
    """Write a Dataset back to the long CSV format (inverse of load_dataset)."""
    schema = schema or ColumnSchema()
    header = (
        [schema.pid, schema.time]
        + [schema.score_prefix + n for n in ds.item_names]
        + [schema.drug_prefix + n for n in ds.drug_names]
        + [schema.covariate_prefix + n for n in ds.covariate_names]
    )
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for p in ds.participants:
            for v in p.visits:
                scores = ["" if math.isnan(s) else str(int(s)) for s in v.scores]
                writer.writerow(
                    [p.id, repr(float(v.time_years))]
                    + scores
                    + [str(int(z)) for z in v.drugs]
                    + [repr(float(x)) for x in v.covariates]
                )


def validate(ds):
    """Check every structural invariant; return a list of Violations.

    Reports rather than raises, so callers can surface all problems at once.
    An empty list means the dataset is well formed.
    """
    out = []
    if ds.n < 1:
        out.append(Violation("EmptyDataset", "dataset", "no participants"))
    ids = set()
    for p in ds.participants:
        if p.id in ids:
            out.append(Violation("DuplicateParticipant", p.id, "repeated participant id"))
        ids.add(p.id)
        if not p.visits:
            out.append(Violation("NoVisits", p.id, "participant has no visits"))
            continue
        if p.visits[0].time_years != 0.0:
            out.append(
                Violation("FirstVisitNonzero", p.id, f"first visit at t={p.visits[0].time_years}")
            )
        times = [v.time_years for v in p.visits]
        if any(b <= a for a, b in zip(times, times[1:])):
            out.append(Violation("OrderingViolation", p.id, f"visit times not increasing: {times}"))
        for j, v in enumerate(p.visits):
            where = f"{p.id}/visit{j}"
            if v.covariates.shape != (ds.n_covariates,):
                out.append(Violation("DimensionMismatch", where, "covariate length != S"))
            elif v.covariates[0] != 1.0:
                out.append(Violation("InterceptViolation", where, f"covariates[0] = {v.covariates[0]}"))
            if v.drugs.shape != (ds.n_drugs,):
                out.append(Violation("DimensionMismatch", where, "drug vector length != D"))
            elif not np.all(np.isin(v.drugs, (0.0, 1.0))):
                out.append(Violation("NonBinaryDrug", where, f"drugs = {v.drugs}"))
            if v.scores.shape != (ds.n_items,):
                out.append(Violation("DimensionMismatch", where, "score vector length != Q"))
            else:
                obs = v.scores[~np.isnan(v.scores)]
                if not np.all(np.isin(obs, VALID_SCORES)):
                    out.append(Violation("ScoreOutOfRange", where, f"scores = {v.scores}"))
            if v.time_years < 0:
                out.append(Violation("NegativeTime", where, f"t = {v.time_years}"))
    return out
