"""Survival cohort data model: CSV ingestion, standardization, stratified splits.

A cohort holds one row per subject: covariates ``X``, binary treatment ``W``,
observed time ``T`` in months, and event indicator ``delta`` (1 = event,
0 = censored). Categorical covariates are one-hot expanded at ingestion so
downstream models always see a numeric matrix.
"""

from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CastError, MissingColumn, ParseError, TooFewEvents

RESERVED_COLUMNS = ("time_months", "event", "treatment")
ID_COLUMN = "id"
MISSING_TOKENS = frozenset({"", "NA", "NaN", "nan", "na"})

CONTINUOUS = "continuous"
BINARY = "binary"
CATEGORICAL = "categorical"  # config kind; expands to one-hot columns
ONEHOT = "onehot"


@dataclass
class ColumnSchema:
    """Covariate column labels, kinds, and standardization statistics.

    ``kinds[j]`` is one of ``continuous``, ``binary``, ``onehot``. One-hot
    members carry their source column in ``onehot_groups``. ``means``/``sds``
    are populated by :func:`standardize` for continuous columns (NaN
    elsewhere); ``constant_columns`` lists continuous columns left
    untransformed because their sample SD was zero.
    """

    names: list[str]
    kinds: list[str]
    onehot_groups: dict[str, list[str]] = field(default_factory=dict)
    means: np.ndarray | None = None
    sds: np.ndarray | None = None
    constant_columns: list[str] = field(default_factory=list)

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise CastError("covariate column names must be unique")
        if len(self.kinds) != len(self.names):
            raise CastError("kinds and names must align")

    @property
    def p(self) -> int:
        return len(self.names)

    def continuous_indices(self) -> np.ndarray:
        return np.array([j for j, k in enumerate(self.kinds) if k == CONTINUOUS], dtype=int)


@dataclass
class SubjectRecord:
    id: str
    covariates: np.ndarray
    treatment: int
    time_months: float
    event: int


@dataclass
class SurvivalCohort:
    """Array-backed cohort; ``subjects`` materializes per-row records."""

    ids: list[str]
    X: np.ndarray
    treatment: np.ndarray
    time_months: np.ndarray
    event: np.ndarray
    schema: ColumnSchema
    standardized: bool = False

    def __post_init__(self):
        self.X = np.asarray(self.X, dtype=float)
        self.treatment = np.asarray(self.treatment, dtype=int)
        self.time_months = np.asarray(self.time_months, dtype=float)
        self.event = np.asarray(self.event, dtype=int)
        self.validate()

    def validate(self) -> None:
        n = len(self.ids)
        if self.X.shape != (n, self.schema.p):
            raise CastError(f"X shape {self.X.shape} does not match {n} ids x {self.schema.p} columns")
        if not np.all(np.isfinite(self.X)):
            raise CastError("covariates contain non-finite values")
        if not np.all(self.time_months > 0):
            raise CastError("every time_months must be positive")
        if not np.isin(self.event, (0, 1)).all():
            raise CastError("event indicators must be 0/1")
        if not np.isin(self.treatment, (0, 1)).all():
            raise CastError("treatment indicators must be 0/1")

    @property
    def n(self) -> int:
        return len(self.ids)

    @property
    def p(self) -> int:
        return self.schema.p

    @property
    def event_rate(self) -> float:
        return float(self.event.mean())

    @property
    def treatment_rate(self) -> float:
        return float(self.treatment.mean())

    @property
    def subjects(self) -> list[SubjectRecord]:
        return [
            SubjectRecord(self.ids[i], self.X[i].copy(), int(self.treatment[i]),
                          float(self.time_months[i]), int(self.event[i]))
            for i in range(self.n)
        ]

    def subset(self, index: np.ndarray) -> "SurvivalCohort":
        """New cohort restricted to the given integer or boolean index."""
        index = np.asarray(index)
        if index.dtype == bool:
            index = np.nonzero(index)[0]
        return SurvivalCohort(
            ids=[self.ids[i] for i in index],
            X=self.X[index].copy(),
            treatment=self.treatment[index].copy(),
            time_months=self.time_months[index].copy(),
            event=self.event[index].copy(),
            schema=self.schema,
            standardized=self.standardized,
        )

    def with_covariates(self, X: np.ndarray, schema: ColumnSchema) -> "SurvivalCohort":
        """New cohort with a replaced covariate block (outcome columns shared)."""
        return SurvivalCohort(
            ids=list(self.ids), X=X, treatment=self.treatment.copy(),
            time_months=self.time_months.copy(), event=self.event.copy(),
            schema=schema, standardized=self.standardized,
        )


@dataclass
class SplitAssignment:
    train_ids: list[str]
    test_ids: list[str]
    seed: int
    train_fraction: float


@dataclass
class IngestResult:
    cohort: SurvivalCohort
    dropped_count: int
    dropped_reasons: dict[str, int]


def parse_schema_config(source) -> dict[str, str]:
    """Column-name -> kind mapping from a dict or a ``name = kind`` text file."""
    if isinstance(source, dict):
        mapping = dict(source)
    else:
        mapping = {}
        with open(source, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if not line or line.startswith("#"):
                    continue
                if "=" not in line:
                    raise ParseError(f"{source}:{lineno}: expected 'column = kind'")
                name, kind = (part.strip() for part in line.split("=", 1))
                mapping[name] = kind
    for name, kind in mapping.items():
        if kind not in (CONTINUOUS, BINARY, CATEGORICAL):
            raise ParseError(f"unknown column kind {kind!r} for {name!r}")
    return mapping


def _parse_float(raw: str, column: str, row: int) -> float:
    try:
        value = float(raw)
    except ValueError:
        raise ParseError(f"row {row}: column {column!r}: cannot parse {raw!r} as a number") from None
    if not np.isfinite(value):
        raise ParseError(f"row {row}: column {column!r}: non-finite value {raw!r}")
    return value


def _parse_binary(raw: str, column: str, row: int) -> int:
    value = _parse_float(raw, column, row)
    if value not in (0.0, 1.0):
        raise ParseError(f"row {row}: column {column!r}: expected 0/1, got {raw!r}")
    return int(value)


def ingest_csv(path, schema_config) -> IngestResult:
    """Read a cohort CSV, one-hot expand categoricals, drop incomplete rows.

    Rows with any missing required field are dropped and counted (listwise
    deletion); rows with non-positive time are rejected and counted. Malformed
    numerics raise :class:`ParseError`.
    """
    mapping = parse_schema_config(schema_config)
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError(f"{path}: empty file") from None
        rows = list(reader)

    col_index = {name: j for j, name in enumerate(header)}
    for required in RESERVED_COLUMNS:
        if required not in col_index:
            raise MissingColumn(f"required column {required!r} not in header")
    for name in mapping:
        if name not in col_index:
            raise MissingColumn(f"schema column {name!r} not in header")

    covariate_cols = [name for name in header if name in mapping]
    has_id = ID_COLUMN in col_index

    kept_rows, ids = [], []
    dropped = {"missing": 0, "non_positive_time": 0}
    for r, row in enumerate(rows, start=2):  # row 1 is the header
        if len(row) != len(header):
            raise ParseError(f"row {r}: expected {len(header)} cells, got {len(row)}")
        cells = {name: row[col_index[name]].strip() for name in (*RESERVED_COLUMNS, *covariate_cols)}
        if any(cells[name] in MISSING_TOKENS for name in cells):
            dropped["missing"] += 1
            continue
        time = _parse_float(cells["time_months"], "time_months", r)
        if time <= 0:
            dropped["non_positive_time"] += 1
            continue
        kept_rows.append((r, time, cells))
        ids.append(row[col_index[ID_COLUMN]].strip() if has_id else f"s{r - 2}")

    if len(set(ids)) != len(ids):
        raise ParseError("subject ids are not unique")

    # observed levels of each categorical column, in sorted order
    levels: dict[str, list[str]] = {}
    for name in covariate_cols:
        if mapping[name] == CATEGORICAL:
            levels[name] = sorted({cells[name] for _, _, cells in kept_rows})

    names: list[str] = []
    kinds: list[str] = []
    groups: dict[str, list[str]] = {}
    for name in covariate_cols:
        if mapping[name] == CATEGORICAL:
            members = [f"{name}={lvl}" for lvl in levels[name]]
            names.extend(members)
            kinds.extend([ONEHOT] * len(members))
            groups[name] = members
        else:
            names.append(name)
            kinds.append(mapping[name])

    n = len(kept_rows)
    X = np.zeros((n, len(names)))
    treatment = np.zeros(n, dtype=int)
    event = np.zeros(n, dtype=int)
    times = np.zeros(n)
    for i, (r, time, cells) in enumerate(kept_rows):
        times[i] = time
        event[i] = _parse_binary(cells["event"], "event", r)
        treatment[i] = _parse_binary(cells["treatment"], "treatment", r)
        j = 0
        for name in covariate_cols:
            if mapping[name] == CATEGORICAL:
                for lvl in levels[name]:
                    X[i, j] = 1.0 if cells[name] == lvl else 0.0
                    j += 1
            elif mapping[name] == BINARY:
                X[i, j] = _parse_binary(cells[name], name, r)
                j += 1
            else:
                X[i, j] = _parse_float(cells[name], name, r)
                j += 1

    schema = ColumnSchema(names=names, kinds=kinds, onehot_groups=groups)
    cohort = SurvivalCohort(ids=ids, X=X, treatment=treatment,
                            time_months=times, event=event, schema=schema)
    return IngestResult(cohort=cohort, dropped_count=sum(dropped.values()),
                        dropped_reasons=dropped)


def standardize(cohort: SurvivalCohort, stats_from: ColumnSchema | None = None) -> SurvivalCohort:
    """Transform continuous columns to (x - mean)/SD; binary/one-hot untouched.

    With ``stats_from`` given, that schema's training statistics are applied
    (the test-set path); otherwise statistics are computed from ``cohort``.
    Constant columns are passed through and flagged with a warning.
    """
    if cohort.standardized:
        raise CastError("cohort is already standardized")
    X = cohort.X.copy()
    cont = cohort.schema.continuous_indices()

    if stats_from is not None:
        if stats_from.names != cohort.schema.names:
            raise CastError("stats_from schema does not match this cohort")
        if stats_from.means is None or stats_from.sds is None:
            raise CastError("stats_from carries no standardization statistics")
        means, sds = stats_from.means, stats_from.sds
        constant = list(stats_from.constant_columns)
    else:
        means = np.full(cohort.p, np.nan)
        sds = np.full(cohort.p, np.nan)
        constant = []
        for j in cont:
            means[j] = X[:, j].mean()
            sds[j] = X[:, j].std(ddof=0)
            if sds[j] < 1e-12:
                constant.append(cohort.schema.names[j])
                warnings.warn(f"column {cohort.schema.names[j]!r} is constant; left unstandardized")

    for j in cont:
        name = cohort.schema.names[j]
        if name in constant or not np.isfinite(sds[j]) or sds[j] < 1e-12:
            continue
        X[:, j] = (X[:, j] - means[j]) / sds[j]

    schema = replace(cohort.schema, means=means.copy(), sds=sds.copy(),
                     constant_columns=constant)
    return SurvivalCohort(ids=list(cohort.ids), X=X, treatment=cohort.treatment.copy(),
                          time_months=cohort.time_months.copy(), event=cohort.event.copy(),
                          schema=schema, standardized=True)


def stratified_split(cohort: SurvivalCohort, train_fraction: float = 0.75,
                     seed: int = 0) -> SplitAssignment:
    """Deterministic split stratified on the event indicator.

    Subjects are shuffled within the event and censored strata and allocated
    proportionally, keeping the train/test event rates within 0.02.
    """
    if cohort.n == 0:
        raise CastError("cannot split an empty cohort")
    if not 0.0 < train_fraction < 1.0:
        raise CastError("train_fraction must be in (0, 1)")
    n_events = int(cohort.event.sum())
    if n_events < 4:
        raise TooFewEvents(f"need at least 4 events to stratify, have {n_events}")

    rng = np.random.default_rng([seed, 0x5B17])
    ev_idx = np.nonzero(cohort.event == 1)[0]
    ce_idx = np.nonzero(cohort.event == 0)[0]
    ev_idx = ev_idx[rng.permutation(len(ev_idx))]
    ce_idx = ce_idx[rng.permutation(len(ce_idx))]

    n_ev_train = int(round(train_fraction * len(ev_idx)))
    n_ev_train = min(max(n_ev_train, 1), len(ev_idx) - 1)

    # pick the censored allocation that best matches the event rates
    def rate_gap(n_ce_train: int) -> float:
        tr_n = n_ev_train + n_ce_train
        te_n = cohort.n - tr_n
        if tr_n == 0 or te_n == 0:
            return np.inf
        tr_rate = n_ev_train / tr_n
        te_rate = (len(ev_idx) - n_ev_train) / te_n
        return abs(tr_rate - te_rate)

    target = train_fraction * len(ce_idx)
    candidates = sorted({int(np.floor(target)), int(round(target)), int(np.ceil(target))})
    candidates = [c for c in candidates if 0 <= c <= len(ce_idx)]
    n_ce_train = min(candidates, key=rate_gap)

    train = np.concatenate([ev_idx[:n_ev_train], ce_idx[:n_ce_train]])
    test = np.concatenate([ev_idx[n_ev_train:], ce_idx[n_ce_train:]])
    train.sort()
    test.sort()
    return SplitAssignment(
        train_ids=[cohort.ids[i] for i in train],
        test_ids=[cohort.ids[i] for i in test],
        seed=seed,
        train_fraction=train_fraction,
    )


def select_ids(cohort: SurvivalCohort, ids: list[str]) -> SurvivalCohort:
    """Subset a cohort to the given ids, preserving cohort order."""
    wanted = set(ids)
    index = np.array([i for i, sid in enumerate(cohort.ids) if sid in wanted], dtype=int)
    if len(index) != len(wanted):
        raise CastError("some requested ids are not in the cohort")
    return cohort.subset(index)


def _fmt(x: float) -> str:
    return repr(float(x))


def write_csv(cohort: SurvivalCohort, path) -> None:
    """Write a cohort back to CSV (full float precision, round-trip safe)."""
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([ID_COLUMN, *RESERVED_COLUMNS, *cohort.schema.names])
        for i in range(cohort.n):
            writer.writerow([
                cohort.ids[i],
                _fmt(cohort.time_months[i]),
                str(int(cohort.event[i])),
                str(int(cohort.treatment[i])),
                *(_fmt(v) for v in cohort.X[i]),
            ])


def roundtrip_schema_config(cohort: SurvivalCohort) -> dict[str, str]:
    """Schema config that re-ingests a written cohort with identical X.

    One-hot members round-trip as plain binary columns; the grouping is a
    presentation detail, the numeric matrix is what downstream models consume.
    """
    config = {}
    for name, kind in zip(cohort.schema.names, cohort.schema.kinds):
        config[name] = BINARY if kind == ONEHOT else kind
    return config
