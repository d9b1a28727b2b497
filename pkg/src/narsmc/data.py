"""Dataset container, variable roles, model formulas, and missingness patterns.

A :class:`Dataset` couples a numeric table with a boolean missingness mask.
The mask is the single source of truth for observed/missing status: masked
cells hold NaN and must never be read. Imputation engines work on private
copies in which those slots are filled.
"""

from __future__ import annotations

import csv
import enum
import re
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

__all__ = [
    "Role",
    "Measurement",
    "Family",
    "MissingnessPattern",
    "VariableSpec",
    "Dataset",
    "ModelFormula",
    "DataError",
    "FormulaError",
    "classify_pattern",
    "classify_patterns",
    "design_row",
    "design_matrix",
    "build_design",
    "load_dataset",
    "save_dataset",
    "schema_from_json",
    "with_missingness_indicator",
    "missingness_indicator_name",
]


class DataError(ValueError):
    """Raised when data violate a structural invariant."""


class FormulaError(ValueError):
    """Raised when a model formula is malformed."""


class Role(enum.Enum):
    OUTCOME = "outcome"
    EXPOSURE = "exposure"
    COMPLETE_CONFOUNDER = "complete_confounder"
    INCOMPLETE_CONFOUNDER = "incomplete_confounder"
    AUXILIARY = "auxiliary"
    LATENT = "latent"


class Measurement(enum.Enum):
    BINARY = "binary"
    CONTINUOUS = "continuous"


class Family(enum.Enum):
    GAUSSIAN = "gaussian"
    BERNOULLI = "bernoulli"

    @property
    def link(self) -> str:
        return "identity" if self is Family.GAUSSIAN else "logit"


class MissingnessPattern(enum.IntEnum):
    """Four-way partition of rows by where the missingness sits."""

    I = 1  # fully observed
    II = 2  # outcome missing, all non-outcome observed
    III = 3  # outcome observed, >=1 non-outcome missing
    IV = 4  # outcome and >=1 non-outcome missing


_NAME_RE = re.compile(r"^[A-Za-z_]\w*$")


@dataclass(frozen=True)
class VariableSpec:
    name: str
    role: Role
    measurement: Measurement

    def __post_init__(self):
        if not _NAME_RE.match(self.name):
            raise DataError(f"invalid variable name {self.name!r}")


class Dataset:
    """Rectangular table of typed columns plus a missingness mask.

    Parameters
    ----------
    columns : sequence of VariableSpec
        Column schema; exactly one outcome and one exposure.
    values : (n, p) array_like
        Numeric table. Cells that are masked are normalised to NaN.
    mask : (n, p) array_like of bool, optional
        True where the cell is missing. Defaults to ``isnan(values)``.

    The instance is immutable: both arrays are made read-only, so a Dataset
    can be shared across parallel workers.
    """

    def __init__(self, columns: Sequence[VariableSpec], values, mask=None):
        columns = tuple(columns)
        values = np.array(values, dtype=float)
        if values.ndim != 2:
            raise DataError("values must be a 2-d table")
        n, p = values.shape
        if n < 1:
            raise DataError("dataset needs at least one row")
        if p != len(columns):
            raise DataError(f"{len(columns)} columns declared but {p} value columns given")
        names = [c.name for c in columns]
        if len(set(names)) != len(names):
            raise DataError("duplicate column names")
        roles = [c.role for c in columns]
        if roles.count(Role.OUTCOME) != 1:
            raise DataError("exactly one column must have role outcome")
        if roles.count(Role.EXPOSURE) != 1:
            raise DataError("exactly one column must have role exposure")
        if mask is None:
            mask = np.isnan(values)
        else:
            mask = np.array(mask, dtype=bool)
            if mask.shape != values.shape:
                raise DataError("mask shape does not match values")
            if np.isnan(values[~mask]).any():
                raise DataError("NaN value in an unmasked cell")
        values[mask] = np.nan
        for j, c in enumerate(columns):
            if c.measurement is Measurement.BINARY:
                col = values[:, j]
                obs = ~mask[:, j]
                bad = obs & ~np.isin(col, (0.0, 1.0))
                if bad.any():
                    row = int(np.flatnonzero(bad)[0])
                    raise DataError(
                        f"binary domain violation: column {c.name!r} row {row} "
                        f"has value {col[row]!r}"
                    )
        values.setflags(write=False)
        mask.setflags(write=False)
        self.columns = columns
        self.values = values
        self.mask = mask
        self._index = {name: j for j, name in enumerate(names)}

    # -- basic accessors ---------------------------------------------------

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    @property
    def n_cols(self) -> int:
        return self.values.shape[1]

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def index(self, name: str) -> int:
        try:
            return self._index[name]
        except KeyError:
            raise DataError(f"unknown column {name!r}") from None

    def var(self, name: str) -> VariableSpec:
        return self.columns[self.index(name)]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.index(name)]

    def mask_column(self, name: str) -> np.ndarray:
        return self.mask[:, self.index(name)]

    @property
    def outcome_name(self) -> str:
        return next(c.name for c in self.columns if c.role is Role.OUTCOME)

    @property
    def exposure_name(self) -> str:
        return next(c.name for c in self.columns if c.role is Role.EXPOSURE)

    def incomplete_names(self) -> tuple[str, ...]:
        """Names of columns with at least one missing value, in column order."""
        return tuple(c.name for j, c in enumerate(self.columns) if self.mask[:, j].any())

    # -- derived datasets ----------------------------------------------------

    def completed(self, values: np.ndarray) -> "Dataset":
        """New Dataset with the given (fully filled) values and an all-False mask."""
        return Dataset(self.columns, np.array(values, copy=True), np.zeros_like(self.mask))

    def with_column(self, spec: VariableSpec, values, mask_col=None) -> "Dataset":
        if spec.name in self._index:
            raise DataError(f"column {spec.name!r} already exists")
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        mask_col = (
            np.zeros((self.n_rows, 1), bool)
            if mask_col is None
            else np.asarray(mask_col, bool).reshape(-1, 1)
        )
        return Dataset(
            self.columns + (spec,),
            np.hstack([self.values, values]),
            np.hstack([self.mask, mask_col]),
        )

    def drop_column(self, name: str) -> "Dataset":
        j = self.index(name)
        keep = [k for k in range(self.n_cols) if k != j]
        return Dataset(
            tuple(c for c in self.columns if c.name != name),
            self.values[:, keep].copy(),
            self.mask[:, keep].copy(),
        )


# -- missingness patterns ----------------------------------------------------


def classify_patterns(data: Dataset) -> np.ndarray:
    """Per-row pattern codes (values of :class:`MissingnessPattern`).

    All non-outcome columns, including incomplete auxiliaries and latent
    columns still present, count toward the non-outcome side of the split.
    """
    y = data.index(data.outcome_name)
    y_missing = data.mask[:, y]
    others = [j for j in range(data.n_cols) if j != y]
    other_missing = data.mask[:, others].any(axis=1)
    return (1 + y_missing + 2 * other_missing).astype(np.int64)


def classify_pattern(row: int, data: Dataset) -> MissingnessPattern:
    if not 0 <= row < data.n_rows:
        raise DataError(f"row {row} out of range")
    return MissingnessPattern(int(classify_patterns(data)[row]))


# -- model formulas ------------------------------------------------------------


@dataclass(frozen=True)
class ModelFormula:
    """Symbolic model specification shared by fitting and imputation code.

    Design columns are ordered ``[1, main terms..., interaction products...]``
    following declaration order, so coefficient indices are stable across
    refits. Only pairwise interactions are supported, and every interaction
    pair must appear among the main terms.
    """

    response: str
    main_terms: tuple[str, ...]
    interaction_terms: tuple[tuple[str, str], ...] = ()
    family: Family = Family.GAUSSIAN

    def __post_init__(self):
        object.__setattr__(self, "main_terms", tuple(self.main_terms))
        object.__setattr__(
            self, "interaction_terms", tuple(tuple(p) for p in self.interaction_terms)
        )
        names = (self.response,) + self.main_terms
        for pair in self.interaction_terms:
            names += tuple(pair)
        for name in names:
            if not _NAME_RE.match(name):
                raise FormulaError(f"invalid term name {name!r}")
        if len(set(self.main_terms)) != len(self.main_terms):
            raise FormulaError("duplicate main-effect terms")
        if self.response in self.main_terms:
            raise FormulaError("response cannot appear among predictors")
        seen = set()
        for pair in self.interaction_terms:
            if len(pair) != 2 or pair[0] == pair[1]:
                raise FormulaError(f"interaction must pair two distinct terms: {pair}")
            for member in pair:
                if member not in self.main_terms:
                    raise FormulaError(
                        f"interaction member {member!r} missing from main terms "
                        "(hierarchical formulas only)"
                    )
            key = frozenset(pair)
            if key in seen:
                raise FormulaError(f"duplicate interaction {pair}")
            seen.add(key)
        if not isinstance(self.family, Family):
            raise FormulaError(f"unknown family {self.family!r}")

    @classmethod
    def parse(cls, text: str, family: Family | str = Family.GAUSSIAN) -> "ModelFormula":
        """Parse ``"y ~ x + c + x:c"`` into a formula.

        Terms with more than one ``:`` are rejected (pairwise interactions
        only).
        """
        if isinstance(family, str):
            family = Family(family)
        if "~" not in text:
            raise FormulaError(f"formula {text!r} lacks '~'")
        lhs, rhs = text.split("~", 1)
        response = lhs.strip()
        mains: list[str] = []
        pairs: list[tuple[str, str]] = []
        for raw in rhs.split("+"):
            term = raw.strip()
            if not term or term == "1":
                continue
            if ":" in term:
                parts = [p.strip() for p in term.split(":")]
                if len(parts) != 2:
                    raise FormulaError(f"only pairwise interactions supported: {term!r}")
                pairs.append((parts[0], parts[1]))
            else:
                mains.append(term)
        return cls(response, tuple(mains), tuple(pairs), family)

    @property
    def link(self) -> str:
        return self.family.link

    @property
    def predictors(self) -> tuple[str, ...]:
        return self.main_terms

    @property
    def n_coefficients(self) -> int:
        return 1 + len(self.main_terms) + len(self.interaction_terms)

    @property
    def term_labels(self) -> tuple[str, ...]:
        return (
            ("(intercept)",)
            + self.main_terms
            + tuple(f"{a}:{b}" for a, b in self.interaction_terms)
        )

    def text(self) -> str:
        terms = list(self.main_terms) + [f"{a}:{b}" for a, b in self.interaction_terms]
        return f"{self.response} ~ " + " + ".join(terms) if terms else f"{self.response} ~ 1"


# -- design construction -------------------------------------------------------


def build_design(
    formula: ModelFormula,
    col_index: Mapping[str, int],
    values: np.ndarray,
    rows: np.ndarray | None = None,
) -> np.ndarray:
    """Design matrix from a raw value table (2-d) or chain-stacked table (3-d).

    `values` may be (n, p) or (m, n, p); the output appends a coefficient axis
    of length ``formula.n_coefficients``. Raises :class:`DataError` if any
    referenced cell is NaN (missing and not imputed).
    """
    cols = []
    try:
        for name in formula.main_terms:
            cols.append(col_index[name])
    except KeyError as exc:
        raise DataError(f"formula references unknown column {exc.args[0]!r}") from None
    sub = values[..., rows, :] if rows is not None else values
    k = formula.n_coefficients
    X = np.empty(sub.shape[:-1] + (k,), dtype=float)
    X[..., 0] = 1.0
    for out, j in enumerate(cols, start=1):
        X[..., out] = sub[..., j]
    base = 1 + len(cols)
    for out, (a, b) in enumerate(formula.interaction_terms, start=base):
        X[..., out] = sub[..., col_index[a]] * sub[..., col_index[b]]
    if np.isnan(X).any():
        for name in formula.main_terms:
            if np.isnan(sub[..., col_index[name]]).any():
                raise DataError(f"value for {name!r} is missing and not imputed")
        raise DataError("design matrix contains NaN")
    return X


def design_matrix(formula: ModelFormula, data: Dataset, rows: np.ndarray | None = None) -> np.ndarray:
    return build_design(formula, data._index, data.values, rows)


def design_row(formula: ModelFormula, data: Dataset, row: int) -> np.ndarray:
    if not 0 <= row < data.n_rows:
        raise DataError(f"row {row} out of range")
    return design_matrix(formula, data, np.array([row]))[0]


def response_vector(
    formula: ModelFormula,
    col_index: Mapping[str, int],
    values: np.ndarray,
    rows: np.ndarray | None = None,
) -> np.ndarray:
    j = col_index[formula.response]
    y = values[..., rows, j] if rows is not None else values[..., j]
    if np.isnan(y).any():
        raise DataError(f"response {formula.response!r} has missing values in fitted rows")
    return y


# -- missingness indicator columns ---------------------------------------------


def missingness_indicator_name(variable: str) -> str:
    return f"m_{variable}"


def with_missingness_indicator(data: Dataset, of: str, name: str | None = None) -> Dataset:
    """Append a complete binary column equal to the mask of `of` (1 = missing)."""
    name = name or missingness_indicator_name(of)
    spec = VariableSpec(name, Role.AUXILIARY, Measurement.BINARY)
    return data.with_column(spec, data.mask_column(of).astype(float))


# -- CSV and schema I/O ----------------------------------------------------------


def schema_from_json(obj: Iterable[Mapping[str, str]]) -> list[VariableSpec]:
    """Schema from a JSON-style list of {name, role, measurement} records."""
    out = []
    for rec in obj:
        try:
            out.append(
                VariableSpec(rec["name"], Role(rec["role"]), Measurement(rec["measurement"]))
            )
        except (KeyError, ValueError) as exc:
            raise DataError(f"bad schema record {rec!r}: {exc}") from None
    return out


def load_dataset(path, schema: Sequence[VariableSpec], na_token: str = "NA") -> Dataset:
    """Load a delimited text file with a header row matching the schema names."""
    schema = list(schema)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"empty file: {path}") from None
        header = [h.strip() for h in header]
        expected = [v.name for v in schema]
        for h in header:
            if h not in expected:
                raise DataError(f"unknown column {h!r} in {path}")
        for name in expected:
            if name not in header:
                raise DataError(f"column {name!r} missing from {path}")
        order = [header.index(name) for name in expected]
        rows = []
        for line_no, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != len(header):
                raise DataError(f"{path}:{line_no}: expected {len(header)} cells, got {len(rec)}")
            row = []
            for name, j in zip(expected, order):
                cell = rec[j].strip()
                if cell == na_token:
                    row.append(np.nan)
                else:
                    try:
                        row.append(float(cell))
                    except ValueError:
                        raise DataError(
                            f"{path}:{line_no}: non-numeric cell {cell!r} in column {name!r}"
                        ) from None
            rows.append(row)
    if not rows:
        raise DataError(f"no data rows in {path}")
    return Dataset(schema, np.array(rows, dtype=float))


def save_dataset(data: Dataset, path, na_token: str = "NA") -> None:
    """Write a Dataset to CSV; reloading reproduces values and mask exactly."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(data.names)
        for i in range(data.n_rows):
            writer.writerow(
                na_token if data.mask[i, j] else repr(float(data.values[i, j]))
                for j in range(data.n_cols)
            )
