"""Typed observations, covariate roles, design matrices and CSV I/O.

Covariates come in three roles: ``gaussian`` (modelled by a multivariate
normal marginal), ``lognormal`` (strictly positive, multivariate log-normal
marginal) and ``discrete`` (independent multinomials).  Discrete values are
stored as 0-based level codes; the first declared level is the reference
level when dummy coding.
"""

from __future__ import annotations

import csv
import math
import re
from dataclasses import dataclass, field
from typing import Mapping, Optional, Sequence

import numpy as np
import yaml

from .errors import InputError

ROLES = ("gaussian", "lognormal", "discrete")
_ROLE_ALIASES = {
    "gaussian": "gaussian",
    "gaussian-continuous": "gaussian",
    "normal": "gaussian",
    "lognormal": "lognormal",
    "lognormal-continuous": "lognormal",
    "log-normal": "lognormal",
    "discrete": "discrete",
    "categorical": "discrete",
}
_LOG_TERM = re.compile(r"^log\((?P<name>.+)\)$")


def _frozen(a, dtype=float, ndim=1):
    arr = np.array(a, dtype=dtype, copy=True)
    if ndim == 2 and arr.ndim == 1:
        arr = arr.reshape(-1, 1) if arr.size else arr.reshape(0, 0)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class CovariateSpec:
    """Name, role and (for discrete covariates) ordered level labels."""

    name: str
    role: str
    levels: tuple = ()

    def __post_init__(self):
        role = _ROLE_ALIASES.get(str(self.role).lower())
        if role is None:
            raise InputError(f"covariate {self.name!r}: unknown role {self.role!r}")
        object.__setattr__(self, "role", role)
        levels = tuple(str(v) for v in self.levels)
        object.__setattr__(self, "levels", levels)
        if role == "discrete":
            if len(levels) < 2 or len(set(levels)) != len(levels):
                raise InputError(
                    f"discrete covariate {self.name!r} needs at least 2 distinct levels"
                )
        elif levels:
            raise InputError(f"continuous covariate {self.name!r} cannot declare levels")

    @property
    def n_levels(self) -> int:
        return len(self.levels)


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable sample of responses and role-typed covariates.

    Use :meth:`from_columns` rather than the raw constructor.
    """

    specs: tuple
    gaussian: np.ndarray
    lognormal: np.ndarray
    discrete: np.ndarray
    response: np.ndarray
    exposure: np.ndarray
    claim_weights: np.ndarray
    response_name: str = "y"

    @classmethod
    def from_columns(
        cls,
        specs: Sequence[CovariateSpec],
        columns: Mapping[str, Sequence],
        response: Sequence,
        exposure: Optional[Sequence] = None,
        claim_weights: Optional[Sequence] = None,
        response_name: str = "y",
    ) -> "Dataset":
        """Build a dataset from per-covariate value arrays.

        Discrete columns hold 0-based level codes.
        """
        specs = tuple(specs)
        names = [s.name for s in specs]
        if len(set(names)) != len(names):
            raise InputError("duplicate covariate names")
        y = np.asarray(response, dtype=float).ravel()
        n = y.size

        def block(role, dtype):
            cols = [np.asarray(columns[s.name], dtype=dtype).ravel()
                    for s in specs if s.role == role]
            for c in cols:
                if c.size != n:
                    raise InputError("covariate length differs from response length")
            if not cols:
                return np.zeros((n, 0), dtype=dtype)
            return np.column_stack(cols)

        for s in specs:
            if s.name not in columns:
                raise InputError(f"missing values for covariate {s.name!r}")
        disc_raw = block("discrete", float)
        if disc_raw.size and not np.all(disc_raw == np.round(disc_raw)):
            raise InputError("discrete level codes must be integers")
        return cls(
            specs=specs,
            gaussian=block("gaussian", float),
            lognormal=block("lognormal", float),
            discrete=disc_raw.astype(np.int64),
            response=y,
            exposure=np.ones(n) if exposure is None else np.asarray(exposure, float).ravel(),
            claim_weights=(np.ones(n) if claim_weights is None
                           else np.asarray(claim_weights, float).ravel()),
            response_name=response_name,
        )

    def __post_init__(self):
        n = self.response.size
        for name in ("gaussian", "lognormal", "discrete"):
            arr = getattr(self, name)
            dtype = np.int64 if name == "discrete" else float
            object.__setattr__(self, name, _frozen(arr, dtype, ndim=2).reshape(n, -1))
        for name in ("response", "exposure", "claim_weights"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        if self.exposure.size != n or self.claim_weights.size != n:
            raise InputError("exposure/claim_weights length differs from response length")
        if not np.all(np.isfinite(self.response)):
            raise InputError("response contains non-finite values")
        if np.any(self.lognormal <= 0):
            row = int(np.argwhere(self.lognormal <= 0)[0, 0])
            raise InputError(f"lognormal covariate must be > 0 (row {row + 1})")
        if np.any(self.exposure <= 0):
            raise InputError("exposure must be > 0")
        if np.any(self.claim_weights < 0):
            raise InputError("claim weights must be >= 0")
        for j, s in enumerate(self.discrete_specs):
            codes = self.discrete[:, j]
            if codes.size and (codes.min() < 0 or codes.max() >= s.n_levels):
                raise InputError(f"discrete covariate {s.name!r} has a level code "
                                 f"outside [0, {s.n_levels - 1}]")

    @property
    def n(self) -> int:
        return self.response.size

    def _by_role(self, role):
        return tuple(s for s in self.specs if s.role == role)

    @property
    def gaussian_specs(self):
        return self._by_role("gaussian")

    @property
    def lognormal_specs(self):
        return self._by_role("lognormal")

    @property
    def discrete_specs(self):
        return self._by_role("discrete")

    def spec(self, name: str) -> CovariateSpec:
        for s in self.specs:
            if s.name == name:
                return s
        raise InputError(f"unknown covariate {name!r}")

    def column(self, name: str) -> np.ndarray:
        """Values of one covariate (level codes for discrete ones)."""
        s = self.spec(name)
        block = {"gaussian": self.gaussian, "lognormal": self.lognormal,
                 "discrete": self.discrete}[s.role]
        return block[:, self._by_role(s.role).index(s)]

    def columns(self) -> dict:
        return {s.name: self.column(s.name) for s in self.specs}

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.specs, self.gaussian[rows], self.lognormal[rows],
                       self.discrete[rows], self.response[rows], self.exposure[rows],
                       self.claim_weights[rows], self.response_name)

    def with_response(self, response, name: Optional[str] = None) -> "Dataset":
        return Dataset(self.specs, self.gaussian, self.lognormal, self.discrete,
                       np.asarray(response, float), self.exposure, self.claim_weights,
                       name or self.response_name)

    def as_cwm(self) -> "Dataset":
        """Same data with every continuous covariate given the Gaussian role."""
        specs = [CovariateSpec(s.name, "gaussian") if s.role == "lognormal" else s
                 for s in self.specs]
        return Dataset.from_columns(specs, self.columns(), self.response, self.exposure,
                                    self.claim_weights, self.response_name)


@dataclass(frozen=True, eq=False)
class DesignMatrix:
    """Regression design with a leading column of ones."""

    values: np.ndarray
    columns: tuple

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen(self.values, float, ndim=2))
        if self.values.shape[1] != len(self.columns):
            raise InputError("design column labels do not match the matrix width")
        if self.values.shape[1] == 0 or not np.all(self.values[:, 0] == 1.0):
            raise InputError("first design column must be the intercept")

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)


@dataclass(frozen=True)
class DesignSpec:
    """Covariate selections for the response GLM and the zero-inflation logit.

    Selection entries are covariate names, optionally wrapped as ``log(name)``
    to enter the regression on the log scale.  ``bernoulli=None`` reuses the
    response selection.  ``link`` applies to Gaussian (severity) responses.
    """

    response: tuple = ()
    bernoulli: Optional[tuple] = None
    offset_exposure: bool = True
    link: str = "identity"

    def __post_init__(self):
        object.__setattr__(self, "response", tuple(self.response))
        if self.bernoulli is not None:
            object.__setattr__(self, "bernoulli", tuple(self.bernoulli))
        if self.link not in ("identity", "log"):
            raise InputError(f"unknown Gaussian link {self.link!r}")

    @property
    def bernoulli_selection(self) -> tuple:
        return self.response if self.bernoulli is None else self.bernoulli

    def to_dict(self) -> dict:
        return {"response": list(self.response),
                "bernoulli": None if self.bernoulli is None else list(self.bernoulli),
                "offset_exposure": self.offset_exposure, "link": self.link}

    @classmethod
    def from_dict(cls, d: Mapping) -> "DesignSpec":
        b = d.get("bernoulli")
        return cls(tuple(d.get("response", ())), None if b is None else tuple(b),
                   bool(d.get("offset_exposure", True)), d.get("link", "identity"))


def build_design(dataset: Dataset, selection: Sequence[str] = (),
                 drop_reference: bool = True) -> DesignMatrix:
    """Intercept plus selected covariates, with dummy-coded discrete terms.

    Continuous covariates contribute one column each (``log(name)`` takes the
    natural log).  A discrete covariate with ``c`` levels contributes ``c - 1``
    indicator columns, the first level being the reference.  With
    ``drop_reference=False`` all ``c`` indicators are kept.
    """
    cols = [np.ones(dataset.n)]
    labels = ["(Intercept)"]
    for term in selection:
        m = _LOG_TERM.match(term)
        name = m.group("name") if m else term
        spec = dataset.spec(name)
        values = dataset.column(name)
        if spec.role == "discrete":
            if m:
                raise InputError(f"cannot take log of discrete covariate {name!r}")
            if values.size and (values.min() < 0 or values.max() >= spec.n_levels):
                raise InputError(f"covariate {name!r} has an observed level outside its spec")
            start = 1 if drop_reference else 0
            for code in range(start, spec.n_levels):
                cols.append((values == code).astype(float))
                labels.append(f"{name}[{spec.levels[code]}]")
        else:
            if m:
                if np.any(values <= 0):
                    raise InputError(f"log({name}) needs strictly positive values")
                values = np.log(values)
            cols.append(np.asarray(values, float))
            labels.append(term)
    return DesignMatrix(np.column_stack(cols), tuple(labels))


# ---------------------------------------------------------------------------
# schema and CSV


def bin_labels(edges: Sequence[float]) -> tuple:
    """Level labels ``[a,b)`` for consecutive edges plus an open top bin ``e+``."""
    fmt = lambda v: f"{v:g}"  # noqa: E731
    labels = [f"[{fmt(a)},{fmt(b)})" for a, b in zip(edges[:-1], edges[1:])]
    labels.append(f"{fmt(edges[-1])}+")
    return tuple(labels)


@dataclass(frozen=True)
class Schema:
    """Column-to-role mapping for a CSV file.

    ``bins`` maps a discrete covariate to ascending numeric cut points; its raw
    numeric values are then binned into the levels produced by
    :func:`bin_labels`.
    """

    covariates: tuple
    response: str
    exposure: Optional[str] = None
    weights: Optional[str] = None
    id: Optional[str] = None
    ignore: tuple = ()
    bins: Mapping = field(default_factory=dict)

    @property
    def column_roles(self) -> dict:
        roles = {}
        if self.id:
            roles[self.id] = "id"
        roles[self.response] = "response"
        if self.exposure:
            roles[self.exposure] = "exposure"
        if self.weights:
            roles[self.weights] = "weight"
        for item in self.covariates:
            if isinstance(item, CovariateSpec):
                roles[item.name] = item.role
            else:
                roles[item[0]] = _ROLE_ALIASES.get(str(item[1]).lower(), item[1])
        for name in self.ignore:
            roles[name] = "ignore"
        return roles

    @classmethod
    def from_dict(cls, doc: Mapping) -> "Schema":
        if "response" not in doc:
            raise InputError("schema must name a response column")
        specs, bins = [], {}
        for name, entry in (doc.get("covariates") or {}).items():
            entry = entry if isinstance(entry, Mapping) else {"role": entry}
            levels = entry.get("levels", ())
            if "bins" in entry:
                edges = [float(v) for v in entry["bins"]]
                if sorted(edges) != edges or len(set(edges)) != len(edges):
                    raise InputError(f"bins for {name!r} must be strictly increasing")
                bins[str(name)] = tuple(edges)
                levels = bin_labels(edges)
            if entry.get("role") == "discrete" and not levels:
                levels = ()  # inferred from data on load
                specs.append((str(name), "discrete", None))
                continue
            specs.append((str(name), entry.get("role"), tuple(levels)))
        return cls(
            covariates=tuple(specs),  # resolved to CovariateSpec in load_csv
            response=str(doc["response"]),
            exposure=doc.get("exposure"),
            weights=doc.get("weights"),
            id=doc.get("id"),
            ignore=tuple(doc.get("ignore") or ()),
            bins=bins,
        )

    def to_dict(self) -> dict:
        """Key-value form accepted by :meth:`from_dict`."""
        covs = {}
        for item in self.covariates:
            name, role, levels = ((item.name, item.role, item.levels)
                                  if isinstance(item, CovariateSpec) else item)
            entry = {"role": role}
            if name in self.bins:
                entry["bins"] = list(self.bins[name])
            elif levels:
                entry["levels"] = list(levels)
            covs[name] = entry
        doc = {"response": self.response, "covariates": covs}
        for key in ("exposure", "weights", "id"):
            if getattr(self, key):
                doc[key] = getattr(self, key)
        if self.ignore:
            doc["ignore"] = list(self.ignore)
        return doc

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            yaml.safe_dump(self.to_dict(), fh, sort_keys=False)

    @classmethod
    def load(cls, path) -> "Schema":
        with open(path, encoding="utf-8") as fh:
            doc = yaml.safe_load(fh)
        if not isinstance(doc, Mapping):
            raise InputError(f"schema {path}: expected a key-value document")
        return cls.from_dict(doc)

    def resolved(self, rows: Sequence[Mapping[str, str]] = ()) -> tuple:
        """CovariateSpecs, inferring unspecified discrete levels from ``rows``."""
        out = []
        for item in self.covariates:
            if isinstance(item, CovariateSpec):
                out.append(item)
                continue
            name, role, levels = item
            if levels is None:
                seen = sorted({r[name] for r in rows if r.get(name, "") != ""},
                              key=_natural_key)
                levels = tuple(seen)
            out.append(CovariateSpec(name, role, levels))
        return tuple(out)


def _natural_key(s: str):
    try:
        return (0, float(s), s)
    except ValueError:
        return (1, 0.0, s)


def _parse_float(text, row, col):
    try:
        v = float(text)
    except ValueError:
        raise InputError(f"row {row}: column {col!r}: cannot parse {text!r} as a number")
    if not math.isfinite(v):
        raise InputError(f"row {row}: column {col!r}: non-finite value {text!r}")
    return v


def _bin(value, edges):
    if value < edges[0]:
        return None
    return int(np.searchsorted(edges, value, side="right") - 1)


def load_csv(path, schema: Schema) -> Dataset:
    """Read a headed UTF-8 CSV into a :class:`Dataset`.

    Row numbers in error messages count data rows from 1 (the header is not
    counted).
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None:
            raise InputError(f"{path}: missing header row")
        rows = list(reader)
    header = set(reader.fieldnames)
    specs = schema.resolved(rows)
    required = [schema.response] + [s.name for s in specs]
    required += [c for c in (schema.exposure, schema.weights) if c]
    missing_cols = [c for c in required if c not in header]
    if missing_cols:
        raise InputError(f"{path}: missing columns {missing_cols}")

    bad_rows = [i for i, r in enumerate(rows, 1)
                if any((r.get(c) or "").strip() == "" for c in required)]
    if bad_rows:
        shown = ", ".join(map(str, bad_rows[:20]))
        raise InputError(f"{path}: missing required fields in rows {shown}"
                         + (" ..." if len(bad_rows) > 20 else ""))

    columns = {}
    for s in specs:
        vals = []
        if s.role == "discrete":
            index = {lvl: j for j, lvl in enumerate(s.levels)}
            edges = schema.bins.get(s.name)
            for i, r in enumerate(rows, 1):
                raw = r[s.name].strip()
                if edges is not None:
                    code = _bin(_parse_float(raw, i, s.name), edges)
                else:
                    code = index.get(raw)
                if code is None:
                    raise InputError(f"row {i}: column {s.name!r}: unknown level {raw!r}")
                vals.append(code)
        else:
            for i, r in enumerate(rows, 1):
                v = _parse_float(r[s.name].strip(), i, s.name)
                if s.role == "lognormal" and v <= 0:
                    raise InputError(f"row {i}: column {s.name!r}: lognormal covariate "
                                     f"must be > 0, got {v!r}")
                vals.append(v)
        columns[s.name] = vals

    def numeric(col):
        out = [_parse_float(r[col].strip(), i, col) for i, r in enumerate(rows, 1)]
        return out

    y = numeric(schema.response)
    exposure = numeric(schema.exposure) if schema.exposure else None
    weights = numeric(schema.weights) if schema.weights else None
    if exposure is not None:
        for i, v in enumerate(exposure, 1):
            if v <= 0:
                raise InputError(f"row {i}: exposure must be > 0, got {v!r}")
    if weights is not None:
        for i, v in enumerate(weights, 1):
            if v < 0:
                raise InputError(f"row {i}: claim weight must be >= 0, got {v!r}")
    return Dataset.from_columns(specs, columns, y, exposure, weights,
                                response_name=schema.response)


def write_csv(dataset: Dataset, path, schema: Optional[Schema] = None) -> None:
    """Serialize modelled columns; floats use ``repr`` so a reload is exact.

    Binned covariates are written as their level labels, so re-reading such a
    file needs a schema declaring ``levels`` instead of ``bins``.
    """
    resp = schema.response if schema else dataset.response_name
    expo = (schema.exposure if schema else None) or "exposure"
    wts = (schema.weights if schema else None) or "claim_weights"
    header = [s.name for s in dataset.specs] + [resp, expo, wts]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        cols = dataset.columns()
        for i in range(dataset.n):
            row = []
            for s in dataset.specs:
                v = cols[s.name][i]
                row.append(s.levels[int(v)] if s.role == "discrete" else repr(float(v)))
            row += [repr(float(dataset.response[i])), repr(float(dataset.exposure[i])),
                    repr(float(dataset.claim_weights[i]))]
            w.writerow(row)


def schema_for(dataset: Dataset) -> Schema:
    """Schema matching the layout produced by :func:`write_csv`."""
    return Schema(covariates=dataset.specs, response=dataset.response_name,
                  exposure="exposure", weights="claim_weights")
