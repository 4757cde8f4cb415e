"""Hierarchical data model for clustered observational studies.

A :class:`Study` holds clusters, a :class:`Cluster` holds units, and each
:class:`Unit` carries its treatment, optional outcome and covariate vector.
Files use a long format: one row per unit, grouped by ``cluster_id`` and
ordered within a cluster by ``unit_id``.
"""

import itertools
import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from .errors import (
    DimensionMismatchError,
    DuplicateIdError,
    EmptyClusterError,
    InvalidPermutationError,
    NonBinaryTreatmentError,
    ParseError,
)

REQUIRED_COLUMNS = ("cluster_id", "unit_id", "treatment", "outcome")


@dataclass(frozen=True)
class Unit:
    cluster_id: str
    unit_index: int
    treatment: int
    covariates: Tuple[float, ...]
    outcome: Optional[float] = None
    unit_id: Optional[int] = None

    @property
    def label(self) -> int:
        """File-level id; falls back to the position when none was given."""
        return self.unit_index if self.unit_id is None else self.unit_id


@dataclass(frozen=True)
class Cluster:
    id: str
    units: Tuple[Unit, ...]

    @property
    def size(self) -> int:
        return len(self.units)

    @property
    def treatments(self) -> np.ndarray:
        return np.array([u.treatment for u in self.units], dtype=int)

    @property
    def covariates(self) -> np.ndarray:
        p = len(self.units[0].covariates) if self.units else 0
        return np.array([u.covariates for u in self.units], dtype=float).reshape(self.size, p)

    @property
    def outcomes(self) -> np.ndarray:
        return np.array([np.nan if u.outcome is None else u.outcome for u in self.units], dtype=float)

    @property
    def has_outcomes(self) -> bool:
        return all(u.outcome is not None for u in self.units)

    def treatment_vector(self) -> "TreatmentVector":
        return TreatmentVector(self.id, tuple(int(t) for t in self.treatments))


@dataclass(frozen=True)
class Study:
    clusters: Tuple[Cluster, ...]
    p: int

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @property
    def n(self) -> int:
        return sum(c.size for c in self.clusters)

    @property
    def cluster_ids(self) -> List[str]:
        return [c.id for c in self.clusters]

    @property
    def has_outcomes(self) -> bool:
        return all(c.has_outcomes for c in self.clusters)

    def cluster(self, cluster_id: str) -> Cluster:
        for cluster in self.clusters:
            if cluster.id == cluster_id:
                return cluster
        raise KeyError(cluster_id)

    def unit_keys(self) -> List[Tuple[str, int]]:
        """(cluster id, unit index) for every unit, in stacked order."""
        return [(c.id, u.unit_index) for c in self.clusters for u in c.units]

    def stacked(self) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Covariates, treatments and cluster offsets for all units.

        Returns:
            ``(X, z, offsets)`` where cluster ``i`` occupies rows
            ``offsets[i]:offsets[i + 1]``.
        """
        sizes = [c.size for c in self.clusters]
        offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(int)
        if not self.clusters:
            return np.zeros((0, self.p)), np.zeros(0, dtype=int), offsets
        X = np.vstack([c.covariates for c in self.clusters])
        z = np.concatenate([c.treatments for c in self.clusters])
        return X, z, offsets


@dataclass(frozen=True)
class TreatmentVector:
    cluster_id: str
    values: Tuple[int, ...]

    def __post_init__(self):
        if any(v not in (0, 1) for v in self.values):
            raise NonBinaryTreatmentError(f"cluster {self.cluster_id}: treatment vector must be binary")

    def __len__(self) -> int:
        return len(self.values)

    def as_array(self) -> np.ndarray:
        return np.array(self.values, dtype=int)


def validate_study(raw: Study) -> Study:
    """Check every structural invariant of a study.

    Args:
        raw: Study assembled from any source.

    Returns:
        The same study when it is valid.

    Raises:
        DimensionMismatchError, DuplicateIdError, EmptyClusterError,
        NonBinaryTreatmentError
    """
    seen = set()
    for cluster in raw.clusters:
        if cluster.id in seen:
            raise DuplicateIdError(f"cluster id {cluster.id!r} appears more than once")
        seen.add(cluster.id)
        if cluster.size == 0:
            raise EmptyClusterError(f"cluster {cluster.id!r} has no units")
        unit_ids = set()
        for position, unit in enumerate(cluster.units):
            where = f"cluster {cluster.id!r}, unit {position}"
            if unit.cluster_id != cluster.id:
                raise DimensionMismatchError(f"{where}: carries cluster id {unit.cluster_id!r}")
            if unit.unit_index != position:
                raise DimensionMismatchError(f"{where}: unit_index is {unit.unit_index}")
            if unit.unit_id is not None:
                if unit.unit_id in unit_ids:
                    raise DuplicateIdError(f"{where}: unit id {unit.unit_id} repeated")
                unit_ids.add(unit.unit_id)
            if isinstance(unit.treatment, bool) or unit.treatment not in (0, 1):
                raise NonBinaryTreatmentError(f"{where}: treatment {unit.treatment!r} is not 0/1")
            if len(unit.covariates) != raw.p:
                raise DimensionMismatchError(
                    f"{where}: {len(unit.covariates)} covariates, study has p={raw.p}"
                )
            if not all(math.isfinite(x) for x in unit.covariates):
                raise DimensionMismatchError(f"{where}: covariates must be finite reals")
            if unit.outcome is not None and not math.isfinite(unit.outcome):
                raise DimensionMismatchError(f"{where}: outcome must be finite when present")
    return raw


def build_study(rows: Sequence[dict], p: int) -> Study:
    """Group unit records into a validated study.

    Each row needs ``cluster_id``, ``unit_id``, ``treatment``, ``covariates``
    and optionally ``outcome``. Clusters keep first-appearance order; units
    are sorted by ``unit_id`` inside each cluster.
    """
    grouped: Dict[str, List[dict]] = {}
    for row in rows:
        grouped.setdefault(str(row["cluster_id"]), []).append(row)
    clusters = []
    for cluster_id, members in grouped.items():
        members = sorted(members, key=lambda r: r["unit_id"])
        units = tuple(
            Unit(
                cluster_id=cluster_id,
                unit_index=j,
                treatment=row["treatment"],
                covariates=tuple(float(x) for x in row["covariates"]),
                outcome=row.get("outcome"),
                unit_id=row["unit_id"],
            )
            for j, row in enumerate(members)
        )
        clusters.append(Cluster(cluster_id, units))
    return validate_study(Study(tuple(clusters), p))


def _parse_int(text: str, column: str, line: int) -> int:
    try:
        value = float(text)
    except ValueError as exc:
        raise ParseError(f"{column} {text!r} is not a number", line=line) from exc
    if not value.is_integer():
        raise ParseError(f"{column} {text!r} is not an integer", line=line)
    return int(value)


def _parse_float(text: str, column: str, line: int) -> float:
    try:
        return float(text)
    except ValueError as exc:
        raise ParseError(f"{column} {text!r} is not a number", line=line) from exc


def _read_csv(path: Path) -> Study:
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding="utf-8")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise ParseError(f"cannot read {path}: {exc}", line=1) from exc
    missing = [c for c in REQUIRED_COLUMNS if c not in frame.columns]
    if missing:
        raise ParseError(f"missing column(s) {', '.join(missing)}", line=1)
    covariate_columns = [c for c in frame.columns if c not in REQUIRED_COLUMNS]
    rows = []
    # header is line 1
    for line, values in enumerate(frame.to_dict("records"), start=2):
        outcome_text = values["outcome"].strip()
        rows.append(
            {
                "cluster_id": values["cluster_id"].strip(),
                "unit_id": _parse_int(values["unit_id"], "unit_id", line),
                "treatment": _parse_int(values["treatment"], "treatment", line),
                "outcome": None if outcome_text == "" else _parse_float(outcome_text, "outcome", line),
                "covariates": [_parse_float(values[c], c, line) for c in covariate_columns],
            }
        )
    return build_study(rows, len(covariate_columns))


def _json_treatment(value):
    # 1.0 is accepted as 1; anything else non-integral is left for validation
    if isinstance(value, float) and value.is_integer():
        return int(value)
    return value


def _read_json(path: Path) -> Study:
    try:
        with open(path, "r", encoding="utf-8") as handle:
            payload = json.load(handle)
    except json.JSONDecodeError as exc:
        raise ParseError(f"invalid JSON: {exc.msg}", line=exc.lineno) from exc
    if not isinstance(payload, list):
        raise ParseError("expected an array of clusters", line=1)
    rows = []
    p = None
    for cluster in payload:
        try:
            cluster_id = str(cluster["id"])
            units = cluster["units"]
            if not units:
                raise EmptyClusterError(f"cluster {cluster_id!r} has no units")
            for unit in units:
                covariates = [float(x) for x in unit["covariates"]]
                p = len(covariates) if p is None else p
                rows.append(
                    {
                        "cluster_id": cluster_id,
                        "unit_id": int(unit["unit_id"]),
                        "treatment": _json_treatment(unit["treatment"]),
                        "outcome": None if unit.get("outcome") is None else float(unit["outcome"]),
                        "covariates": covariates,
                    }
                )
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(f"malformed cluster record: {exc}") from exc
    return build_study(rows, p or 0)


def _format_of(path: Path, fmt: Optional[str]) -> str:
    fmt = (fmt or path.suffix.lstrip(".")).lower()
    if fmt not in ("csv", "json"):
        raise ParseError(f"unsupported study format {fmt!r} (use csv or json)")
    return fmt


def load_study(path: str, fmt: Optional[str] = None) -> Study:
    """Read a study file.

    Args:
        path: CSV or JSON file in the long-format schema.
        fmt: ``"csv"`` or ``"json"``; inferred from the suffix when omitted.

    Returns:
        A validated study.
    """
    path = Path(path)
    fmt = _format_of(path, fmt)
    if not path.exists():
        raise FileNotFoundError(f"File not found: {path}")
    return _read_csv(path) if fmt == "csv" else _read_json(path)


def study_frame(study: Study) -> pd.DataFrame:
    """Long-format table of a study (one row per unit)."""
    columns = list(REQUIRED_COLUMNS) + [f"x{k + 1}" for k in range(study.p)]
    records = []
    for cluster in study.clusters:
        for unit in cluster.units:
            records.append(
                [cluster.id, unit.label, unit.treatment, unit.outcome] + list(unit.covariates)
            )
    return pd.DataFrame.from_records(records, columns=columns)


def save_study(study: Study, path: str, fmt: Optional[str] = None) -> None:
    """Write a study as CSV or JSON; :func:`load_study` reads it back."""
    path = Path(path)
    fmt = _format_of(path, fmt)
    if fmt == "csv":
        frame = study_frame(study)
        frame["outcome"] = [("" if pd.isna(v) else repr(float(v))) for v in frame["outcome"]]
        for k in range(study.p):
            frame[f"x{k + 1}"] = [repr(float(v)) for v in frame[f"x{k + 1}"]]
        frame.to_csv(path, index=False, lineterminator="\n")
        return
    payload = [
        {
            "id": cluster.id,
            "units": [
                {
                    "unit_id": unit.label,
                    "treatment": unit.treatment,
                    "outcome": unit.outcome,
                    "covariates": list(unit.covariates),
                }
                for unit in cluster.units
            ],
        }
        for cluster in study.clusters
    ]
    with open(path, "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2)
        handle.write("\n")


def permute_cluster(cluster: Cluster, perm: Sequence[int]) -> Cluster:
    """Reorder a cluster's units; position ``k`` receives unit ``perm[k]``.

    Raises:
        InvalidPermutationError: ``perm`` is not a permutation of ``0..n_i-1``.
    """
    perm = list(perm)
    if sorted(perm) != list(range(cluster.size)):
        raise InvalidPermutationError(
            f"cluster {cluster.id!r}: {perm} is not a permutation of 0..{cluster.size - 1}"
        )
    units = tuple(replace(cluster.units[source], unit_index=k) for k, source in enumerate(perm))
    return Cluster(cluster.id, units)


@lru_cache(maxsize=16)
def all_treatment_vectors(n: int) -> np.ndarray:
    """Every binary vector of length ``n`` as rows of a ``(2**n, n)`` array."""
    vectors = np.array(list(itertools.product((0, 1), repeat=n)), dtype=int).reshape(2 ** n, n)
    vectors.setflags(write=False)
    return vectors
