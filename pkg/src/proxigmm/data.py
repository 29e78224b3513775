"""Dataset container, CSV loading, and proxy-column transforms.

A :class:`Dataset` holds one observation block per variable role: outcome
``y``, binary treatment ``a``, outcome proxies ``w``, treatment proxies
``z``, and measured covariates ``x``. Arrays are validated once at
construction and frozen, so estimators downstream never re-check them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    EmptyData,
    MissingColumn,
    NonBinaryTreatment,
    NonFiniteValue,
    UnknownColumn,
)

TRANSFORM_KINDS = ("minor", "moderate", "significant")


@dataclass(frozen=True)
class VariableRoles:
    """Names assigning file columns to model roles.

    ``covariates`` may be empty; every other role needs at least one name,
    and no name may appear under two roles.
    """

    outcome: str
    treatment: str
    proxies_z: tuple[str, ...]
    proxies_w: tuple[str, ...]
    covariates: tuple[str, ...] = ()

    def __post_init__(self) -> None:
        if not self.outcome or not self.treatment:
            raise MissingColumn("outcome and treatment column names are required")
        if not self.proxies_z or not self.proxies_w:
            raise MissingColumn("at least one proxy column is required per side")
        names = self.all_names()
        dup = {c for c in names if names.count(c) > 1}
        if dup:
            raise UnknownColumn(f"column assigned to more than one role: {sorted(dup)}")

    def all_names(self) -> list[str]:
        return [self.outcome, self.treatment, *self.proxies_z, *self.proxies_w, *self.covariates]


def _freeze(arr: np.ndarray) -> np.ndarray:
    out = np.ascontiguousarray(arr, dtype=float)
    out.flags.writeable = False
    return out


@dataclass(frozen=True)
class Dataset:
    """Validated observation arrays, one block per variable role.

    ``y`` and ``a`` have shape ``(n,)``; ``z``, ``w``, ``x`` have shape
    ``(n, d)`` where ``d`` may be zero only for ``x``. All values are finite
    and ``a`` is exactly 0/1. Arrays are read-only after construction.
    """

    y: np.ndarray
    a: np.ndarray
    z: np.ndarray
    w: np.ndarray
    x: np.ndarray
    y_name: str = "y"
    a_name: str = "a"
    z_names: tuple[str, ...] = ("z1",)
    w_names: tuple[str, ...] = ("w1",)
    x_names: tuple[str, ...] = ("x1",)

    def __post_init__(self) -> None:
        y = _freeze(np.asarray(self.y, dtype=float).reshape(-1))
        a = _freeze(np.asarray(self.a, dtype=float).reshape(-1))
        n = y.shape[0]
        if n == 0:
            raise EmptyData("dataset has no rows")
        blocks = {}
        for name, block, names in (
            ("z", self.z, self.z_names),
            ("w", self.w, self.w_names),
            ("x", self.x, self.x_names),
        ):
            arr = np.asarray(block, dtype=float)
            if arr.ndim == 1:
                arr = arr.reshape(-1, 1)
            if arr.shape[0] != n and not (arr.size == 0 and name == "x"):
                raise NonFiniteValue(
                    f"block {name!r} has {arr.shape[0]} rows, expected {n}"
                )
            if arr.size == 0:
                arr = np.empty((n, 0))
            if len(names) != arr.shape[1]:
                raise MissingColumn(
                    f"block {name!r} has {arr.shape[1]} columns but "
                    f"{len(names)} names"
                )
            blocks[name] = _freeze(arr)
        if a.shape[0] != n:
            raise NonFiniteValue("treatment column length differs from outcome")
        for label, arr in (("y", y), ("a", a), *blocks.items()):
            if not np.all(np.isfinite(arr)):
                bad = np.argwhere(~np.isfinite(arr))[0]
                raise NonFiniteValue(f"non-finite value in {label!r} at row {bad[0]}")
        bad_a = np.nonzero((a != 0.0) & (a != 1.0))[0]
        if bad_a.size:
            raise NonBinaryTreatment(
                f"treatment {self.a_name!r} is not 0/1 at row {bad_a[0]}"
            )
        if blocks["z"].shape[1] == 0 or blocks["w"].shape[1] == 0:
            raise MissingColumn("z and w blocks each need at least one column")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "a", a)
        for name, arr in blocks.items():
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "z_names", tuple(self.z_names))
        object.__setattr__(self, "w_names", tuple(self.w_names))
        object.__setattr__(self, "x_names", tuple(self.x_names))

    @property
    def n(self) -> int:
        return self.y.shape[0]

    def column(self, name: str) -> np.ndarray:
        """Return a single observation column by its name."""
        if name == self.y_name:
            return self.y
        if name == self.a_name:
            return self.a
        for names, block in ((self.z_names, self.z), (self.w_names, self.w), (self.x_names, self.x)):
            if name in names:
                return block[:, names.index(name)]
        raise UnknownColumn(f"no column named {name!r}")


def load_csv(path: str, roles: VariableRoles) -> Dataset:
    """Read a CSV file and assemble a validated :class:`Dataset`.

    Raises :class:`MissingColumn` if a role name is absent from the header,
    :class:`NonFiniteValue` (with row index and column name) for cells that
    do not parse to finite numbers, :class:`NonBinaryTreatment` for a
    treatment value other than 0/1, and :class:`EmptyData` for a file with
    no observation rows.
    """
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise EmptyData(f"{path}: file is empty") from None
        header = [h.strip() for h in header]
        rows = [row for row in reader if row and any(cell.strip() for cell in row)]
    if not rows:
        raise EmptyData(f"{path}: no observation rows")
    missing = [c for c in roles.all_names() if c not in header]
    if missing:
        raise MissingColumn(f"{path}: missing columns {missing}")
    idx = {c: header.index(c) for c in roles.all_names()}

    def parse(colname: str) -> np.ndarray:
        j = idx[colname]
        out = np.empty(len(rows))
        for i, row in enumerate(rows):
            try:
                val = float(row[j])
            except (ValueError, IndexError):
                raise NonFiniteValue(
                    f"{path}: row {i}, column {colname!r}: "
                    f"value {row[j] if j < len(row) else '<missing>'!r} is not numeric"
                ) from None
            if not np.isfinite(val):
                raise NonFiniteValue(
                    f"{path}: row {i}, column {colname!r}: value is not finite"
                )
            out[i] = val
        return out

    y = parse(roles.outcome)
    a = parse(roles.treatment)
    bad = np.nonzero((a != 0.0) & (a != 1.0))[0]
    if bad.size:
        raise NonBinaryTreatment(
            f"{path}: row {bad[0]}, column {roles.treatment!r}: "
            f"treatment value {a[bad[0]]!r} is not 0/1"
        )
    z = np.column_stack([parse(c) for c in roles.proxies_z])
    w = np.column_stack([parse(c) for c in roles.proxies_w])
    if roles.covariates:
        x = np.column_stack([parse(c) for c in roles.covariates])
    else:
        x = np.empty((len(rows), 0))
    return Dataset(
        y=y, a=a, z=z, w=w, x=x,
        y_name=roles.outcome, a_name=roles.treatment,
        z_names=tuple(roles.proxies_z), w_names=tuple(roles.proxies_w),
        x_names=tuple(roles.covariates),
    )


def write_csv(ds: Dataset, path: str) -> None:
    """Write a dataset back to CSV with round-trip exact float formatting."""
    header = [ds.y_name, ds.a_name, *ds.z_names, *ds.w_names, *ds.x_names]
    mat = np.column_stack([ds.y, ds.a, ds.z, ds.w, ds.x])
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in mat:
            writer.writerow([repr(float(v)) for v in row])


def _transform_values(values: np.ndarray, kind: str) -> np.ndarray:
    if kind == "minor":
        return values + 0.1 * values**2
    if kind == "moderate":
        return values + 0.5 * values**2
    if kind == "significant":
        return np.sqrt(np.abs(values)) + 1.0
    raise UnknownColumn(f"unknown transform kind {kind!r}; choose from {TRANSFORM_KINDS}")


def transform_column(ds: Dataset, name: str, kind: str) -> Dataset:
    """Return a new dataset with one outcome-proxy column distorted.

    ``kind`` selects the distortion applied elementwise to column ``name``
    of the ``w`` block: ``minor`` adds a tenth of the square, ``moderate``
    adds half of the square, ``significant`` replaces the value with
    ``sqrt(|v|) + 1``. Only ``w`` columns may be transformed; any other
    name raises :class:`UnknownColumn`.
    """
    if name not in ds.w_names:
        raise UnknownColumn(
            f"column {name!r} is not an outcome proxy; transformable: {list(ds.w_names)}"
        )
    j = ds.w_names.index(name)
    w = ds.w.copy()
    w[:, j] = _transform_values(w[:, j], kind)
    return replace(ds, w=w)
