"""Balanced firm-year panel container and CSV serialization.

Observables per firm-year: log output value y, log capital k, log
intermediates m, log worker count ltilde, log intermediate share sm,
log labor-cost share sl, and log wage bill b. Panels are stored as
(n_firms, T) arrays, one per variable, with firms sorted by id.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

__all__ = ["PanelData", "PanelFormatError", "PANEL_COLUMNS"]

PANEL_COLUMNS = ("y", "k", "m", "ltilde", "sm", "sl", "b")


class PanelFormatError(ValueError):
    """Raised when a panel file or array set violates the schema."""


@dataclass
class PanelData:
    """Balanced panel with one (n_firms, T) array per observable."""

    y: np.ndarray
    k: np.ndarray
    m: np.ndarray
    ltilde: np.ndarray
    sm: np.ndarray
    sl: np.ndarray
    b: np.ndarray
    firm_ids: np.ndarray = None
    types: np.ndarray = None     # optional ground-truth labels, 0-based

    def __post_init__(self):
        ref = np.asarray(self.y, dtype=float)
        if ref.ndim != 2:
            raise PanelFormatError("panel arrays must be 2-d (n_firms, T)")
        for name in PANEL_COLUMNS:
            arr = np.asarray(getattr(self, name), dtype=float)
            if arr.shape != ref.shape:
                raise PanelFormatError(
                    f"column {name} has shape {arr.shape}, expected {ref.shape}"
                )
            if not np.all(np.isfinite(arr)):
                raise PanelFormatError(f"column {name} contains non-finite values")
            setattr(self, name, arr)
        if self.firm_ids is None:
            self.firm_ids = np.arange(ref.shape[0])
        else:
            self.firm_ids = np.asarray(self.firm_ids)
            if self.firm_ids.shape != (ref.shape[0],):
                raise PanelFormatError("firm_ids length must equal n_firms")
        if self.types is not None:
            self.types = np.asarray(self.types, dtype=int)
            if self.types.shape != (ref.shape[0],):
                raise PanelFormatError("types length must equal n_firms")

    @property
    def n_firms(self) -> int:
        return self.y.shape[0]

    @property
    def T(self) -> int:
        return self.y.shape[1]

    def subset(self, mask: np.ndarray) -> "PanelData":
        """Row-select firms by boolean mask or index array."""
        cols = {name: getattr(self, name)[mask] for name in PANEL_COLUMNS}
        return PanelData(
            **cols,
            firm_ids=self.firm_ids[mask],
            types=None if self.types is None else self.types[mask],
        )

    def concat(self, other: "PanelData") -> "PanelData":
        """Stack two panels with the same T (firm ids re-labeled)."""
        if other.T != self.T:
            raise PanelFormatError("panels must share T to concatenate")
        cols = {
            name: np.vstack([getattr(self, name), getattr(other, name)])
            for name in PANEL_COLUMNS
        }
        both_typed = self.types is not None and other.types is not None
        return PanelData(
            **cols,
            firm_ids=np.arange(self.n_firms + other.n_firms),
            types=np.concatenate([self.types, other.types]) if both_typed else None,
        )

    def to_csv(self, path) -> None:
        """Write the long-format CSV (header firm_id,t,...[,type])."""
        with_types = self.types is not None
        header = ["firm_id", "t"] + list(PANEL_COLUMNS)
        if with_types:
            header.append("type")
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(header)
            for i in range(self.n_firms):
                for t in range(self.T):
                    row = [self.firm_ids[i], t + 1]
                    row += [repr(float(getattr(self, c)[i, t])) for c in PANEL_COLUMNS]
                    if with_types:
                        row.append(int(self.types[i]))
                    writer.writerow(row)

    @classmethod
    def from_csv(cls, path) -> "PanelData":
        """Read a long-format CSV produced by :meth:`to_csv`."""
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            try:
                header = next(reader)
            except StopIteration:
                raise PanelFormatError("empty panel file") from None
            expected = ["firm_id", "t"] + list(PANEL_COLUMNS)
            with_types = header == expected + ["type"]
            if not with_types and header != expected:
                missing = [c for c in expected if c not in header]
                raise PanelFormatError(
                    f"bad header {header}; missing columns: {missing or 'none'}"
                )
            rows = []
            bad = []
            for lineno, row in enumerate(reader, start=2):
                if not row:
                    continue
                want = len(header)
                try:
                    if len(row) != want:
                        raise ValueError(f"expected {want} fields, got {len(row)}")
                    vals = [float(x) for x in row[1:2 + len(PANEL_COLUMNS)]]
                    typ = int(row[-1]) if with_types else None
                    rows.append((row[0], vals, typ))
                except ValueError as exc:
                    bad.append(f"line {lineno}: {exc}")
                    if len(bad) >= 5:
                        break
            if bad:
                raise PanelFormatError("malformed rows: " + "; ".join(bad))
        if not rows:
            raise PanelFormatError("panel file has no data rows")
        by_firm: dict = {}
        for fid, vals, typ in rows:
            by_firm.setdefault(fid, []).append((vals, typ))
        T = len(next(iter(by_firm.values())))
        firm_ids = sorted(by_firm)
        cols = {name: np.empty((len(firm_ids), T)) for name in PANEL_COLUMNS}
        types = []
        for i, fid in enumerate(firm_ids):
            group = by_firm[fid]
            if len(group) != T:
                raise PanelFormatError(
                    f"firm {fid} has {len(group)} rows, expected {T} (unbalanced)"
                )
            group.sort(key=lambda g: g[0][0])
            for t, (vals, typ) in enumerate(group):
                if int(round(vals[0])) != t + 1:
                    raise PanelFormatError(f"firm {fid} has nonconsecutive periods")
                for c, name in enumerate(PANEL_COLUMNS):
                    cols[name][i, t] = vals[1 + c]
            types.append(group[0][1])
        have_types = all(t is not None for t in types)
        return cls(
            **cols,
            firm_ids=np.asarray(firm_ids),
            types=np.asarray(types, dtype=int) if have_types else None,
        )
