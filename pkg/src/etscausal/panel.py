"""Firm-year panel data model: ingestion, transformations, descriptive statistics.

The panel is an unbalanced collection of firm-year observations.  All
operations are pure functions of their inputs; a :class:`Panel` is immutable
after construction and safe to share across threads.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .errors import PanelError

# Intensity is reported in g CO2 per 1000 EUR of gross output while emissions
# are stored in tonnes, hence the fixed conversion factor.
GRAMS_PER_TONNE = 1e6

SCHEMA_COMMENT = "# schema: ets-causal-v1"

#: Required CSV columns, in canonical order.  Additional fuel columns with an
#: ``_mwh`` suffix may appear anywhere after ``firm_id``; ``co2`` may be absent.
CSV_COLUMNS = (
    "firm_id", "year", "industry", "ets", "output", "employees", "exports",
    "wage", "capital", "electricity", "gas_mwh", "oil_mwh", "other_fuel_mwh",
    "co2",
)

# CSV header name -> internal frame column name.
_CSV_TO_FIELD = {
    "industry": "industry_code",
    "ets": "ets_flag",
    "output": "gross_output",
    "employees": "employees",
    "exports": "exports",
    "wage": "avg_wage",
    "capital": "capital_stock",
    "electricity": "electricity_mwh",
    "co2": "co2_tonnes",
}
_FIELD_TO_CSV = {v: k for k, v in _CSV_TO_FIELD.items()}

_QUANTITY_FIELDS = (
    "gross_output", "employees", "exports", "avg_wage", "capital_stock",
    "electricity_mwh", "co2_tonnes",
)

#: Variables computed on demand from the stored columns.
DERIVED_VARIABLES = ("co2_intensity", "energy_mwh", "export_share")


@dataclass(frozen=True)
class PhaseWindows:
    """Analysis windows: pre-treatment years and the two compliance phases.

    The defaults follow the headline analysis (trading starts in 2005, the
    second phase is evaluated on 2008-2010); every window is configurable.
    """

    pretreatment_years: tuple = (2002, 2003)
    phase1_years: tuple = (2005, 2006, 2007)
    phase2_years: tuple = (2008, 2009, 2010)
    base_year: int = 2003

    def __post_init__(self):
        object.__setattr__(self, "pretreatment_years", tuple(self.pretreatment_years))
        object.__setattr__(self, "phase1_years", tuple(self.phase1_years))
        object.__setattr__(self, "phase2_years", tuple(self.phase2_years))
        windows = (self.pretreatment_years, self.phase1_years, self.phase2_years)
        seen = set()
        for w in windows:
            overlap = seen.intersection(w)
            if overlap:
                raise PanelError(f"phase windows overlap in years {sorted(overlap)}")
            seen.update(w)
        if self.base_year not in self.pretreatment_years:
            raise PanelError(
                f"base_year {self.base_year} not among pretreatment years "
                f"{self.pretreatment_years}"
            )

    def years_for(self, phase):
        """Years belonging to a named window ('pretreatment', 'phase1', 'phase2')."""
        try:
            return {
                "pretreatment": self.pretreatment_years,
                "phase1": self.phase1_years,
                "phase2": self.phase2_years,
            }[phase]
        except KeyError:
            raise PanelError(f"unknown phase label {phase!r}") from None

    @property
    def all_years(self):
        return tuple(sorted(
            set(self.pretreatment_years) | set(self.phase1_years) | set(self.phase2_years)
        ))


@dataclass(frozen=True)
class FuelFactorTable:
    """Emission factors in t CO2 per MWh, by fuel type name."""

    factors: Mapping[str, float]

    def __post_init__(self):
        clean = {}
        for fuel, value in dict(self.factors).items():
            value = float(value)
            if value < 0 or not math.isfinite(value):
                raise PanelError(f"emission factor for {fuel!r} must be finite and >= 0")
            clean[str(fuel)] = value
        object.__setattr__(self, "factors", clean)

    def __contains__(self, fuel):
        return fuel in self.factors

    def __getitem__(self, fuel):
        return self.factors[fuel]


def compute_emissions(fuels, factors):
    """Total CO2 in tonnes from fuel use in MWh and per-fuel emission factors.

    Linear in both arguments: the emissions of a merged fuel mapping equal the
    sum of the parts.
    """
    if isinstance(factors, FuelFactorTable):
        factors = factors.factors
    total = 0.0
    for fuel, mwh in fuels.items():
        if fuel not in factors:
            raise PanelError(f"no emission factor for fuel {fuel!r}")
        total += float(mwh) * float(factors[fuel])
    return total


def derive_co2_intensity(co2_tonnes, gross_output):
    """g CO2 per 1000 EUR of gross output; None when undefined."""
    if co2_tonnes is None or gross_output is None or gross_output <= 0:
        return None
    return co2_tonnes * GRAMS_PER_TONNE / gross_output


@dataclass(frozen=True)
class FirmYearRecord:
    """One firm-year observation of outcomes, inputs, fuels and treatment status.

    Monetary values are in 1000 EUR, energy in MWh, emissions in t CO2 and
    ``co2_intensity`` in g CO2 per 1000 EUR of gross output.  ``None`` marks a
    missing value.  ``fuel_use`` maps fuel type names to MWh.
    """

    firm_id: str
    year: int
    industry_code: int
    ets_flag: int
    gross_output: float | None = None
    employees: float | None = None
    exports: float | None = None
    avg_wage: float | None = None
    capital_stock: float | None = None
    electricity_mwh: float | None = None
    fuel_use: Mapping[str, float] = field(default_factory=dict)
    co2_tonnes: float | None = None
    co2_intensity: float | None = None

    def __post_init__(self):
        if self.ets_flag not in (0, 1):
            raise PanelError(
                f"ets flag must be 0 or 1, got {self.ets_flag!r} "
                f"(firm {self.firm_id}, year {self.year})"
            )
        for name in _QUANTITY_FIELDS:
            value = getattr(self, name)
            if value is not None and value < 0:
                raise PanelError(
                    f"{name} must be nonnegative, got {value!r} "
                    f"(firm {self.firm_id}, year {self.year})"
                )
        for fuel, mwh in self.fuel_use.items():
            if mwh is not None and mwh < 0:
                raise PanelError(
                    f"fuel use for {fuel!r} must be nonnegative "
                    f"(firm {self.firm_id}, year {self.year})"
                )
        implied = derive_co2_intensity(self.co2_tonnes, self.gross_output)
        if self.co2_intensity is None:
            object.__setattr__(self, "co2_intensity", implied)
        elif implied is not None and not math.isclose(
            self.co2_intensity, implied, rel_tol=1e-9, abs_tol=0.0
        ):
            raise PanelError(
                f"co2_intensity {self.co2_intensity!r} inconsistent with "
                f"co2/output {implied!r} (firm {self.firm_id}, year {self.year})"
            )


def _fuel_columns(columns):
    return [
        c for c in columns
        if c.endswith("_mwh") and c not in ("electricity_mwh", "energy_mwh")
    ]


class Panel:
    """Immutable firm-year panel.

    Internally backed by a :class:`pandas.DataFrame` in canonical (firm_id,
    year) order, so that ingestion order never affects downstream results.
    At most one record per (firm_id, year) and a time-invariant treatment
    flag per firm are enforced at construction.
    """

    def __init__(self, frame, phase_windows=None, derived=None, _validated=False):
        self._windows = phase_windows if phase_windows is not None else PhaseWindows()
        self._derived = dict(derived) if derived else {}
        if not _validated:
            frame = self._validate_frame(frame.copy())
        self._frame = frame
        self._records = None

    # -- construction ------------------------------------------------------

    @staticmethod
    def _validate_frame(frame):
        required = ["firm_id", "year", "industry_code", "ets_flag"]
        missing = [c for c in required if c not in frame.columns]
        if missing:
            raise PanelError(f"panel frame missing columns {missing}")
        frame["firm_id"] = frame["firm_id"].astype(str)
        frame["year"] = frame["year"].astype(int)
        frame["industry_code"] = frame["industry_code"].astype(int)
        if not frame["ets_flag"].isin((0, 1)).all():
            raise PanelError("ets flag must be 0 or 1 for every record")
        frame["ets_flag"] = frame["ets_flag"].astype(int)

        dupes = frame.duplicated(subset=["firm_id", "year"])
        if dupes.any():
            first = frame.loc[dupes, ["firm_id", "year"]].iloc[0]
            raise PanelError(
                f"duplicate record for firm {first['firm_id']!r}, year {int(first['year'])}"
            )
        varying = frame.groupby("firm_id")["ets_flag"].nunique()
        varying = varying[varying > 1]
        if len(varying) > 0:
            raise PanelError(
                f"ets flag varies within firm {varying.index[0]!r}; "
                "treatment must be constant per firm"
            )
        value_cols = [c for c in frame.columns if c not in ("firm_id", "year", "industry_code", "ets_flag")]
        for col in value_cols:
            frame[col] = pd.to_numeric(frame[col], errors="raise").astype(float)
            if (frame[col].dropna() < 0).any():
                raise PanelError(f"column {col!r} contains negative values")
        # canonical form: drop fuel columns with no data, fix column order
        empty_fuels = [c for c in _fuel_columns(frame.columns) if frame[c].isna().all()]
        frame = frame.drop(columns=empty_fuels)
        order = ["firm_id", "year", "industry_code", "ets_flag"]
        order += [c for c in _QUANTITY_FIELDS if c in frame.columns and c != "co2_tonnes"]
        order += sorted(_fuel_columns(frame.columns))
        if "co2_tonnes" in frame.columns:
            order.append("co2_tonnes")
        order += sorted(c for c in frame.columns if c not in order)
        frame = frame[order]
        frame = frame.sort_values(["firm_id", "year"], kind="mergesort").reset_index(drop=True)
        return frame

    @classmethod
    def from_records(cls, records, phase_windows=None):
        records = tuple(records)
        fuels = sorted({f for r in records for f in r.fuel_use})
        rows = {
            "firm_id": [r.firm_id for r in records],
            "year": [r.year for r in records],
            "industry_code": [r.industry_code for r in records],
            "ets_flag": [r.ets_flag for r in records],
        }
        for name in _QUANTITY_FIELDS:
            rows[name] = [getattr(r, name) for r in records]
        for fuel in fuels:
            rows[f"{fuel}_mwh"] = [r.fuel_use.get(fuel) for r in records]
        frame = pd.DataFrame(rows) if records else pd.DataFrame(
            columns=["firm_id", "year", "industry_code", "ets_flag", *_QUANTITY_FIELDS]
        )
        return cls(frame, phase_windows)

    @classmethod
    def from_frame(cls, frame, phase_windows=None):
        """Build a panel from a DataFrame using internal column names."""
        return cls(frame, phase_windows)

    # -- basic accessors ----------------------------------------------------

    @property
    def frame(self):
        """The backing DataFrame (treat as read-only)."""
        return self._frame

    @property
    def phase_windows(self):
        return self._windows

    @property
    def n_records(self):
        return len(self._frame)

    def __len__(self):
        return len(self._frame)

    def years(self):
        return tuple(sorted(self._frame["year"].unique()))

    def firm_ids(self):
        return tuple(sorted(self._frame["firm_id"].unique()))

    def industries(self):
        return tuple(sorted(self._frame["industry_code"].unique()))

    def treatment_by_firm(self):
        """Series firm_id -> 0/1 treatment flag."""
        return self._frame.groupby("firm_id")["ets_flag"].first()

    def fuel_types(self):
        return tuple(sorted(c[:-4] for c in _fuel_columns(self._frame.columns)))

    @property
    def records(self):
        """Lazily materialised tuple of FirmYearRecord, in canonical order."""
        if self._records is None:
            fuels = _fuel_columns(self._frame.columns)
            out = []
            for row in self._frame.itertuples(index=False):
                d = row._asdict()
                fuel_use = {}
                for col in fuels:
                    v = d[col]
                    if v is not None and not (isinstance(v, float) and math.isnan(v)):
                        fuel_use[col[:-4]] = float(v)
                out.append(FirmYearRecord(
                    firm_id=d["firm_id"],
                    year=int(d["year"]),
                    industry_code=int(d["industry_code"]),
                    ets_flag=int(d["ets_flag"]),
                    fuel_use=fuel_use,
                    **{
                        name: (None if pd.isna(d.get(name)) else float(d[name]))
                        for name in _QUANTITY_FIELDS
                    },
                ))
            self._records = tuple(out)
        return self._records

    # -- variables ----------------------------------------------------------

    def variable_names(self):
        cols = [
            c for c in self._frame.columns
            if c not in ("firm_id", "year", "industry_code", "ets_flag")
        ]
        return tuple(cols) + DERIVED_VARIABLES + tuple(self._derived)

    def variable(self, name):
        """Values of a variable as a Series indexed by (firm_id, year)."""
        idx = pd.MultiIndex.from_frame(self._frame[["firm_id", "year"]])
        if name in self._derived:
            return pd.Series(self._derived[name], index=idx, name=name)
        if name in self._frame.columns:
            return pd.Series(self._frame[name].to_numpy(), index=idx, name=name)
        if name == "co2_intensity":
            co2 = self._frame.get("co2_tonnes")
            out = self._frame.get("gross_output")
            if co2 is None or out is None:
                raise PanelError("co2_intensity requires co2_tonnes and gross_output")
            values = co2.to_numpy() * GRAMS_PER_TONNE / np.where(
                out.to_numpy() > 0, out.to_numpy(), np.nan
            )
            return pd.Series(values, index=idx, name=name)
        if name == "energy_mwh":
            cols = _fuel_columns(self._frame.columns)
            if "electricity_mwh" in self._frame.columns:
                cols = ["electricity_mwh"] + cols
            if not cols:
                raise PanelError("energy_mwh requires electricity or fuel columns")
            block = self._frame[cols]
            values = block.sum(axis=1, min_count=1).to_numpy()
            return pd.Series(values, index=idx, name=name)
        if name == "export_share":
            exp = self._frame.get("exports")
            out = self._frame.get("gross_output")
            if exp is None or out is None:
                raise PanelError("export_share requires exports and gross_output")
            values = exp.to_numpy() / np.where(out.to_numpy() > 0, out.to_numpy(), np.nan)
            return pd.Series(values, index=idx, name=name)
        raise PanelError(f"unknown variable {name!r}")

    def values_in_year(self, name, year):
        """Non-missing values of a variable in one year, indexed by firm_id."""
        series = self.variable(name)
        mask = series.index.get_level_values("year") == year
        sub = series[mask].dropna()
        sub.index = sub.index.get_level_values("firm_id")
        return sub

    def pivot(self, name):
        """firms x years table of a variable (NaN where unobserved)."""
        series = self.variable(name)
        return series.unstack("year")

    def with_derived(self, name, values):
        """New panel carrying an extra derived variable.

        ``values`` maps (firm_id, year) -> value (a dict or a Series indexed
        that way); pairs absent from the mapping are missing.
        """
        idx = pd.MultiIndex.from_frame(self._frame[["firm_id", "year"]])
        if isinstance(values, pd.Series):
            aligned = values.reindex(idx).to_numpy(dtype=float)
        else:
            aligned = np.array(
                [values.get((f, y), np.nan) for f, y in idx],
                dtype=float,
            )
        derived = dict(self._derived)
        derived[name] = aligned
        return Panel(self._frame, self._windows, derived, _validated=True)

    def restrict_industries(self, codes):
        """New panel containing only the given industry codes."""
        codes = set(int(c) for c in codes)
        mask = self._frame["industry_code"].isin(codes).to_numpy()
        frame = self._frame[mask].reset_index(drop=True)
        derived = {k: v[mask] for k, v in self._derived.items()}
        return Panel(frame, self._windows, derived, _validated=True)

    def __eq__(self, other):
        if not isinstance(other, Panel):
            return NotImplemented
        return self._frame.equals(other._frame) and self._windows == other._windows


# -- CSV ingestion and serialization ----------------------------------------


def _parse_float(text, column, row_number):
    text = text.strip()
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise PanelError(
            f"malformed numeric value {text!r} in column {column!r} at data row {row_number}"
        ) from None


def ingest_panel(source, factors=None, phase_windows=None):
    """Read a panel from the documented CSV schema.

    ``source`` is a path, a text stream, or a CSV string.  When the ``co2``
    column is absent and ``factors`` is given, emissions are computed from the
    fuel columns.  Row order never affects the resulting panel.
    """
    if hasattr(source, "read"):
        text = source.read()
    else:
        source = str(source)
        if "\n" in source or "," in source:
            text = source
        else:
            with open(source, "r", encoding="utf-8") as fh:
                text = fh.read()
    lines = [ln for ln in text.splitlines() if ln.strip() != ""]
    while lines and lines[0].lstrip().startswith("#"):
        lines.pop(0)
    if not lines:
        raise PanelError("input has no header row")

    header = [h.strip() for h in lines[0].split(",")]
    required = [c for c in CSV_COLUMNS if c != "co2"]
    missing = [c for c in required if c not in header]
    if missing:
        raise PanelError(f"header missing required columns {missing}")
    known = set(CSV_COLUMNS)
    extra = [c for c in header if c not in known]
    bad = [c for c in extra if not c.endswith("_mwh")]
    if bad:
        raise PanelError(f"unknown columns {bad}; extra columns must end with '_mwh'")
    has_co2 = "co2" in header
    fuel_cols = [c for c in header if c.endswith("_mwh")]

    pos = {c: i for i, c in enumerate(header)}
    columns = {c: [] for c in header}
    for row_number, line in enumerate(lines[1:], start=1):
        cells = line.split(",")
        if len(cells) != len(header):
            raise PanelError(
                f"expected {len(header)} fields but found {len(cells)} at data row {row_number}"
            )
        for col in header:
            cell = cells[pos[col]].strip()
            if col == "firm_id":
                if cell == "":
                    raise PanelError(f"empty firm_id at data row {row_number}")
                columns[col].append(cell)
            elif col == "year":
                value = _parse_float(cell, col, row_number)
                if value is None or value != int(value):
                    raise PanelError(f"invalid year {cell!r} at data row {row_number}")
                columns[col].append(int(value))
            elif col == "industry":
                value = _parse_float(cell, col, row_number)
                if value is None or value != int(value):
                    raise PanelError(f"invalid industry code {cell!r} at data row {row_number}")
                columns[col].append(int(value))
            elif col == "ets":
                value = _parse_float(cell, col, row_number)
                if value not in (0.0, 1.0):
                    raise PanelError(f"invalid ets flag {cell!r} at data row {row_number}")
                columns[col].append(int(value))
            else:
                columns[col].append(_parse_float(cell, col, row_number))

    frame = pd.DataFrame({
        "firm_id": columns["firm_id"],
        "year": columns["year"],
        "industry_code": columns["industry"],
        "ets_flag": columns["ets"],
        "gross_output": columns["output"],
        "employees": columns["employees"],
        "exports": columns["exports"],
        "avg_wage": columns["wage"],
        "capital_stock": columns["capital"],
        "electricity_mwh": columns["electricity"],
    })
    for col in fuel_cols:
        frame[col] = columns[col]
    if has_co2:
        frame["co2_tonnes"] = columns["co2"]
    elif factors is not None:
        co2 = []
        for i in range(len(frame)):
            fuels = {}
            for col in fuel_cols:
                v = frame[col].iloc[i]
                if v is not None and not pd.isna(v):
                    fuels[col[:-4]] = float(v)
            co2.append(compute_emissions(fuels, factors))
        frame["co2_tonnes"] = co2
    else:
        frame["co2_tonnes"] = np.nan
    if len(frame) == 0:
        frame = frame.astype({"year": int, "industry_code": int, "ets_flag": int})
    return Panel(frame, phase_windows)


def _format_cell(value):
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_panel(panel, destination=None):
    """Serialize a panel to the documented CSV schema.

    Floats are written with their shortest round-trip representation so that
    write-then-read reproduces the panel bit-exactly.  Returns the CSV text
    when ``destination`` is None, otherwise writes to the path or stream.
    """
    frame = panel.frame
    fuel_cols = _fuel_columns(frame.columns)
    base_fuels = ["gas_mwh", "oil_mwh", "other_fuel_mwh"]
    extra_fuels = sorted(c for c in fuel_cols if c not in base_fuels)
    header = [
        "firm_id", "year", "industry", "ets", "output", "employees", "exports",
        "wage", "capital", "electricity", *base_fuels, *extra_fuels, "co2",
    ]
    buf = io.StringIO()
    buf.write(SCHEMA_COMMENT + "\n")
    buf.write(",".join(header) + "\n")
    for row in frame.itertuples(index=False):
        d = row._asdict()
        cells = [
            d["firm_id"],
            str(int(d["year"])),
            str(int(d["industry_code"])),
            str(int(d["ets_flag"])),
            _format_cell(d.get("gross_output")),
            _format_cell(d.get("employees")),
            _format_cell(d.get("exports")),
            _format_cell(d.get("avg_wage")),
            _format_cell(d.get("capital_stock")),
            _format_cell(d.get("electricity_mwh")),
        ]
        for col in base_fuels + extra_fuels:
            cells.append(_format_cell(d.get(col)))
        cells.append(_format_cell(d.get("co2_tonnes")))
        buf.write(",".join(cells) + "\n")
    text = buf.getvalue()
    if destination is None:
        return text
    if hasattr(destination, "write"):
        destination.write(text)
    else:
        with open(destination, "w", encoding="utf-8") as fh:
            fh.write(text)
    return None


# -- transformations and descriptive statistics ------------------------------


def trim_mid_fraction(values, fraction):
    """Indices of the central ``fraction`` of values.

    Rule: with n values and alpha = (1 - fraction)/2, let k = floor(n * alpha).
    The cut points are the (k+1)-th smallest and (k+1)-th largest values;
    observations strictly outside [low, high] are dropped.  Ties at the cut
    points are always retained, so the retained set is a contiguous band of
    the sorted values.
    """
    values = np.asarray(values, dtype=float)
    if values.ndim != 1 or len(values) == 0:
        raise PanelError("trim_mid_fraction requires a nonempty 1-d sequence")
    if not (0.0 < fraction <= 1.0):
        raise PanelError(f"fraction must be in (0, 1], got {fraction!r}")
    n = len(values)
    k = int(math.floor(n * (1.0 - fraction) / 2.0))
    ordered = np.sort(values)
    low, high = ordered[k], ordered[n - 1 - k]
    return np.flatnonzero((values >= low) & (values <= high))


class LogChangeResult(dict):
    """Mapping firm_id -> log change, with an ``excluded`` firm list."""

    def __init__(self, changes, excluded):
        super().__init__(changes)
        self.excluded = tuple(excluded)


def log_change(panel, variable, from_year, to_year):
    """Per-firm ln(v_to) - ln(v_from) for firms observed in both years.

    Firms missing either year are omitted and listed in ``result.excluded``.
    A nonpositive value raises, since its log change is undefined.
    """
    start = panel.values_in_year(variable, from_year)
    end = panel.values_in_year(variable, to_year)
    for year, series in ((from_year, start), (to_year, end)):
        bad = series[series <= 0]
        if len(bad) > 0:
            raise PanelError(
                f"nonpositive {variable!r} value {bad.iloc[0]!r} for firm "
                f"{bad.index[0]!r} in year {year}"
            )
    common = start.index.intersection(end.index)
    all_firms = start.index.union(end.index)
    excluded = sorted(all_firms.difference(common))
    changes = np.log(end[common].to_numpy()) - np.log(start[common].to_numpy())
    return LogChangeResult(dict(zip(common, changes)), excluded)


def nearest_rank_quantile(values, p):
    """Nearest-rank quantile: the ceil(p*n)-th smallest value (p in (0, 1])."""
    ordered = np.sort(np.asarray(values, dtype=float))
    n = len(ordered)
    if n == 0:
        raise PanelError("quantile of empty sequence")
    rank = max(1, int(math.ceil(p * n)))
    return float(ordered[min(rank, n) - 1])


def nearest_rank_median(values):
    return nearest_rank_quantile(values, 0.5)


@dataclass(frozen=True)
class SummaryStats:
    mean: float
    sd: float
    p10: float
    p50: float
    p90: float
    n: int

    def __post_init__(self):
        if self.n < 1:
            raise PanelError("summary statistics require n >= 1")
        if not (self.p10 <= self.p50 <= self.p90):
            raise PanelError("quantiles out of order")
        if self.sd < 0:
            raise PanelError("standard deviation must be nonnegative")


def summary_stats(values):
    """Mean, sample sd (n-1 denominator) and nearest-rank deciles/median.

    Values are sorted before accumulation, so any permutation of the same
    multiset yields identical statistics.
    """
    arr = np.asarray(values, dtype=float)
    arr = np.sort(arr[~np.isnan(arr)])
    if len(arr) == 0:
        raise PanelError("summary_stats requires at least one value")
    sd = float(np.std(arr, ddof=1)) if len(arr) > 1 else 0.0
    return SummaryStats(
        mean=float(np.mean(arr)),
        sd=sd,
        p10=nearest_rank_quantile(arr, 0.10),
        p50=nearest_rank_quantile(arr, 0.50),
        p90=nearest_rank_quantile(arr, 0.90),
        n=int(len(arr)),
    )


def indexed_median_series(panel, variable, base_year):
    """Yearly medians of a variable scaled to the base-year median.

    Medians use the nearest-rank rule for determinism.  Raises when the base
    year is unobserved or its median is zero.
    """
    series = panel.variable(variable).dropna()
    years = sorted(set(series.index.get_level_values("year")))
    if base_year not in years:
        raise PanelError(f"base year {base_year} has no observations of {variable!r}")
    by_year = {
        y: nearest_rank_median(
            series[series.index.get_level_values("year") == y].to_numpy()
        )
        for y in years
    }
    base = by_year[base_year]
    if base == 0:
        raise PanelError(f"base-year median of {variable!r} is zero")
    return {y: by_year[y] / base for y in years}
