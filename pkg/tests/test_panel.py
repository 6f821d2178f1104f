import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from etscausal.errors import PanelError
from etscausal.panel import (
    FirmYearRecord,
    FuelFactorTable,
    Panel,
    PhaseWindows,
    compute_emissions,
    indexed_median_series,
    ingest_panel,
    log_change,
    nearest_rank_quantile,
    summary_stats,
    trim_mid_fraction,
    write_panel,
)

HEADER = (
    "firm_id,year,industry,ets,output,employees,exports,wage,capital,"
    "electricity,gas_mwh,oil_mwh,other_fuel_mwh,co2"
)

SIX_ROW_CSV = "\n".join([
    "# schema: ets-causal-v1",
    HEADER,
    "A1,2002,17,1,5299.5,49,198.25,28458.0,1838.5,911.9,150.0,40.0,,314.0",
    "A1,2003,17,1,5400.0,50,201.0,28500.0,1850.0,920.0,151.5,41.0,,319.5",
    "B2,2002,23,0,1435.25,22,0.0,15998.0,256.3,161.8,10.0,,5.0,64.4",
    "B2,2003,23,0,1500.0,23,,16100.0,260.0,165.0,11.0,,5.5,66.0",
    "C3,2003,24,0,40580.0,233,11542.0,41213.0,16220.6,12979.5,500.0,120.0,30.0,4098.0",
    "D4,2002,20,0,17597.0,104,4978.0,28649.0,11322.2,21418.7,,,,7343.7",
])


class TestIngestion:
    def test_header_only_gives_empty_panel(self):
        panel = ingest_panel(HEADER + "\n")
        assert panel.n_records == 0

    def test_duplicate_firm_year_reports_key(self):
        csv = "\n".join([
            HEADER,
            "A1,2003,17,1,1.0,1,0,1,1,1,,,,1",
            "A1,2003,17,1,2.0,2,0,2,2,2,,,,2",
        ])
        with pytest.raises(PanelError, match="A1.*2003"):
            ingest_panel(csv)

    def test_six_row_fixture_round_trips_bit_exactly(self):
        panel = ingest_panel(SIX_ROW_CSV)
        assert panel.n_records == 6
        text = write_panel(panel)
        again = ingest_panel(text)
        assert again == panel
        assert write_panel(again) == text

    def test_ingestion_is_order_insensitive(self):
        lines = SIX_ROW_CSV.splitlines()
        shuffled = lines[:2] + lines[-1:] + lines[2:-1]
        assert ingest_panel("\n".join(shuffled)) == ingest_panel(SIX_ROW_CSV)

    def test_malformed_numeric_reports_row_number(self):
        csv = "\n".join([
            HEADER,
            "A1,2003,17,1,1.0,1,0,1,1,1,,,,1",
            "B2,2003,23,0,oops,1,0,1,1,1,,,,1",
        ])
        with pytest.raises(PanelError, match="row 2"):
            ingest_panel(csv)

    def test_ets_varying_within_firm_rejected(self):
        csv = "\n".join([
            HEADER,
            "A1,2002,17,0,1.0,1,0,1,1,1,,,,1",
            "A1,2003,17,1,1.0,1,0,1,1,1,,,,1",
        ])
        with pytest.raises(PanelError, match="ets"):
            ingest_panel(csv)

    def test_unknown_non_fuel_column_rejected(self):
        csv = HEADER.replace(",co2", ",bogus,co2") + "\nA1,2003,17,1,1,1,0,1,1,1,,,,x,1"
        with pytest.raises(PanelError, match="bogus"):
            ingest_panel(csv)

    def test_extra_fuel_column_accepted_and_round_trips(self):
        csv = "\n".join([
            HEADER.replace(",co2", ",coal_mwh,co2"),
            "A1,2003,17,1,1.0,1.0,0.0,1.0,1.0,1.0,2.0,,,7.5,1.0",
        ])
        panel = ingest_panel(csv)
        assert panel.fuel_types() == ("coal", "gas")
        assert ingest_panel(write_panel(panel)) == panel

    def test_co2_computed_from_factors_when_column_absent(self):
        csv = "\n".join([
            HEADER.replace(",co2", ""),
            "A1,2003,17,1,1000.0,10,0,1,1,1,150.0,40.0,",
        ])
        factors = FuelFactorTable({"gas": 0.2, "oil": 0.27, "other_fuel": 0.3})
        panel = ingest_panel(csv, factors=factors)
        assert panel.values_in_year("co2_tonnes", 2003).iloc[0] == pytest.approx(40.8)

    def test_missing_factor_for_present_fuel_errors(self):
        csv = "\n".join([
            HEADER.replace(",co2", ""),
            "A1,2003,17,1,1000.0,10,0,1,1,1,150.0,40.0,",
        ])
        with pytest.raises(PanelError, match="oil"):
            ingest_panel(csv, factors=FuelFactorTable({"gas": 0.2}))


class TestRecordInvariants:
    def test_negative_quantity_rejected(self):
        with pytest.raises(PanelError, match="gross_output"):
            FirmYearRecord("A", 2003, 17, 0, gross_output=-1.0)

    def test_ets_flag_must_be_binary(self):
        with pytest.raises(PanelError, match="ets"):
            FirmYearRecord("A", 2003, 17, 2)

    def test_intensity_derived_in_declared_units(self):
        # 314 t on 5299 kEUR of output -> 314e6 / 5299 g per kEUR
        rec = FirmYearRecord("A", 2003, 17, 0, gross_output=5299.0, co2_tonnes=314.0)
        assert rec.co2_intensity == pytest.approx(314e6 / 5299.0, rel=1e-12)

    def test_inconsistent_intensity_rejected(self):
        with pytest.raises(PanelError, match="co2_intensity"):
            FirmYearRecord(
                "A", 2003, 17, 0,
                gross_output=5299.0, co2_tonnes=314.0, co2_intensity=1.0,
            )

    def test_phase_windows_must_be_disjoint(self):
        with pytest.raises(PanelError, match="overlap"):
            PhaseWindows(phase1_years=(2005, 2008), phase2_years=(2008, 2009))

    def test_base_year_must_be_pretreatment(self):
        with pytest.raises(PanelError, match="base_year"):
            PhaseWindows(base_year=2005)


class TestEmissions:
    def test_empty_mapping_is_zero(self):
        assert compute_emissions({}, FuelFactorTable({})) == 0.0

    def test_single_fuel(self):
        assert compute_emissions({"gas": 100.0}, {"gas": 0.2}) == pytest.approx(20.0)

    def test_two_fuel_hand_sum(self):
        # hand: 150 * 0.2 + 40 * 0.27 = 30 + 10.8 = 40.8
        got = compute_emissions({"gas": 150.0, "oil": 40.0}, {"gas": 0.2, "oil": 0.27})
        assert got == pytest.approx(40.8, rel=1e-12)

    def test_missing_factor_errors(self):
        with pytest.raises(PanelError, match="coal"):
            compute_emissions({"coal": 1.0}, {"gas": 0.2})

    @given(
        st.dictionaries(
            st.sampled_from(["gas", "oil", "coal", "lignite"]),
            st.floats(0, 1e6, allow_nan=False),
            max_size=4,
        ),
        st.dictionaries(
            st.sampled_from(["gas", "oil", "coal", "lignite"]),
            st.floats(0, 1e6, allow_nan=False),
            max_size=4,
        ),
    )
    @settings(max_examples=50, deadline=None)
    def test_linear_in_fuel_use(self, a, b):
        factors = {"gas": 0.2, "oil": 0.27, "coal": 0.34, "lignite": 0.4}
        merged = {f: a.get(f, 0.0) + b.get(f, 0.0) for f in set(a) | set(b)}
        total = compute_emissions(a, factors) + compute_emissions(b, factors)
        assert compute_emissions(merged, factors) == pytest.approx(total, rel=1e-9, abs=1e-9)

    def test_negative_factor_rejected(self):
        with pytest.raises(PanelError):
            FuelFactorTable({"gas": -0.1})


class TestTrim:
    def test_fraction_one_keeps_everything(self):
        idx = trim_mid_fraction([5.0, 1.0, 3.0], 1.0)
        assert sorted(idx) == [0, 1, 2]

    def test_mid_98_of_1_to_100(self):
        # declared rule: k = floor(100 * 0.01) = 1 cut per side, so the band
        # is [2, 99]; enumeration retains exactly the values 2..99
        values = np.arange(1, 101, dtype=float)
        idx = trim_mid_fraction(values, 0.98)
        assert sorted(values[idx]) == list(range(2, 100))

    def test_all_equal_all_retained(self):
        idx = trim_mid_fraction([7.0] * 25, 0.5)
        assert len(idx) == 25

    def test_invalid_fraction(self):
        for bad in (0.0, -0.2, 1.2):
            with pytest.raises(PanelError):
                trim_mid_fraction([1.0, 2.0], bad)

    def test_empty_input(self):
        with pytest.raises(PanelError):
            trim_mid_fraction([], 0.9)

    @given(
        st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=1, max_size=200),
        st.floats(0.5, 1.0, exclude_max=False),
    )
    @settings(max_examples=100, deadline=None)
    def test_retained_band_is_contiguous_in_sorted_order(self, values, fraction):
        values = list(values)
        idx = trim_mid_fraction(values, fraction)
        retained = sorted(np.asarray(values)[idx])
        full = sorted(values)
        # retained values form a contiguous slice of the sorted sample
        lo = full.index(retained[0])
        assert full[lo:lo + len(retained)] == retained

    def test_idempotent_on_the_enumerated_example(self):
        # re-trimming the retained band keeps it intact here: the second pass
        # cuts floor(98 * 0.01) = 0 per side
        values = np.arange(1, 101, dtype=float)
        band = values[trim_mid_fraction(values, 0.98)]
        again = band[trim_mid_fraction(band, 0.98)]
        assert list(again) == list(band)

    def test_idempotent_under_ties_at_the_cut(self):
        # k = floor(50 * 0.2) = 10 cuts exactly through the tie groups
        values = np.array([1.0] * 10 + [2.0] * 30 + [3.0] * 10)
        band = values[trim_mid_fraction(values, 0.6)]
        assert list(band) == [2.0] * 30
        again = band[trim_mid_fraction(band, 0.6)]
        assert list(again) == list(band)


def _two_year_panel(values_2002, values_2003, ets=None):
    records = []
    for i, (a, b) in enumerate(zip(values_2002, values_2003)):
        flag = 0 if ets is None else ets[i]
        fid = f"F{i:03d}"
        if a is not None:
            records.append(FirmYearRecord(fid, 2002, 17, flag, gross_output=a))
        if b is not None:
            records.append(FirmYearRecord(fid, 2003, 17, flag, gross_output=b))
    return Panel.from_records(records)


class TestLogChange:
    def test_no_change_is_zero(self):
        panel = _two_year_panel([100.0], [100.0])
        result = log_change(panel, "gross_output", 2002, 2003)
        assert result["F000"] == 0.0

    def test_doubles_to_ln2(self):
        panel = _two_year_panel([100.0], [200.0])
        result = log_change(panel, "gross_output", 2002, 2003)
        assert result["F000"] == pytest.approx(math.log(2.0), abs=1e-12)

    def test_firm_missing_target_year_is_excluded(self):
        panel = _two_year_panel([100.0, 50.0], [110.0, None])
        result = log_change(panel, "gross_output", 2002, 2003)
        assert "F001" not in result
        assert result.excluded == ("F001",)

    def test_nonpositive_value_reports_firm_and_year(self):
        panel = _two_year_panel([0.0], [10.0])
        with pytest.raises(PanelError, match="F000.*2002"):
            log_change(panel, "gross_output", 2002, 2003)

    @given(st.lists(st.floats(0.01, 1e5), min_size=1, max_size=30))
    @settings(max_examples=50, deadline=None)
    def test_antisymmetry(self, values):
        other = [v * 1.7 + 0.5 for v in values]
        panel = _two_year_panel(values, other)
        fwd = log_change(panel, "gross_output", 2002, 2003)
        rev = log_change(panel, "gross_output", 2003, 2002)
        for firm, change in fwd.items():
            assert rev[firm] == pytest.approx(-change, abs=1e-12)


class TestSummaryStats:
    def test_singleton(self):
        s = summary_stats([4.2])
        assert (s.mean, s.sd, s.p10, s.p50, s.p90, s.n) == (4.2, 0.0, 4.2, 4.2, 4.2, 1)

    def test_median_of_1_to_10_under_nearest_rank(self):
        # nearest rank: ceil(0.5 * 10) = 5th smallest value
        s = summary_stats(list(range(1, 11)))
        assert s.p50 == 5.0
        assert s.p10 == 1.0 and s.p90 == 9.0

    def test_constant_values_have_zero_sd(self):
        assert summary_stats([2.0, 2.0, 2.0, 2.0]).sd == 0.0

    def test_empty_errors(self):
        with pytest.raises(PanelError):
            summary_stats([])

    def test_sample_sd_uses_n_minus_1(self):
        s = summary_stats([1.0, 2.0, 3.0])
        assert s.sd == pytest.approx(1.0)

    @given(st.lists(st.floats(-1e4, 1e4), min_size=1, max_size=60), st.randoms())
    @settings(max_examples=50, deadline=None)
    def test_permutation_invariant(self, values, rnd):
        shuffled = list(values)
        rnd.shuffle(shuffled)
        assert summary_stats(values) == summary_stats(shuffled)


class TestIndexedMedianSeries:
    def _panel(self, year_values):
        records = []
        for year, values in year_values.items():
            for i, v in enumerate(values):
                records.append(
                    FirmYearRecord(f"F{i:02d}", year, 17, 0, gross_output=v)
                )
        return Panel.from_records(records)

    def test_base_year_is_exactly_one(self):
        panel = self._panel({2003: [5.0, 10.0, 20.0], 2005: [8.0, 12.0, 30.0]})
        series = indexed_median_series(panel, "gross_output", 2003)
        assert series[2003] == 1.0

    def test_constant_variable_gives_flat_series(self):
        panel = self._panel({2003: [3.0, 3.0], 2004: [3.0], 2005: [3.0, 3.0, 3.0]})
        series = indexed_median_series(panel, "gross_output", 2003)
        assert all(v == 1.0 for v in series.values())

    def test_hand_median_fixture(self):
        # medians by hand: 2003 -> 10 (middle of 8,10,14), 2005 -> 12
        panel = self._panel({2003: [8.0, 10.0, 14.0], 2005: [12.0, 11.0, 13.0]})
        series = indexed_median_series(panel, "gross_output", 2003)
        assert series == {2003: 1.0, 2005: pytest.approx(1.2)}

    def test_zero_base_median_errors(self):
        panel = self._panel({2003: [0.0], 2005: [1.0]})
        with pytest.raises(PanelError, match="zero"):
            indexed_median_series(panel, "gross_output", 2003)

    def test_missing_base_year_errors(self):
        panel = self._panel({2005: [1.0]})
        with pytest.raises(PanelError, match="2003"):
            indexed_median_series(panel, "gross_output", 2003)


class TestDerivedVariables:
    def test_energy_sums_electricity_and_fuels(self):
        rec = FirmYearRecord(
            "A", 2003, 17, 0, electricity_mwh=100.0,
            fuel_use={"gas": 50.0, "oil": 25.0},
        )
        panel = Panel.from_records([rec])
        assert panel.values_in_year("energy_mwh", 2003).iloc[0] == 175.0

    def test_export_share(self):
        rec = FirmYearRecord("A", 2003, 17, 0, gross_output=200.0, exports=50.0)
        panel = Panel.from_records([rec])
        assert panel.values_in_year("export_share", 2003).iloc[0] == 0.25

    def test_with_derived_round_trip(self):
        rec = FirmYearRecord("A", 2003, 17, 0, gross_output=1.0)
        panel = Panel.from_records([rec]).with_derived("distance", {("A", 2003): 0.4})
        assert panel.values_in_year("distance", 2003).iloc[0] == 0.4

    def test_unknown_variable_errors(self):
        rec = FirmYearRecord("A", 2003, 17, 0)
        with pytest.raises(PanelError, match="nope"):
            Panel.from_records([rec]).variable("nope")


def test_nearest_rank_quantile_examples():
    values = list(range(1, 101))
    assert nearest_rank_quantile(values, 0.01) == 1.0
    assert nearest_rank_quantile(values, 0.5) == 50.0
    assert nearest_rank_quantile(values, 1.0) == 100.0
