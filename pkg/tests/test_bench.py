"""Benchmark sweeps: shape, invariants, reproducibility."""

import numpy as np
import pytest

from rbsim.bench import (
    BYTES_FIELDS,
    BenchSpec,
    bench_bytes,
    bench_quality,
    bench_snapshot_counts,
    read_csv,
    run_bench,
    write_csv,
)
from rbsim.store import payload_float_count

TINY = BenchSpec(presets=("A",), step=8.0, discretizations=(8,),
                 test_size=40, max_res=1e-3, seed=5)


def test_quality_rows_monotone():
    rows = bench_quality(TINY)
    assert len(rows) >= 2
    residuals = [r["max_residual"] for r in rows]
    for earlier, later in zip(residuals, residuals[1:]):
        assert later <= earlier + 1e-9
    # the full basis meets its own training bound on the training box
    assert rows[-1]["n"] == max(r["n"] for r in rows)
    for row in rows:
        assert row["mean_residual"] <= row["max_residual"]


def test_quality_preset_ordering():
    # each preset is measured on its own box; the smaller box should reach
    # a given quality with fewer snapshots, i.e. A <= B at equal n
    spec = BenchSpec(presets=("A", "B"), step=8.0, discretizations=(8,),
                     test_size=60, max_res=1e-3, seed=5)
    rows = bench_quality(spec)
    by_preset = {p: {r["n"]: r["max_residual"] for r in rows if r["preset"] == p}
                 for p in ("A", "B")}
    shared = sorted(set(by_preset["A"]) & set(by_preset["B"]))
    assert len(shared) >= 2
    for n in shared:
        assert by_preset["A"][n] <= by_preset["B"][n] * (1.0 + 1e-9)


def test_snapshot_counts_ordering():
    rows = bench_snapshot_counts(TINY)
    by_strategy = {r["strategy"]: r for r in rows}
    assert set(by_strategy) == {"basic", "subspace", "reorder"}

    basic = by_strategy["basic"]
    sub = by_strategy["subspace"]
    assert basic["mean_m"] == basic["n"]
    assert sub["mean_m"] <= sub["n"]
    assert sub["p25"] <= sub["p50"] <= sub["p75"] <= sub["p90"] <= sub["max_m"]
    assert by_strategy["reorder"]["basis_mode"] == "normalized"
    assert sub["basis_mode"] == "orthonormal"


def test_bytes_rows_match_formulas(tmp_path):
    spec = BenchSpec(presets=("A",), step=8.0, discretizations=(8,),
                     snapshot_counts=(1, 3), test_size=10, max_res=1e-3, seed=5)
    rows = bench_bytes(spec, tmp_path)
    assert {r["n"] for r in rows} == {1, 3}
    for row in rows:
        d = row["discretization"] ** 2
        assert row["payload_floats"] == payload_float_count(row["n"], d, 4, 1)
        assert row["file_bytes"] > row["payload_floats"] * 8  # plus header
        if row["strategy"] == "basic":
            assert row["setup_bytes"] == row["file_bytes"]
            assert row["per_query_bytes_mean"] == 0.0
        else:
            assert row["setup_bytes"] == row["file_bytes"] - row["n"] * d * 8
            assert 0 < row["per_query_bytes_mean"] <= row["n"] * d * 8
        assert row["update_border_floats"] == row["update_overhead_fraction"] * d
        assert row["update_bytes"] > (d + row["update_border_floats"]) * 8


def test_csv_roundtrip_and_determinism(tmp_path):
    rows = bench_quality(TINY)
    path = tmp_path / "quality.csv"
    write_csv(path, TINY.comments("quality"), ("preset", "discretization", "n",
                                               "max_residual", "mean_residual"), rows)
    text = path.read_text()
    assert text.startswith("# rbsim bench quality\n# seed=5\n")

    back = read_csv(path)
    assert len(back) == len(rows)
    assert back[0]["preset"] == "A"
    assert float(back[0]["max_residual"]) == rows[0]["max_residual"]

    again = tmp_path / "again.csv"
    run_bench("quality", TINY, again)
    assert (tmp_path / "again.csv").read_text().split("\n", 1)[1] == \
        text.split("\n", 1)[1]


def test_run_bench_validation(tmp_path):
    with pytest.raises(ValueError, match="unknown bench op"):
        run_bench("speed", TINY, tmp_path / "x.csv")
    with pytest.raises(ValueError, match="store"):
        run_bench("bytes", TINY, tmp_path / "x.csv")
