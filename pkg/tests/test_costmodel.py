import csv
import math

import numpy as np
import pytest

from tirtrack.costmodel import (
    COLUMNS, DEFAULT_GROUPS, LayerCostSpec, flops, format_table, mac, mac_from_budget, mac_lower_bound, report,
    sweep, write_csv,
)


class TestSpec:
    @pytest.mark.parametrize("kwargs", [
        dict(H=0, W=1, C_in=1, C_out=1), dict(H=1, W=1, C_in=6, C_out=8, g=4),
        dict(H=1, W=1, C_in=8, C_out=6, g=4), dict(H=1, W=1, C_in=1, C_out=1, g=0),
        dict(H=1.5, W=1, C_in=1, C_out=1),
    ])
    def test_invalid(self, kwargs):
        with pytest.raises(ValueError):
            LayerCostSpec(**kwargs)


class TestFlops:
    def test_dense(self):
        assert flops(LayerCostSpec(16, 16, 64, 64)) == 1_048_576

    def test_grouped_default(self):
        assert DEFAULT_GROUPS == 8
        assert flops(LayerCostSpec(16, 16, 64, 64, 8)) == 131_072

    def test_unit(self):
        assert flops(LayerCostSpec(1, 1, 1, 1)) == 1


class TestMac:
    def test_dense(self):
        assert mac(LayerCostSpec(16, 16, 64, 64)) == 36_864

    def test_grouped(self):
        assert mac(LayerCostSpec(16, 16, 64, 64, 8)) == 33_280

    def test_unit(self):
        assert mac(LayerCostSpec(1, 1, 1, 1)) == 3

    def test_integer_results(self):
        r = report(LayerCostSpec(7, 5, 24, 48, 4))
        assert type(r.flops) is int and type(r.mac) is int


class TestBound:
    def test_balanced_equals_bound(self):
        assert mac_lower_bound(16, 16, 1_048_576) == 36_864.0
        assert report(LayerCostSpec(16, 16, 64, 64)).at_bound

    def test_symmetric_case(self):
        hw = 4 * 4
        spec = LayerCostSpec(4, 4, hw, hw)
        assert mac_lower_bound(4, 4, hw * hw * hw) == mac(spec)

    def test_imbalanced_above_bound(self):
        r = report(LayerCostSpec(16, 16, 32, 128))
        assert r.flops == 1_048_576 and r.mac == 45_056 and r.bound == 36_864.0 and not r.at_bound

    def test_nonpositive_rejected(self):
        with pytest.raises(ValueError):
            mac_lower_bound(4, 4, 0)

    def test_exhaustive_dense_inequality(self):
        for ci in range(1, 129):
            for co in range(1, 129):
                spec = LayerCostSpec(16, 16, ci, co)
                m, b = mac(spec), mac_lower_bound(16, 16, flops(spec))
                assert m >= b - 1e-9
                assert math.isclose(m, b, abs_tol=1e-9) == (ci == co)

    def test_grouped_identity(self, rng):
        for _ in range(200):
            g = int(rng.choice([1, 2, 4, 8]))
            spec = LayerCostSpec(int(rng.integers(1, 33)), int(rng.integers(1, 33)),
                                 g * int(rng.integers(1, 17)), g * int(rng.integers(1, 17)), g)
            assert mac_from_budget(spec.H, spec.W, spec.C_in, flops(spec), g) == pytest.approx(mac(spec), rel=1e-12)


class TestSweep:
    def test_fixed_cin_mac_increases_with_g(self):
        rows = sweep(16, 16, 131_072, c_in=64)
        by_g = {r.spec.g: r.mac for r in rows}
        assert sorted(by_g) == [1, 2, 4, 8]
        assert by_g[1] < by_g[2] < by_g[4] < by_g[8]

    def test_balanced_split_minimises_dense_mac(self):
        rows = [r for r in sweep(16, 16, 1_048_576, g_values=(1,))]
        assert rows[0].spec.C_in == rows[0].spec.C_out == 64
        assert all(rows[0].mac < r.mac for r in rows[1:])

    def test_sorted_and_on_budget(self):
        rows = sweep(8, 8, 65_536)
        assert [r.mac for r in rows] == sorted(r.mac for r in rows)
        assert all(r.flops == 65_536 for r in rows)

    def test_default_g_flagged(self):
        rows = sweep(16, 16, 131_072, c_in=64)
        flagged = [r for r in rows if r.default_g]
        assert len(flagged) == 1 and flagged[0].spec.g == 8

    def test_infeasible_budget_is_empty(self):
        assert sweep(16, 16, 7, max_channels=4) == []


class TestOutput:
    def test_table_and_csv(self, tmp_path):
        rows = sweep(16, 16, 131_072, c_in=64)
        text = format_table(rows)
        lines = text.splitlines()
        assert lines[0].split() == list(COLUMNS) and len(lines) == len(rows) + 1
        assert len({len(line) for line in lines}) == 1
        path = tmp_path / "sweep.csv"
        write_csv(rows, path)
        with open(path) as fh:
            data = list(csv.DictReader(fh))
        assert [int(d["mac"]) for d in data] == [r.mac for r in rows]
        assert np.allclose([float(d["bound"]) for d in data], [r.bound for r in rows], rtol=0, atol=0)
