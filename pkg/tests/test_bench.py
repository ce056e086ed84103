import csv

import numpy as np
import pytest

from singlespike import bench
from singlespike.bench import (
    CSV_COLUMNS,
    BenchRecord,
    SweepSpec,
    build_network,
    emit_report,
    load_report,
    run_sweep,
    time_pass,
)
from singlespike.data import gen_synthetic
from singlespike.errors import ConfigError, NumericError


def tiny_spec(**kw):
    base = dict(units=[8, 12], steps=[16], batches=[4], layers=[1], reps=3, warmup=1)
    return SweepSpec(**{**base, **kw})


class TestSpec:
    @pytest.mark.parametrize("bad", [dict(reps=2), dict(warmup=0), dict(units=[]), dict(steps=[0]),
                                     dict(models=["gpu"]), dict(beta_modes=["frozen"]), dict(threads=0)])
    def test_rejects(self, bad):
        with pytest.raises(ConfigError):
            tiny_spec(**bad)

    def test_aliases(self):
        assert tiny_spec(models=["fast", "seq"]).models == ["fast-single", "seq-single"]


@pytest.fixture(scope="module")
def sweep():
    return run_sweep(tiny_spec())


class TestSweep:
    def test_cardinality(self, sweep):
        for model in ("fast-single", "seq-single"):
            assert sum(r.model == model for r in sweep.records) == 2

    def test_one_speedup_per_point(self, sweep):
        for n in (8, 12):
            pts = [r for r in sweep.records if r.n == n]
            assert sum(r.speedup_vs_seq is not None for r in pts) == 1
            fast = next(r for r in pts if r.model == "fast-single")
            seq = next(r for r in pts if r.model == "seq-single")
            assert fast.speedup_vs_seq == pytest.approx(seq.total_ms / fast.total_ms)

    def test_timing_invariants(self, sweep):
        for r in sweep.records:
            assert r.fwd_ms > 0 and r.bwd_ms > 0 and r.mad_ms >= 0
            assert r.total_ms >= max(r.fwd_ms, r.bwd_ms)
            assert r.fwd_ms + r.bwd_ms <= 1.2 * r.total_ms

    def test_structural_determinism(self, sweep):
        again = run_sweep(tiny_spec())
        key = lambda r: (r.model, r.n, r.t, r.b, r.layers)
        assert [key(r) for r in again.records] == [key(r) for r in sweep.records]

    def test_fixed_beta_mode_ids(self):
        res = run_sweep(tiny_spec(units=[8], beta_modes=["trainable", "fixed"]))
        ids = {r.model for r in res.records}
        assert ids == {"fast-single", "seq-single", "fast-single+fixed-beta", "seq-single+fixed-beta"}
        assert sum(r.speedup_vs_seq is not None for r in res.records) == 2

    def test_out_of_memory_point_is_skipped(self, monkeypatch):
        real = bench.time_pass

        def flaky(net, batch, reps, warmup):
            if net.cfg.layer_sizes[1] == 12 and net.cfg.variant == "seq-single":
                raise MemoryError("simulated")
            return real(net, batch, reps, warmup)

        monkeypatch.setattr(bench, "time_pass", flaky)
        res = run_sweep(tiny_spec())
        assert len(res.records) == 3
        assert res.skipped == [{"model": "seq-single", "n": 12, "t": 16, "b": 4, "layers": 1,
                                "reason": "out of memory"}]
        assert next(r for r in res.records if r.n == 12).speedup_vs_seq is None


class TestTimePass:
    def test_single_rep(self):
        net = build_network("fast-single", 8, 16, 1, True, 0)
        t = time_pass(net, gen_synthetic(4, 8, 16, seed=0), reps=1, warmup=0)
        assert t.mad_ms == 0 and t.total_ms >= max(t.fwd_ms, t.bwd_ms)

    def test_non_finite_raises(self):
        net = build_network("seq-single", 8, 16, 1, True, 0)
        net.layers[-1].weights[:] = np.nan
        with pytest.raises(NumericError):
            time_pass(net, gen_synthetic(4, 8, 16, seed=0), reps=1, warmup=0)

    def test_sequential_cost_is_linear_in_t(self):
        net_a = build_network("seq-single", 50, 256, 1, True, 0)
        net_b = build_network("seq-single", 50, 512, 1, True, 0)
        a = time_pass(net_a, gen_synthetic(32, 50, 256, seed=0), reps=5, warmup=1)
        b = time_pass(net_b, gen_synthetic(32, 50, 512, seed=0), reps=5, warmup=1)
        assert 1.7 <= b.total_ms / a.total_ms <= 2.5


class TestReport:
    def test_csv_layout(self, tmp_path, sweep):
        path = emit_report(sweep, tmp_path / "r.csv")
        rows = list(csv.reader(open(path)))
        assert rows[0] == CSV_COLUMNS
        assert len(rows) == 1 + len(sweep.records)
        blank = [r for r in rows[1:] if r[0] == "seq-single"]
        assert all(r[-1] == "" for r in blank)

    def test_single_record(self, tmp_path):
        rec = BenchRecord("fast-single", 1, 2, 3, 1, 1.0, 2.0, 3.0, 0.1, 1.5)
        path = emit_report([rec], tmp_path / "one.csv")
        assert len(path.read_text().strip().splitlines()) == 2

    @pytest.mark.parametrize("suffix", [".json", ".csv"])
    def test_round_trip(self, tmp_path, sweep, suffix):
        path = emit_report(sweep, tmp_path / f"r{suffix}")
        assert load_report(path) == sweep.records

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_report([], tmp_path / "r.csv")
