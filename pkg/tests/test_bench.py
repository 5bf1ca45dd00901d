import csv

import pytest

from mstpde.bench import (bench_attention_scaling, bench_pass_savings, bench_training_throughput,
                          growth_exponent, main, write_csv)
from mstpde.scheduler import decompose_steps


def test_forty_steps_need_five_passes():
    (rec,) = bench_pass_savings([40])
    assert (rec.passes, rec.baseline_passes) == (5, 40)
    (single,) = bench_pass_savings([40], scales=(1,))
    assert single.passes == 40


def test_pass_counts_come_from_the_planner():
    recs = bench_pass_savings(range(1, 65))
    assert [r.passes for r in recs] == [len(decompose_steps(h, (1, 2, 4, 8))) for h in range(1, 65)]
    assert sum(r.baseline_passes for r in recs) == 64 * 65 // 2
    assert len({r.config_hash for r in recs}) == 1


def test_single_token_attention_runs():
    (rec,) = bench_attention_scaling([1], repeats=1)
    assert rec.tokens == 1 and rec.wall_time > 0


def test_token_counts_must_ascend():
    with pytest.raises(ValueError):
        bench_attention_scaling([64, 16])


def test_throughput_records():
    recs = bench_training_throughput(steps=1, batch_size=2)
    assert [r.scenario for r in recs] == ["train_step_cae", "train_step_dyn"]
    assert all(r.wall_time > 0 for r in recs)


def test_csv_and_entry_point(tmp_path, capsys, monkeypatch):
    import mstpde.bench as bench

    monkeypatch.setattr(bench, "bench_attention_scaling",
                        lambda ns: bench_attention_scaling([4, 8], repeats=1))
    monkeypatch.setattr(bench, "bench_training_throughput",
                        lambda: bench_training_throughput(steps=1, batch_size=2))
    main(["--out", str(tmp_path / "b.csv")])
    with open(tmp_path / "b.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 2 + 2 + 64
    assert set(rows[0]) == {"scenario", "wall_time", "tokens", "passes", "baseline_passes",
                            "config_hash"}
    assert "fitted exponent" in capsys.readouterr().out


@pytest.mark.bench
def test_attention_growth_is_roughly_quadratic():
    recs = bench_attention_scaling([16, 64, 256, 1024])
    assert 1.5 <= growth_exponent(recs) <= 2.5
