import filecmp
import math

import numpy as np
import pytest

from kvtier.bench import ExperimentConfig, run_experiment
from kvtier.bench.cli import main
from kvtier.bench.config import ConfigError
from kvtier.bench.report import compare_strategies, sweep, write_report
from kvtier.bench.workload import generate_workload

SMALL = dict(prefill_len=256, decode_len=300, dim=16, components=6, clusters=8,
             topk=3, oracle_m=16, warmup=16, drift_rate=0.1, local_window=32)


def small(**kw):
    over = dict(SMALL)
    over.update(kw)
    return ExperimentConfig().replace(**over)


def collect_partitions(cfg):
    snaps = []

    def hook(t, streams):
        snaps.append({s.sid: s.partition.membership() for s in streams})

    rep = run_experiment(cfg, on_step=hook)
    return rep, snaps


def test_no_cluster_is_exact():
    rep = run_experiment(small(strategy="no_cluster"))
    assert all(r.recall == 1.0 for r in rep.rows)
    # one command per run of consecutive flash-resident oracle ids; recent ids
    # still in the page buffer need no read at all
    assert all(r.read_commands <= 16 for r in rep.rows)
    assert all(r.fetched_bytes <= 16 * 64 for r in rep.rows)
    assert sum(r.read_commands for r in rep.rows) > 0


def test_static_equals_infinite_threshold():
    a, sa = collect_partitions(small(strategy="static"))
    b, sb = collect_partitions(small(strategy="adaptive", tau="inf"))
    assert sa == sb
    assert [r.recall for r in a.rows] == [r.recall for r in b.rows]


def test_strategy_sanity():
    _, s_static = collect_partitions(small(strategy="static"))
    assert all(len(s[0]) == 8 for s in s_static)

    rep, s_dyn = collect_partitions(small(strategy="adaptive", alpha=1.0))
    counts = [len(s[0]) for s in s_dyn]
    assert counts == sorted(counts) and counts[-1] > 8
    assert rep.summary["splits"] == counts[-1] - 8

    _, s_loc = collect_partitions(small(strategy="local"))
    initial = s_loc[0][0]
    for s in s_loc:
        for cid in range(8):
            assert s[0][cid] == initial[cid]
    assert len(s_loc[-1][0]) > 8


@pytest.mark.parametrize("virtualize", [False, True])
@pytest.mark.parametrize("layout", ["dual_head", "sequence"])
def test_accounting_closure(virtualize, layout):
    cfg = small(virtualize=str(virtualize), layout=layout, buffer_budget=2, alpha=1.0,
                cache_ratio=0.05)
    rep = run_experiment(cfg)
    s = rep.summary
    assert s["forced_load_bytes"] > 0
    assert s["read_bytes"] == s["fetched_bytes"] + s["forced_load_bytes"] + s["rep_prefetch_bytes"]
    assert sum(r.fetched_bytes for r in rep.rows) == s["fetched_bytes"]
    assert (s["rep_prefetch_bytes"] > 0) == virtualize


def test_conservation_and_budget_every_step():
    def hook(t, streams):
        for st in streams:
            st.partition.check_conservation()
            assert st.partition.buffered_total < 3
            assert st.partition.ingested_ids() == set(range(256 + t + 1))

    run_experiment(small(buffer_budget=3, alpha=1.0), on_step=hook)


def test_layout_matches_partition_after_run():
    holder = {}

    def hook(t, streams):
        holder["streams"] = streams

    run_experiment(small(alpha=1.0, layers=2, heads=2), on_step=hook)
    for st in holder["streams"]:
        for cid, c in st.partition.clusters.items():
            assert sorted(st.layout.read_cluster_ids(cid)) == sorted(c.members)


def test_multi_stream_latency_model():
    rep = run_experiment(small(layers=3, heads=2, decode_len=50))
    for r in rep.rows:
        assert r.latency_overlapped <= r.latency_serial
    s = rep.summary
    assert s["kv_peak_bytes_virtualized"] < s["kv_peak_bytes_full"]


def test_trace_mismatch_rejected():
    tr = generate_workload(small().workload)
    with pytest.raises(ConfigError):
        run_experiment(small(seed=1), trace=tr)


def test_inconsistent_config_rejected_early():
    with pytest.raises(ConfigError):
        small(oracle_m=1000)


def test_reports_are_byte_identical(tmp_path):
    cfg = small(alpha=1.0)
    write_report(run_experiment(cfg, trace_io=True), tmp_path / "a", layout=True, io_trace=True)
    write_report(run_experiment(cfg, trace_io=True), tmp_path / "b", layout=True, io_trace=True)
    names = ["report.csv", "summary.csv", "access_hist.csv", "layout.txt", "io_trace.txt"]
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b", names, shallow=False)
    assert match == names
    head = (tmp_path / "a" / "report.csv").read_text().splitlines()
    assert head[0].startswith("# recall") and head[1].startswith("step,recall,")
    # fixed-precision decimals, never exponent notation
    assert "e-" not in (tmp_path / "a" / "summary.csv").read_text()


def test_compare_and_sweep():
    cfg = small(decode_len=40)
    header, rows, _ = compare_strategies([cfg, cfg])
    ratios = {r[0]: r[3] for r in rows if isinstance(r[1], (int, float))}
    assert all(v in (1.0, "") for v in ratios.values())
    with pytest.raises(ConfigError):
        compare_strategies([cfg, cfg.replace(seed=9)])
    with pytest.raises(ConfigError):
        compare_strategies([cfg])
    header, rows = sweep(cfg, "buffer_budget", ["0", "4"])
    assert header[0] == "buffer_budget" and [r[0] for r in rows] == ["0", "4"]


def write_cfg(path, **kw):
    over = dict(SMALL, decode_len=30)
    over.update(kw)
    path.write_text("".join(f"{k} = {v}\n" for k, v in over.items()))
    return str(path)


def test_cli(tmp_path, capsys):
    cfg = write_cfg(tmp_path / "a.cfg")
    out = tmp_path / "run"
    assert main(["run", "--config", cfg, "--out", str(out), "--seed", "3", "--layout"]) == 0
    assert (out / "report.csv").exists() and (out / "layout.txt").exists()
    assert "seed = 3" in (out / "config.txt").read_text()

    other = write_cfg(tmp_path / "b.cfg", strategy="static")
    assert main(["compare", "--configs", cfg, other, "--out", str(tmp_path / "cmp")]) == 0
    assert (tmp_path / "cmp" / "summary.csv").read_text().count("a/b") == 0

    assert main(["sweep", "--config", cfg, "--param", "buffer_budget", "--values", "0,2",
                 "--out", str(tmp_path / "sw")]) == 0
    assert (tmp_path / "sw" / "sweep.csv").exists()

    assert main(["estimate", "--layers", "16", "--kv-heads", "8", "--head-dim", "64",
                 "--seq-len", "8192"]) == 0
    assert "268435456 bytes" in capsys.readouterr().out

    bad = tmp_path / "bad.cfg"
    bad.write_text("nope = 1\n")
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == 2
