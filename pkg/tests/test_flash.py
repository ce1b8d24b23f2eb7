import numpy as np
import pytest

from kvtier.flash import (DeviceConfig, Extent, FlashDevice, IoStats, command_time,
                          effective_bandwidth)

KIB = 1024


def small_device(**kw):
    cfg = dict(capacity=1 << 20)
    cfg.update(kw)
    return FlashDevice(DeviceConfig(**cfg))


def test_config_validation():
    with pytest.raises(ValueError):
        DeviceConfig(page_size=0)
    with pytest.raises(ValueError):
        DeviceConfig(max_cmd_bytes=5000)
    with pytest.raises(ValueError):
        DeviceConfig(capacity=4097)


def test_extent_validation():
    with pytest.raises(ValueError):
        Extent(0, 0)
    with pytest.raises(ValueError):
        Extent(-1, 4)
    assert Extent(10, 5).end == 15


def test_default_half_bandwidth_point():
    cfg = DeviceConfig()
    assert effective_bandwidth(24 * KIB, cfg) == pytest.approx(cfg.stream_bw / 2)


def test_effective_bandwidth_formula():
    cfg = DeviceConfig(cmd_overhead=1e-5, stream_bw=1e9)
    assert effective_bandwidth(10_000, cfg) == pytest.approx(10_000 / (1e-5 + 1e-5))
    with pytest.raises(ValueError):
        effective_bandwidth(0, cfg)


def test_write_then_read_round_trip():
    dev = small_device()
    payload = bytes(range(256)) * 20
    dev.write(1000, payload)
    data, delta = dev.read([Extent(1000, len(payload))])
    assert data == payload
    assert delta.read_bytes == len(payload)
    assert delta.read_commands == 1


def test_read_returns_in_request_order():
    dev = small_device()
    dev.write(0, b"a" * 10 + b"b" * 10)
    data, delta = dev.read([Extent(10, 10), Extent(0, 10)])
    assert data == b"b" * 10 + b"a" * 10
    # adjacent extents coalesce into one command
    assert delta.read_commands == 1


def test_read_chops_at_max_cmd():
    dev = small_device(max_cmd_bytes=8 * KIB)
    _, delta = dev.read([Extent(0, 20 * KIB)])
    assert delta.read_commands == 3
    assert dev.read_command_lengths == [8 * KIB, 8 * KIB, 4 * KIB]
    cfg = dev.cfg
    assert delta.simulated_time == pytest.approx(3 * cfg.cmd_overhead + 20 * KIB / cfg.stream_bw)


def test_overlapping_extents_read_once():
    dev = small_device()
    _, delta = dev.read([Extent(0, 100), Extent(50, 100)])
    assert delta.read_bytes == 150


def test_empty_read():
    dev = small_device()
    data, delta = dev.read([])
    assert data == b"" and delta == IoStats()


def test_out_of_range():
    dev = small_device()
    with pytest.raises(IndexError):
        dev.read([Extent(dev.capacity - 10, 20)])
    with pytest.raises(IndexError):
        dev.write(dev.capacity - 1, b"xy")


def test_partial_page_write_counts_whole_pages():
    dev = small_device()
    d = dev.write(4000, b"x" * 200)   # straddles the 4096 boundary
    assert d.written_bytes == 200
    assert d.physical_written_bytes == 2 * 4096
    d = dev.write(8192, b"y" * 4096)
    assert d.physical_written_bytes == 4096
    assert d.write_amplification == 1.0


def test_moved_flag_and_stats_arithmetic():
    dev = small_device()
    d = dev.write(0, b"z" * 10, moved=True)
    assert d.moved_bytes == 10
    total = d + d
    assert total.moved_bytes == 20 and (total - d) == d
    assert IoStats().write_amplification == 1.0


def test_command_time_serialises():
    dev = small_device()
    dev.write(0, b"a" * 100)
    dev.read([Extent(0, 100)])
    assert dev.stats.simulated_time == pytest.approx(2 * command_time(100, dev.cfg))
    assert dev.stats.commands_issued == 2


def test_trace(tmp_path):
    dev = FlashDevice(DeviceConfig(capacity=1 << 20), trace=True)
    dev.write(0, b"a" * 4096)
    dev.read([Extent(0, 4096)])
    path = tmp_path / "io.txt"
    dev.dump_trace(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "op offset length time"
    assert lines[1].startswith("W 0 4096 ") and lines[2].startswith("R 0 4096 ")


def test_bandwidth_curve_shape():
    cfg = DeviceConfig()
    sizes = np.array([4, 8, 16, 24, 64, 256, 512]) * KIB
    bw = np.array([effective_bandwidth(int(s), cfg) for s in sizes])
    assert np.all(np.diff(bw) > 0)
