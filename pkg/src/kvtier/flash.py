"""Simulated page-addressed flash device with a per-command cost model.

Each command costs ``cmd_overhead + nbytes / stream_bw`` seconds and commands
are serialised on one simulated clock. Small I/O is therefore bounded by the
command rate and large I/O by streaming bandwidth; with the defaults the
half-bandwidth point sits at 24 KiB.
"""

from dataclasses import dataclass, fields

import numpy as np

from . import _kernels

__all__ = [
    "DeviceConfig",
    "Extent",
    "IoStats",
    "FlashDevice",
    "effective_bandwidth",
    "command_time",
]

KIB = 1024
DEFAULT_STREAM_BW = 2.0e9
DEFAULT_CROSSOVER = 24 * KIB


@dataclass(frozen=True)
class DeviceConfig:
    page_size: int = 4096
    cmd_overhead: float = DEFAULT_CROSSOVER / DEFAULT_STREAM_BW
    stream_bw: float = DEFAULT_STREAM_BW
    max_cmd_bytes: int = 512 * KIB
    queue_depth: int = 32
    capacity: int = 256 * 1024 * 1024

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"DeviceConfig.{f.name} must be positive")
        if self.max_cmd_bytes % self.page_size:
            raise ValueError("max_cmd_bytes must be a multiple of page_size")
        if self.capacity % self.page_size:
            raise ValueError("capacity must be a multiple of page_size")


@dataclass(frozen=True)
class Extent:
    offset: int
    length: int

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("extent length must be positive")
        if self.offset < 0:
            raise ValueError("extent offset must be non-negative")

    @property
    def end(self):
        return self.offset + self.length


@dataclass
class IoStats:
    read_bytes: int = 0
    written_bytes: int = 0
    physical_written_bytes: int = 0
    commands_issued: int = 0
    read_commands: int = 0
    write_commands: int = 0
    simulated_time: float = 0.0
    moved_bytes: int = 0

    def copy(self):
        return IoStats(**{f.name: getattr(self, f.name) for f in fields(self)})

    def __sub__(self, other):
        return IoStats(**{f.name: getattr(self, f.name) - getattr(other, f.name)
                          for f in fields(self)})

    def __add__(self, other):
        return IoStats(**{f.name: getattr(self, f.name) + getattr(other, f.name)
                          for f in fields(self)})

    @property
    def write_amplification(self):
        if self.written_bytes == 0:
            return 1.0
        return self.physical_written_bytes / self.written_bytes


def command_time(nbytes, cfg):
    return cfg.cmd_overhead + nbytes / cfg.stream_bw


def effective_bandwidth(io_size, cfg=DeviceConfig()):
    """Throughput of back-to-back commands of ``io_size`` bytes."""
    if io_size <= 0:
        raise ValueError("io_size must be positive")
    return io_size / command_time(io_size, cfg)


class FlashDevice:
    """Byte store plus I/O accounting. Not thread-safe: one writer per device."""

    def __init__(self, cfg=DeviceConfig(), trace=False):
        self.cfg = cfg
        self._data = bytearray(cfg.capacity)
        self.stats = IoStats()
        self.trace = [] if trace else None
        self.read_command_lengths = []

    @property
    def capacity(self):
        return self.cfg.capacity

    def _check(self, offset, length):
        if offset < 0 or length < 0 or offset + length > self.cfg.capacity:
            raise IndexError(f"extent [{offset}, {offset + length}) outside device "
                             f"of {self.cfg.capacity} bytes")

    def _issue(self, op, offset, length):
        t = command_time(length, self.cfg)
        self.stats.simulated_time += t
        self.stats.commands_issued += 1
        if self.trace is not None:
            self.trace.append((op, offset, length, self.stats.simulated_time))
        return t

    def read(self, extents):
        """Read extents; returns their bytes (concatenated in request order) and the stats delta.

        Adjacent or overlapping extents are merged, and merged runs are cut at
        ``max_cmd_bytes`` before being issued as commands in address order.
        """
        before = self.stats.copy()
        extents = list(extents)
        if not extents:
            return b"", IoStats()
        offs = np.fromiter((e.offset for e in extents), np.int64, len(extents))
        lens = np.fromiter((e.length for e in extents), np.int64, len(extents))
        for o, n in zip(offs, lens):
            self._check(int(o), int(n))
        cmd_o, cmd_l = _kernels.coalesce_extents(offs, lens, self.cfg.max_cmd_bytes)
        for o, n in zip(cmd_o.tolist(), cmd_l.tolist()):
            self._issue("R", o, n)
            self.stats.read_bytes += n
            self.stats.read_commands += 1
            self.read_command_lengths.append(n)
        payload = b"".join(bytes(self._data[e.offset:e.end]) for e in extents)
        return payload, self.stats - before

    def write(self, offset, payload, moved=False):
        """Write ``payload`` at ``offset``. Every touched page counts as rewritten."""
        n = len(payload)
        self._check(offset, n)
        before = self.stats.copy()
        if n == 0:
            return IoStats()
        self._data[offset:offset + n] = payload
        ps = self.cfg.page_size
        pages = (offset + n - 1) // ps - offset // ps + 1
        self.stats.written_bytes += n
        self.stats.physical_written_bytes += pages * ps
        if moved:
            self.stats.moved_bytes += n
        s, left = offset, n
        while left > 0:
            step = min(left, self.cfg.max_cmd_bytes)
            self._issue("W", s, step)
            self.stats.write_commands += 1
            s += step
            left -= step
        return self.stats - before

    def peek(self, offset, length):
        """Inspect stored bytes without charging I/O (test and audit helper)."""
        self._check(offset, length)
        return bytes(self._data[offset:offset + length])

    def dump_trace(self, path):
        with open(path, "w") as fh:
            fh.write("op offset length time\n")
            for op, off, n, t in self.trace or ():
                fh.write(f"{op} {off} {n} {t:.9f}\n")
