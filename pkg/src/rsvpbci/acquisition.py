"""Streaming acquisition: TCP client, two-stage ingest pipeline,
time-indexed buffer, device registry, and raw CSV persistence.

The client runs an ingest thread (socket reads, timestamping) feeding a
bounded queue, and a process thread draining the queue into the buffer and
the CSV writer. Timestamps come from the frame sequence counter
(t = seq / sample_rate), so replayed or accelerated streams keep exact
data-time semantics. Time-range queries are safe from any thread while
ingestion continues.
"""

from __future__ import annotations

import os
import queue
import struct
import tempfile
import threading
from bisect import bisect_left
from dataclasses import dataclass

import numpy as np

from rsvpbci.core import DeviceSpec
from rsvpbci.wire import (HandshakeMalformed, frame_size, read_handshake,
                          unpack_frame)

QUEUE_CAPACITY = 4096
INDEX_STRIDE = 1024


class UnknownDevice(KeyError):
    pass


class AlreadyStarted(RuntimeError):
    pass


class NotStarted(RuntimeError):
    pass


class InvalidRange(ValueError):
    pass


class MalformedCsv(ValueError):
    def __init__(self, line_number: int, detail: str = ""):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {detail}" if detail else f"line {line_number}")


# --------------------------------------------------------------------------
# Device registry
# --------------------------------------------------------------------------

_REGISTRY: dict[str, DeviceSpec] = {}


def register_device(spec: DeviceSpec):
    _REGISTRY[spec.name] = spec


def find_device(name: str) -> DeviceSpec:
    """Look up a registered device description by name."""
    try:
        return _REGISTRY[name]
    except KeyError:
        raise UnknownDevice(name) from None


def list_devices() -> list[str]:
    return sorted(_REGISTRY)


# Wearable dry-sensor headset layout: 24 scalp/reference sites plus TRG.
register_device(DeviceSpec(
    name="DSI",
    sample_rate=300.0,
    channels=("P3", "C3", "F3", "Fz", "F4", "C4", "P4", "Cz", "CM", "A1",
              "Fp1", "Fp2", "T3", "T5", "O1", "O2", "X3", "X2", "F7", "F8",
              "X1", "A2", "T6", "T4", "TRG"),
))


# --------------------------------------------------------------------------
# Time-series containers
# --------------------------------------------------------------------------

@dataclass
class TimeSeriesBlock:
    """Samples returned by a time-range query, in time order."""

    start: float
    sample_rate: float
    timestamps: np.ndarray
    values: np.ndarray  # rows x channels

    def __len__(self):
        return len(self.timestamps)

    @property
    def rows(self):
        return list(zip(self.timestamps, self.values))

    def channel_data(self) -> np.ndarray:
        """channels x samples view for the filtering chain."""
        return np.ascontiguousarray(self.values.T)


class StreamBuffer:
    """Ring of recent samples plus an append-only binary archive.

    A single writer appends; readers snapshot the committed length under
    the lock and then read, so queries never block ingestion beyond that
    atomic step. Records evicted from the memory window are read back from
    the archive through a sparse (timestamp, offset) index kept every
    INDEX_STRIDE records.
    """

    def __init__(self, channel_count: int, capacity: int, archive_path=None):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.channel_count = channel_count
        self.capacity = capacity
        self._lock = threading.Lock()
        self._mem_ts: list[float] = []
        self._mem_vals: list[np.ndarray] = []
        self._mem_start = 0  # absolute index of _mem_ts[0]
        self._count = 0
        self._record = struct.Struct(f"<d{channel_count}f")
        if archive_path is None:
            fd, archive_path = tempfile.mkstemp(prefix="rsvpbci_buf_", suffix=".bin")
            os.close(fd)
            self._owns_archive = True
        else:
            self._owns_archive = False
        self.archive_path = archive_path
        self._archive = open(archive_path, "wb")
        self._index: list[tuple[float, int]] = []  # every INDEX_STRIDE records

    def append(self, timestamp: float, values: np.ndarray):
        record = self._record.pack(timestamp, *np.asarray(values, dtype=np.float32))
        with self._lock:
            if self._count % INDEX_STRIDE == 0:
                self._index.append((timestamp, self._count * self._record.size))
            self._archive.write(record)
            self._mem_ts.append(timestamp)
            self._mem_vals.append(np.asarray(values, dtype=np.float64))
            if len(self._mem_ts) > self.capacity:
                self._mem_ts.pop(0)
                self._mem_vals.pop(0)
                self._mem_start += 1
            self._count += 1

    def __len__(self):
        with self._lock:
            return self._count

    @property
    def total_ingested(self) -> int:
        return len(self)

    def query(self, start: float, end: float) -> tuple[np.ndarray, np.ndarray]:
        """All samples with start <= t < end, in order. Never reorders or
        duplicates; sees a consistent prefix of the stream."""
        if start > end:
            raise InvalidRange(f"start {start} > end {end}")
        with self._lock:
            mem_start = self._mem_start
            mem_ts = list(self._mem_ts)
            mem_vals = list(self._mem_vals)
            index = list(self._index)
            self._archive.flush()
        count = mem_start + len(mem_ts)

        lo = self._search(start, count, mem_start, mem_ts, index)
        hi = self._search(end, count, mem_start, mem_ts, index)
        if hi <= lo:
            return (np.empty(0), np.empty((0, self.channel_count)))

        ts_out = np.empty(hi - lo)
        vals_out = np.empty((hi - lo, self.channel_count))
        n_disk = max(0, min(hi, mem_start) - lo)
        if n_disk:
            dts, dvals = self._read_archive(lo, lo + n_disk)
            ts_out[:n_disk] = dts
            vals_out[:n_disk] = dvals
        if hi > mem_start:
            m0 = max(lo, mem_start) - mem_start
            m1 = hi - mem_start
            ts_out[n_disk:] = mem_ts[m0:m1]
            vals_out[n_disk:] = mem_vals[m0:m1]
        return ts_out, vals_out

    def _search(self, t: float, count: int, mem_start: int, mem_ts,
                index) -> int:
        """Absolute index of the first record with timestamp >= t."""
        if count == 0:
            return 0
        if t > mem_ts[0]:
            return mem_start + bisect_left(mem_ts, t)
        if mem_start == 0:
            return bisect_left(mem_ts, t)
        # locate the archive chunk that could hold the first match, read it
        # in one shot, and search within
        chunk = bisect_left([ts for ts, _ in index], t)
        first = max(0, (chunk - 1) * INDEX_STRIDE)
        last = min(mem_start, chunk * INDEX_STRIDE + 1)
        if first < last:
            ts_blk, _ = self._read_archive(first, last)
            k = int(np.searchsorted(ts_blk, t, side="left"))
            if k < len(ts_blk):
                return first + k
        return mem_start

    def _read_archive(self, lo: int, hi: int):
        with open(self.archive_path, "rb") as f:
            f.seek(lo * self._record.size)
            raw = f.read((hi - lo) * self._record.size)
        ts = np.empty(hi - lo)
        vals = np.empty((hi - lo, self.channel_count))
        for k in range(hi - lo):
            rec = self._record.unpack_from(raw, k * self._record.size)
            ts[k] = rec[0]
            vals[k] = rec[1:]
        return ts, vals

    def close(self):
        with self._lock:
            self._archive.close()
        if self._owns_archive:
            try:
                os.unlink(self.archive_path)
            except OSError:
                pass


# --------------------------------------------------------------------------
# Raw CSV persistence
# --------------------------------------------------------------------------

def write_raw_csv(path, spec: DeviceSpec, rows, triggers=None) -> int:
    """Write raw_data.csv: two metadata lines, a header, then one row per
    sample with values at 6 fractional digits and the trigger label active
    at that sample (or "0") in the TRG column. Returns the data row count.

    rows: iterable of (timestamp, channel values).
    """
    trig_iter = iter(sorted(triggers, key=lambda t: t.timestamp)) if triggers else iter(())
    pending = next(trig_iter, None)
    count = 0
    with open(path, "w", encoding="utf-8", newline="") as f:
        f.write(f"daq_type,{spec.name}\n")
        f.write(f"sample_rate,{spec.sample_rate:g}\n")
        f.write("timestamp," + ",".join(spec.channels) + ",TRG\n")
        for ts, values in rows:
            label = "0"
            while pending is not None and pending.timestamp <= ts:
                label = pending.label
                pending = next(trig_iter, None)
            vals = ",".join(f"{v:.6f}" for v in values)
            f.write(f"{ts:.6f},{vals},{label}\n")
            count += 1
    return count


def read_raw_csv(path):
    """Parse raw_data.csv -> (DeviceSpec, timestamps, values, trg labels)."""
    with open(path, encoding="utf-8") as f:
        lines = f.read().splitlines()
    if len(lines) < 3:
        raise MalformedCsv(len(lines) + 1, "missing metadata or header")
    if not lines[0].startswith("daq_type,"):
        raise MalformedCsv(1, "expected 'daq_type,<name>'")
    name = lines[0].split(",", 1)[1]
    if not lines[1].startswith("sample_rate,"):
        raise MalformedCsv(2, "expected 'sample_rate,<rate>'")
    try:
        rate = float(lines[1].split(",", 1)[1])
    except ValueError:
        raise MalformedCsv(2, "sample_rate is not a number") from None
    header = lines[2].split(",")
    if len(header) < 3 or header[0] != "timestamp" or header[-1] != "TRG":
        raise MalformedCsv(3, "expected 'timestamp,<channels>,TRG'")
    channels = tuple(header[1:-1])
    spec = DeviceSpec(name=name, sample_rate=rate, channels=channels)

    n_cols = len(header)
    timestamps, values, labels = [], [], []
    for ln, line in enumerate(lines[3:], start=4):
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != n_cols:
            raise MalformedCsv(ln, f"expected {n_cols} columns, got {len(parts)}")
        try:
            timestamps.append(float(parts[0]))
            values.append([float(v) for v in parts[1:-1]])
        except ValueError:
            raise MalformedCsv(ln, "non-numeric value") from None
        labels.append(parts[-1])
    return (spec, np.asarray(timestamps),
            np.asarray(values, dtype=np.float64).reshape(len(timestamps), len(channels)),
            labels)


# --------------------------------------------------------------------------
# Acquisition client
# --------------------------------------------------------------------------

@dataclass
class SessionSummary:
    total_samples: int
    duration: float
    dropped_frames: int
    queue_overflows: int = 0


@dataclass
class _Stats:
    last_seq: int = -1
    dropped: int = 0
    overflows: int = 0


class DataAcquisitionClient:
    """Client for a wire-protocol data source with real-time queries.

    Usage mirrors the driving script: connect (or construct via
    client_connect), start_acquisition, get_data(start, end) at will,
    stop_acquisition for the session summary.
    """

    def __init__(self, host: str, port: int, buffer_seconds: float = 10.0,
                 raw_csv_path=None, archive_path=None, timeout: float = 10.0):
        self.host = host
        self.port = port
        self.buffer_seconds = buffer_seconds
        self.raw_csv_path = raw_csv_path
        self._archive_path = archive_path
        self._timeout = timeout
        self.spec: DeviceSpec | None = None
        self.buffer: StreamBuffer | None = None
        self._sock = None
        self._residual = b""
        self._queue: queue.Queue | None = None
        self._ingest_thread = None
        self._process_thread = None
        self._started = False
        self._stopped = False
        self._stats = _Stats()
        self._csv_file = None
        self._eof = threading.Event()

    # -- connection --------------------------------------------------------

    def connect(self):
        import socket as _socket

        sock = _socket.create_connection((self.host, self.port),
                                         timeout=self._timeout)
        sock.setsockopt(_socket.IPPROTO_TCP, _socket.TCP_NODELAY, 1)
        try:
            self.spec, self._residual = read_handshake(sock)
        except HandshakeMalformed:
            sock.close()
            raise
        self._sock = sock
        return self

    # -- lifecycle ----------------------------------------------------------

    def start_acquisition(self):
        if self._started:
            raise AlreadyStarted("acquisition already running")
        if self.spec is None:
            raise NotStarted("connect before starting acquisition")
        self._started = True
        capacity = max(1, int(self.buffer_seconds * self.spec.sample_rate))
        self.buffer = StreamBuffer(self.spec.channel_count, capacity,
                                   self._archive_path)
        if self.raw_csv_path:
            self._csv_file = open(self.raw_csv_path, "w", encoding="utf-8",
                                  newline="")
            self._csv_file.write(f"daq_type,{self.spec.name}\n")
            self._csv_file.write(f"sample_rate,{self.spec.sample_rate:g}\n")
            self._csv_file.write(
                "timestamp," + ",".join(self.spec.channels) + ",TRG\n")
        self._queue = queue.Queue(maxsize=QUEUE_CAPACITY)
        self._ingest_thread = threading.Thread(target=self._ingest, daemon=True)
        self._process_thread = threading.Thread(target=self._process, daemon=True)
        self._ingest_thread.start()
        self._process_thread.start()
        return self

    def _ingest(self):
        """Stage 1: read whole frames off the socket and stamp them."""
        size = frame_size(self.spec.channel_count)
        fs = self.spec.sample_rate
        buf = bytearray(self._residual)
        self._residual = b""
        sock = self._sock
        sock.settimeout(0.2)
        while self._started:
            while len(buf) >= size:
                seq, values = unpack_frame(bytes(buf[:size]),
                                           self.spec.channel_count)
                del buf[:size]
                item = (seq, seq / fs, values)
                try:
                    self._queue.put_nowait(item)
                except queue.Full:
                    self._stats.overflows += 1  # recorded drop; keep reading
            try:
                chunk = sock.recv(65536)
            except TimeoutError:
                continue
            except OSError:
                break
            if not chunk:
                break  # clean EOF from the server
            buf.extend(chunk)
        self._eof.set()
        self._queue.put(None)  # sentinel for the process stage

    def _process(self):
        """Stage 2: drain the queue into the buffer and the CSV writer."""
        while True:
            item = self._queue.get()
            if item is None:
                break
            seq, ts, values = item
            if self._stats.last_seq >= 0 and seq > self._stats.last_seq + 1:
                self._stats.dropped += seq - self._stats.last_seq - 1
            self._stats.last_seq = max(self._stats.last_seq, seq)
            self.buffer.append(ts, values)
            if self._csv_file is not None:
                vals = ",".join(f"{v:.6f}" for v in values)
                self._csv_file.write(f"{ts:.6f},{vals},0\n")
        if self._csv_file is not None:
            self._csv_file.flush()

    def stop_acquisition(self) -> SessionSummary:
        """Drain and join both stages; flush and close the CSV sink."""
        if not self._started:
            raise NotStarted("acquisition was never started")
        self._started = False
        self._ingest_thread.join(timeout=10.0)
        self._process_thread.join(timeout=10.0)
        if self._csv_file is not None:
            self._csv_file.close()
            self._csv_file = None
        if self._sock is not None:
            self._sock.close()
            self._sock = None
        self._stopped = True
        total = len(self.buffer)
        fs = self.spec.sample_rate
        # overflow-dropped frames already show up as sequence gaps at the
        # process stage, so the gap count alone is the drop total
        return SessionSummary(total_samples=total, duration=total / fs,
                              dropped_frames=self._stats.dropped,
                              queue_overflows=self._stats.overflows)

    def wait_for_eof(self, timeout: float = 30.0) -> bool:
        """Block until the server closes the stream (finite replays)."""
        return self._eof.wait(timeout)

    # -- queries ------------------------------------------------------------

    def get_data(self, start: float, end: float) -> TimeSeriesBlock:
        """Samples with start <= t < end. Valid during and after streaming."""
        if start > end:
            raise InvalidRange(f"start {start} > end {end}")
        if self.buffer is None:
            raise NotStarted("no data: acquisition never started")
        ts, vals = self.buffer.query(start, end)
        return TimeSeriesBlock(start=start, sample_rate=self.spec.sample_rate,
                               timestamps=ts, values=vals)

    @property
    def latest_timestamp(self) -> float:
        if self.buffer is None or len(self.buffer) == 0:
            return -1.0
        return (len(self.buffer) - 1) / self.spec.sample_rate

    def close(self):
        if self._started:
            self.stop_acquisition()
        if self.buffer is not None:
            self.buffer.close()
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def client_connect(host: str, port: int, **kwargs) -> DataAcquisitionClient:
    """Connect to a wire-protocol server and return the session handle with
    its negotiated device description."""
    return DataAcquisitionClient(host, port, **kwargs).connect()
