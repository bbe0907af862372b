"""Development-time data sources.

Generators produce multichannel frames (one array per sample) and the
socket server streams them in the shared wire protocol, paced on an
absolute schedule so long runs do not drift. Replay of recorded
raw_data.csv files goes through the same path.
"""

from __future__ import annotations

import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from rsvpbci import acquisition
from rsvpbci.core import DeviceSpec, TriggerRecord
from rsvpbci.wire import handshake_bytes, pack_frame


class InvalidBounds(ValueError):
    pass


class AliasedFrequency(ValueError):
    pass


class EmptySchedule(ValueError):
    pass


class BindFailure(OSError):
    pass


SIM_DEVICE = DeviceSpec(
    name="SIM",
    sample_rate=300.0,
    channels=("C3", "C4", "Cz", "P3", "P4", "Pz", "O1", "O2"),
)

acquisition.register_device(SIM_DEVICE)


@dataclass(frozen=True)
class ErpTemplate:
    """Raised-cosine bump standing in for an evoked response: unit peak at
    `onset_latency` seconds after the stimulus, support of `width` seconds,
    injected on the listed channel indices."""

    onset_latency: float = 0.3
    width: float = 0.2
    amplitude: float = 1.0
    channels: tuple[int, ...] = (0, 1, 2)

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError("width must be positive")
        if self.onset_latency < 0:
            raise ValueError("onset_latency must be non-negative")

    def waveform(self, sample_rate: float) -> tuple[int, np.ndarray]:
        """(sample offset of the first waveform sample relative to the
        stimulus, unit-peak samples)."""
        start = self.onset_latency - self.width / 2
        k0 = int(round(start * sample_rate))
        n = int(round(self.width * sample_rate)) + 1
        t = k0 / sample_rate + np.arange(n) / sample_rate - start
        wave = 0.5 * (1 - np.cos(2 * np.pi * np.clip(t / self.width, 0, 1)))
        return k0, wave


def gen_random_data(low: float, high: float, channel_count: int, seed=None):
    """Infinite stream of frames with each value uniform in [low, high)."""
    if low >= high:
        raise InvalidBounds(f"need low < high, got [{low}, {high}]")
    if channel_count < 1:
        raise InvalidBounds("channel_count must be >= 1")
    rng = np.random.default_rng(seed)

    def frames():
        while True:
            yield rng.uniform(low, high, channel_count)

    return frames()


def gen_erp_stream(template: ErpTemplate, schedule, snr: float,
                   noise_sigma: float, spec: DeviceSpec, seed=None,
                   duration: float | None = None):
    """Gaussian background noise with the template added at every target
    event, scaled so the injected peak is snr * noise_sigma.

    schedule: iterable of (timestamp, targetness) or
    (timestamp, targetness, label). Returns (frames array n x channels,
    trigger records matching the schedule).
    """
    entries = []
    for item in schedule:
        ts, targetness = item[0], item[1]
        label = item[2] if len(item) > 2 else ("T" if targetness == "target" else "N")
        entries.append((float(ts), targetness, label))
    if not entries:
        raise EmptySchedule("schedule has no events")
    if any(b[0] < a[0] for a, b in zip(entries, entries[1:])):
        raise ValueError("schedule timestamps must be non-decreasing")

    fs = spec.sample_rate
    tail = template.onset_latency + template.width + 1.0
    total = duration if duration is not None else entries[-1][0] + tail
    n = int(round(total * fs))

    rng = np.random.default_rng(seed)
    frames = rng.normal(0.0, noise_sigma, (n, spec.channel_count))

    k0, wave = template.waveform(fs)
    peak = snr * noise_sigma
    for ts, targetness, _ in entries:
        if targetness != "target" or peak == 0:
            continue
        start = int(round(ts * fs)) + k0
        stop = min(start + len(wave), n)
        if start >= n:
            continue
        seg = wave[: stop - start] * peak
        for ch in template.channels:
            frames[start:stop, ch] += seg

    triggers = [TriggerRecord(label, targetness, ts)
                for ts, targetness, label in entries]
    return frames, triggers


def gen_sinusoid(freq: float, amplitude: float, noise_sigma: float,
                 spec: DeviceSpec, duration: float | None = None, seed=None):
    """Sinusoid on channel 0 plus Gaussian noise on every channel.

    Infinite generator when duration is None, else an n x channels array.
    """
    fs = spec.sample_rate
    if not 0 < freq < fs / 2:
        raise AliasedFrequency(f"need 0 < freq < {fs / 2}, got {freq}")
    rng = np.random.default_rng(seed)
    c = spec.channel_count

    if duration is not None:
        n = int(round(duration * fs))
        t = np.arange(n) / fs
        frames = rng.normal(0.0, noise_sigma, (n, c))
        frames[:, 0] += amplitude * np.sin(2 * np.pi * freq * t)
        return frames

    def frames_gen():
        i = 0
        while True:
            row = rng.normal(0.0, noise_sigma, c)
            row[0] += amplitude * np.sin(2 * np.pi * freq * i / fs)
            yield row
            i += 1

    return frames_gen()


@dataclass
class FileReplay:
    """Recorded session replayed frame by frame at its own sample rate."""

    spec: DeviceSpec
    frames: np.ndarray
    timestamps: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        return iter(self.frames)

    def __len__(self):
        return len(self.frames)


def file_replay(path) -> FileReplay:
    """Re-stream a raw_data.csv recording; the device description is
    rebuilt from the file's metadata lines."""
    spec, timestamps, values, _ = acquisition.read_raw_csv(path)
    return FileReplay(spec=spec, frames=values, timestamps=timestamps)


class DataServer:
    """Streams generator output to one client at a time.

    Frames are sent on an absolute schedule: frame i goes out no earlier
    than start + i / pace. `pace_hz` defaults to the device sample rate;
    tests replay faster than real time by raising it (timestamps downstream
    come from the sequence counter, not the wall clock, so data semantics
    do not change).
    """

    def __init__(self, generator, spec: DeviceSpec, host="127.0.0.1",
                 port=8844, pace_hz: float | None = None, limit=None,
                 skip_seqs=None):
        self.spec = spec
        self.host = host
        self.port = port
        self.pace_hz = pace_hz or spec.sample_rate
        self.limit = limit
        self.skip_seqs = frozenset(skip_seqs or ())
        self._generator = generator
        self._stop = threading.Event()
        self._thread = None
        self._sock = None
        self.frames_sent = 0

    def start(self):
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        try:
            sock.bind((self.host, self.port))
        except OSError as exc:
            sock.close()
            raise BindFailure(f"cannot bind {self.host}:{self.port}: {exc}") from None
        sock.listen(1)
        sock.settimeout(0.2)
        self._sock = sock
        if self.port == 0:
            self.port = sock.getsockname()[1]
        self._thread = threading.Thread(target=self._run, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=10.0)
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def join(self, timeout=None):
        if self._thread is not None:
            self._thread.join(timeout)

    def _run(self):
        while not self._stop.is_set():
            try:
                conn, _ = self._sock.accept()
            except socket.timeout:
                continue
            except OSError:
                return
            with conn:
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                try:
                    self._serve_client(conn)
                except (BrokenPipeError, ConnectionResetError, OSError):
                    pass
            return  # single client per server

    def _serve_client(self, conn):
        conn.sendall(handshake_bytes(self.spec))
        seq = 0
        start = time.monotonic()
        for i, frame in enumerate(self._generator):
            if self._stop.is_set():
                break
            if self.limit is not None and i >= self.limit:
                break
            wait = start + i / self.pace_hz - time.monotonic()
            if wait > 0:
                time.sleep(wait)
            while seq in self.skip_seqs:
                seq += 1  # fault injection: drop this sequence number
            conn.sendall(pack_frame(seq, frame))
            seq += 1
            self.frames_sent += 1


def serve(generator, spec: DeviceSpec, host="127.0.0.1", port=8844,
          sample_rate: float | None = None, pace_hz: float | None = None,
          limit=None, skip_seqs=None) -> DataServer:
    """Start a data server in a background thread and return its handle.

    sample_rate overrides the rate advertised in the handshake; pace_hz
    overrides only the wall-clock send rate.
    """
    if sample_rate is not None and sample_rate != spec.sample_rate:
        spec = DeviceSpec(spec.name, sample_rate, spec.channels,
                          spec.content_type)
    server = DataServer(generator, spec, host=host, port=port,
                        pace_hz=pace_hz, limit=limit, skip_seqs=skip_seqs)
    return server.start()
