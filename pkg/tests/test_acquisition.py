import socket
import threading
import time

import numpy as np
import pytest

from rsvpbci import acquisition, datastream
from rsvpbci.core import DeviceSpec
from rsvpbci.wire import HandshakeMalformed

SPEC8 = datastream.SIM_DEVICE
FS = SPEC8.sample_rate


def serve_random(n_frames, pace=6000, skip_seqs=None, channels=8, seed=0):
    spec = (SPEC8 if channels == 8 else
            DeviceSpec("SIM", FS, tuple(f"ch{i}" for i in range(channels))))
    gen = datastream.gen_random_data(-100, 100, channels, seed=seed)
    return datastream.serve(gen, spec, port=0, pace_hz=pace, limit=n_frames,
                            skip_seqs=skip_seqs)


class TestRegistry:
    def test_dsi_has_25_channels(self):
        spec = acquisition.find_device("DSI")
        assert spec.channel_count == 25
        assert spec.sample_rate == 300.0

    def test_sim_registered_by_datastream(self):
        assert "SIM" in acquisition.list_devices()
        assert acquisition.find_device("SIM").channel_count == 8

    def test_unknown_device(self):
        with pytest.raises(acquisition.UnknownDevice):
            acquisition.find_device("NOPE")


class TestConnect:
    def test_connection_refused(self):
        sock = socket.socket()
        sock.bind(("127.0.0.1", 0))
        port = sock.getsockname()[1]
        sock.close()  # nothing listening here anymore
        with pytest.raises(ConnectionRefusedError):
            acquisition.client_connect("127.0.0.1", port)

    def test_malformed_handshake(self):
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]

        def bad_server():
            conn, _ = listener.accept()
            conn.sendall(b'{"name": "DSI", "sample_r')  # truncated
            conn.close()

        thread = threading.Thread(target=bad_server, daemon=True)
        thread.start()
        try:
            with pytest.raises(HandshakeMalformed):
                acquisition.client_connect("127.0.0.1", port)
        finally:
            thread.join(5)
            listener.close()

    def test_negotiated_spec(self):
        server = serve_random(10)
        try:
            client = acquisition.client_connect("127.0.0.1", server.port)
            assert client.spec.channels == SPEC8.channels
            client.close()
        finally:
            server.stop()


class TestLifecycle:
    def test_stream_counts(self):
        server = serve_random(300)
        client = acquisition.client_connect("127.0.0.1", server.port)
        try:
            client.start_acquisition()
            assert client.wait_for_eof(20)
            time.sleep(0.1)
            summary = client.stop_acquisition()
            assert summary.total_samples == 300
            assert summary.duration == pytest.approx(1.0)
            assert summary.dropped_frames == 0
        finally:
            client.close()
            server.stop()

    def test_start_twice(self):
        server = serve_random(50)
        client = acquisition.client_connect("127.0.0.1", server.port)
        try:
            client.start_acquisition()
            with pytest.raises(acquisition.AlreadyStarted):
                client.start_acquisition()
        finally:
            client.close()
            server.stop()

    def test_stop_before_start(self):
        server = serve_random(5)
        client = acquisition.client_connect("127.0.0.1", server.port)
        try:
            with pytest.raises(acquisition.NotStarted):
                client.stop_acquisition()
        finally:
            client.close()
            server.stop()

    def test_no_frames_no_error(self):
        # a server that only sends the handshake
        listener = socket.socket()
        listener.bind(("127.0.0.1", 0))
        listener.listen(1)
        port = listener.getsockname()[1]
        from rsvpbci.wire import handshake_bytes

        def quiet_server():
            conn, _ = listener.accept()
            conn.sendall(handshake_bytes(SPEC8))
            time.sleep(0.4)
            conn.close()

        thread = threading.Thread(target=quiet_server, daemon=True)
        thread.start()
        client = acquisition.client_connect("127.0.0.1", port)
        client.start_acquisition()
        time.sleep(0.1)
        summary = client.stop_acquisition()
        assert summary.total_samples == 0
        client.close()
        thread.join(5)
        listener.close()

    def test_seq_gap_counted_as_drop(self):
        server = serve_random(300, skip_seqs={100})
        client = acquisition.client_connect("127.0.0.1", server.port)
        try:
            client.start_acquisition()
            assert client.wait_for_eof(20)
            time.sleep(0.1)
            summary = client.stop_acquisition()
            assert summary.dropped_frames == 1
            # the hole is in the numbering; all sent frames still arrive
            assert summary.total_samples == 300
        finally:
            client.close()
            server.stop()


class TestQueries:
    @pytest.fixture
    def streamed_client(self):
        server = serve_random(600)
        client = acquisition.client_connect("127.0.0.1", server.port)
        client.start_acquisition()
        assert client.wait_for_eof(20)
        time.sleep(0.1)
        client.stop_acquisition()
        yield client
        client.close()
        server.stop()

    def test_two_seconds_600_rows(self, streamed_client):
        block = streamed_client.get_data(0, 2)
        assert len(block) == 600
        assert block.values.shape == (600, 8)

    def test_empty_interval(self, streamed_client):
        assert len(streamed_client.get_data(0, 0)) == 0

    def test_invalid_range(self, streamed_client):
        with pytest.raises(acquisition.InvalidRange):
            streamed_client.get_data(5, 3)

    def test_half_open_partition_completeness(self, streamed_client):
        full = streamed_client.get_data(0, 2)
        edges = [0, 0.3, 0.7, 1.1, 1.9, 2.0]
        parts = [streamed_client.get_data(a, b)
                 for a, b in zip(edges, edges[1:])]
        ts = np.concatenate([p.timestamps for p in parts])
        vals = np.concatenate([p.values for p in parts])
        np.testing.assert_array_equal(ts, full.timestamps)
        np.testing.assert_array_equal(vals, full.values)

    def test_strictly_increasing_timestamps(self, streamed_client):
        block = streamed_client.get_data(0.5, 1.5)
        assert (np.diff(block.timestamps) > 0).all()
        spacing = np.diff(block.timestamps)
        np.testing.assert_allclose(spacing, 1 / FS, atol=1e-9)


class TestBufferArchive:
    def test_query_spans_evicted_and_memory_regions(self, rng):
        buf = acquisition.StreamBuffer(channel_count=2, capacity=100)
        rows = rng.normal(size=(1000, 2))
        for i, row in enumerate(rows):
            buf.append(i / FS, row)
        try:
            # entirely on disk
            ts, vals = buf.query(0.0, 50 / FS)
            assert len(ts) == 50
            np.testing.assert_allclose(vals, rows[:50], atol=1e-6)
            # spanning disk and memory
            ts, vals = buf.query(850 / FS, 1000 / FS)
            assert len(ts) == 150
            np.testing.assert_allclose(vals, rows[850:], atol=1e-6)
            # brute-force oracle over random windows
            for _ in range(20):
                a, b = np.sort(rng.uniform(0, 1000 / FS, 2))
                ts, vals = buf.query(a, b)
                keep = [(i, r) for i, r in enumerate(rows)
                        if a <= i / FS < b]
                assert len(ts) == len(keep)
        finally:
            buf.close()

    def test_total_ingested(self):
        buf = acquisition.StreamBuffer(channel_count=1, capacity=10)
        for i in range(25):
            buf.append(i / FS, np.array([float(i)]))
        assert buf.total_ingested == 25
        buf.close()


class TestRawCsv:
    def test_structure(self, tmp_path, rng):
        rows = rng.normal(size=(10, 3))
        spec = DeviceSpec("DSI", 300.0, ("a", "b", "c"))
        path = tmp_path / "raw_data.csv"
        count = acquisition.write_raw_csv(path, spec,
                                          zip(np.arange(10) / FS, rows))
        assert count == 10
        lines = path.read_text().splitlines()
        assert lines[0] == "daq_type,DSI"
        assert lines[1] == "sample_rate,300"
        assert lines[2] == "timestamp,a,b,c,TRG"
        assert len(lines) == 3 + 10
        assert lines[3].endswith(",0")

    def test_zero_rows(self, tmp_path):
        spec = DeviceSpec("X", 300.0, ("a",))
        path = tmp_path / "raw_data.csv"
        assert acquisition.write_raw_csv(path, spec, []) == 0
        assert len(path.read_text().splitlines()) == 3

    def test_trigger_labels_in_trg_column(self, tmp_path):
        from rsvpbci.core import TriggerRecord

        spec = DeviceSpec("X", 300.0, ("a",))
        rows = [(i / 10, np.array([0.0])) for i in range(10)]
        triggers = [TriggerRecord("A", "target", 0.25),
                    TriggerRecord("B", "nontarget", 0.65)]
        path = tmp_path / "raw_data.csv"
        acquisition.write_raw_csv(path, spec, rows, triggers)
        lines = path.read_text().splitlines()[3:]
        labels = [line.split(",")[-1] for line in lines]
        assert labels[3] == "A"   # first row at/after 0.25 is t=0.3
        assert labels[7] == "B"   # first row at/after 0.65 is t=0.7
        assert labels.count("0") == 8

    def test_write_during_acquisition(self, tmp_path):
        server = serve_random(100)
        csv_path = tmp_path / "raw_data.csv"
        client = acquisition.client_connect("127.0.0.1", server.port,
                                            raw_csv_path=csv_path)
        try:
            client.start_acquisition()
            assert client.wait_for_eof(20)
            time.sleep(0.1)
            client.stop_acquisition()
        finally:
            client.close()
            server.stop()
        spec, ts, values, labels = acquisition.read_raw_csv(csv_path)
        assert spec.channels == SPEC8.channels
        assert values.shape == (100, 8)
        np.testing.assert_allclose(np.diff(ts), 1 / FS, atol=1e-6)
