"""Command-line entry points: serve, calibrate, train, simulate, replay, psd.

Exit codes: 0 success, 1 usage error, 2 runtime failure. Every run writes
a log file under its output directory.
"""

from __future__ import annotations

import argparse
import logging
import sys
import time
from pathlib import Path

import numpy as np

from rsvpbci import acquisition, datastream, dsp, task
from rsvpbci.core import (DeviceSpec, default_parameters, load_parameters,
                          read_triggers)
from rsvpbci.lang import DEFAULT_CORPUS, LanguageModel, lm_init
from rsvpbci.model import SignalModel

log = logging.getLogger("rsvpbci.cli")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _setup_logging(out_dir: Path, command: str):
    out_dir.mkdir(parents=True, exist_ok=True)
    root = logging.getLogger("rsvpbci")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
    handler = logging.FileHandler(out_dir / f"rsvpbci_{command}.log",
                                  encoding="utf-8")
    handler.setFormatter(logging.Formatter("%(levelname)s %(name)s %(message)s"))
    root.addHandler(handler)
    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(logging.WARNING)
    root.addHandler(stream)


def _load_params(path):
    return load_parameters(path) if path else default_parameters()


def _override(params, name, value, type_):
    if value is not None:
        params.set(name, value, type_)


def _adhoc_spec(channels: int, rate: float, name: str = "SIM") -> DeviceSpec:
    if channels == acquisition.find_device("DSI").channel_count:
        base = acquisition.find_device("DSI")
        return DeviceSpec(name="DSI", sample_rate=rate, channels=base.channels)
    return DeviceSpec(name=name, sample_rate=rate,
                      channels=tuple(f"ch{i + 1}" for i in range(channels)))


def _build_generator(args, params, spec):
    if args.generator == "random":
        return datastream.gen_random_data(args.low, args.high,
                                          spec.channel_count, seed=args.seed)
    if args.generator == "sinusoid":
        return datastream.gen_sinusoid(args.freq, args.amplitude, args.noise,
                                       spec, duration=args.duration,
                                       seed=args.seed)
    if args.generator == "erp":
        rng = np.random.default_rng(args.seed)
        schedule = task.build_calibration_schedule(params, rng)
        frames, _ = datastream.gen_erp_stream(
            datastream.ErpTemplate(), schedule, args.snr, args.noise, spec,
            seed=int(rng.integers(2**32)))
        return frames
    raise UsageError(f"unknown generator {args.generator!r}")


# --------------------------------------------------------------------------
# Subcommands
# --------------------------------------------------------------------------

def cmd_serve(args) -> int:
    params = _load_params(args.params)
    if args.generator == "file":
        replay = datastream.file_replay(args.file)
        spec, generator = replay.spec, replay
    else:
        spec = _adhoc_spec(args.channels, args.rate)
        generator = _build_generator(args, params, spec)
    limit = None
    if args.duration is not None:
        limit = int(round(args.duration * spec.sample_rate))
    server = datastream.serve(generator, spec, host=args.host, port=args.port,
                              pace_hz=args.pace, limit=limit)
    print(f"serving {args.generator} data on {args.host}:{server.port} "
          f"({spec.channel_count} channels at {spec.sample_rate:g} Hz)")
    try:
        while server._thread.is_alive():
            server.join(0.5)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    print(f"served {server.frames_sent} frames")
    return 0


def cmd_calibrate(args) -> int:
    params = _load_params(args.params)
    _override(params, "snr", args.snr, "float")
    _override(params, "seq_count", args.seq_count, "int")
    _override(params, "stim_count", args.stim_count, "int")
    _override(params, "k_folds", args.k_folds, "int")
    device = None
    if args.channels:
        device = _adhoc_spec(args.channels, args.rate)
    result = task.run_calibration(params, out_dir=args.out, seed=args.seed,
                                  device=device, host=args.host,
                                  port=args.port)
    print(f"session: {result.session_dir}")
    print(f"cross-validated AUC: {result.auc:.4f} "
          f"(lam={result.lam:.1f}, gamma={result.gamma:.1f})")
    print(f"model: {result.session_dir / 'model.bin'}")
    return 0


def cmd_train(args) -> int:
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise UsageError(f"--data {args.data}: not a directory")
    raw_path = data_dir / "raw_data.csv"
    trg_path = data_dir / "triggers.txt"
    if not raw_path.exists() or not trg_path.exists():
        raise UsageError(f"{data_dir} lacks raw_data.csv or triggers.txt")
    params_path = data_dir / "parameters.json"
    params = (load_parameters(params_path) if params_path.exists()
              else _load_params(args.params))
    _override(params, "k_folds", args.k_folds, "int")

    spec, timestamps, values, _ = acquisition.read_raw_csv(raw_path)
    triggers = read_triggers(trg_path)
    model, lam, gamma, auc = task.fit_from_arrays(values, timestamps,
                                                  triggers, params, spec,
                                                  seed=args.seed)
    model.calibration_auc = auc
    out_model = Path(args.model) if args.model else data_dir / "model.bin"
    model.save(out_model)
    print(f"cross-validated AUC: {auc:.4f} (lam={lam:.1f}, gamma={gamma:.1f})")
    print(f"model: {out_model}")
    return 0


def cmd_simulate(args) -> int:
    params = _load_params(args.params)
    _override(params, "decision_threshold", args.threshold, "float")
    _override(params, "max_sequences", args.max_sequences, "int")
    _override(params, "stim_count", args.stim_count, "int")
    _override(params, "letter_budget", args.letter_budget, "int")
    _override(params, "snr", args.snr, "float")

    lm = None
    if not args.no_lm:
        if args.corpus:
            lm = lm_init(args.corpus, order=params.get("lm_order", 4),
                         alpha=params.get("lm_alpha", 0.1))
        else:
            lm = LanguageModel.from_text(DEFAULT_CORPUS,
                                         order=params.get("lm_order", 4),
                                         alpha=params.get("lm_alpha", 0.1))

    model = SignalModel.load(args.model) if args.model else None
    server = client = None
    try:
        if args.oracle_ratio is not None:
            user = task.OracleUser(target_ratio=args.oracle_ratio)
        elif args.self_serve:
            if model is None:
                raise UsageError("--self-serve needs --model")
            channels = len(model.pca.components)
            spec = _adhoc_spec(channels, model.sample_rate)
            server = datastream.serve(
                datastream.gen_random_data(-10, 10, channels, seed=args.seed),
                spec, host="127.0.0.1", port=0, pace_hz=args.pace)
            client = acquisition.client_connect("127.0.0.1", server.port)
            client.start_acquisition()
            user = task.LiveEegUser(client=client, snr=params.get("snr", 10.0),
                                    noise_sigma=params.get("noise_sigma", 1.0))
        else:
            if model is None:
                raise UsageError("simulate needs --model (or --oracle-ratio)")
            channels = len(model.pca.components)
            spec = _adhoc_spec(channels, model.sample_rate)
            user = task.EegUser(snr=params.get("snr", 10.0),
                                noise_sigma=params.get("noise_sigma", 1.0),
                                spec=spec)

        record = task.run_copy_phrase(params, args.phrase, model=model,
                                      user=user, lm=lm, seed=args.seed,
                                      out_dir=args.out)
    finally:
        if client is not None:
            client.close()
        if server is not None:
            server.stop()

    print(f"phrase:  {record.phrase}")
    print(f"spelled: {record.final_text}")
    print(f"commit accuracy: {record.commit_accuracy():.3f}")
    print("letter  intent  committed  sequences")
    for i, letter in enumerate(record.letters):
        print(f"{i + 1:>6}  {letter.intent:>6}  {letter.committed or '-':>9}  "
              f"{len(letter.sequences):>9}")
    if record.budget_exhausted:
        print("letter budget exhausted before the phrase was complete")
    return 0


def cmd_replay(args) -> int:
    replay = datastream.file_replay(args.file)
    server = datastream.serve(replay, replay.spec, host=args.host,
                              port=args.port, pace_hz=args.pace)
    print(f"replaying {len(replay)} frames of {replay.spec.name} on "
          f"{args.host}:{server.port}")
    try:
        server.join()
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    print(f"served {server.frames_sent} frames")
    return 0


def cmd_psd(args) -> int:
    spec, _, values, _ = acquisition.read_raw_csv(args.file)
    if args.channel in spec.channels:
        ch = spec.channels.index(args.channel)
    else:
        try:
            ch = int(args.channel)
        except ValueError:
            raise UsageError(f"--channel {args.channel!r}: not a channel "
                             f"name or index") from None
        if not 0 <= ch < spec.channel_count:
            raise UsageError(f"--channel {ch}: out of range")
    try:
        lo, hi = (float(v) for v in args.band.split(":"))
    except ValueError:
        raise UsageError(f"--band {args.band!r}: expected lo:hi") from None

    power = dsp.power_spectral_density(
        values[:, ch], (lo, hi), spec.sample_rate, args.window,
        method=args.method, relative=args.relative,
        plot=args.plot is not None, plot_path=args.plot)
    kind = "relative band power" if args.relative else "band power"
    print(f"{kind} {lo:g}-{hi:g} Hz on {spec.channels[ch]}: {power:.6g}")
    if args.plot:
        print(f"spectrum written to {args.plot}")
    return 0


# --------------------------------------------------------------------------
# Argument wiring
# --------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="rsvpbci",
                     description="RSVP speller engine: data servers, "
                                 "calibration, model training, and "
                                 "copy-phrase simulation")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--params", help="parameters JSON file")
        p.add_argument("--seed", type=int, default=None, help="RNG seed")
        p.add_argument("--out", default="sessions",
                       help="output/session directory")

    p = sub.add_parser("serve", help="stream generator data over TCP",
                       parents=[], description="Run a wire-protocol data "
                       "server until interrupted (or --duration).")
    common(p)
    p.add_argument("--generator", default="random",
                   choices=["random", "erp", "sinusoid", "file"])
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8844)
    p.add_argument("--rate", type=float, default=300.0, help="sample rate, Hz")
    p.add_argument("--channels", type=int, default=25)
    p.add_argument("--low", type=float, default=-1000.0,
                   help="random generator lower bound, microvolts")
    p.add_argument("--high", type=float, default=1000.0,
                   help="random generator upper bound, microvolts")
    p.add_argument("--freq", type=float, default=4.0, help="sinusoid Hz")
    p.add_argument("--amplitude", type=float, default=10.0)
    p.add_argument("--noise", type=float, default=1.0, help="noise sigma")
    p.add_argument("--snr", type=float, default=10.0, help="erp generator snr")
    p.add_argument("--file", help="raw_data.csv to replay")
    p.add_argument("--duration", type=float, default=None,
                   help="stop after this many seconds of data")
    p.add_argument("--pace", type=float, default=None,
                   help="wall-clock frames/s (defaults to --rate)")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("calibrate", help="run a calibration session and fit "
                                         "the evidence model")
    common(p)
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--seq-count", type=int, default=None)
    p.add_argument("--stim-count", type=int, default=None)
    p.add_argument("--k-folds", type=int, default=None)
    p.add_argument("--channels", type=int, default=None,
                   help="ad-hoc device channel count (default: SIM device)")
    p.add_argument("--rate", type=float, default=300.0)
    p.add_argument("--host", default=None,
                   help="collect from a live server instead of a generator")
    p.add_argument("--port", type=int, default=8844)
    p.set_defaults(func=cmd_calibrate)

    p = sub.add_parser("train", help="fit the model from a recorded session "
                                     "directory")
    common(p)
    p.add_argument("--data", required=True, help="session directory with "
                                                 "raw_data.csv and triggers.txt")
    p.add_argument("--k-folds", type=int, default=None)
    p.add_argument("--model", default=None, help="output model path")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("simulate", help="spell a phrase in the closed loop")
    common(p)
    p.add_argument("--phrase", required=True)
    p.add_argument("--model", default=None, help="fitted model file")
    p.add_argument("--snr", type=float, default=None)
    p.add_argument("--threshold", type=float, default=None)
    p.add_argument("--max-sequences", type=int, default=None)
    p.add_argument("--stim-count", type=int, default=None)
    p.add_argument("--letter-budget", type=int, default=None)
    p.add_argument("--corpus", default=None,
                   help="language-model corpus or prebuilt model file")
    p.add_argument("--no-lm", action="store_true",
                   help="disable language-model fusion (uniform priors)")
    p.add_argument("--oracle-ratio", type=float, default=None,
                   help="bypass EEG with a fixed target likelihood ratio")
    p.add_argument("--self-serve", action="store_true",
                   help="host the data server and acquisition in-process")
    p.add_argument("--pace", type=float, default=None,
                   help="self-serve wall-clock frames/s")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("replay", help="serve a recorded raw_data.csv over TCP")
    common(p)
    p.add_argument("--file", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8844)
    p.add_argument("--pace", type=float, default=None)
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("psd", help="band power of a recorded channel")
    common(p)
    p.add_argument("--file", required=True, help="raw_data.csv")
    p.add_argument("--channel", default="0", help="channel name or index")
    p.add_argument("--band", default="3.5:4.5", help="lo:hi in Hz")
    p.add_argument("--window", type=float, default=4.0,
                   help="segment length, seconds")
    p.add_argument("--method", default="welch",
                   choices=["welch", "multitaper"])
    p.add_argument("--relative", action="store_true")
    p.add_argument("--plot", default=None,
                   help="write the full spectrum to this CSV")
    p.set_defaults(func=cmd_psd)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)

    try:
        _setup_logging(Path(args.out), args.command)
        log.info("command %s args %s", args.command,
                 {k: v for k, v in vars(args).items() if k != "func"})
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 0
    except Exception as exc:  # noqa: BLE001 - runtime failures become exit 2
        log.exception("run failed")
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
