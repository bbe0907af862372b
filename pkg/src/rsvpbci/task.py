"""Closed-loop orchestration.

One letter decision runs as: language-model prior -> stimulus sequence ->
per-stimulus likelihood ratios (from a simulated user through the fitted
evidence model, or from a ratio oracle) -> Bayesian posterior update ->
commit-or-continue. Calibration sessions generate labeled sequences,
persist raw data and triggers, and fit the evidence pipeline with
cross-validated hyperparameters. Every session writes a replayable record.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from rsvpbci import acquisition
from rsvpbci.core import (ALPHABET, BACKSPACE, DeviceSpec, Parameters,
                          TriggerRecord, default_parameters, symbol_index,
                          write_triggers)
from rsvpbci.datastream import SIM_DEVICE, ErpTemplate, gen_erp_stream
from rsvpbci.dsp import FilterSpec, apply_filter_chain
from rsvpbci.lang import LanguageModel, priors_vector
from rsvpbci.model import (EpochTensor, SignalModel, cross_validation,
                           extract_epochs, pipeline_fit)

log = logging.getLogger("rsvpbci.task")

RATIO_CLIP = (1e-6, 1e6)


class NonPositiveRatio(ValueError):
    pass


class AcquisitionLost(RuntimeError):
    pass


def uniform_posterior() -> np.ndarray:
    return np.full(len(ALPHABET), 1.0 / len(ALPHABET))


# --------------------------------------------------------------------------
# Posterior arithmetic
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class StimuliSequence:
    """Symbols presented in one burst, with their onset timestamps."""

    symbols: tuple[str, ...]
    onsets: tuple[float, ...]

    def __post_init__(self):
        if len(set(self.symbols)) != len(self.symbols):
            raise ValueError("sequence symbols must be distinct")


def posterior_update(prior: np.ndarray, seq, ratios,
                     alphabet=ALPHABET) -> np.ndarray:
    """Multiply presented symbols' prior mass by their likelihood ratios,
    leave unpresented mass alone, and renormalize."""
    symbols = seq.symbols if isinstance(seq, StimuliSequence) else tuple(seq)
    ratios = np.asarray(ratios, dtype=np.float64)
    if len(ratios) != len(symbols):
        raise ValueError("one ratio per presented symbol")
    if np.any(~np.isfinite(ratios)) or np.any(ratios <= 0):
        raise NonPositiveRatio("ratios must be positive and finite")
    index = (symbol_index if alphabet is ALPHABET
             else {s: i for i, s in enumerate(alphabet)}.__getitem__)
    out = np.asarray(prior, dtype=np.float64).copy()
    for sym, ratio in zip(symbols, ratios):
        out[index(sym)] *= ratio
    return out / out.sum()


def fuse_lm_prior(lm_priors, spelled: str = "") -> np.ndarray:
    """Language-model prior for the next letter; uniform when disabled."""
    if lm_priors is None:
        return uniform_posterior()
    vec = priors_vector(lm_priors)
    total = vec.sum()
    if total <= 0:
        return uniform_posterior()
    return vec / total


def next_sequence(posterior: np.ndarray, stim_count: int = 10, rng=None,
                  isi: float = 0.2, start: float = 0.0) -> StimuliSequence:
    """The stim_count highest-posterior symbols (ties by alphabet order),
    presentation order shuffled by the supplied rng."""
    if stim_count > len(ALPHABET):
        raise ValueError("stim_count exceeds alphabet size")
    rng = rng or np.random.default_rng()
    ranked = np.lexsort((np.arange(len(ALPHABET)), -np.asarray(posterior)))
    chosen = ranked[:stim_count]
    order = rng.permutation(stim_count)
    symbols = tuple(ALPHABET[int(chosen[k])] for k in order)
    onsets = tuple(start + k * isi for k in range(stim_count))
    return StimuliSequence(symbols, onsets)


@dataclass
class Decision:
    kind: str  # "continue" or "commit"
    symbol: str | None = None

    @property
    def committed(self) -> bool:
        return self.kind == "commit"


@dataclass
class DecisionState:
    """Progress of one copy-phrase session."""

    phrase: str
    spelled: str = ""
    sequences_used: int = 0

    def intent(self) -> str:
        """Next letter of the phrase, or backspace to erase an error."""
        if self.phrase.startswith(self.spelled):
            return self.phrase[len(self.spelled)]
        return BACKSPACE

    def apply(self, symbol: str):
        if symbol == BACKSPACE:
            self.spelled = self.spelled[:-1]
        else:
            self.spelled += symbol
        self.sequences_used = 0


def decide(state: DecisionState, posterior: np.ndarray,
           threshold: float = 0.8, max_sequences: int = 10) -> Decision:
    """Commit the argmax once it clears the threshold or the sequence
    budget is spent; otherwise continue presenting."""
    best = int(np.argmax(posterior))
    if posterior[best] >= threshold or state.sequences_used >= max_sequences:
        return Decision("commit", ALPHABET[best])
    return Decision("continue")


# --------------------------------------------------------------------------
# Simulated users
# --------------------------------------------------------------------------

@dataclass
class OracleUser:
    """Bypasses EEG entirely: fixed likelihood ratios by targetness."""

    target_ratio: float = 12.0
    nontarget_ratio: float = 1.0

    def ratios(self, seq: StimuliSequence, intent: str) -> np.ndarray:
        return np.array([self.target_ratio if s == intent else self.nontarget_ratio
                         for s in seq.symbols])


@dataclass
class EegUser:
    """Emits noisy epochs with an evoked bump on the intent stimulus."""

    snr: float = 10.0
    noise_sigma: float = 1.0
    template: ErpTemplate = field(default_factory=ErpTemplate)
    spec: DeviceSpec = field(default_factory=lambda: SIM_DEVICE)


@dataclass
class LiveEegUser:
    """Slices epochs out of a live acquisition stream instead of sampling
    noise locally; the evoked bump is still injected on the intent epoch
    (the wire carries only background activity)."""

    client: object  # DataAcquisitionClient
    snr: float = 10.0
    noise_sigma: float = 1.0
    template: ErpTemplate = field(default_factory=ErpTemplate)
    timeout: float = 60.0

    @property
    def spec(self) -> DeviceSpec:
        return self.client.spec

    def next_onset(self, guard: float = 0.05) -> float:
        """First grid-aligned timestamp safely after the newest sample."""
        fs = self.spec.sample_rate
        latest = max(self.client.latest_timestamp, 0.0)
        return float(np.ceil((latest + guard) * fs) / fs)

    def collect(self, seq: StimuliSequence, intent: str,
                trial_length: float) -> EpochTensor:
        fs = self.spec.sample_rate
        n = int(round(trial_length * fs))
        needed = seq.onsets[-1] + trial_length + 2.0 / fs
        deadline = time.monotonic() + self.timeout
        while self.client.latest_timestamp < needed:
            if self.client._eof.is_set() and self.client.latest_timestamp < needed:
                raise AcquisitionLost("stream ended before the sequence window")
            if time.monotonic() > deadline:
                raise AcquisitionLost("timed out waiting for sequence data")
            time.sleep(0.005)

        k0, wave = self.template.waveform(fs)
        peak = self.snr * self.noise_sigma
        epochs = np.empty((len(seq.symbols), self.spec.channel_count, n))
        for t, (onset, sym) in enumerate(zip(seq.onsets, seq.symbols)):
            # query between sample-grid midpoints so float jitter in the
            # onset can never flip a boundary row in or out
            first = int(round(onset * fs))
            block = self.client.get_data(max(0.0, (first - 0.5) / fs),
                                         (first + n - 0.5) / fs)
            if len(block) != n:
                raise AcquisitionLost(
                    f"epoch at {onset:.3f}s returned {len(block)} rows, "
                    f"expected {n}")
            epochs[t] = block.channel_data()
            if sym == intent and peak != 0:
                lo, hi = max(0, k0), min(n, k0 + len(wave))
                if hi > lo:
                    seg = wave[lo - k0:hi - k0] * peak
                    for ch in self.template.channels:
                        epochs[t, ch, lo:hi] += seg
        return EpochTensor(epochs, (0.0, trial_length))


def simulated_user_epochs(seq: StimuliSequence, intent: str, snr: float,
                          template: ErpTemplate, spec: DeviceSpec,
                          rng=None, window=(0.0, 0.5),
                          noise_sigma: float = 1.0) -> EpochTensor:
    """One epoch per presented stimulus: Gaussian noise everywhere, plus
    the template (peak snr * sigma) on the epoch matching the intent."""
    if intent not in ALPHABET:
        raise ValueError(f"intent {intent!r} not in alphabet")
    rng = rng or np.random.default_rng()
    fs = spec.sample_rate
    offset, length = window
    n = int(round(length * fs))
    data = rng.normal(0.0, noise_sigma, (len(seq.symbols), spec.channel_count, n))

    k0, wave = template.waveform(fs)
    k0 -= int(round(offset * fs))
    peak = snr * noise_sigma
    if peak != 0:
        for t, sym in enumerate(seq.symbols):
            if sym != intent:
                continue
            lo = max(0, k0)
            hi = min(n, k0 + len(wave))
            if hi > lo:
                seg = wave[lo - k0:hi - k0] * peak
                for ch in template.channels:
                    data[t, ch, lo:hi] += seg
    return EpochTensor(data, window)


def epoch_likelihood_ratios(model: SignalModel, epochs: EpochTensor) -> np.ndarray:
    """Filter epochs with the model's training chain, run the pipeline,
    and clip the likelihood ratios away from 0 and infinity."""
    t, c, n = epochs.data.shape
    flat = epochs.data.reshape(t * c, n)
    filtered = apply_filter_chain(flat, model.filter_spec, model.sample_rate)
    filtered = filtered.reshape(t, c, -1)
    lik_pos, lik_neg = model.transform(EpochTensor(filtered, epochs.window))
    ratios = np.clip(lik_pos, 1e-300, None) / np.clip(lik_neg, 1e-300, None)
    return np.clip(ratios, RATIO_CLIP[0], RATIO_CLIP[1])


# --------------------------------------------------------------------------
# Session record
# --------------------------------------------------------------------------

@dataclass
class SequenceRecord:
    symbols: list
    onsets: list
    ratios: list
    posterior: list
    decision: str
    committed: str | None


@dataclass
class LetterRecord:
    intent: str
    prior: list
    sequences: list[SequenceRecord] = field(default_factory=list)
    committed: str | None = None


@dataclass
class SessionRecord:
    """Everything needed to replay a session's decisions exactly."""

    phrase: str
    final_text: str
    letters: list[LetterRecord]
    parameters: dict
    seed: int | None = None
    budget_exhausted: bool = False

    def to_json(self) -> str:
        return json.dumps({
            "phrase": self.phrase,
            "final_text": self.final_text,
            "seed": self.seed,
            "budget_exhausted": self.budget_exhausted,
            "parameters": self.parameters,
            "letters": [
                {
                    "intent": let.intent,
                    "prior": let.prior,
                    "committed": let.committed,
                    "sequences": [vars(s) for s in let.sequences],
                }
                for let in self.letters
            ],
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "SessionRecord":
        obj = json.loads(text)
        letters = [
            LetterRecord(
                intent=let["intent"], prior=let["prior"],
                committed=let["committed"],
                sequences=[SequenceRecord(**seq) for seq in let["sequences"]],
            )
            for let in obj["letters"]
        ]
        return cls(obj["phrase"], obj["final_text"], letters,
                   obj["parameters"], obj["seed"], obj["budget_exhausted"])

    def save(self, path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path) -> "SessionRecord":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))

    def sequences_per_letter(self) -> list[int]:
        return [len(let.sequences) for let in self.letters]

    def commit_accuracy(self) -> float:
        commits = [(let.intent, let.committed) for let in self.letters
                   if let.committed is not None]
        if not commits:
            return float("nan")
        return sum(intent == committed for intent, committed in commits) / len(commits)


def replay_session(record: SessionRecord, atol: float = 0.0) -> bool:
    """Re-run every logged posterior update and decision; raise on any
    mismatch. atol=0 demands exact reproduction."""
    threshold = float(record.parameters.get("decision_threshold", 0.8))
    max_sequences = int(record.parameters.get("max_sequences", 10))
    for li, letter in enumerate(record.letters):
        posterior = np.asarray(letter.prior)
        state = DecisionState(record.phrase)
        for si, seq in enumerate(letter.sequences):
            posterior = posterior_update(posterior,
                                         tuple(seq.symbols), seq.ratios)
            logged = np.asarray(seq.posterior)
            if not np.allclose(posterior, logged, rtol=0.0, atol=atol):
                raise AssertionError(
                    f"letter {li} sequence {si}: posterior mismatch")
            posterior = logged
            state.sequences_used = si + 1
            decision = decide(state, posterior, threshold, max_sequences)
            if decision.kind != seq.decision or (
                    decision.committed and decision.symbol != seq.committed):
                raise AssertionError(f"letter {li} sequence {si}: decision mismatch")
    return True


# --------------------------------------------------------------------------
# Copy-phrase loop
# --------------------------------------------------------------------------

def _p(params: Parameters, name: str, fallback):
    try:
        return params.get(name)
    except KeyError:
        return fallback


def _params_snapshot(params: Parameters) -> dict:
    return {name: params.get(name) for name in params.names()}


def _filter_spec(params: Parameters) -> FilterSpec:
    return FilterSpec(
        low_cutoff=_p(params, "filter_low", 2.0),
        high_cutoff=_p(params, "filter_high", 50.0),
        order=_p(params, "filter_order", 2),
        notch_freq=_p(params, "notch_filter_frequency", 60.0),
        notch_quality=_p(params, "notch_quality", 30.0),
        downsample_factor=_p(params, "downsample_rate", 2),
    )


def run_copy_phrase(params: Parameters | None, phrase: str,
                    model: SignalModel | None = None,
                    user=None, lm: LanguageModel | None = None,
                    seed: int | None = None,
                    out_dir=None) -> SessionRecord:
    """Spell `phrase` in a simulated closed loop and return the record.

    `user` is an OracleUser (direct ratios) or EegUser (epochs through the
    fitted model). The language model, when given, supplies each letter's
    prior from the spelled history; otherwise priors are uniform.
    """
    params = params or default_parameters()
    phrase = phrase.upper().replace(" ", "_")
    for ch in phrase:
        if ch not in ALPHABET or ch == BACKSPACE:
            raise ValueError(f"phrase symbol {ch!r} not spellable")
    user = user if user is not None else OracleUser()
    if isinstance(user, EegUser) and model is None:
        raise ValueError("EegUser needs a fitted SignalModel")

    rng = np.random.default_rng(seed)
    stim_count = _p(params, "stim_count", 10)
    isi = _p(params, "isi", 0.2)
    threshold = _p(params, "decision_threshold", 0.8)
    max_sequences = _p(params, "max_sequences", 10)
    letter_budget = _p(params, "letter_budget", 20)
    trial_length = _p(params, "trial_length", 0.5)

    if lm is not None:
        lm.reset()
    state = DecisionState(phrase)
    letters: list[LetterRecord] = []
    commits = 0
    budget_exhausted = False

    while state.spelled != phrase:
        if commits >= letter_budget:
            budget_exhausted = True
            break
        intent = state.intent()
        ranked = lm.recent_priors() if lm is not None else None
        prior = fuse_lm_prior(ranked, state.spelled)
        letter = LetterRecord(intent=intent, prior=prior.tolist())
        posterior = prior
        state.sequences_used = 0

        while True:
            if isinstance(user, LiveEegUser):
                seq = next_sequence(posterior, stim_count, rng, isi,
                                    start=user.next_onset())
            else:
                seq = next_sequence(posterior, stim_count, rng, isi)
            if isinstance(user, OracleUser):
                ratios = user.ratios(seq, intent)
            elif isinstance(user, LiveEegUser):
                epochs = user.collect(seq, intent, trial_length)
                ratios = epoch_likelihood_ratios(model, epochs)
            else:
                epochs = simulated_user_epochs(
                    seq, intent, user.snr, user.template, user.spec, rng,
                    window=(0.0, trial_length), noise_sigma=user.noise_sigma)
                ratios = epoch_likelihood_ratios(model, epochs)
            posterior = posterior_update(posterior, seq, ratios)
            state.sequences_used += 1
            decision = decide(state, posterior, threshold, max_sequences)
            letter.sequences.append(SequenceRecord(
                symbols=list(seq.symbols), onsets=list(seq.onsets),
                ratios=[float(r) for r in ratios],
                posterior=posterior.tolist(),
                decision=decision.kind, committed=decision.symbol))
            if decision.committed:
                letter.committed = decision.symbol
                state.apply(decision.symbol)
                if lm is not None:
                    lm.state_update([decision.symbol])
                commits += 1
                break
        letters.append(letter)

    record = SessionRecord(
        phrase=phrase, final_text=state.spelled, letters=letters,
        parameters=_params_snapshot(params), seed=seed,
        budget_exhausted=budget_exhausted)

    if out_dir is not None:
        session_dir = make_session_dir(out_dir, _p(params, "user_id", "sim"))
        record.save(session_dir / "session.json")
        params.save(session_dir / "parameters.json")
        if model is not None:
            model.save(session_dir / "model.bin")
        log.info("copy-phrase session written to %s", session_dir)
    return record


def make_session_dir(base, user_id: str) -> Path:
    stamp = datetime.now().strftime("%Y-%m-%dT%H-%M-%S-%f")
    path = Path(base) / f"{user_id}_{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    return path


# --------------------------------------------------------------------------
# Calibration
# --------------------------------------------------------------------------

@dataclass
class CalibrationResult:
    session_dir: Path
    model: SignalModel
    auc: float
    lam: float
    gamma: float


def build_calibration_schedule(params: Parameters, rng) -> list[tuple]:
    """Prompt, fixation, then stim_count stimuli per sequence; exactly one
    target per sequence at a random position."""
    seq_count = _p(params, "seq_count", 100)
    stim_count = _p(params, "stim_count", 10)
    isi = _p(params, "isi", 0.2)
    prompt_d = _p(params, "prompt_duration", 0.5)
    fixation_d = _p(params, "fixation_duration", 0.5)
    trial_length = _p(params, "trial_length", 0.5)
    lead_in = 0.5
    seq_period = prompt_d + fixation_d + stim_count * isi + trial_length + 0.3

    symbols = np.array(ALPHABET)
    schedule = []
    for i in range(seq_count):
        t0 = lead_in + i * seq_period
        target = str(rng.choice(symbols))
        others = [s for s in ALPHABET if s != target]
        chosen = list(rng.choice(others, size=stim_count - 1, replace=False))
        position = int(rng.integers(stim_count))
        seq_symbols = chosen[:position] + [target] + chosen[position:]
        schedule.append((t0, "prompt", target))
        schedule.append((t0 + prompt_d, "fixation", "+"))
        stim_t0 = t0 + prompt_d + fixation_d
        for j, sym in enumerate(seq_symbols):
            targetness = "target" if sym == target else "nontarget"
            schedule.append((stim_t0 + j * isi, targetness, sym))
    return schedule


def run_calibration(params: Parameters | None = None, out_dir=".",
                    seed: int | None = None,
                    device: DeviceSpec | None = None,
                    template: ErpTemplate | None = None,
                    host: str | None = None,
                    port: int = 8844) -> CalibrationResult:
    """Run a calibration session and fit the evidence pipeline with
    cross-validated hyperparameters.

    Data comes from the synthetic evoked-response generator, or from a
    live wire-protocol server when `host` is given (the stream is taken
    as-is; a server built from the same parameters and seed injects
    responses at matching times). The session directory gets
    raw_data.csv, triggers.txt, a parameters snapshot, and the model.
    """
    params = params or default_parameters()
    template = template or ErpTemplate()
    rng = np.random.default_rng(seed)
    schedule = build_calibration_schedule(params, rng)

    if host is not None:
        spec, frames, timestamps, triggers = _collect_live(
            params, schedule, host, port)
    else:
        spec = device or acquisition.find_device(_p(params, "device", "SIM"))
        snr = _p(params, "snr", 10.0)
        sigma = _p(params, "noise_sigma", 1.0)
        frames, triggers = gen_erp_stream(template, schedule, snr, sigma,
                                          spec, seed=int(rng.integers(2**32)))
        timestamps = np.arange(len(frames)) / spec.sample_rate

    session_dir = make_session_dir(out_dir, _p(params, "user_id", "sim"))
    acquisition.write_raw_csv(session_dir / "raw_data.csv", spec,
                              zip(timestamps, frames), triggers)
    write_triggers(session_dir / "triggers.txt", triggers)
    params.save(session_dir / "parameters.json")

    result = fit_from_arrays(frames, timestamps, triggers, params, spec,
                             seed=seed)
    model, lam, gamma, cv_auc = result
    model_path = session_dir / "model.bin"
    model.save(model_path)
    log.info("calibration AUC %.4f at lam=%.1f gamma=%.1f -> %s",
             cv_auc, lam, gamma, model_path)
    return CalibrationResult(session_dir, model, cv_auc, lam, gamma)


def _collect_live(params: Parameters, schedule, host: str, port: int):
    """Stream from a live server until the schedule's span is buffered."""
    trial_length = _p(params, "trial_length", 0.5)
    total = schedule[-1][0] + trial_length + 0.5
    client = acquisition.client_connect(host, port)
    client.start_acquisition()
    try:
        while client.latest_timestamp < total:
            if client._eof.is_set() and client.latest_timestamp < total:
                raise AcquisitionLost(
                    f"stream ended at {client.latest_timestamp:.2f}s, "
                    f"needed {total:.2f}s")
            time.sleep(0.02)
        block = client.get_data(0.0, total)
        spec = client.spec
    finally:
        try:
            client.stop_acquisition()
        except Exception:
            pass
        client.close()
    triggers = [TriggerRecord(label, targetness, ts)
                for ts, targetness, label in schedule]
    return spec, block.values, block.timestamps, triggers


def fit_from_arrays(frames: np.ndarray, timestamps: np.ndarray, triggers,
                    params: Parameters, spec: DeviceSpec,
                    seed: int | None = None):
    """Epoch, filter, cross-validate, and fit on already-collected data."""
    trial_length = _p(params, "trial_length", 0.5)
    fspec = _filter_spec(params)
    retained = _p(params, "retained_variance", 0.95)
    k_folds = _p(params, "k_folds", 10)

    start = float(timestamps[0]) if len(timestamps) else 0.0
    block = acquisition.TimeSeriesBlock(start=start,
                                        sample_rate=spec.sample_rate,
                                        timestamps=np.asarray(timestamps),
                                        values=np.asarray(frames))
    epochs, labels = extract_epochs(block, triggers, (0.0, trial_length))
    if epochs.trial_count == 0:
        raise AcquisitionLost("no usable epochs in the session")

    t, c, n = epochs.data.shape
    filtered = apply_filter_chain(epochs.data.reshape(t * c, n), fspec,
                                  spec.sample_rate).reshape(t, c, -1)
    filtered_epochs = EpochTensor(filtered, epochs.window)

    cv = cross_validation(filtered_epochs, labels, k_folds=k_folds,
                          retained=retained, seed=seed or 0)
    model = pipeline_fit(filtered_epochs, labels, cv.lam, cv.gamma,
                         retained=retained, filter_spec=fspec,
                         sample_rate=spec.sample_rate)
    model.calibration_auc = cv.mean_auc
    return model, cv.lam, cv.gamma, cv.mean_auc
