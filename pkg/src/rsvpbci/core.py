"""Shared domain types: symbol alphabet, device descriptions, triggers,
and the JSON parameters file.

Timestamps throughout the package are float64 seconds relative to the
start of acquisition.
"""

from __future__ import annotations

import json
import string
from dataclasses import dataclass, field

# 26 letters, '_' for space, '<' for backspace. Index order is fixed and
# shared by the language model, the posterior, and stimulus sequences.
ALPHABET: tuple[str, ...] = tuple(string.ascii_uppercase) + ("_", "<")
SPACE = "_"
BACKSPACE = "<"

_ALPHABET_INDEX = {sym: i for i, sym in enumerate(ALPHABET)}

TARGETNESS = ("target", "nontarget", "fixation", "prompt")


def symbol_index(symbol: str) -> int:
    """Position of a symbol in the fixed 28-symbol alphabet."""
    try:
        return _ALPHABET_INDEX[symbol]
    except KeyError:
        raise UnknownSymbol(f"not in alphabet: {symbol!r}") from None


class UnknownSymbol(ValueError):
    pass


@dataclass(frozen=True)
class DeviceSpec:
    """Description of a data source: channel names, rate, content type."""

    name: str
    sample_rate: float
    channels: tuple[str, ...]
    content_type: str = "EEG"

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        if not self.channels:
            raise ValueError("channel list must be non-empty")
        if len(set(self.channels)) != len(self.channels):
            raise ValueError("channel names must be distinct")
        object.__setattr__(self, "channels", tuple(self.channels))

    @property
    def channel_count(self) -> int:
        return len(self.channels)


@dataclass(frozen=True)
class TriggerRecord:
    """One stimulus/marker event tied to the acquisition clock."""

    label: str
    targetness: str
    timestamp: float

    def __post_init__(self):
        if self.targetness not in TARGETNESS:
            raise ValueError(f"bad targetness {self.targetness!r}")
        if self.timestamp < 0:
            raise ValueError("timestamp must be non-negative")


def write_triggers(path, triggers) -> int:
    """Write triggers.txt: one '<label> <targetness> <timestamp>' line per event."""
    with open(path, "w", encoding="utf-8") as f:
        for trg in triggers:
            f.write(f"{trg.label} {trg.targetness} {trg.timestamp:.6f}\n")
    return len(triggers)


def read_triggers(path) -> list[TriggerRecord]:
    out = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            label, targetness, ts = line.split(" ")
            out.append(TriggerRecord(label, targetness, float(ts)))
    return out


# --------------------------------------------------------------------------
# Parameters file
# --------------------------------------------------------------------------

class MalformedEntry(ValueError):
    """A parameter value failed to parse as its declared type."""

    def __init__(self, name: str, detail: str = ""):
        self.name = name
        super().__init__(f"parameter {name!r}: {detail}" if detail else name)


def _parse_bool(raw: str) -> bool:
    low = raw.strip().lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_int(raw: str) -> int:
    return int(raw.strip(), 10)


_CASTERS = {
    "str": str,
    "float": lambda raw: float(raw.strip()),
    "int": _parse_int,
    "bool": _parse_bool,
    "directorypath": str,
    "filepath": str,
}


@dataclass
class ParameterEntry:
    value: str
    type: str
    recommended_values: list = field(default_factory=list)
    help_tip: str = ""
    raw: dict = field(default_factory=dict)  # original JSON object, kept verbatim

    def cast(self):
        return _CASTERS[self.type](self.value)


class Parameters:
    """Typed view over the parameters JSON file.

    The file is a single JSON object keyed by parameter name; each entry
    carries a string-encoded value, a type tag, optional recommended
    values, and a help tip. Fields beyond those are preserved verbatim so
    a load/save round trip is the identity.
    """

    def __init__(self, entries: dict[str, ParameterEntry] | None = None):
        self._entries: dict[str, ParameterEntry] = dict(entries or {})

    def __contains__(self, name) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self):
        return list(self._entries)

    def entry(self, name: str) -> ParameterEntry:
        return self._entries[name]

    def get(self, name: str, default=None):
        """Value of a parameter, parsed as its declared type."""
        if name not in self._entries:
            if default is not None:
                return default
            raise KeyError(name)
        return self._entries[name].cast()

    def set(self, name: str, value, type_: str | None = None):
        raw_value = str(value).lower() if isinstance(value, bool) else str(value)
        if name in self._entries:
            ent = self._entries[name]
            ent.value = raw_value
            ent.raw["value"] = raw_value
            if type_:
                ent.type = type_
                ent.raw["type"] = type_
        else:
            t = type_ or _infer_type(value)
            self._entries[name] = ParameterEntry(
                raw_value, t, [], "", {"value": raw_value, "type": t,
                                        "recommended_values": [], "helpTip": ""})

    def save(self, path):
        obj = {name: ent.raw for name, ent in self._entries.items()}
        with open(path, "w", encoding="utf-8") as f:
            json.dump(obj, f, indent=2)
            f.write("\n")

    def copy(self) -> "Parameters":
        out = Parameters()
        for name, ent in self._entries.items():
            out._entries[name] = ParameterEntry(
                ent.value, ent.type, list(ent.recommended_values),
                ent.help_tip, json.loads(json.dumps(ent.raw)))
        return out


def _infer_type(value) -> str:
    if isinstance(value, bool):
        return "bool"
    if isinstance(value, int):
        return "int"
    if isinstance(value, float):
        return "float"
    return "str"


def load_parameters(path) -> Parameters:
    """Load and type-check a parameters JSON file.

    Raises FileNotFoundError for a missing file and MalformedEntry for the
    first entry (in file order) whose value does not parse as its type.
    """
    with open(path, encoding="utf-8") as f:
        obj = json.load(f)
    if not isinstance(obj, dict):
        raise MalformedEntry("<root>", "top level must be a JSON object")

    entries: dict[str, ParameterEntry] = {}
    for name, raw in obj.items():
        if not isinstance(raw, dict) or "value" not in raw or "type" not in raw:
            raise MalformedEntry(name, "entry must carry 'value' and 'type'")
        type_ = raw["type"]
        if type_ not in _CASTERS:
            raise MalformedEntry(name, f"unknown type {type_!r}")
        ent = ParameterEntry(
            value=str(raw["value"]),
            type=type_,
            recommended_values=list(raw.get("recommended_values", [])),
            help_tip=raw.get("helpTip", ""),
            raw=raw,
        )
        try:
            ent.cast()
        except (ValueError, TypeError) as exc:
            raise MalformedEntry(name, str(exc)) from None
        entries[name] = ent
    return Parameters(entries)


def validate_parameters(params: Parameters, required: list[str]) -> list[str]:
    """Return violations: missing required names and values outside their
    recommended set. An empty list means the parameters pass."""
    violations = []
    for name in required:
        if name not in params:
            violations.append(f"missing required parameter: {name}")
    for name in params.names():
        ent = params.entry(name)
        if ent.recommended_values and ent.value not in ent.recommended_values:
            violations.append(
                f"{name}: value {ent.value!r} not among recommended "
                f"{ent.recommended_values}")
    return violations


_DEFAULTS = [
    # name, value, type, recommended, help
    ("device", "SIM", "str", ["SIM", "DSI"], "registered data source to use"),
    ("trial_length", "0.5", "float", [], "epoch window length in seconds after stimulus onset"),
    ("downsample_rate", "2", "int", [], "decimation factor applied after the bandpass"),
    ("filter_low", "2", "float", [], "bandpass low cutoff, Hz"),
    ("filter_high", "50", "float", [], "bandpass high cutoff, Hz"),
    ("filter_order", "2", "int", [], "Butterworth design order"),
    ("notch_filter_frequency", "60", "float", [], "mains notch center frequency, Hz"),
    ("notch_quality", "30", "float", [], "notch quality factor"),
    ("stim_count", "10", "int", [], "symbols presented per sequence"),
    ("seq_count", "100", "int", [], "calibration sequences to present"),
    ("isi", "0.2", "float", [], "inter-stimulus interval, seconds"),
    ("prompt_duration", "0.5", "float", [], "target prompt display time, seconds"),
    ("fixation_duration", "0.5", "float", [], "fixation cross display time, seconds"),
    ("decision_threshold", "0.8", "float", [], "posterior mass required to commit a symbol"),
    ("max_sequences", "10", "int", [], "sequence budget per letter before a forced commit"),
    ("letter_budget", "20", "int", [], "total symbol commits allowed per session"),
    ("snr", "10", "float", [], "simulated ERP peak over noise sigma"),
    ("noise_sigma", "1.0", "float", [], "simulated background noise sigma, microvolts"),
    ("retained_variance", "0.95", "float", [], "per-channel PCA explained-variance target"),
    ("k_folds", "10", "int", [], "cross-validation folds"),
    ("lm_enabled", "true", "bool", ["true", "false"], "fuse language-model priors"),
    ("lm_order", "4", "int", [], "character n-gram order"),
    ("lm_alpha", "0.1", "float", [], "additive smoothing constant"),
    ("user_id", "sim", "str", [], "label for the session directory"),
]


def default_parameters() -> Parameters:
    params = Parameters()
    for name, value, type_, rec, tip in _DEFAULTS:
        params._entries[name] = ParameterEntry(
            value, type_, list(rec), tip,
            {"value": value, "type": type_, "recommended_values": list(rec),
             "helpTip": tip})
    return params
