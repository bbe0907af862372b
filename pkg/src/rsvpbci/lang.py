"""Character-level prefix language model.

A backed-off additive-smoothing n-gram sits behind the four-call interface
(init, recent_priors, state_update, reset) so any richer model can be
slotted in without touching the decision loop. Priors cover the full
28-symbol alphabet: the backspace symbol gets a fixed floor probability
and the n-gram distributes the remaining mass over the 27 text symbols.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from rsvpbci.core import ALPHABET, BACKSPACE, UnknownSymbol

TEXT_SYMBOLS = ALPHABET[:-1]  # 'A'..'Z' and '_' (no backspace)
BACKSPACE_PRIOR = 0.01
START = "^"  # internal begin-of-text padding; never a prediction target

MODEL_FORMAT = "rsvpbci-lm"


class EmptyCorpus(ValueError):
    pass


def normalize_text(text: str) -> str:
    """Uppercase; every character outside A-Z and '_' becomes '_'."""
    out = []
    for ch in text.upper():
        out.append(ch if ch in TEXT_SYMBOLS else "_")
    return "".join(out)


class LanguageModel:
    """N-gram counts plus the typing history they condition on."""

    def __init__(self, counts: dict[str, dict[str, int]], order: int,
                 alpha: float):
        if order < 1:
            raise ValueError("order must be >= 1")
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        self.counts = counts
        self.order = order
        self.alpha = alpha
        self.history: list[str] = []
        self._totals = {ctx: sum(row.values()) for ctx, row in counts.items()}

    # -- construction -------------------------------------------------------

    @classmethod
    def from_text(cls, text: str, order: int = 4,
                  alpha: float = 0.1) -> "LanguageModel":
        body = normalize_text(text).strip("_")
        if not body:
            raise EmptyCorpus("corpus is empty after normalization")
        padded = START * (order - 1) + body
        counts: dict[str, dict[str, int]] = {}
        for i in range(order - 1, len(padded)):
            sym = padded[i]
            for k in range(1, order + 1):
                ctx = padded[i - (k - 1):i]
                row = counts.setdefault(ctx, {})
                row[sym] = row.get(sym, 0) + 1
        return cls(counts, order, alpha)

    @classmethod
    def from_file(cls, path, order: int = 4, alpha: float = 0.1) -> "LanguageModel":
        raw = Path(path).read_text(encoding="utf-8")
        try:
            obj = json.loads(raw)
        except ValueError:
            obj = None
        if isinstance(obj, dict) and obj.get("format") == MODEL_FORMAT:
            if obj.get("version") != 1:
                raise ValueError(f"unsupported model version {obj.get('version')}")
            return cls(obj["counts"], int(obj["order"]), float(obj["alpha"]))
        return cls.from_text(raw, order, alpha)

    def save(self, path):
        obj = {"format": MODEL_FORMAT, "version": 1, "order": self.order,
               "alpha": self.alpha, "counts": self.counts}
        Path(path).write_text(json.dumps(obj, sort_keys=True), encoding="utf-8")

    # -- the four-call interface --------------------------------------------

    def recent_priors(self) -> list[tuple[str, float]]:
        """Ranked (symbol, probability) over the full alphabet given the
        current history; descending, ties broken by alphabet order."""
        ctx = self._context()
        dist = self._text_distribution(ctx)
        priors = {sym: (1.0 - BACKSPACE_PRIOR) * p for sym, p in dist.items()}
        priors[BACKSPACE] = BACKSPACE_PRIOR
        order_index = {sym: i for i, sym in enumerate(ALPHABET)}
        return sorted(priors.items(), key=lambda kv: (-kv[1], order_index[kv[0]]))

    def state_update(self, typed) -> list[tuple[str, float]]:
        """Extend the history with typed symbols ('<' removes the most
        recent one) and return priors for the next symbol."""
        for sym in typed:
            if sym not in ALPHABET:
                raise UnknownSymbol(f"not in alphabet: {sym!r}")
            if sym == BACKSPACE:
                if self.history:
                    self.history.pop()
            else:
                self.history.append(sym)
        return self.recent_priors()

    def reset(self):
        """Forget the history; the count table is untouched."""
        self.history.clear()
        return self

    # -- internals -----------------------------------------------------------

    def _context(self) -> str:
        # the typing session is not a document start: an empty history
        # conditions on nothing (unigram), not on the begin-of-text marker
        if self.order == 1:
            return ""
        return "".join(self.history[-(self.order - 1):])

    def _text_distribution(self, ctx: str) -> dict[str, float]:
        """Add-alpha distribution at the longest seen suffix of ctx."""
        for start in range(len(ctx) + 1):
            suffix = ctx[start:]
            if suffix in self.counts:
                row = self.counts[suffix]
                total = self._totals[suffix]
                denom = total + self.alpha * len(TEXT_SYMBOLS)
                return {sym: (row.get(sym, 0) + self.alpha) / denom
                        for sym in TEXT_SYMBOLS}
        # corpus is never empty, so the order-1 (empty) context always exists
        raise RuntimeError("no usable context; model has no counts")


def lm_init(source, order: int = 4, alpha: float = 0.1) -> LanguageModel:
    """Build a model from a corpus text file or a prebuilt model file."""
    return LanguageModel.from_file(source, order, alpha)


def priors_vector(ranked) -> np.ndarray:
    """Ranked (symbol, p) pairs as a vector in alphabet order."""
    out = np.zeros(len(ALPHABET))
    for sym, p in ranked:
        out[ALPHABET.index(sym)] = p
    return out


# Small general-English corpus used when no external corpus is supplied.
DEFAULT_CORPUS = """
The quick brown fox jumps over the lazy dog while the old clock on the
wall keeps time. The morning light comes through the window and the
kettle sings on the stove. The children walk to school along the river
and the teacher greets them at the door. The world turns and the seasons
change, yet the small things of the day stay the same. The baker sets
warm bread on the counter and the smell drifts into the street. People
stop to talk about the weather, about the news, and about the little
plans they hold for the weekend. Hello, says the neighbor, and hello
says the child on the steps. There is a story in every house on the
street, and the stories tell of work and rest, of travel and return,
of the sea and the hills and the long road home. The reader
follows the lines across the page and the words fall into place one
after another. When the evening comes the lamps glow in the windows and
the town grows quiet. The cat sleeps by the fire and the dog waits at
the gate. Tomorrow the sun will rise over the same roofs and the day
will begin again with tea and toast and the sound of the early train.
She said that the letter would arrive in the afternoon and that there
would be time enough to answer it before supper. He thought about the
garden and the fence that needed paint and the ladder in the shed.
These are the plain hours that make a life, held together by the
thousand small words we use to tell each other hello and thanks and
good night. The hull of the old boat rests on the shore where the
shallow water laps at the stones, and the gulls call over the jetty.
"""
