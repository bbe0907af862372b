"""Closed-loop RSVP EEG speller engine.

Streams (synthetic or replayed) EEG over TCP into a time-indexed buffer,
trains a channel-wise PCA -> RDA -> KDE evidence model from calibration
epochs, and fuses per-stimulus likelihood ratios with a character language
model through Bayesian posterior updates to spell text in a simulated
copy-phrase task.
"""

from rsvpbci.core import ALPHABET, DeviceSpec, Parameters, TriggerRecord

__version__ = "0.1.0"

__all__ = ["ALPHABET", "DeviceSpec", "Parameters", "TriggerRecord", "__version__"]
