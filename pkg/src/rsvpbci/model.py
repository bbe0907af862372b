"""Evidence modeling pipeline.

Calibration epochs go through channel-wise PCA (per-channel projection
matrices concatenated into one feature vector), a regularized discriminant
analysis producing a one-dimensional log-likelihood-ratio score, and
Gaussian kernel density estimates of the per-class score distributions.
Inference returns class-conditional likelihoods for each trial, which the
task layer turns into posterior updates.

Hyperparameters (shrinkage lam toward the pooled covariance, ridge gamma
toward a scaled identity) are picked by k-fold cross-validation maximizing
validation AUC over an 11 x 11 grid.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular

from rsvpbci._accel import kde_density
from rsvpbci.dsp import FilterSpec

GRID = np.round(np.arange(0.0, 1.01, 0.1), 10)


class WindowOutOfRange(ValueError):
    def __init__(self, trigger_index: int, detail: str = ""):
        self.trigger_index = trigger_index
        super().__init__(f"trigger {trigger_index}: {detail}")


class DegenerateChannel(UserWarning):
    pass


class SingularCovariance(np.linalg.LinAlgError):
    pass


class InsufficientClassData(ValueError):
    pass


class OneClassOnly(ValueError):
    pass


class FoldMissingClass(ValueError):
    pass


# --------------------------------------------------------------------------
# Epoch extraction
# --------------------------------------------------------------------------

@dataclass
class EpochTensor:
    """trials x channels x samples slices, relative to stimulus onsets."""

    data: np.ndarray
    window: tuple[float, float]  # (offset, length) in seconds

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise ValueError("epoch tensor must be trials x channels x samples")

    @property
    def trial_count(self):
        return self.data.shape[0]


def extract_epochs(block, triggers, window=(0.0, 0.5)):
    """Slice one epoch per target/nontarget trigger out of a queried block.

    Onsets are rounded to the nearest sample; fixation and prompt markers
    are skipped. Returns (EpochTensor, labels) with labels 1 for target.
    """
    offset, length = window
    fs = block.sample_rate
    n_samples = int(round(length * fs))
    data = block.channel_data()  # channels x samples
    n_total = data.shape[1]
    t0 = block.timestamps[0] if len(block.timestamps) else block.start

    epochs, labels = [], []
    for i, trg in enumerate(triggers):
        if trg.targetness not in ("target", "nontarget"):
            continue
        start_idx = int(round((trg.timestamp + offset - t0) * fs))
        if start_idx < 0 or start_idx + n_samples > n_total:
            raise WindowOutOfRange(i, f"[{start_idx}, {start_idx + n_samples}) "
                                      f"outside 0..{n_total}")
        epochs.append(data[:, start_idx:start_idx + n_samples])
        labels.append(1 if trg.targetness == "target" else 0)

    shape = (len(epochs), data.shape[0], n_samples)
    tensor = np.array(epochs) if epochs else np.empty(shape)
    return EpochTensor(tensor.reshape(shape), window), np.asarray(labels, dtype=int)


# --------------------------------------------------------------------------
# Channel-wise PCA
# --------------------------------------------------------------------------

@dataclass
class ChannelPca:
    """Per-channel projection matrices with orthonormal rows."""

    components: list[np.ndarray]   # one (M_c x N) matrix per channel
    means: list[np.ndarray]        # one (N,) mean per channel
    retained: float
    degenerate: list[int] = field(default_factory=list)

    @property
    def feature_dim(self) -> int:
        return sum(a.shape[0] for a in self.components)


def pca_fit(x, retained: float = 0.95) -> ChannelPca:
    """Fit one PCA per channel over trials; keep the smallest component
    count reaching the retained explained-variance fraction."""
    data = x.data if isinstance(x, EpochTensor) else np.asarray(x, dtype=np.float64)
    trials, channels, _ = data.shape
    if trials < 2:
        raise ValueError("need at least 2 trials to fit PCA")
    if not 0 < retained <= 1:
        raise ValueError("retained fraction must be in (0, 1]")

    components, means, degenerate = [], [], []
    for c in range(channels):
        xc = data[:, c, :]
        mean = xc.mean(axis=0)
        centered = xc - mean
        cov = centered.T @ centered / (trials - 1)
        evals, evecs = np.linalg.eigh(cov)
        evals = np.clip(evals[::-1], 0.0, None)
        evecs = evecs[:, ::-1]
        total = evals.sum()
        if total <= 0:
            warnings.warn(f"channel {c} has zero variance", DegenerateChannel)
            comp = np.zeros((1, xc.shape[1]))
            comp[0, 0] = 1.0
            degenerate.append(c)
        else:
            tol = evals[0] * 1e-10
            nonzero = max(1, int((evals > tol).sum()))
            cum = np.cumsum(evals[:nonzero]) / total
            m = int(np.searchsorted(cum, retained - 1e-12) + 1)
            m = min(m, nonzero)
            comp = evecs[:, :m].T
        components.append(np.ascontiguousarray(comp))
        means.append(mean)
    return ChannelPca(components, means, retained, degenerate)


def pca_transform(pca: ChannelPca, x) -> np.ndarray:
    """Project trials to concatenated per-channel features (T x d)."""
    data = x.data if isinstance(x, EpochTensor) else np.asarray(x, dtype=np.float64)
    feats = [
        (data[:, c, :] - pca.means[c]) @ pca.components[c].T
        for c in range(data.shape[1])
    ]
    return np.concatenate(feats, axis=1)


# --------------------------------------------------------------------------
# Regularized discriminant analysis
# --------------------------------------------------------------------------

@dataclass
class ClassStats:
    """Sufficient statistics shared by every (lam, gamma) grid point."""

    means: np.ndarray        # 2 x d
    covariances: np.ndarray  # 2 x d x d, per-class ML covariances
    pooled: np.ndarray       # d x d
    log_priors: np.ndarray   # 2


def class_statistics(features: np.ndarray, labels: np.ndarray) -> ClassStats:
    features = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels)
    if set(np.unique(labels)) - {0, 1}:
        raise ValueError("labels must be 0/1")
    if len(np.unique(labels)) < 2:
        raise InsufficientClassData("both classes required")
    n, d = features.shape
    means = np.empty((2, d))
    covs = np.empty((2, d, d))
    counts = np.empty(2)
    for k in (0, 1):
        xk = features[labels == k]
        counts[k] = len(xk)
        means[k] = xk.mean(axis=0)
        centered = xk - means[k]
        covs[k] = centered.T @ centered / len(xk)
    pooled = (counts[0] * covs[0] + counts[1] * covs[1]) / n
    return ClassStats(means, covs, pooled, np.log(counts / n))


@dataclass
class RdaModel:
    """Gaussian two-class model with shrinkage and ridge regularization.

    Regularized covariance per class k:
        S_k(lam)        = (1 - lam) * S_k + lam * S_pooled
        S_k(lam, gamma) = (1 - gamma) * S_k(lam)
                          + gamma * (trace(S_k(lam)) / d) * I
    The transform is the posterior log-ratio
        s = log p(y=1 | f) - log p(y=0 | f)
    under Gaussian class densities and empirical priors, so s > 0 predicts
    the target class.
    """

    lam: float
    gamma: float
    stats: ClassStats
    _chol: np.ndarray = field(init=False, repr=False)
    _logdet: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if not (0 <= self.lam <= 1 and 0 <= self.gamma <= 1):
            raise ValueError("lam and gamma must lie in [0, 1]")
        d = self.stats.means.shape[1]
        self._chol = np.empty((2, d, d))
        self._logdet = np.empty(2)
        for k in (0, 1):
            shrunk = ((1 - self.lam) * self.stats.covariances[k]
                      + self.lam * self.stats.pooled)
            reg = ((1 - self.gamma) * shrunk
                   + self.gamma * (np.trace(shrunk) / d) * np.eye(d))
            try:
                self._chol[k] = np.linalg.cholesky(reg)
            except np.linalg.LinAlgError:
                raise SingularCovariance(
                    f"class {k} covariance singular at lam={self.lam}, "
                    f"gamma={self.gamma}; raise gamma") from None
            self._logdet[k] = 2.0 * np.sum(np.log(np.diag(self._chol[k])))

    def scores(self, features: np.ndarray) -> np.ndarray:
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        d = features.shape[1]
        log_dens = np.empty((features.shape[0], 2))
        for k in (0, 1):
            diff = (features - self.stats.means[k]).T  # d x T
            y = solve_triangular(self._chol[k], diff, lower=True)
            maha = np.sum(y * y, axis=0)
            log_dens[:, k] = (self.stats.log_priors[k]
                              - 0.5 * (self._logdet[k] + maha
                                       + d * np.log(2 * np.pi)))
        return log_dens[:, 1] - log_dens[:, 0]


def rda_fit(features, labels, lam: float, gamma: float) -> RdaModel:
    """Fit class statistics and build the regularized model."""
    return RdaModel(lam, gamma, class_statistics(features, labels))


def rda_transform(model: RdaModel, features) -> np.ndarray:
    """Log-likelihood-ratio score per trial; positive favors target."""
    return model.scores(features)


# --------------------------------------------------------------------------
# Kernel density estimates over scores
# --------------------------------------------------------------------------

def silverman_bandwidth(samples: np.ndarray) -> float:
    samples = np.asarray(samples, dtype=np.float64)
    n = len(samples)
    sd = samples.std(ddof=1)
    q75, q25 = np.percentile(samples, [75, 25])
    iqr = (q75 - q25) / 1.34
    spread = min(sd, iqr) if iqr > 0 else sd
    h = 0.9 * spread * n ** (-0.2)
    return h if h > 0 else 1.0


@dataclass
class KdeModel:
    """Gaussian kernels around each training score, one set per class."""

    scores_pos: np.ndarray
    scores_neg: np.ndarray
    bandwidth_pos: float
    bandwidth_neg: float

    def density_pos(self, s) -> np.ndarray:
        return kde_density(self.scores_pos, self.bandwidth_pos, s)

    def density_neg(self, s) -> np.ndarray:
        return kde_density(self.scores_neg, self.bandwidth_neg, s)


def kde_fit(scores, labels, bandwidth: float | None = None) -> KdeModel:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if len(pos) < 2 or len(neg) < 2:
        raise InsufficientClassData("need at least 2 scores per class")
    h_pos = bandwidth if bandwidth is not None else silverman_bandwidth(pos)
    h_neg = bandwidth if bandwidth is not None else silverman_bandwidth(neg)
    return KdeModel(np.sort(pos), np.sort(neg), float(h_pos), float(h_neg))


def kde_likelihoods(model: KdeModel, s):
    """(p(s | target), p(s | nontarget)) for one score or an array."""
    return model.density_pos(s), model.density_neg(s)


# --------------------------------------------------------------------------
# AUC and cross-validation
# --------------------------------------------------------------------------

def auc(scores, labels) -> float:
    """Exact Mann-Whitney AUC: P(s_pos > s_neg) + 0.5 P(tie)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise OneClassOnly("need scores from both classes")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j < len(scores) and sorted_scores[j] == sorted_scores[i]:
            j += 1
        ranks[order[i:j]] = 0.5 * (i + j + 1)  # average rank, 1-based
        i = j
    rank_sum_pos = ranks[labels == 1].sum()
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2
    return float(u / (n_pos * n_neg))


def cv_folds(n: int, k_folds: int, seed=0) -> list[np.ndarray]:
    """Contiguous equal blocks of a seeded shuffle ("uniform" split)."""
    perm = np.random.default_rng(seed).permutation(n)
    return [fold for fold in np.array_split(perm, k_folds) if len(fold)]


@dataclass
class CvResult:
    lam: float
    gamma: float
    mean_auc: float
    grid_auc: np.ndarray  # 11 x 11, indexed [lam, gamma]
    folds: list


def cross_validation(x, y, model=None, opt_el: str = "rda",
                     k_folds: int = 10, split: str = "uniform",
                     retained: float = 0.95, seed=0) -> CvResult:
    """Grid-search (lam, gamma) over {0.0 .. 1.0}^2 by mean validation AUC.

    Folds are contiguous blocks of a seeded shuffle. Within each fold the
    PCA is refit on the training portion, so no validation data leaks into
    the features. Ties resolve to the smallest lam, then smallest gamma.
    `model` may carry a ChannelPca retained fraction override; `opt_el`
    names the optimized stage (only "rda" is implemented).
    """
    if split != "uniform":
        raise ValueError(f"unknown split {split!r}")
    if opt_el != "rda":
        raise ValueError(f"cannot optimize element {opt_el!r}")
    if model is not None and hasattr(model, "retained"):
        retained = model.retained

    data = x if isinstance(x, EpochTensor) else EpochTensor(x, (0.0, 0.0))
    y = np.asarray(y)
    n = data.trial_count
    folds = cv_folds(n, k_folds, seed)

    grid_sum = np.zeros((len(GRID), len(GRID)))
    valid = np.ones((len(GRID), len(GRID)), dtype=bool)
    for fold_idx, val_idx in enumerate(folds):
        train_mask = np.ones(n, dtype=bool)
        train_mask[val_idx] = False
        y_train, y_val = y[train_mask], y[val_idx]
        if len(np.unique(y_train)) < 2 or len(np.unique(y_val)) < 2:
            raise FoldMissingClass(f"fold {fold_idx} lacks a class")
        train = EpochTensor(data.data[train_mask], data.window)
        val = EpochTensor(data.data[val_idx], data.window)
        pca = pca_fit(train, retained)
        f_train = pca_transform(pca, train)
        f_val = pca_transform(pca, val)
        stats = class_statistics(f_train, y_train)
        for i, lam in enumerate(GRID):
            for j, gamma in enumerate(GRID):
                if not valid[i, j]:
                    continue
                try:
                    rda = RdaModel(float(lam), float(gamma), stats)
                except SingularCovariance:
                    valid[i, j] = False
                    continue
                grid_sum[i, j] += auc(rda.scores(f_val), y_val)

    grid_auc = np.where(valid, grid_sum / len(folds), -np.inf)
    best = np.unravel_index(int(np.argmax(grid_auc)), grid_auc.shape)
    # argmax scans lam-major then gamma, matching the tie rule already
    return CvResult(float(GRID[best[0]]), float(GRID[best[1]]),
                    float(grid_auc[best]), grid_auc, folds)


# --------------------------------------------------------------------------
# Full pipeline
# --------------------------------------------------------------------------

MODEL_MAGIC = b"RSVPMDL1"


@dataclass
class SignalModel:
    """Fitted PCA + RDA + KDE with the training-time filter settings."""

    pca: ChannelPca
    rda: RdaModel
    kde: KdeModel
    filter_spec: FilterSpec
    sample_rate: float
    calibration_auc: float = float("nan")

    def transform(self, x):
        """Per-trial class-conditional likelihoods (p(e|target), p(e|nontarget))."""
        feats = pca_transform(self.pca, x)
        scores = self.rda.scores(feats)
        return kde_likelihoods(self.kde, scores)

    def scores(self, x) -> np.ndarray:
        return self.rda.scores(pca_transform(self.pca, x))

    def save(self, path):
        save_model(self, path)

    @classmethod
    def load(cls, path) -> "SignalModel":
        return load_model(path)


def pipeline_fit(x, y, lam: float, gamma: float, retained: float = 0.95,
                 filter_spec: FilterSpec | None = None,
                 sample_rate: float = 300.0, calibration_folds: int = 10,
                 seed: int = 0) -> SignalModel:
    """Fit PCA on the epochs, RDA on the features, KDE on the scores.

    The KDE is fit on out-of-fold scores (each trial scored by a model
    trained without it) so the class-conditional likelihoods are
    calibrated for unseen data; in-sample scores from a near-saturated
    discriminant would make fresh epochs look impossibly unlike the
    target class. Falls back to in-sample scores when the folds cannot
    hold both classes.
    """
    data = x if isinstance(x, EpochTensor) else EpochTensor(x, (0.0, 0.0))
    y = np.asarray(y)
    pca = pca_fit(data, retained)
    feats = pca_transform(pca, data)
    rda = rda_fit(feats, y, lam, gamma)
    scores = _held_out_scores(data, y, lam, gamma, retained,
                              calibration_folds, seed)
    if scores is None:
        scores = rda.scores(feats)
    kde = kde_fit(scores, y)
    return SignalModel(pca, rda, kde, filter_spec or FilterSpec(),
                       sample_rate)


def _held_out_scores(data: EpochTensor, y: np.ndarray, lam: float,
                     gamma: float, retained: float, k_folds: int,
                     seed: int) -> np.ndarray | None:
    """Score every trial with a pipeline fit on the other folds; None when
    any fold breaks (missing class, singular covariance)."""
    n = data.trial_count
    if n < 2 * k_folds:
        return None
    scores = np.empty(n)
    for val_idx in cv_folds(n, k_folds, seed):
        mask = np.ones(n, dtype=bool)
        mask[val_idx] = False
        if len(np.unique(y[mask])) < 2:
            return None
        train = EpochTensor(data.data[mask], data.window)
        try:
            pca = pca_fit(train, retained)
            rda = rda_fit(pca_transform(pca, train), y[mask], lam, gamma)
        except (SingularCovariance, InsufficientClassData):
            return None
        val = EpochTensor(data.data[val_idx], data.window)
        scores[val_idx] = rda.scores(pca_transform(pca, val))
    return scores


def pipeline_transform(model: SignalModel, x):
    return model.transform(x)


def pipeline_fit_transform(x, y, lam: float, gamma: float,
                           retained: float = 0.95,
                           filter_spec: FilterSpec | None = None,
                           sample_rate: float = 300.0,
                           calibration_folds: int = 10, seed: int = 0):
    model = pipeline_fit(x, y, lam, gamma, retained, filter_spec,
                         sample_rate, calibration_folds, seed)
    return model, model.transform(x)


# --------------------------------------------------------------------------
# Serialization: versioned binary container, deterministic bytes
# --------------------------------------------------------------------------

def _model_arrays(model: SignalModel) -> dict[str, np.ndarray]:
    arrays = {}
    for c, (comp, mean) in enumerate(zip(model.pca.components, model.pca.means)):
        arrays[f"pca_components_{c}"] = comp
        arrays[f"pca_mean_{c}"] = mean
    arrays["rda_means"] = model.rda.stats.means
    arrays["rda_covariances"] = model.rda.stats.covariances
    arrays["rda_pooled"] = model.rda.stats.pooled
    arrays["rda_log_priors"] = model.rda.stats.log_priors
    arrays["kde_scores_pos"] = model.kde.scores_pos
    arrays["kde_scores_neg"] = model.kde.scores_neg
    return arrays


def save_model(model: SignalModel, path):
    """Write the model as MAGIC | u64 header length | JSON header | raw
    float64 buffers. Floats in the header round-trip exactly (repr), and
    the byte stream is deterministic for identical models."""
    arrays = {k: np.ascontiguousarray(v, dtype="<f8")
              for k, v in _model_arrays(model).items()}
    fspec = model.filter_spec
    meta = {
        "version": 1,
        "channel_count": len(model.pca.components),
        "retained": model.pca.retained,
        "degenerate": list(model.pca.degenerate),
        "lam": model.rda.lam,
        "gamma": model.rda.gamma,
        "kde_bandwidth_pos": model.kde.bandwidth_pos,
        "kde_bandwidth_neg": model.kde.bandwidth_neg,
        "filter": {
            "low_cutoff": fspec.low_cutoff,
            "high_cutoff": fspec.high_cutoff,
            "order": fspec.order,
            "notch_freq": fspec.notch_freq,
            "notch_quality": fspec.notch_quality,
            "downsample_factor": fspec.downsample_factor,
        },
        "sample_rate": model.sample_rate,
        "calibration_auc": model.calibration_auc,
        "arrays": {},
    }
    offset = 0
    for name in sorted(arrays):
        arr = arrays[name]
        meta["arrays"][name] = {"shape": list(arr.shape), "offset": offset}
        offset += arr.nbytes
    header = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as f:
        f.write(MODEL_MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for name in sorted(arrays):
            f.write(arrays[name].tobytes())


def load_model(path) -> SignalModel:
    with open(path, "rb") as f:
        magic = f.read(len(MODEL_MAGIC))
        if magic != MODEL_MAGIC:
            raise ValueError(f"not a model file: {path}")
        header_len = int.from_bytes(f.read(8), "little")
        meta = json.loads(f.read(header_len).decode())
        blob = f.read()
    if meta["version"] != 1:
        raise ValueError(f"unsupported model version {meta['version']}")

    def read_array(name):
        info = meta["arrays"][name]
        shape = tuple(info["shape"])
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f8", count=n,
                            offset=info["offset"]).copy()
        return arr.reshape(shape)

    comps, means = [], []
    for c in range(meta["channel_count"]):
        comps.append(read_array(f"pca_components_{c}"))
        means.append(read_array(f"pca_mean_{c}"))
    pca = ChannelPca(comps, means, meta["retained"],
                     list(meta["degenerate"]))
    stats = ClassStats(read_array("rda_means"), read_array("rda_covariances"),
                       read_array("rda_pooled"), read_array("rda_log_priors"))
    rda = RdaModel(meta["lam"], meta["gamma"], stats)
    kde = KdeModel(read_array("kde_scores_pos"), read_array("kde_scores_neg"),
                   meta["kde_bandwidth_pos"], meta["kde_bandwidth_neg"])
    f = meta["filter"]
    fspec = FilterSpec(f["low_cutoff"], f["high_cutoff"], int(f["order"]),
                       f["notch_freq"], f["notch_quality"],
                       int(f["downsample_factor"]))
    return SignalModel(pca, rda, kde, fspec, meta["sample_rate"],
                       meta["calibration_auc"])
