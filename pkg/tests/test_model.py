import numpy as np
import pytest

from rsvpbci import model as mdl
from rsvpbci.acquisition import TimeSeriesBlock
from rsvpbci.core import TriggerRecord
from rsvpbci.dsp import FilterSpec

FS = 300.0


def make_block(n_samples, channels=3, seed=0):
    rng = np.random.default_rng(seed)
    values = rng.normal(size=(n_samples, channels))
    ts = np.arange(n_samples) / FS
    return TimeSeriesBlock(0.0, FS, ts, values)


def gaussian_dataset(n=200, d=6, seed=1, separation=1.0):
    rng = np.random.default_rng(seed)
    half = n // 2
    a0 = rng.normal(size=(d, d))
    a1 = rng.normal(size=(d, d))
    cov0 = a0 @ a0.T / d + np.eye(d)
    cov1 = a1 @ a1.T / d + np.eye(d)
    mu1 = separation * np.ones(d)
    x = np.vstack([
        rng.multivariate_normal(np.zeros(d), cov0, size=half),
        rng.multivariate_normal(mu1, cov1, size=n - half),
    ])
    y = np.array([0] * half + [1] * (n - half))
    return x, y


def synthetic_epochs(trials=120, channels=3, samples=24, seed=3,
                     bump_scale=1.0):
    """Epochs where the target class carries a bump on every channel."""
    rng = np.random.default_rng(seed)
    data = rng.normal(size=(trials, channels, samples))
    labels = np.tile([0, 1], trials // 2)[:trials]
    bump = np.sin(np.linspace(0, np.pi, samples))
    data[labels == 1] += bump_scale * bump
    return mdl.EpochTensor(data, (0.0, samples / FS)), labels


class TestExtractEpochs:
    def triggers(self, times, targetness="target"):
        labels = ("target", "nontarget")
        return [TriggerRecord("X", targetness if targetness else labels[i % 2], t)
                for i, t in enumerate(times)]

    def test_shape(self):
        block = make_block(3600)
        trigs = self.triggers(np.arange(10) + 1.0)
        epochs, labels = mdl.extract_epochs(block, trigs, (0.0, 0.5))
        assert epochs.data.shape == (10, 3, 150)
        assert labels.tolist() == [1] * 10

    def test_labels_and_exclusions(self):
        block = make_block(3600)
        trigs = [TriggerRecord("A", "target", 1.0),
                 TriggerRecord("+", "fixation", 1.5),
                 TriggerRecord("B", "nontarget", 2.0),
                 TriggerRecord("A", "prompt", 2.5)]
        epochs, labels = mdl.extract_epochs(block, trigs, (0.0, 0.5))
        assert epochs.data.shape[0] == 2
        assert labels.tolist() == [1, 0]

    def test_window_out_of_range(self):
        block = make_block(600)
        trigs = self.triggers([1.9])
        with pytest.raises(mdl.WindowOutOfRange):
            mdl.extract_epochs(block, trigs, (0.0, 0.5))

    def test_fixation_only_empty(self):
        block = make_block(600)
        trigs = [TriggerRecord("+", "fixation", 0.5)]
        epochs, labels = mdl.extract_epochs(block, trigs, (0.0, 0.5))
        assert epochs.data.shape == (0, 3, 150)
        assert labels.size == 0

    def test_values_match_source(self):
        block = make_block(900)
        trigs = self.triggers([1.0])
        epochs, _ = mdl.extract_epochs(block, trigs, (0.0, 0.1))
        np.testing.assert_array_equal(epochs.data[0],
                                      block.values[300:330].T)


class TestChannelPca:
    def test_rank_one_data_single_component(self, rng):
        wave = rng.normal(size=20)
        scales = rng.uniform(0.5, 2.0, size=(30, 1))
        data = np.stack([scales * wave, scales * 2 * wave], axis=1)
        pca = mdl.pca_fit(mdl.EpochTensor(data, (0, 0)), retained=0.95)
        assert [c.shape[0] for c in pca.components] == [1, 1]

    def test_full_retention_preserves_variance(self, rng):
        data = rng.normal(size=(40, 2, 12))
        tensor = mdl.EpochTensor(data, (0, 0))
        pca = mdl.pca_fit(tensor, retained=1.0)
        feats = mdl.pca_transform(pca, tensor)
        d0 = pca.components[0].shape[0]
        for c, sl in ((0, slice(0, d0)), (1, slice(d0, None))):
            centered = data[:, c, :] - data[:, c, :].mean(axis=0)
            orig_var = centered.var(axis=0, ddof=1).sum()
            proj_var = feats[:, sl].var(axis=0, ddof=1).sum()
            assert proj_var == pytest.approx(orig_var, abs=1e-8)
            rank = np.linalg.matrix_rank(centered)
            assert pca.components[c].shape[0] == rank

    def test_orthonormal_rows(self, rng):
        tensor, _ = synthetic_epochs(seed=7)
        pca = mdl.pca_fit(tensor, retained=0.95)
        for comp in pca.components:
            gram = comp @ comp.T
            np.testing.assert_allclose(gram, np.eye(comp.shape[0]), atol=1e-8)

    def test_mean_trial_maps_to_zero(self, rng):
        tensor, _ = synthetic_epochs(seed=8)
        pca = mdl.pca_fit(tensor, retained=0.95)
        mean_trial = tensor.data.mean(axis=0, keepdims=True)
        feats = mdl.pca_transform(pca, mdl.EpochTensor(mean_trial, (0, 0)))
        np.testing.assert_allclose(feats, 0.0, atol=1e-8)

    def test_projected_covariance_diagonal(self, rng):
        data = rng.normal(size=(60, 1, 10)) @ np.diag(np.linspace(1, 3, 10))
        tensor = mdl.EpochTensor(data, (0, 0))
        pca = mdl.pca_fit(tensor, retained=0.99)
        feats = mdl.pca_transform(pca, tensor)
        cov = np.cov(feats, rowvar=False)
        off = cov - np.diag(np.diag(cov))
        assert np.abs(off).max() < 1e-8 * np.diag(cov).max()

    def test_degenerate_channel_flagged(self):
        data = np.zeros((10, 2, 8))
        data[:, 1, :] = np.random.default_rng(0).normal(size=(10, 8))
        with pytest.warns(mdl.DegenerateChannel):
            pca = mdl.pca_fit(mdl.EpochTensor(data, (0, 0)), retained=0.95)
        assert pca.degenerate == [0]
        assert pca.components[0].shape == (1, 8)
        assert np.linalg.norm(pca.components[0]) == pytest.approx(1.0)


class QdaOracle:
    """Independent quadratic-discriminant scores from raw class stats."""

    def __init__(self, x, y):
        self.params = {}
        n = len(y)
        for k in (0, 1):
            xk = x[y == k]
            mu = xk.mean(axis=0)
            cov = (xk - mu).T @ (xk - mu) / len(xk)
            sign, logdet = np.linalg.slogdet(cov)
            assert sign > 0
            self.params[k] = (mu, np.linalg.inv(cov), logdet,
                              np.log(len(xk) / n))

    def scores(self, x):
        dens = []
        for k in (0, 1):
            mu, inv, logdet, logp = self.params[k]
            diff = x - mu
            maha = np.einsum("ij,jk,ik->i", diff, inv, diff)
            dens.append(logp - 0.5 * (logdet + maha + x.shape[1] * np.log(2 * np.pi)))
        return dens[1] - dens[0]


class TestRda:
    def test_matches_qda_oracle_at_zero_regularization(self):
        x, y = gaussian_dataset(n=200, d=6, seed=11)
        rda = mdl.rda_fit(x, y, lam=0.0, gamma=0.0)
        mine = mdl.rda_transform(rda, x)
        oracle = QdaOracle(x, y).scores(x)
        assert np.abs(mine - oracle).max() < 1e-8

    def test_full_shrinkage_full_ridge_is_affine(self):
        x, y = gaussian_dataset(n=100, d=4, seed=12)
        rda = mdl.rda_fit(x, y, lam=1.0, gamma=1.0)
        p0 = np.zeros(4)
        direction = np.ones(4)
        pts = np.array([p0, p0 + direction, p0 + 2 * direction])
        s = rda.scores(pts)
        second_difference = s[2] - 2 * s[1] + s[0]
        assert abs(second_difference) < 1e-8

    def test_score_positive_at_target_mean(self):
        x, y = gaussian_dataset(n=100, d=4, seed=13)  # equal class sizes
        rda = mdl.rda_fit(x, y, lam=1.0, gamma=0.0)
        s = rda.scores(rda.stats.means[1][None, :])
        assert s[0] > 0

    def test_scale_invariance_shared_covariance(self):
        x, y = gaussian_dataset(n=100, d=4, seed=14)
        s1 = mdl.rda_fit(x, y, 1.0, 0.0).scores(x)
        s2 = mdl.rda_fit(5.0 * x, y, 1.0, 0.0).scores(5.0 * x)
        np.testing.assert_allclose(s1, s2, rtol=1e-8, atol=1e-10)

    def test_singular_covariance_at_gamma_zero(self):
        x = np.zeros((8, 5))
        x[:, 0] = np.arange(8.0)  # rank-1 features, singular covariance
        y = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        with pytest.raises(mdl.SingularCovariance):
            mdl.rda_fit(x, y, lam=0.0, gamma=0.0)
        mdl.rda_fit(x, y, lam=0.0, gamma=0.5)  # ridge rescues it

    def test_hyperparameters_validated(self):
        x, y = gaussian_dataset(n=40, d=3, seed=15)
        with pytest.raises(ValueError):
            mdl.rda_fit(x, y, lam=1.5, gamma=0.0)


class TestKde:
    def test_closed_form_at_duplicated_point(self):
        kde = mdl.kde_fit(np.array([0.0, 0.0, 5.0, 5.0]),
                          np.array([1, 1, 0, 0]), bandwidth=1.0)
        dens = kde.density_pos(np.array([0.0]))[0]
        assert dens == pytest.approx(1 / np.sqrt(2 * np.pi), abs=1e-12)

    def test_integrates_to_one(self, rng):
        scores = np.concatenate([rng.normal(0, 1, 40), rng.normal(3, 2, 40)])
        labels = np.array([0] * 40 + [1] * 40)
        kde = mdl.kde_fit(scores, labels)
        for dens, sample, h in ((kde.density_pos, kde.scores_pos, kde.bandwidth_pos),
                                (kde.density_neg, kde.scores_neg, kde.bandwidth_neg)):
            grid = np.linspace(sample.min() - 5 * h, sample.max() + 5 * h, 4001)
            integral = np.trapezoid(dens(grid), grid)
            assert integral == pytest.approx(1.0, abs=1e-3)

    def test_far_point_vanishes(self, rng):
        scores = np.concatenate([rng.normal(0, 1, 20), rng.normal(1, 1, 20)])
        labels = np.array([0] * 20 + [1] * 20)
        kde = mdl.kde_fit(scores, labels)
        far = scores.max() + 20 * max(kde.bandwidth_pos, kde.bandwidth_neg)
        p1, p0 = mdl.kde_likelihoods(kde, far)
        assert p1[0] < 1e-6 and p0[0] < 1e-6

    def test_insufficient_class_data(self):
        with pytest.raises(mdl.InsufficientClassData):
            mdl.kde_fit(np.array([1.0, 2.0, 3.0]), np.array([1, 0, 0]))

    def test_densities_strictly_positive(self, rng):
        scores = rng.normal(size=30)
        labels = (np.arange(30) % 2 == 0).astype(int)
        kde = mdl.kde_fit(scores, labels)
        grid = np.linspace(-4, 4, 100)
        assert (kde.density_pos(grid) > 0).all()
        assert (kde.density_neg(grid) > 0).all()


class TestAuc:
    def test_perfect_separation(self):
        assert mdl.auc([1, 2], [0, 1]) == 1.0

    def test_all_ties(self):
        assert mdl.auc([3, 3, 3, 3], [0, 1, 0, 1]) == 0.5

    def test_enumerated_pairs(self):
        assert mdl.auc([3, 1, 2, 0], [1, 0, 1, 0]) == 1.0

    def test_pair_enumeration_oracle(self, rng):
        scores = rng.normal(size=60)
        scores[rng.integers(0, 60, 10)] = 0.5  # force some ties
        labels = rng.integers(0, 2, 60)
        labels[:2] = [0, 1]
        pos = scores[labels == 1]
        neg = scores[labels == 0]
        wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
        assert mdl.auc(scores, labels) == pytest.approx(
            wins / (len(pos) * len(neg)), abs=1e-12)

    def test_monotone_transform_invariance(self, rng):
        scores = rng.normal(size=80)
        labels = rng.integers(0, 2, 80)
        labels[:2] = [0, 1]
        base = mdl.auc(scores, labels)
        assert mdl.auc(np.exp(scores), labels) == pytest.approx(base, abs=1e-12)
        assert mdl.auc(3 * scores + 7, labels) == pytest.approx(base, abs=1e-12)

    def test_one_class_only(self):
        with pytest.raises(mdl.OneClassOnly):
            mdl.auc([1, 2, 3], [1, 1, 1])


class TestCrossValidation:
    def test_matches_exhaustive_grid_oracle(self):
        tensor, labels = synthetic_epochs(trials=120, seed=21, bump_scale=0.35)
        result = mdl.cross_validation(tensor, labels, k_folds=10, seed=5)

        folds = mdl.cv_folds(120, 10, seed=5)
        best = (None, None, -np.inf)
        for lam in mdl.GRID:
            for gamma in mdl.GRID:
                total, usable = 0.0, True
                for val_idx in folds:
                    mask = np.ones(120, dtype=bool)
                    mask[val_idx] = False
                    train = mdl.EpochTensor(tensor.data[mask], tensor.window)
                    val = mdl.EpochTensor(tensor.data[val_idx], tensor.window)
                    pca = mdl.pca_fit(train, 0.95)
                    try:
                        rda = mdl.rda_fit(mdl.pca_transform(pca, train),
                                          labels[mask], float(lam), float(gamma))
                    except mdl.SingularCovariance:
                        usable = False  # grid point excluded, as contracted
                        break
                    total += mdl.auc(rda.scores(mdl.pca_transform(pca, val)),
                                     labels[val_idx])
                if not usable:
                    continue
                mean = total / len(folds)
                if mean > best[2]:
                    best = (float(lam), float(gamma), mean)
        assert (result.lam, result.gamma) == (best[0], best[1])
        assert result.mean_auc == pytest.approx(best[2], abs=1e-12)

    def test_identical_distributions_near_chance(self):
        tensor, labels = synthetic_epochs(trials=400, seed=22, bump_scale=0.0)
        result = mdl.cross_validation(tensor, labels, k_folds=10, seed=6)
        assert 0.4 <= result.mean_auc <= 0.6

    def test_fold_missing_class(self):
        data = np.random.default_rng(0).normal(size=(4, 2, 8))
        labels = np.array([0, 0, 1, 1])
        # find a seed whose 2-fold shuffle puts both targets in one fold
        for seed in range(50):
            folds = mdl.cv_folds(4, 2, seed)
            if any(len(np.unique(labels[f])) == 1 for f in folds):
                with pytest.raises(mdl.FoldMissingClass):
                    mdl.cross_validation(mdl.EpochTensor(data, (0, 0)),
                                         labels, k_folds=2, seed=seed)
                return
        pytest.fail("no seed produced a single-class fold")

    def test_unknown_split_rejected(self):
        tensor, labels = synthetic_epochs(trials=40, seed=23)
        with pytest.raises(ValueError):
            mdl.cross_validation(tensor, labels, split="stratified")


class TestPipeline:
    def test_fit_transform_equals_fit_then_transform(self):
        tensor, labels = synthetic_epochs(seed=31)
        m1, (p1, n1) = mdl.pipeline_fit_transform(tensor, labels, 0.5, 0.3)
        m2 = mdl.pipeline_fit(tensor, labels, 0.5, 0.3)
        p2, n2 = m2.transform(tensor)
        np.testing.assert_allclose(p1, p2, atol=1e-12)
        np.testing.assert_allclose(n1, n2, atol=1e-12)

    def test_high_snr_resubstitution_auc(self):
        tensor, labels = synthetic_epochs(trials=200, seed=32, bump_scale=2.0)
        m = mdl.pipeline_fit(tensor, labels, 0.5, 0.3)
        assert mdl.auc(m.scores(tensor), labels) >= 0.95

    def test_shuffled_labels_near_chance(self, rng):
        tensor, labels = synthetic_epochs(trials=400, seed=33, bump_scale=0.5)
        shuffled = rng.permutation(labels)
        result = mdl.cross_validation(tensor, shuffled, k_folds=10, seed=7)
        assert 0.4 <= result.mean_auc <= 0.6

    def test_likelihood_pair_orientation(self):
        tensor, labels = synthetic_epochs(trials=200, seed=34, bump_scale=2.0)
        m = mdl.pipeline_fit(tensor, labels, 0.5, 0.3)
        lik_pos, lik_neg = m.transform(tensor)
        ratios = lik_pos / np.clip(lik_neg, 1e-300, None)
        assert np.median(ratios[labels == 1]) > np.median(ratios[labels == 0])


class TestSerialization:
    def fitted(self, seed=41):
        tensor, labels = synthetic_epochs(trials=80, seed=seed, bump_scale=1.0)
        return tensor, labels, mdl.pipeline_fit(
            tensor, labels, 0.4, 0.2,
            filter_spec=FilterSpec(2, 50, 2, 60, 30, 2), sample_rate=FS)

    def test_round_trip_bit_identical_transforms(self, tmp_path):
        tensor, labels, m = self.fitted()
        path = tmp_path / "model.bin"
        m.save(path)
        loaded = mdl.SignalModel.load(path)
        p1, n1 = m.transform(tensor)
        p2, n2 = loaded.transform(tensor)
        np.testing.assert_array_equal(p1, p2)
        np.testing.assert_array_equal(n1, n2)
        np.testing.assert_array_equal(m.scores(tensor), loaded.scores(tensor))
        assert loaded.filter_spec == m.filter_spec

    def test_deterministic_bytes(self, tmp_path):
        _, _, m = self.fitted()
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        m.save(a)
        m.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_refit_same_data_same_bytes(self, tmp_path):
        t1, l1, m1 = self.fitted(seed=42)
        t2, l2, m2 = self.fitted(seed=42)
        a, b = tmp_path / "a.bin", tmp_path / "b.bin"
        m1.save(a)
        m2.save(b)
        assert a.read_bytes() == b.read_bytes()

    def test_bad_magic_rejected(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTAMODELxxxx")
        with pytest.raises(ValueError):
            mdl.SignalModel.load(path)
