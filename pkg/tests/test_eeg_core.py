import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eeg_align import eeg_core as ec
from eeg_align.eeg_core import EpochSet, TrialMeta
from eeg_align.errors import (
    CorruptionError,
    FormatError,
    NumericalError,
    RangeError,
    ShapeError,
    UnsupportedRateError,
    ValidationError,
)


def make_epochs(trials, rate=1000.0, origin=-200.0, concepts=None, split="train"):
    trials = np.asarray(trials, dtype=np.float32)
    n, c, _ = trials.shape
    concepts = concepts or ["c0"] * n
    meta = [TrialMeta(concepts[i], f"img{i:05d}", 0, split) for i in range(n)]
    return EpochSet("p01", rate, origin, [f"ch{j}" for j in range(c)], trials, meta)


def gaussian_epochs(cov, n_trials, n_samples, seed, n_concepts=10):
    rng = np.random.default_rng(seed)
    chol = np.linalg.cholesky(cov)
    x = np.einsum("cd,ndt->nct", chol, rng.standard_normal((n_trials, cov.shape[0], n_samples)))
    concepts = [f"c{i % n_concepts}" for i in range(n_trials)]
    return make_epochs(x, rate=250.0, origin=0.0, concepts=concepts)


def pooled_covariance(x):
    # independent recomputation: covariance across trials per time point, averaged over time
    covs = [np.cov(x[:, :, t], rowvar=False) for t in range(x.shape[2])]
    return np.mean(covs, axis=0)


# --- EpochSet / EEGPack -------------------------------------------------------


def test_duplicate_triple_rejected():
    meta = [TrialMeta("c", "i", 0), TrialMeta("c", "i", 0)]
    with pytest.raises(ValidationError):
        EpochSet("p", 1000, 0, ["a"], np.zeros((2, 1, 4)), meta)


def test_meta_length_must_match():
    with pytest.raises(ValidationError):
        EpochSet("p", 1000, 0, ["a"], np.zeros((3, 1, 4)), [TrialMeta("c", "i", 0)])


def test_load_shape_echoes_manifest(tmp_path):
    rng = np.random.default_rng(0)
    ep = make_epochs(rng.standard_normal((400, 63, 250)), rate=250.0, origin=0.0)
    ec.save_eegpack(ep, tmp_path / "pack")
    loaded = ec.load_eegpack(tmp_path / "pack")
    assert loaded.trials.shape == (400, 63, 250)
    assert loaded.meta == ep.meta
    assert loaded.channel_names == ep.channel_names


def test_roundtrip_bit_exact(tmp_path):
    rng = np.random.default_rng(1)
    ep = make_epochs(rng.standard_normal((7, 5, 33)) * 1e3)
    ec.save_eegpack(ep, tmp_path / "p")
    loaded = ec.load_eegpack(tmp_path / "p")
    assert loaded.trials.tobytes() == ep.trials.tobytes()
    blob = (tmp_path / "p" / "epochs.f32le").read_bytes()
    assert blob == ep.trials.astype("<f4").tobytes()


def test_short_blob_is_corruption(tmp_path):
    ep = make_epochs(np.ones((3, 2, 10)))
    ec.save_eegpack(ep, tmp_path / "p")
    blob = tmp_path / "p" / "epochs.f32le"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CorruptionError):
        ec.load_eegpack(tmp_path / "p")


def test_missing_files_is_format_error(tmp_path):
    (tmp_path / "p").mkdir()
    with pytest.raises(FormatError):
        ec.load_eegpack(tmp_path / "p")


def test_duplicate_triple_in_manifest(tmp_path):
    ep = make_epochs(np.ones((2, 1, 4)))
    ec.save_eegpack(ep, tmp_path / "p")
    mpath = tmp_path / "p" / "manifest.json"
    m = json.loads(mpath.read_text())
    m["trials"][1] = dict(m["trials"][0])
    mpath.write_text(json.dumps(m))
    with pytest.raises(ValidationError):
        ec.load_eegpack(tmp_path / "p")


# --- baseline / crop ------------------------------------------------------------


def test_baseline_constant_trial_goes_to_zero():
    ep = make_epochs(np.full((2, 3, 1200), 5.0))
    out = ec.baseline_correct(ep, (-200, 0))
    assert np.all(out.trials == 0.0)


def test_baseline_uses_exactly_200_prestimulus_samples():
    x = np.zeros((1, 1, 1200))
    x[0, 0, :200] = 1.0  # pre-stimulus samples
    x[0, 0, 200] = 1000.0  # stimulus-onset sample must not enter the mean
    out = ec.baseline_correct(make_epochs(x), (-200, 0))
    assert out.trials[0, 0, 0] == 0.0
    assert out.trials[0, 0, 200] == pytest.approx(999.0)


def test_baseline_hand_arithmetic():
    x = np.full((1, 1, 1200), 3.0)
    x[0, 0, :200] = 2.0
    out = ec.baseline_correct(make_epochs(x), (-200, 0))
    assert np.allclose(out.trials[0, 0, 200:], 1.0)


def test_baseline_window_errors():
    ep = make_epochs(np.zeros((1, 1, 1200)))
    with pytest.raises(RangeError):
        ec.baseline_correct(ep, (-300, 0))
    with pytest.raises(RangeError):
        ec.baseline_correct(ep, (-100, -100))
    with pytest.raises(RangeError):
        ec.baseline_correct(ep, (-100, 50))
    with pytest.raises(RangeError):
        ec.baseline_correct(ep, (-99.8, -99.3))  # no sample inside


def test_baseline_idempotent():
    rng = np.random.default_rng(3)
    ep = make_epochs(rng.standard_normal((4, 3, 1200)) + 7)
    once = ec.baseline_correct(ep, (-200, 0))
    twice = ec.baseline_correct(once, (-200, 0))
    assert np.allclose(once.trials, twice.trials, atol=1e-5)


def test_crop_counts():
    ep = make_epochs(np.zeros((1, 1, 1200)))
    out = ec.crop(ep, (0, 1000))
    assert out.n_samples == 1000 and out.time_origin_ms == 0.0
    ep250 = make_epochs(np.zeros((1, 1, 250)), rate=250.0, origin=0.0)
    assert ec.crop(ep250, (100, 200)).n_samples == 25


def test_crop_full_span_identity():
    rng = np.random.default_rng(0)
    ep = make_epochs(rng.standard_normal((2, 2, 1200)))
    out = ec.crop(ep, ep.span_ms)
    assert np.array_equal(out.trials, ep.trials)
    with pytest.raises(RangeError):
        ec.crop(ep, (0, 1001))


# --- downsample ---------------------------------------------------------------------


def test_downsample_shape_and_rate():
    ep = make_epochs(np.zeros((2, 63, 1000)), origin=0.0)
    out = ec.downsample(ep, 250)
    assert out.trials.shape == (2, 63, 250) and out.sampling_rate_hz == 250.0


def test_downsample_identity():
    rng = np.random.default_rng(0)
    ep = make_epochs(rng.standard_normal((2, 2, 100)))
    assert np.array_equal(ec.downsample(ep, 1000).trials, ep.trials)


def test_downsample_errors():
    ep = make_epochs(np.zeros((1, 1, 1000)))
    with pytest.raises(UnsupportedRateError):
        ec.downsample(ep, 300)
    with pytest.raises(RangeError):
        ec.downsample(ep, 2000)


def test_downsample_sine_matches_analytic():
    t = np.arange(1000) / 1000.0
    ep = make_epochs(np.sin(2 * np.pi * 10 * t)[None, None, :], origin=0.0)
    out = ec.downsample(ep, 250).trials[0, 0]
    ref = np.sin(2 * np.pi * 10 * np.arange(250) / 250.0)
    assert np.corrcoef(out, ref)[0, 1] > 0.999


def test_downsample_composition():
    # EEG-band content (2-30 Hz, 1/f amplitudes), random phases
    rng = np.random.default_rng(11)
    t = (np.arange(1200) - 200) / 1000.0
    x = np.zeros((6, 4, 1200))
    for f in (2, 4, 6, 9, 12, 17, 23, 30):
        phase = rng.uniform(0, 2 * np.pi, size=(6, 4, 1))
        x += rng.standard_normal((6, 4, 1)) / f * np.sin(2 * np.pi * f * t + phase)
    ep = make_epochs(x)
    direct = ec.downsample(ep, 250).trials.astype(np.float64)
    staged = ec.downsample(ec.downsample(ep, 500), 250).trials.astype(np.float64)
    rel_rms = np.sqrt(np.mean((direct - staged) ** 2) / np.mean(direct**2))
    assert rel_rms < 1e-3


def test_chain_shape():
    rng = np.random.default_rng(0)
    ep = make_epochs(rng.standard_normal((3, 63, 1200)))
    out = ec.preprocess_chain(ep)
    assert out.trials.shape == (3, 63, 250)
    assert out.time_origin_ms == 0.0 and out.sampling_rate_hz == 250.0


# --- MVNN ---------------------------------------------------------------------------


def test_mvnn_recovers_known_covariance():
    # expected error ~ sqrt((d^2 + d) / (trials * samples)) ~ 6e-3 here
    rng = np.random.default_rng(5)
    a = rng.standard_normal((4, 4))
    cov = a @ a.T / 4 + 0.5 * np.eye(4)
    ep = gaussian_epochs(cov, 10_000, 64, seed=6)
    op = ec.mvnn_fit(ep, shrinkage=0.0)
    assert np.linalg.norm(op.matrix @ cov @ op.matrix.T - np.eye(4)) < 1e-2
    # operator is SPD
    assert np.allclose(op.matrix, op.matrix.T)
    assert np.linalg.eigvalsh(op.matrix).min() > 1e-8


def test_mvnn_identity_covariance_gives_identity():
    ep = gaussian_epochs(np.eye(5), 5000, 8, seed=1)
    op = ec.mvnn_fit(ep, shrinkage=0.0)
    assert np.linalg.norm(op.matrix - np.eye(5)) < 0.05


def test_mvnn_full_shrinkage_scaled_identity():
    cov = np.diag([1.0, 4.0, 9.0])
    ep = gaussian_epochs(cov, 300, 5, seed=2)
    op = ec.mvnn_fit(ep, shrinkage=1.0)
    d = op.matrix[0, 0]
    assert np.allclose(op.matrix, d * np.eye(3), atol=1e-12)


def test_mvnn_covariance_matches_independent_recomputation():
    rng = np.random.default_rng(9)
    x = rng.standard_normal((40, 3, 6))
    concepts = [f"c{i % 4}" for i in range(40)]
    ep = make_epochs(x, rate=250.0, origin=0.0, concepts=concepts)
    expected = np.mean(
        [pooled_covariance(ep.trials[[i for i in range(40) if concepts[i] == c]].astype(np.float64))
         for c in sorted(set(concepts))],
        axis=0,
    )
    assert np.allclose(ec.noise_covariance(ep), expected, atol=1e-12)


def test_mvnn_apply_whitens_fitting_data():
    rng = np.random.default_rng(4)
    a = rng.standard_normal((5, 5))
    cov = a @ a.T + np.eye(5)
    ep = gaussian_epochs(cov, 2000, 3, seed=8)
    op = ec.mvnn_fit(ep, shrinkage=0.0)
    white = ec.mvnn_apply(op, ep)
    assert white.meta == ep.meta and white.n_trials == ep.n_trials
    assert np.linalg.norm(ec.noise_covariance(white) - np.eye(5)) < 1e-6


def test_mvnn_apply_trivial_operators():
    rng = np.random.default_rng(0)
    ep = make_epochs(rng.standard_normal((3, 4, 5)))
    eye = ec.WhiteningOperator(np.eye(4), np.eye(4), 0.0)
    assert np.array_equal(ec.mvnn_apply(eye, ep).trials, ep.trials)
    two = ec.WhiteningOperator(2 * np.eye(4), np.eye(4), 0.0)
    assert np.allclose(ec.mvnn_apply(two, ep).trials, 2 * ep.trials)
    with pytest.raises(ShapeError):
        ec.mvnn_apply(ec.WhiteningOperator(np.eye(3), np.eye(3), 0.0), ep)


def test_mvnn_singular_needs_shrinkage():
    rng = np.random.default_rng(0)
    base = rng.standard_normal((50, 1, 10))
    x = np.concatenate([base, base], axis=1)  # two identical channels
    ep = make_epochs(x, rate=250, origin=0, concepts=[f"c{i % 2}" for i in range(50)])
    with pytest.raises(NumericalError, match="shrinkage"):
        ec.mvnn_fit(ep, shrinkage=0.0)
    op = ec.mvnn_fit(ep, shrinkage=0.1)
    assert np.all(np.isfinite(op.matrix))


def test_mvnn_threads_bit_identical():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((200, 8, 20))
    ep = make_epochs(x, rate=250, origin=0, concepts=[f"c{i % 17}" for i in range(200)])
    assert np.array_equal(ec.noise_covariance(ep, n_jobs=1), ec.noise_covariance(ep, n_jobs=8))


def test_whitening_error_decreases_with_trials():
    rng = np.random.default_rng(0)
    a = rng.standard_normal((4, 4))
    cov = a @ a.T + np.eye(4)
    errors = []
    for n in (100, 1000, 10_000):
        errs = []
        for seed in range(10):
            ep = gaussian_epochs(cov, n, 2, seed=100 + seed)
            op = ec.mvnn_fit(ep, shrinkage=0.0)
            errs.append(np.linalg.norm(op.matrix @ cov @ op.matrix.T - np.eye(4)))
        errors.append(np.mean(errs))
    assert errors[0] > errors[1] > errors[2]


def test_whiten_train_split_leaves_test_untouched():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((20, 3, 5))
    meta = [TrialMeta(f"c{i % 2}", f"i{i}", 0, "train" if i < 14 else "test") for i in range(20)]
    ep = EpochSet("p", 250, 0, ["a", "b", "c"], x, meta)
    out, op = ec.whiten_train_split(ep)
    assert np.array_equal(out.trials[14:], ep.trials[14:])
    assert not np.allclose(out.trials[:14], ep.trials[:14])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.01, 100.0))
def test_mvnn_apply_preserves_meta(seed, scale):
    rng = np.random.default_rng(seed)
    ep = make_epochs(rng.standard_normal((4, 3, 6)) * scale, concepts=["a", "a", "b", "b"])
    out = ec.mvnn_apply(ec.mvnn_fit(ep, 0.5), ep)
    assert out.meta == ep.meta and out.trials.shape == ep.trials.shape


def test_pool_participants_keeps_triples_unique():
    a = make_epochs(np.zeros((2, 1, 4)))
    b = make_epochs(np.ones((2, 1, 4)))
    b.participant_id = "p02"
    pooled = ec.pool_participants([a, b])
    assert pooled.n_trials == 4
    assert len({m.key for m in pooled.meta}) == 4
