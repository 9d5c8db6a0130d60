import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.signal import butter, sosfiltfilt

from fat_eeg.autodiff import Tensor, cross_entropy, make_rng
from fat_eeg.data import (
    BAND_NAMES,
    VARIANCE_FLOOR,
    AugmentConfig,
    DatasetFormatError,
    FeatureDataset,
    SyntheticSpec,
    band_power,
    band_scale_augment,
    compute_de,
    from_external,
    gaussian_de,
    generate_synthetic,
    load_dataset,
    make_splits,
    mixup,
    one_hot,
    parse_scheme,
    save_dataset,
    select_bands,
    sine_perturb,
)


def toy_dataset(rng, n_subjects=3, per=6, C=4, sessions=1):
    N = n_subjects * per
    return FeatureDataset(
        rng.standard_normal((N, C, 5)),
        rng.integers(0, 3, N),
        np.repeat(np.arange(n_subjects), per),
        np.tile(np.arange(per) * sessions // per, n_subjects),
        list(BAND_NAMES),
        [f"c{i}" for i in range(C)],
        3,
    )


# --- differential entropy ----------------------------------------------------


def test_unit_gaussian_entropy():
    assert gaussian_de(1.0) == pytest.approx(1.4189385, abs=1e-6)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.05, 50.0))
def test_scaling_adds_log_factor(seed, a):
    x = make_rng(seed).standard_normal((3, 400))
    diff = compute_de(a * x, 200, 2.0) - compute_de(x, 200, 2.0)
    np.testing.assert_allclose(diff, math.log(a), atol=1e-3)


@pytest.mark.parametrize("amp", [0.5, 1.0, 3.0])
def test_alpha_sine_matches_bandpass_variance(amp):
    fs, T = 200, 2.0
    t = np.arange(int(fs * T)) / fs
    x = amp * np.sin(2 * np.pi * 10 * t + 0.3)
    de = compute_de(x[None], fs, T)[0, 0, BAND_NAMES.index("alpha")]
    sos = butter(6, [8, 14], btype="band", fs=fs, output="sos")
    var = np.var(sosfiltfilt(sos, x)[40:-40])
    assert de == pytest.approx(0.5 * math.log(2 * math.pi * math.e * var), abs=0.05)
    assert de == pytest.approx(0.5 * math.log(2 * math.pi * math.e * amp ** 2 / 2), abs=0.05)


def test_de_windows_and_errors():
    x = make_rng(0).standard_normal((2, 1000))
    assert compute_de(x, 200, 2.0).shape == (2, 2, 5)
    with pytest.raises(ValueError):
        compute_de(x[:, :100], 200, 2.0)
    with pytest.raises(ValueError):
        compute_de(x, 100, 2.0)


def test_silent_band_uses_floor():
    de = compute_de(np.zeros((1, 400)), 200, 2.0)
    np.testing.assert_array_equal(de, gaussian_de(VARIANCE_FLOOR))
    assert np.isfinite(de).all()


# --- container and band selection --------------------------------------------


def test_dataset_validation():
    rng = make_rng(1)
    ds = toy_dataset(rng)
    bad = ds.samples.copy()
    bad[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        FeatureDataset(bad, ds.labels, ds.subject_id, ds.session_id, ds.band_names, ds.channel_names, 3)
    with pytest.raises(ValueError):
        FeatureDataset(ds.samples, ds.labels + 3, ds.subject_id, ds.session_id, ds.band_names, ds.channel_names, 3)
    with pytest.raises(ValueError):
        FeatureDataset(ds.samples, ds.labels[:-1], ds.subject_id, ds.session_id, ds.band_names,
                       ds.channel_names, 3)


def test_select_bands():
    ds = toy_dataset(make_rng(2))
    same = select_bands(ds, BAND_NAMES)
    np.testing.assert_array_equal(same.samples, ds.samples)
    bg = select_bands(ds, ["beta", "gamma"])
    assert bg.n_bands == 2 and bg.band_names == ["beta", "gamma"]
    np.testing.assert_array_equal(bg.samples, ds.samples[:, :, 3:5])
    with pytest.raises(KeyError):
        select_bands(ds, ["mu"])
    with pytest.raises(ValueError):
        select_bands(ds, [])


@settings(max_examples=50, deadline=None)
@given(st.sets(st.sampled_from(BAND_NAMES), min_size=1), st.data())
def test_select_then_select_equals_combined(first, data):
    ds = toy_dataset(make_rng(3))
    second = data.draw(st.sets(st.sampled_from(sorted(first)), min_size=1))
    twice = select_bands(select_bands(ds, first), second)
    once = select_bands(ds, second)
    np.testing.assert_array_equal(twice.samples, once.samples)
    assert twice.band_names == once.band_names


# --- dataset files -----------------------------------------------------------


def test_dataset_round_trip_bitwise(tmp_path):
    ds = toy_dataset(make_rng(4), sessions=2)
    save_dataset(ds, tmp_path / "d")
    back = load_dataset(tmp_path / "d")
    for name in ("samples", "labels", "subject_id", "session_id"):
        a, b = getattr(ds, name), getattr(back, name)
        assert a.dtype == b.dtype and a.tobytes() == b.tobytes()
    assert (back.band_names, back.channel_names, back.n_classes) == (ds.band_names, ds.channel_names, 3)
    data = (tmp_path / "d" / "data.bin").read_bytes()
    assert data == np.asarray(ds.samples, "<f4").tobytes()


def _manifest_edit(path, **kw):
    m = json.loads((path / "manifest.json").read_text())
    m.update(kw)
    (path / "manifest.json").write_text(json.dumps(m))


def test_dataset_rejects_corruption(tmp_path):
    ds = toy_dataset(make_rng(5))
    d = tmp_path / "d"
    save_dataset(ds, d)
    _manifest_edit(d, magic="FATDATA0")
    with pytest.raises(DatasetFormatError):
        load_dataset(d)
    save_dataset(ds, d)
    _manifest_edit(d, n_samples=len(ds) + 1)
    with pytest.raises(DatasetFormatError):
        load_dataset(d)
    save_dataset(ds, d)
    raw = bytearray((d / "data.bin").read_bytes())
    raw[:4] = np.array([np.inf], "<f4").tobytes()
    (d / "data.bin").write_bytes(bytes(raw))
    with pytest.raises(DatasetFormatError):
        load_dataset(d)


def test_external_converter_expands_windows():
    rng = make_rng(6)
    trials = [rng.standard_normal((n, 4, 5)) for n in (3, 2)]
    ds = from_external(trials, [0, 2], [1, 1], [0, 0], 3)
    assert len(ds) == 5 and ds.labels.tolist() == [0, 0, 0, 2, 2]


# --- synthetic generator -----------------------------------------------------


def test_generator_reproducible_bitwise():
    spec = SyntheticSpec(n_subjects=2, trials_per_subject=6)
    a = generate_synthetic(spec, make_rng(7))
    b = generate_synthetic(spec, make_rng(7))
    assert a[0].tobytes() == b[0].tobytes()
    assert a[1].samples.tobytes() == b[1].samples.tobytes()
    assert a[2] == b[2]


def test_zero_noise_single_oscillator_concentrates_in_signature_band():
    spec = SyntheticSpec(n_subjects=1, trials_per_subject=3, n_classes=2, signatures={0: ["beta"], 1: ["beta"]},
                         coupling_edges=[[2, 5]], active_edges=1, noise_scale=0.0, subject_shift_scale=0.0)
    _, ds, _ = generate_synthetic(spec, make_rng(8))
    for c in (2, 5):
        assert np.all(ds.samples[:, c].argmax(-1) == BAND_NAMES.index("beta"))


def test_coupled_pairs_correlate_more_than_uncoupled():
    spec = SyntheticSpec(n_subjects=1, trials_per_subject=60, noise_scale=0.0, subject_shift_scale=0.0)
    raw, _, truth = generate_synthetic(spec, make_rng(9))
    C = spec.n_channels
    total = np.zeros((C, C))
    for x in raw:
        sd = x.std(-1)
        z = np.divide(x - x.mean(-1, keepdims=True), sd[:, None], out=np.zeros_like(x), where=sd[:, None] > 0)
        total += np.abs(z @ z.T) / x.shape[-1]  # silent channels contribute 0
    mean_corr = total / len(raw)
    coupled = np.zeros((C, C), bool)
    for i, j in truth["coupling_edges"]:
        coupled[i, j] = coupled[j, i] = True
    off = ~np.eye(C, dtype=bool)
    assert mean_corr[coupled].min() > mean_corr[off & ~coupled].max()


def test_linear_classifier_beats_chance():
    from sklearn.linear_model import LogisticRegression
    from sklearn.model_selection import cross_val_score

    spec = SyntheticSpec(n_subjects=4, trials_per_subject=50)
    _, ds, _ = generate_synthetic(spec, make_rng(10))
    X = ds.samples.reshape(len(ds), -1)
    acc = cross_val_score(LogisticRegression(max_iter=2000), X, ds.labels, cv=5).mean()
    assert acc > 1 / 3 + 0.1


def test_matched_decoys_equalize_band_counts():
    spec = SyntheticSpec(n_subjects=1, trials_per_subject=9, noise_scale=0.0, subject_shift_scale=0.0,
                         decoy_fraction=1.0)
    raw, _, _ = generate_synthetic(spec, make_rng(11))
    # each trial: 6 driven channels (tone power 0.5) in every signature band
    active = (band_power(raw, spec.sample_rate) > 0.1)[:, :, 1:].sum(1)
    assert np.all(active == 6)


@pytest.mark.parametrize("bad", [dict(coupling_edges=[[0, 16]]), dict(coupling_edges=[[3, 3]]),
                                 dict(signatures={0: ["alpha"], 1: ["mu"], 2: ["beta"]}),
                                 dict(signatures={0: ["alpha"]}), dict(sample_rate=90.0),
                                 dict(active_edges=0), dict(decoy_fraction=1.5)])
def test_invalid_synthetic_specs(bad):
    with pytest.raises(ValueError):
        SyntheticSpec(**bad).validate()


def test_spec_dict_round_trip():
    spec = SyntheticSpec(noise_scale=0.5)
    assert SyntheticSpec.from_dict(json.loads(json.dumps(spec.to_dict()))) == spec
    with pytest.raises(ValueError):
        SyntheticSpec.from_dict({"noise": 1})


# --- augmentation ------------------------------------------------------------


def test_disabled_augmentations_are_identities():
    x = make_rng(12).standard_normal((4, 5))
    off = AugmentConfig.disabled()
    assert band_scale_augment(x, make_rng(0), off) is x
    assert sine_perturb(x, make_rng(0), off) is x
    assert sine_perturb(x, make_rng(0), AugmentConfig(sine_amp=0.0)) is x


def test_band_scale_factor_range_and_uniform_band_choice():
    rng = make_rng(13)
    cfg = AugmentConfig()
    x = np.ones((3, 5))
    counts = np.zeros(5)
    for _ in range(10_000):
        y = band_scale_augment(x, rng, cfg)
        changed = np.flatnonzero(np.any(y != x, axis=0))
        assert len(changed) <= 1
        if len(changed):
            b = changed[0]
            assert np.all(y[:, b] == y[0, b])
            assert 0.9 <= y[0, b] <= 1.1
            counts[b] += 1
    expected, sd = 2000, math.sqrt(10_000 * 0.2 * 0.8)
    assert np.all(np.abs(counts - expected) < 3 * sd)


def test_sine_perturbation_bounded_and_zero_mean():
    rng = make_rng(14)
    x = np.zeros((4, 5))
    cfg = AugmentConfig()
    draws = np.stack([sine_perturb(x, rng, cfg) for _ in range(4000)])
    assert np.abs(draws).max() <= 0.05 + 1e-15
    mean, se = draws.mean(0), draws.std(0) / math.sqrt(len(draws))
    assert np.all(np.abs(mean) < 3 * se + 1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_augmentations_preserve_shape_and_finiteness(seed):
    rng = make_rng(seed)
    x = rng.standard_normal((2, 6, 5))
    cfg = AugmentConfig()
    for y in (band_scale_augment(x, rng, cfg), sine_perturb(x, rng, cfg)):
        assert y.shape == x.shape and np.isfinite(y).all()


def test_mixup_endpoints_and_identical_inputs():
    rng = make_rng(15)
    a, b = rng.standard_normal((3, 5)), rng.standard_normal((3, 5))
    ya, yb = one_hot([0], 3)[0], one_hot([2], 3)[0]
    x, y, lam = mixup(a, ya, b, yb, rng, 0.2, lam=1.0)
    np.testing.assert_array_equal(x, a)
    np.testing.assert_array_equal(y, ya)
    for _ in range(20):
        x, _, lam = mixup(a, ya, a, yb, rng, 0.2)
        assert 0 <= lam <= 1
        np.testing.assert_allclose(x, a, rtol=1e-15, atol=1e-15)
    with pytest.raises(ValueError):
        mixup(a, ya, b, yb, rng, 0.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 1.0))
def test_mixup_soft_loss_decomposes(seed, lam):
    rng = make_rng(seed)
    logits = Tensor(rng.standard_normal((1, 4)) * 3)
    ya, yb = rng.integers(0, 4, 2)
    _, soft, _ = mixup(np.zeros(1), one_hot([ya], 4)[0], np.zeros(1), one_hot([yb], 4)[0], rng, 0.2, lam=lam)
    mixed = float(cross_entropy(logits, soft[None]).data)
    split = lam * float(cross_entropy(logits, [ya]).data) + (1 - lam) * float(cross_entropy(logits, [yb]).data)
    assert mixed == pytest.approx(split, abs=1e-6)


# --- splits ------------------------------------------------------------------


def test_loso_folds_hold_out_one_subject():
    ds = toy_dataset(make_rng(16), n_subjects=5)
    plan = make_splits(ds, "loso")
    assert len(plan) == 5
    for s, (tr, te) in enumerate(plan.folds):
        assert set(ds.subject_id[te].tolist()) == {s}
        assert s not in set(ds.subject_id[tr].tolist())


def test_nine_six_ratio_takes_first_nine_trials():
    ds = toy_dataset(make_rng(17), n_subjects=2, per=15)
    (tr, te), = make_splits(ds, "ratio:9:6").folds
    for s in range(2):
        base = 15 * s
        assert tr[tr >= base][:9].tolist() == list(range(base, base + 9))
        assert te[(te >= base) & (te < base + 15)].tolist() == list(range(base + 9, base + 15))


@pytest.mark.parametrize("scheme", ["loso:1", "ratio:0:3", "kfold:1", "kfold", "holdout", "ratio:a:b"])
def test_invalid_schemes(scheme):
    with pytest.raises(ValueError):
        parse_scheme(scheme)


def test_too_few_subjects_or_samples():
    ds = toy_dataset(make_rng(18), n_subjects=1)
    with pytest.raises(ValueError):
        make_splits(ds, "loso")
    with pytest.raises(ValueError):
        make_splits(ds, "kfold:10")


@settings(max_examples=1000, deadline=None)
@given(st.integers(1, 5), st.integers(2, 12), st.integers(1, 3),
       st.sampled_from(["loso", "kfold:2", "kfold:3", "ratio:9:6", "ratio:16:8", "ratio:1:1"]),
       st.integers(0, 2**31 - 1))
def test_splits_disjoint_and_exhaustive(n_subjects, per, sessions, scheme, seed):
    ds = toy_dataset(make_rng(seed), n_subjects=n_subjects, per=per, C=2, sessions=sessions)
    try:
        plan = make_splits(ds, scheme, seed=seed)
    except ValueError:
        assume_invalid = scheme == "loso" and n_subjects < 2 or scheme.startswith("kfold") and per < int(scheme[-1])
        assert assume_invalid
        return
    N = len(ds)
    for tr, te in plan.folds:
        assert not set(tr.tolist()) & set(te.tolist())
        assert sorted(tr.tolist() + te.tolist()) == list(range(N))
    if scheme == "loso" or scheme.startswith("kfold"):
        tests = np.concatenate([te for _, te in plan.folds])
        assert sorted(tests.tolist()) == list(range(N))
    if scheme.startswith("kfold"):
        # subject-dependent: every subject appears on both sides of each fold
        for tr, te in plan.folds:
            assert set(ds.subject_id[tr].tolist()) == set(ds.subject_id[te].tolist()) == set(range(n_subjects))


def test_kfold_deterministic_given_seed():
    ds = toy_dataset(make_rng(19), n_subjects=3, per=9)
    a, b = make_splits(ds, "kfold:3", seed=4), make_splits(ds, "kfold:3", seed=4)
    for (ta, ea), (tb, eb) in zip(a.folds, b.folds):
        np.testing.assert_array_equal(ea, eb)
