"""DE features, synthetic EEG with known structure, augmentation, splits and dataset files."""
from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import periodogram

from .autodiff import make_rng

BANDS: tuple[tuple[str, float, float], ...] = (
    ("delta", 1.0, 4.0),
    ("theta", 4.0, 8.0),
    ("alpha", 8.0, 14.0),
    ("beta", 14.0, 31.0),
    ("gamma", 31.0, 50.0),
)
BAND_NAMES = tuple(b[0] for b in BANDS)
VARIANCE_FLOOR = 1e-12
DATASET_MAGIC = "FATDATA1"


def gaussian_de(var):
    """Differential entropy of N(0, var): 0.5 * ln(2*pi*e*var)."""
    return 0.5 * np.log(2 * np.pi * np.e * np.maximum(var, VARIANCE_FLOOR))


def band_power(signal: np.ndarray, sample_rate: float) -> np.ndarray:
    """Band-limited variance per channel and band, shape [C, 5].

    Hann-windowed periodogram density; the power in ``[lo, hi)`` is the mean
    density over the band's bins times the band width (i.e. the density
    integral), which estimates the variance of the band-passed signal.
    """
    freqs, psd = periodogram(signal, fs=sample_rate, window="hann", scaling="density", axis=-1)
    df = freqs[1] - freqs[0]
    out = np.empty(signal.shape[:-1] + (len(BANDS),))
    for b, (_, lo, hi) in enumerate(BANDS):
        mask = (freqs >= lo) & (freqs < hi)
        out[..., b] = psd[..., mask].mean(axis=-1) * mask.sum() * df
    return out


def compute_de(signal: np.ndarray, sample_rate: float, window_seconds: float) -> np.ndarray:
    """DE features [n_windows, C, 5] over non-overlapping windows of ``signal`` [C, T]."""
    signal = np.atleast_2d(np.asarray(signal, dtype=np.float64))
    if sample_rate <= 2 * BANDS[-1][2]:
        raise ValueError(f"sample_rate must exceed {2 * BANDS[-1][2]} Hz")
    w = int(round(window_seconds * sample_rate))
    n = signal.shape[1] // w
    if n < 1:
        raise ValueError("signal shorter than one window")
    windows = signal[:, : n * w].reshape(signal.shape[0], n, w).transpose(1, 0, 2)
    return gaussian_de(band_power(windows, sample_rate))


# ---------------------------------------------------------------------------
# dataset container


@dataclass
class FeatureDataset:
    samples: np.ndarray  # [N, C, F] float32
    labels: np.ndarray  # [N] int32
    subject_id: np.ndarray
    session_id: np.ndarray
    band_names: list[str]
    channel_names: list[str]
    n_classes: int

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        for name in ("labels", "subject_id", "session_id"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.int32))
        self.validate()

    def validate(self) -> None:
        N = self.samples.shape[0]
        if self.samples.ndim != 3:
            raise ValueError("samples must be [N, C, F]")
        for name in ("labels", "subject_id", "session_id"):
            if getattr(self, name).shape != (N,):
                raise ValueError(f"{name} must have length {N}")
        if N and (self.labels.min() < 0 or self.labels.max() >= self.n_classes):
            raise ValueError("labels outside [0, n_classes)")
        if not np.isfinite(self.samples).all():
            raise ValueError("samples contain NaN/Inf")
        if len(self.band_names) != self.samples.shape[2] or len(self.channel_names) != self.samples.shape[1]:
            raise ValueError("band/channel names do not match sample shape")

    def __len__(self) -> int:
        return self.samples.shape[0]

    @property
    def n_channels(self) -> int:
        return self.samples.shape[1]

    @property
    def n_bands(self) -> int:
        return self.samples.shape[2]

    @property
    def subjects(self) -> list[int]:
        return sorted(int(s) for s in np.unique(self.subject_id))

    def subset(self, idx) -> "FeatureDataset":
        idx = np.asarray(idx)
        return dataclasses.replace(
            self,
            samples=self.samples[idx],
            labels=self.labels[idx],
            subject_id=self.subject_id[idx],
            session_id=self.session_id[idx],
        )


def select_bands(ds: FeatureDataset, bands) -> FeatureDataset:
    bands = list(bands)
    if not bands:
        raise ValueError("band subset must be nonempty")
    unknown = [b for b in bands if b not in ds.band_names]
    if unknown:
        raise KeyError(f"unknown bands {unknown}; have {ds.band_names}")
    # keep the dataset's own band order
    keep = [i for i, b in enumerate(ds.band_names) if b in bands]
    return dataclasses.replace(ds, samples=ds.samples[:, :, keep], band_names=[ds.band_names[i] for i in keep])


# ---------------------------------------------------------------------------
# dataset directory format


def _canonical(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class DatasetFormatError(ValueError):
    pass


def save_dataset(ds: FeatureDataset, path) -> None:
    """Write ``manifest.json`` + little-endian ``data/labels/subjects/sessions.bin``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "magic": DATASET_MAGIC,
        "n_samples": len(ds),
        "n_channels": ds.n_channels,
        "n_bands": ds.n_bands,
        "band_names": list(ds.band_names),
        "channel_names": list(ds.channel_names),
        "n_classes": int(ds.n_classes),
        "subject_ids": ds.subjects,
    }
    (path / "manifest.json").write_text(_canonical(manifest))
    (path / "data.bin").write_bytes(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())
    for fname, arr in (("labels.bin", ds.labels), ("subjects.bin", ds.subject_id), ("sessions.bin", ds.session_id)):
        (path / fname).write_bytes(np.ascontiguousarray(arr, dtype="<i4").tobytes())


def load_dataset(path) -> FeatureDataset:
    path = Path(path)
    try:
        m = json.loads((path / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise DatasetFormatError(f"cannot read manifest: {e}") from e
    if m.get("magic") != DATASET_MAGIC:
        raise DatasetFormatError("bad dataset magic")
    N, C, F = m["n_samples"], m["n_channels"], m["n_bands"]

    def read(fname, dtype, count):
        raw = (path / fname).read_bytes()
        arr = np.frombuffer(raw, dtype=dtype)
        if arr.size != count:
            raise DatasetFormatError(f"{fname} holds {arr.size} values, manifest implies {count}")
        return arr

    samples = read("data.bin", "<f4", N * C * F).reshape(N, C, F).astype(np.float32)
    if not np.isfinite(samples).all():
        raise DatasetFormatError("data.bin contains non-finite values")
    labels = read("labels.bin", "<i4", N)
    subjects = read("subjects.bin", "<i4", N)
    sessions = read("sessions.bin", "<i4", N)
    if sorted(set(subjects.tolist())) != list(m["subject_ids"]):
        raise DatasetFormatError("subject ids disagree with manifest")
    try:
        return FeatureDataset(samples, labels, subjects, sessions, list(m["band_names"]),
                              list(m["channel_names"]), int(m["n_classes"]))
    except ValueError as e:
        raise DatasetFormatError(str(e)) from e


def from_external(de_by_trial, labels, subjects, sessions, n_classes, channel_names=None,
                  band_names=BAND_NAMES) -> FeatureDataset:
    """Assemble a dataset from externally extracted DE features.

    Converter stub for licensed corpora that cannot ship with this package.
    ``de_by_trial`` is a sequence of arrays, one per trial, each either
    [n_windows, C, F] or SEED-style [C, n_windows, F] (pass the latter
    already transposed with ``np.transpose(a, (1, 0, 2))``). Every window
    becomes one sample carrying its trial's label, subject and session, e.g.
    for SEED ``de_LDS{k}`` from each subject/session ``.mat`` file with the
    session's 15-entry label vector shifted from {-1, 0, 1} to {0, 1, 2}.
    The result can be written with :func:`save_dataset`.
    """
    xs, ys, ss, es = [], [], [], []
    for a, y, s, e in zip(de_by_trial, labels, subjects, sessions):
        a = np.asarray(a)
        xs.append(a)
        ys += [y] * len(a)
        ss += [s] * len(a)
        es += [e] * len(a)
    samples = np.concatenate(xs)
    C = samples.shape[1]
    names = list(channel_names) if channel_names is not None else [f"ch{i}" for i in range(C)]
    return FeatureDataset(samples, ys, ss, es, list(band_names), names, n_classes)


# ---------------------------------------------------------------------------
# synthetic EEG

DEFAULT_EDGES = (
    (0, 1), (0, 5), (1, 6), (2, 3), (2, 9), (3, 7), (4, 8), (4, 12),
    (5, 10), (6, 11), (7, 13), (8, 14), (9, 15), (10, 14), (11, 15),
)


@dataclass
class SyntheticSpec:
    n_subjects: int = 5
    trials_per_subject: int = 60
    n_channels: int = 16
    sample_rate: float = 200.0
    window_seconds: float = 2.0
    n_classes: int = 3
    # class -> bands with elevated oscillatory power
    signatures: dict = field(default_factory=lambda: {0: ["alpha"], 1: ["beta"], 2: ["theta", "gamma"]})
    coupling_edges: list = field(default_factory=lambda: [list(e) for e in DEFAULT_EDGES])
    subject_shift_scale: float = 0.2
    noise_scale: float = 1.0
    signal_amplitude: float = 1.0
    # disjoint coupling edges driven per trial and band; None drives every edge
    active_edges: int | None = 3
    # single-channel oscillators in the other classes' bands, as a fraction
    # of the channels a class drives (1.0 matches the per-band counts)
    decoy_fraction: float = 0.0
    n_sessions: int = 1

    def validate(self) -> None:
        if self.n_subjects < 1 or self.trials_per_subject < 1 or self.n_channels < 2:
            raise ValueError("need at least one subject, one trial and two channels")
        if self.n_classes < 2:
            raise ValueError("need at least two classes")
        if self.sample_rate <= 2 * BANDS[-1][2]:
            raise ValueError("sample_rate too low for the gamma band")
        for e in self.coupling_edges:
            i, j = e
            if not (0 <= i < self.n_channels and 0 <= j < self.n_channels) or i == j:
                raise ValueError(f"invalid coupling edge {e}")
        sig = {int(k): v for k, v in self.signatures.items()}
        if set(sig) != set(range(self.n_classes)):
            raise ValueError("signatures must cover every class")
        for bands in sig.values():
            for b in bands:
                if b not in BAND_NAMES:
                    raise ValueError(f"unknown band {b!r} in signatures")
        if not 0 <= self.decoy_fraction <= 1:
            raise ValueError("decoy_fraction must lie in [0, 1]")
        if self.active_edges is not None:
            if not 1 <= self.active_edges <= len(self.coupling_edges):
                raise ValueError("active_edges must lie in [1, number of coupling edges]")
            if 2 * self.active_edges > self.n_channels:
                raise ValueError("active_edges needs 2*active_edges distinct channels")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["signatures"] = {str(k): list(v) for k, v in self.signatures.items()}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown SyntheticSpec keys: {sorted(unknown)}")
        d = dict(d)
        if "signatures" in d:
            d["signatures"] = {int(k): list(v) for k, v in d["signatures"].items()}
        return cls(**d)


def pink_noise(rng: np.random.Generator, shape, sample_rate: float) -> np.ndarray:
    """Unit-variance 1/f noise along the last axis (spectral shaping of white noise)."""
    n = shape[-1]
    spec = np.fft.rfft(rng.standard_normal(shape), axis=-1)
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    f[0] = f[1]
    x = np.fft.irfft(spec / np.sqrt(f), n=n, axis=-1)
    return x / x.std(axis=-1, keepdims=True)


def _apply_band_gains(x: np.ndarray, gains: np.ndarray, sample_rate: float) -> np.ndarray:
    """Scale each band's Fourier coefficients by ``gains[..., band]``."""
    n = x.shape[-1]
    spec = np.fft.rfft(x, axis=-1)
    f = np.fft.rfftfreq(n, 1 / sample_rate)
    for b, (_, lo, hi) in enumerate(BANDS):
        mask = (f >= lo) & (f < hi)
        spec[..., mask] *= gains[..., b : b + 1]
    return np.fft.irfft(spec, n=n, axis=-1)


def _disjoint_edges(rng, edges, m, max_tries=1000):
    """``m`` pairwise disjoint edges drawn uniformly by rejection."""
    for _ in range(max_tries):
        pick = [edges[i] for i in rng.choice(len(edges), m, replace=False)]
        if len({c for e in pick for c in e}) == 2 * m:
            return pick
    raise ValueError(f"could not draw {m} disjoint coupling edges")


def _edge_free_channels(rng, n_channels, edges, n, max_tries=1000):
    """``n`` distinct channels containing no coupling edge."""
    edge_set = {frozenset(e) for e in edges}
    for _ in range(max_tries):
        pick = rng.choice(n_channels, n, replace=False)
        if not any(frozenset((a, b)) in edge_set for a in pick for b in pick if a < b):
            return pick
    raise ValueError(f"could not draw {n} channels free of coupling edges")


def _tone(rng, band, amplitude, t):
    lo, hi = dict((name, (a, b)) for name, a, b in BANDS)[band]
    f = rng.uniform(lo + 0.5, hi - 0.5)
    return amplitude * np.sin(2 * np.pi * f * t + rng.uniform(0, 2 * np.pi))


def generate_synthetic(spec: SyntheticSpec, rng: np.random.Generator):
    """Draw synthetic multichannel EEG and its DE features.

    A trial of class ``k`` drives ``active_edges`` disjoint coupling edges
    (every edge when None) in each band of ``signatures[k]``: one latent
    oscillator per edge and band, random frequency inside the band and random
    phase, added to both endpoints. With ``decoys`` on, every band that
    belongs to another class but not to ``k`` receives the same number of
    oscillators on independent channels chosen so that no two of them form a
    coupling edge. Per-band counts of elevated channels then match across
    classes and the label is carried by which channels co-activate.

    Pink noise and a per-subject log-normal gain per band (spread
    ``subject_shift_scale``, applied in the frequency domain) come last.
    Returns ``(raw [N, C, T], FeatureDataset, ground_truth)``.
    """
    spec.validate()
    C, fs = spec.n_channels, spec.sample_rate
    T = int(round(spec.window_seconds * fs))
    t = np.arange(T) / fs
    sig = {int(k): list(v) for k, v in spec.signatures.items()}
    edges = [tuple(int(v) for v in e) for e in spec.coupling_edges]
    all_bands = sorted({b for v in sig.values() for b in v}, key=BAND_NAMES.index)
    amp = spec.signal_amplitude

    raws, labels, subjects, sessions = [], [], [], []
    for s in range(spec.n_subjects):
        gains = np.exp(spec.subject_shift_scale * rng.standard_normal(len(BANDS)))
        # balanced, shuffled class order per subject
        order = np.resize(np.arange(spec.n_classes), spec.trials_per_subject)
        rng.shuffle(order)
        for trial, k in enumerate(order):
            x = np.zeros((C, T))
            for band in sig[int(k)]:
                driven = edges if spec.active_edges is None else _disjoint_edges(rng, edges, spec.active_edges)
                for i, j in driven:
                    z = _tone(rng, band, amp, t)
                    x[i] += z
                    x[j] += z
            n = round(spec.decoy_fraction * 2 * (len(edges) if spec.active_edges is None else spec.active_edges))
            if n:
                for band in all_bands:
                    if band in sig[int(k)]:
                        continue
                    for c in _edge_free_channels(rng, C, edges, min(n, C)):
                        x[c] += _tone(rng, band, amp, t)
            x += spec.noise_scale * pink_noise(rng, (C, T), fs)
            x = _apply_band_gains(x, np.broadcast_to(gains, (C, len(BANDS))), fs)
            raws.append(x)
            labels.append(int(k))
            subjects.append(s)
            sessions.append(trial * spec.n_sessions // spec.trials_per_subject)
    raw = np.stack(raws)
    feats = np.stack([compute_de(r, fs, spec.window_seconds)[0] for r in raw])
    ds = FeatureDataset(feats, labels, subjects, sessions, list(BAND_NAMES), [f"ch{i:02d}" for i in range(C)],
                        spec.n_classes)
    truth = {
        "coupling_edges": [list(e) for e in edges],
        "class_signatures": {str(k): list(v) for k, v in sorted(sig.items())},
    }
    return raw, ds, truth


# ---------------------------------------------------------------------------
# augmentation


@dataclass
class AugmentConfig:
    band_scale: bool = True
    band_scale_range: tuple = (0.9, 1.1)
    sine: bool = True
    sine_freq: float = 2.0
    sine_amp: float = 0.05
    mixup: bool = True
    mixup_alpha: float = 0.2

    def __post_init__(self):
        lo, hi = self.band_scale_range
        if not 0 < lo <= hi:
            raise ValueError("band_scale_range must be positive and ordered")
        if not (math.isfinite(self.sine_amp) and math.isfinite(self.sine_freq)):
            raise ValueError("sine parameters must be finite")
        self.band_scale_range = (float(lo), float(hi))

    @classmethod
    def disabled(cls) -> "AugmentConfig":
        return cls(band_scale=False, sine=False, mixup=False)


def band_scale_augment(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Scale one uniformly chosen band of ``x`` [..., C, F] by u ~ U(lo, hi) across all channels."""
    if not cfg.band_scale:
        return x
    b = rng.integers(x.shape[-1])
    u = rng.uniform(*cfg.band_scale_range)
    out = np.array(x, copy=True)
    out[..., b] *= u
    return out


def sine_perturb(x: np.ndarray, rng: np.random.Generator, cfg: AugmentConfig) -> np.ndarray:
    """Add ``amp * sin(2*pi*freq*f/F + phase)`` along the band axis, one phase per channel."""
    if not cfg.sine or cfg.sine_amp == 0:
        return x
    F = x.shape[-1]
    pos = np.arange(F) / F
    phase = rng.uniform(0, 2 * np.pi, size=x.shape[:-1] + (1,))
    return x + cfg.sine_amp * np.sin(2 * np.pi * cfg.sine_freq * pos + phase)


def one_hot(labels, n_classes: int) -> np.ndarray:
    labels = np.asarray(labels)
    out = np.zeros((labels.size, n_classes))
    out[np.arange(labels.size), labels] = 1
    return out


def mixup(xa, ya, xb, yb, rng: np.random.Generator, alpha: float, lam: float | None = None):
    """Blend two samples and their (soft) labels with lambda ~ Beta(alpha, alpha)."""
    if alpha <= 0:
        raise ValueError("mixup alpha must be positive")
    if np.shape(xa) != np.shape(xb):
        raise ValueError("mixup operands must share a shape")
    if lam is None:
        lam = float(rng.beta(alpha, alpha))
    x = lam * np.asarray(xa) + (1 - lam) * np.asarray(xb)
    y = lam * np.asarray(ya, dtype=float) + (1 - lam) * np.asarray(yb, dtype=float)
    return x, y, lam


# ---------------------------------------------------------------------------
# splits


@dataclass
class SplitPlan:
    scheme: str
    folds: list[tuple[np.ndarray, np.ndarray]]

    def __len__(self) -> int:
        return len(self.folds)


def parse_scheme(scheme: str) -> tuple[str, tuple[int, ...]]:
    """``loso`` | ``ratio:a:b`` | ``kfold:k``."""
    parts = scheme.split(":")
    try:
        if parts[0] == "loso" and len(parts) == 1:
            return "loso", ()
        if parts[0] == "ratio" and len(parts) == 3:
            a, b = int(parts[1]), int(parts[2])
            if a > 0 and b > 0:
                return "ratio", (a, b)
        if parts[0] == "kfold" and len(parts) == 2 and int(parts[1]) >= 2:
            return "kfold", (int(parts[1]),)
    except ValueError:
        pass
    raise ValueError(f"invalid scheme {scheme!r}; expected loso, ratio:a:b or kfold:k")


def make_splits(ds: FeatureDataset, scheme: str, seed: int = 0) -> SplitPlan:
    """Fold index sets for ``scheme``.

    ``ratio:a:b`` keeps each (subject, session) group's samples in stored
    (chronological) order and sends the first a/(a+b) to training.
    ``kfold:k`` shuffles each subject's samples with ``seed`` and deals them
    round-robin into k folds. ``loso`` holds out one subject per fold.
    """
    kind, args = parse_scheme(scheme)
    N = len(ds)
    if kind == "loso":
        subs = ds.subjects
        if len(subs) < 2:
            raise ValueError("loso needs at least two subjects")
        folds = [(np.flatnonzero(ds.subject_id != s), np.flatnonzero(ds.subject_id == s)) for s in subs]
    elif kind == "ratio":
        a, b = args
        train = np.zeros(N, bool)
        for key in sorted(set(zip(ds.subject_id.tolist(), ds.session_id.tolist()))):
            idx = np.flatnonzero((ds.subject_id == key[0]) & (ds.session_id == key[1]))
            n_train = int(round(len(idx) * a / (a + b)))
            train[idx[:n_train]] = True
        folds = [(np.flatnonzero(train), np.flatnonzero(~train))]
    else:
        (k,) = args
        rng = make_rng(seed)
        fold_of = np.empty(N, int)
        for s in ds.subjects:
            idx = np.flatnonzero(ds.subject_id == s)
            if len(idx) < k:
                raise ValueError(f"subject {s} has {len(idx)} samples, fewer than {k} folds")
            perm = rng.permutation(idx)
            fold_of[perm] = np.arange(len(perm)) % k
        folds = [(np.flatnonzero(fold_of != i), np.flatnonzero(fold_of == i)) for i in range(k)]
    return SplitPlan(scheme, folds)
