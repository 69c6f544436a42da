"""Synthetic desk-scale tasks: audio classification, pitch, onset detection.

Each generator is a pure function of its seed. Splits are drawn from
independent seed streams, so regeneration is bitwise reproducible.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import model as M
from .tensor import ContractError

AUDIO_SR = 16000
AUDIO_LEN = 2048
PITCH_LEN = 1024
PITCH_BINS = 60
PITCH_FMIN = 220.0  # centre of bin 0 (A3); 12 bins per octave
ONSET_SR = 22050
ONSET_FFT = 2048
ONSET_HOP = 512
ONSET_BANDS = 64
ONSET_CONTEXT = 15
ONSET_TOLERANCE = 1

SPLIT_FRACTIONS = (0.6, 0.2, 0.2)


@dataclass
class Split:
    inputs: np.ndarray
    targets: np.ndarray
    metric: str = "classification"  # or "onset"

    def __len__(self):
        return len(self.inputs)


@dataclass
class Dataset:
    task: str
    seed: int
    train: Split
    val: Split
    test: Split
    loss: str = "ce"  # "ce" or "bce"
    meta: dict = field(default_factory=dict)

    def splits(self):
        return {"train": self.train, "val": self.val, "test": self.test}


@dataclass(frozen=True)
class TaskSpec:
    name: str
    input_shape: tuple
    arity: int
    layers: tuple
    loss: str
    epochs: int

    def build(self, seed=0):
        return M.build_model(self.layers, self.input_shape, seed)


# ---------------------------------------------------------------------------
# audio classification


def class_profiles(classes=10, harmonics=16, seed=1234):
    """Fixed per-class (harmonic amplitude profile, noise level) pairs.

    Each class has a formant-like peak at its own harmonic, odd classes suppress
    even harmonics. Centres are jittered and redrawn until every pair of profiles
    is at least 0.2 apart in cosine distance.
    """
    rng = np.random.default_rng(seed)
    h = np.arange(1, harmonics + 1)
    while True:
        centres = np.linspace(1, harmonics - 3, classes) + rng.uniform(-0.3, 0.3, classes)
        profiles = []
        for c, centre in enumerate(centres):
            prof = np.exp(-0.5 * ((h - centre) / 1.6) ** 2) + 0.05 / h
            if c % 2:
                prof = prof * np.where(h % 2 == 1, 1.0, 0.15)
            profiles.append(prof / np.linalg.norm(prof))
        profiles = np.array(profiles)
        if profile_distances(profiles).min() >= 0.2:
            break
    noise = np.linspace(0.02, 0.3, classes)
    rng.shuffle(noise)
    return profiles, noise


def profile_distances(profiles):
    cos = profiles @ profiles.T
    return 1 - cos[np.triu_indices(len(profiles), 1)]


def _onepole_lowpass(x, a):
    """y[n] = (1-a) x[n] + a y[n-1] along the last axis."""
    from scipy.signal import lfilter

    return lfilter([1 - a], [1, -a], x, axis=-1)


def synth_timbre(label, profiles, noise_levels, rng, length=AUDIO_LEN, sr=AUDIO_SR):
    """One waveform of class ``label`` with random f0, phases, gain and noise."""
    prof = profiles[label]
    f0 = rng.uniform(180.0, 300.0)
    t = np.arange(length) / sr
    h = np.arange(1, len(prof) + 1)
    amps = prof * (h * f0 < sr / 2)
    phases = rng.uniform(0, 2 * np.pi, len(prof))
    wave = (amps[:, None] * np.sin(2 * np.pi * f0 * h[:, None] * t + phases[:, None])).sum(axis=0)
    wave /= np.abs(wave).max() + 1e-9
    coloured = _onepole_lowpass(rng.standard_normal(length), 0.6)
    coloured /= np.abs(coloured).std() + 1e-9
    wave = wave + noise_levels[label] * coloured + 0.01 * rng.standard_normal(length)
    gain = rng.uniform(0.5, 1.0)
    return (gain * wave / (np.abs(wave).max() + 1e-9)).astype(np.float32)


def _split_counts(n):
    n_train = int(round(n * SPLIT_FRACTIONS[0]))
    n_val = int(round(n * SPLIT_FRACTIONS[1]))
    return n_train, n_val, n - n_train - n_val


def _split_rng(seed, task_code, split_code):
    return np.random.default_rng(np.random.SeedSequence([int(seed), task_code, split_code]))


def gen_audio_class(n_per_class=200, classes=10, seed=0) -> Dataset:
    if n_per_class < 50:
        raise ValueError("n_per_class must be at least 50")
    profiles, noise = class_profiles(classes)
    counts = _split_counts(n_per_class)
    splits = []
    for code, per_class in enumerate(counts):
        rng = _split_rng(seed, 1, code)
        labels = np.repeat(np.arange(classes), per_class)
        rng.shuffle(labels)
        x = np.stack([synth_timbre(c, profiles, noise, rng) for c in labels])[:, None, :]
        splits.append(Split(x, labels.astype(np.int64)))
    return Dataset("audio-class", seed, *splits, loss="ce",
                   meta={"profile_min_distance": float(profile_distances(profiles).min())})


# ---------------------------------------------------------------------------
# pitch


def bin_frequency(b):
    return PITCH_FMIN * 2.0 ** (np.asarray(b, dtype=np.float64) / 12.0)


def pitch_label(f0):
    return np.rint(12.0 * np.log2(np.asarray(f0, dtype=np.float64) / PITCH_FMIN)).astype(np.int64)


def synth_tone(f0, rng, length=PITCH_LEN, sr=AUDIO_SR, harmonics=None, noise=None):
    """Harmonic tone with random timbre. ``harmonics=1`` and ``noise=0`` give a pure sine."""
    t = np.arange(length) / sr
    if harmonics is None:
        harmonics = int(rng.integers(1, 9))
    h = np.arange(1, harmonics + 1)
    amps = rng.uniform(0.1, 1.0, harmonics) * h ** -rng.uniform(0.0, 1.5)
    amps[0] = max(amps[0], 0.3)
    amps = amps * (h * f0 < sr / 2)
    phases = rng.uniform(0, 2 * np.pi, harmonics)
    wave = (amps[:, None] * np.sin(2 * np.pi * f0 * h[:, None] * t + phases[:, None])).sum(axis=0)
    wave /= np.abs(wave).max() + 1e-9
    if noise is None:
        noise = rng.uniform(0.0, 0.2)
    wave = wave + noise * rng.standard_normal(length)
    return (rng.uniform(0.5, 1.0) * wave / (np.abs(wave).max() + 1e-9)).astype(np.float32)


def gen_pitch(n=6000, bins=PITCH_BINS, seed=0, detune=0.25) -> Dataset:
    if n < 1000:
        raise ValueError("n must be at least 1000")
    splits = []
    for code, count in enumerate(_split_counts(n)):
        rng = _split_rng(seed, 2, code)
        labels = np.arange(count) % bins
        rng.shuffle(labels)
        f0s = bin_frequency(labels + rng.uniform(-detune, detune, count))
        x = np.stack([synth_tone(f, rng) for f in f0s])[:, None, :]
        splits.append(Split(x, pitch_label(f0s)))
    return Dataset("pitch", seed, *splits, loss="ce", meta={"bins": bins})


# ---------------------------------------------------------------------------
# onset


def filterbank(n_fft=ONSET_FFT, sr=ONSET_SR, bands=ONSET_BANDS, fmin=20.0, fmax=11025.0):
    """Triangular bands equally spaced on the mel scale."""
    mel = lambda f: 2595.0 * np.log10(1 + f / 700.0)  # noqa: E731
    inv = lambda m: 700.0 * (10 ** (m / 2595.0) - 1)  # noqa: E731
    edges = inv(np.linspace(mel(fmin), mel(fmax), bands + 2))
    freqs = np.fft.rfftfreq(n_fft, 1 / sr)
    fb = np.zeros((bands, len(freqs)))
    for b in range(bands):
        lo, mid, hi = edges[b], edges[b + 1], edges[b + 2]
        up = (freqs - lo) / max(mid - lo, 1e-9)
        down = (hi - freqs) / max(hi - mid, 1e-9)
        fb[b] = np.clip(np.minimum(up, down), 0, None)
    return fb


_FB = None


def log_filterbank_frames(audio):
    """Centred STFT frames (hop 512, Hann 2048) -> [frames, 64] log band energies."""
    global _FB
    if _FB is None:
        _FB = filterbank()
    pad = ONSET_FFT // 2
    x = np.pad(audio, (pad, pad))
    n_frames = 1 + (len(x) - ONSET_FFT) // ONSET_HOP
    idx = np.arange(ONSET_FFT)[None, :] + ONSET_HOP * np.arange(n_frames)[:, None]
    spec = np.abs(np.fft.rfft(x[idx] * np.hanning(ONSET_FFT), axis=1))
    return np.log1p(10.0 * (spec @ _FB.T)).astype(np.float32)


def synth_onset_track(rng, seconds=2.0, max_events=10, silent=False):
    """Percussive bursts over a noise bed. Returns (audio, onset sample positions).

    Burst levels span 20 dB and some attacks are soft, so a share of onsets sit
    close to the bed level or smear across frames.
    """
    n = int(seconds * ONSET_SR)
    t = np.arange(n) / ONSET_SR
    if silent:
        return np.zeros(n), []
    bed_level = np.exp(rng.uniform(np.log(0.005), np.log(0.05)))
    audio = bed_level * _onepole_lowpass(rng.standard_normal(n), rng.uniform(0.0, 0.9))
    # a slowly swelling tone as a distractor
    swell = np.clip(np.sin(np.pi * t / seconds), 0, None) ** 2
    audio += rng.uniform(0.0, 0.1) * swell * np.sin(2 * np.pi * rng.uniform(100, 1000) * t)
    k = int(rng.integers(3, max_events + 1))
    candidates = np.sort(rng.choice(np.arange(ONSET_HOP, n - 4 * ONSET_HOP), size=k, replace=False))
    onsets = []
    for pos in candidates:
        if not onsets or pos - onsets[-1] >= 3 * ONSET_HOP:
            onsets.append(int(pos))
    for pos in onsets:
        seg = _burst(rng, n - pos)
        audio[pos : pos + len(seg)] += seg
    return audio, onsets


def _burst(rng, room):
    length = min(room, int(rng.uniform(0.05, 0.25) * ONSET_SR))
    t = np.arange(length) / ONSET_SR
    attack = rng.uniform(0.0, 0.02)
    env = np.exp(-t / rng.uniform(0.01, 0.08))
    if attack > 0:
        env = env * np.clip(t / attack, 0, 1)
    if rng.random() < 0.5:
        body = _onepole_lowpass(rng.standard_normal(length), rng.uniform(0.0, 0.95))
        body /= np.abs(body).max() + 1e-9
    else:
        body = np.sin(2 * np.pi * rng.uniform(60, 2000) * t)
    return np.exp(rng.uniform(np.log(0.1), np.log(1.0))) * env * body


def onset_frame_targets(onsets, n_frames):
    target = np.zeros(n_frames, dtype=np.int64)
    for pos in onsets:
        f = int(np.floor(pos / ONSET_HOP + 0.5))
        if 0 <= f < n_frames:
            target[f] = 1
    return target


def context_windows(frames, context=ONSET_CONTEXT):
    """[frames, bands] -> [frames, context, bands], edge frames repeated."""
    half = context // 2
    padded = np.pad(frames, ((half, half), (0, 0)), mode="edge")
    idx = np.arange(len(frames))[:, None] + np.arange(context)[None, :]
    return padded[idx]


def gen_onset(n_tracks=100, seed=0, seconds=2.0) -> Dataset:
    if n_tracks < 50:
        raise ValueError("n_tracks must be at least 50")
    splits = []
    for code, count in enumerate(_split_counts(n_tracks)):
        rng = _split_rng(seed, 3, code)
        xs, ys = [], []
        for _ in range(count):
            audio, onsets = synth_onset_track(rng, seconds)
            frames = log_filterbank_frames(audio)
            xs.append(context_windows(frames))
            ys.append(onset_frame_targets(onsets, len(frames)))
        splits.append(Split(np.concatenate(xs).astype(np.float32), np.concatenate(ys), metric="onset"))
    return Dataset("onset", seed, *splits, loss="bce", meta={"tracks": n_tracks})


def onset_error(predictions, targets, threshold=0.5, tolerance=ONSET_TOLERANCE):
    """1 - F-measure of peak-picked detections against onset frames, with ±tolerance frames.

    A frame is a detection when its probability is at least ``threshold`` and it is
    the first maximum among its ±1 neighbours. Detections and targets are matched
    greedily in time order.
    """
    p = np.asarray(predictions, dtype=np.float64).reshape(-1)
    t = np.asarray(targets).reshape(-1)
    if p.shape != t.shape:
        raise ContractError(f"predictions {p.shape} and targets {t.shape} are not aligned")
    true_frames = np.flatnonzero(t > 0)
    if len(true_frames) == 0:
        raise ContractError("onset_error needs at least one positive target")
    left = np.concatenate([[-np.inf], p[:-1]])
    right = np.concatenate([p[1:], [-np.inf]])
    det = np.flatnonzero((p >= threshold) & (p > left) & (p >= right))
    used = np.zeros(len(true_frames), dtype=bool)
    tp = 0
    for d in det:
        lo = np.searchsorted(true_frames, d - tolerance)
        hi = np.searchsorted(true_frames, d + tolerance, side="right")
        for j in range(lo, hi):
            if not used[j]:
                used[j] = True
                tp += 1
                break
    fp = len(det) - tp
    fn = len(true_frames) - tp
    return 1.0 - 2.0 * tp / (2.0 * tp + fp + fn)


# ---------------------------------------------------------------------------
# reference architectures


def audio_class_layers(width=16, hidden=64, classes=10):
    return (
        M.conv1d(width, 64, stride=4), M.batchnorm(), M.relu(), M.dropout(0.1), M.maxpool(4),
        M.conv1d(width, 5, dilation=2), M.batchnorm(), M.relu(), M.dropout(0.1), M.maxpool(2),
        M.conv1d(width, 5, dilation=4), M.batchnorm(), M.relu(), M.dropout(0.1), M.maxpool(2),
        M.conv1d(width, 3, dilation=8), M.batchnorm(), M.relu(), M.dropout(0.1),
        M.flatten(),
        M.dense(hidden), M.batchnorm(), M.relu(),
        M.dense(hidden), M.batchnorm(), M.relu(),
        M.dense(hidden), M.batchnorm(), M.relu(),
        M.output_dense(classes),
    )


def pitch_layers(width=48, bins=PITCH_BINS):
    # long strided front end, then unpooled convs so most FLOPS sit between two trimmed layers
    return (
        M.conv1d(width, 128, stride=16), M.batchnorm(), M.relu(),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(),
        M.flatten(),
        M.output_dense(bins),
    )


def onset_layers(width=32, hidden=64):
    return (
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(), M.maxpool(2),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(), M.maxpool(2),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(), M.maxpool(2),
        M.conv1d(width, 5, padding=2), M.batchnorm(), M.relu(), M.maxpool(2),
        M.flatten(),
        M.dense(hidden), M.batchnorm(), M.relu(), M.dropout(0.2),
        M.dense(hidden), M.batchnorm(), M.relu(), M.dropout(0.2),
        M.dense(hidden // 2), M.batchnorm(), M.relu(),
        M.output_dense(1),
    )


TASKS = {
    "audio-class": TaskSpec("audio-class", (1, AUDIO_LEN), 10, audio_class_layers(), "ce", 40),
    "pitch": TaskSpec("pitch", (1, PITCH_LEN), PITCH_BINS, pitch_layers(), "ce", 30),
    "onset": TaskSpec("onset", (ONSET_CONTEXT, ONSET_BANDS), 1, onset_layers(), "bce", 40),
}

GENERATORS = {
    "audio-class": lambda seed, **kw: gen_audio_class(seed=seed, **kw),
    "pitch": lambda seed, **kw: gen_pitch(seed=seed, **kw),
    "onset": lambda seed, **kw: gen_onset(seed=seed, **kw),
}


def get_task(name) -> TaskSpec:
    if name not in TASKS:
        raise KeyError(f"unknown task {name!r}; choose from {sorted(TASKS)}")
    return TASKS[name]


def make_dataset(name, seed=0, **kwargs) -> Dataset:
    get_task(name)
    return GENERATORS[name](seed, **kwargs)


# ---------------------------------------------------------------------------
# dataset cache

DS_MAGIC = b"TLDS"
TASK_TAGS = {"audio-class": 1, "pitch": 2, "onset": 3}
LOSS_TAGS = {"ce": 0, "bce": 1}
METRIC_TAGS = {"classification": 0, "onset": 1}


def dumps_dataset(ds: Dataset) -> bytes:
    parts = [DS_MAGIC, struct.pack("<BQB", TASK_TAGS[ds.task], ds.seed, LOSS_TAGS[ds.loss])]
    for split in (ds.train, ds.val, ds.test):
        shape = split.inputs.shape
        parts.append(struct.pack("<BIB", METRIC_TAGS[split.metric], shape[0], len(shape) - 1))
        parts.append(struct.pack(f"<{len(shape) - 1}I", *shape[1:]))
    for split in (ds.train, ds.val, ds.test):
        parts.append(np.ascontiguousarray(split.inputs, dtype="<f4").tobytes())
        parts.append(np.ascontiguousarray(split.targets, dtype="<f4").tobytes())
    return b"".join(parts)


def save_dataset(ds: Dataset, path):
    Path(path).write_bytes(dumps_dataset(ds))


def loads_dataset(data: bytes) -> Dataset:
    if data[:4] != DS_MAGIC:
        raise ValueError("not a dataset cache file (bad magic)")
    pos = 4
    task_tag, seed, loss_tag = struct.unpack_from("<BQB", data, pos)
    pos += struct.calcsize("<BQB")
    heads = []
    for _ in range(3):
        metric_tag, count, rank = struct.unpack_from("<BIB", data, pos)
        pos += struct.calcsize("<BIB")
        dims = struct.unpack_from(f"<{rank}I", data, pos)
        pos += 4 * rank
        heads.append((metric_tag, count, dims))
    splits = []
    metrics = {v: k for k, v in METRIC_TAGS.items()}
    for metric_tag, count, dims in heads:
        n = count * int(np.prod(dims))
        x = np.frombuffer(data, "<f4", n, pos).astype(np.float32).reshape((count,) + tuple(dims))
        pos += 4 * n
        y = np.frombuffer(data, "<f4", count, pos).astype(np.int64)
        pos += 4 * count
        splits.append(Split(x, y, metrics[metric_tag]))
    if pos != len(data):
        raise ValueError(f"dataset cache has trailing bytes at offset {pos}")
    tasks = {v: k for k, v in TASK_TAGS.items()}
    losses = {v: k for k, v in LOSS_TAGS.items()}
    return Dataset(tasks[task_tag], seed, *splits, loss=losses[loss_tag])


def load_dataset(path) -> Dataset:
    return loads_dataset(Path(path).read_bytes())
