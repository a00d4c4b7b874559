"""Synthetic articulatory-acoustic corpus with a known mapping.

Each utterance is a set of smooth sensor trajectories (sums of slow
sinusoids). Three driver channels set the centre frequencies of three
pseudo-formants through a fixed affine map, and the ground-truth
spectrogram is the sum of Gaussian bumps at those frequencies on top of a
-6 dB/octave floor. The remaining channels are mixed with a driver so they
are correlated but not informative on their own.
"""

import hashlib
import json
import logging
import zlib
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .exceptions import ConfigurationError, InvalidInputError
from .features import (
    EMA_RATE,
    N_FFT,
    SAMPLE_RATE,
    SENSORS,
    EmaRecording,
    apply_mel,
    channel_names,
    compute_ema_stats,
    decimate_ema,
    griffin_lim,
    make_mel_filterbank,
    prepare_ema,
)

logger = logging.getLogger(__name__)

AMPLITUDE_SUM = 1.0
OFFSET_RANGE = 0.5
FREQ_RANGE = (0.5, 4.0)
N_COMPONENTS = 3

# (driver channel, intercept Hz, slope Hz per unit driver); driver in [-1.5, 1.5]
FORMANTS = (
    ("T1_y", 600.0, 200.0),        # F1 in [300, 900]
    ("LL_y", 1700.0, 1600.0 / 3),  # F2 in [900, 2500]
    ("T3_y", 2750.0, 500.0),       # F3 in [2000, 3500]
)
REQUIRED_SENSORS = ("T1", "LL")
F3_FALLBACK = "T1_y"

TRANSCRIPT_ALPHABET = "aeiouy"
FRAMES_PER_CHAR = 8


@dataclass(frozen=True)
class SyntheticCorpusConfig:
    n_utterances: int = 70
    duration_s: float = 2.0
    seed: int = 0
    sensors: tuple = SENSORS
    formant_count: int = 3
    train_fraction: float = 304 / 354
    dims: int = 2
    bump_amplitude: float = 1.0
    bump_width_hz: float = 80.0
    floor_amplitude: float = 0.01
    floor_ref_hz: float = 100.0
    gl_iterations: int = 60

    def __post_init__(self):
        object.__setattr__(self, "sensors", tuple(self.sensors))
        if self.n_utterances < 1:
            raise ConfigurationError("n_utterances must be >= 1")
        if not self.duration_s > 0:
            raise ConfigurationError("duration_s must be positive")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError("train_fraction must lie in (0, 1)")
        if not 1 <= self.formant_count <= len(FORMANTS):
            raise ConfigurationError(f"formant_count must be in 1..{len(FORMANTS)}")
        missing = [s for s in REQUIRED_SENSORS if s not in self.sensors]
        if missing:
            raise ConfigurationError(f"corpus sensors must include the drivers {missing}")

    def to_dict(self):
        d = asdict(self)
        d["sensors"] = list(self.sensors)
        return d

    def digest(self):
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def utterance_seed(seed, utt_id):
    """Per-utterance seed independent of generation order."""
    return np.random.SeedSequence([int(seed) & 0xFFFFFFFF, zlib.crc32(utt_id.encode())])


def _sinusoid_sum(rng, t):
    weights = rng.dirichlet(np.ones(N_COMPONENTS)) * AMPLITUDE_SUM
    freqs = rng.uniform(*FREQ_RANGE, size=N_COMPONENTS)
    phases = rng.uniform(0.0, 2 * np.pi, size=N_COMPONENTS)
    offset = rng.uniform(-OFFSET_RANGE, OFFSET_RANGE)
    return offset + np.sin(2 * np.pi * freqs[None, :] * t[:, None] + phases[None, :]) @ weights


def generate_trajectory(seed, duration_s, sensors=SENSORS, dims=2):
    """Smooth random sensor trajectories at 250 Hz.

    Every channel is an offset in [-0.5, 0.5] plus three sinusoids
    (0.5-4 Hz) whose amplitudes sum to 1, so values stay within [-1.5, 1.5].
    Non-driver channels are convex mixtures of their own sinusoid sum and a
    driver channel, which keeps the same bounds.

    Parameters
    ----------
    seed : int or numpy.random.SeedSequence
    duration_s : float
    sensors : sequence of str
    dims : int

    Returns
    -------
    EmaRecording
    """
    if not duration_s > 0:
        raise InvalidInputError("duration_s must be positive")
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * EMA_RATE))
    t = np.arange(n) / EMA_RATE
    names = channel_names(sensors, dims)
    own = {name: _sinusoid_sum(rng, t) for name in names}
    drivers = [d for d, _, _ in FORMANTS if d in own]
    coords = np.empty((n, len(names)))
    for j, name in enumerate(names):
        if name in drivers or not drivers:
            coords[:, j] = own[name]
            continue
        partner = drivers[rng.integers(len(drivers))]
        rho = rng.uniform(0.2, 0.6)
        coords[:, j] = (1 - rho) * own[name] + rho * own[partner]
    return EmaRecording(tuple(sensors), coords, EMA_RATE, dims)


def formant_tracks(ema, formant_count=3, factor=4):
    """Formant centre frequencies (Hz) per 62.5 Hz frame, shape ``(T, K)``."""
    channels = ema.channels
    missing = [s for s in REQUIRED_SENSORS if s not in ema.sensors]
    if missing:
        raise ConfigurationError(f"articulation mapping needs driver sensors {missing}")
    frames = decimate_ema(ema.coords, factor) if len(ema) >= factor else np.zeros((0, len(channels)))
    tracks = []
    for driver, a, b in FORMANTS[:formant_count]:
        if driver not in channels:
            driver = F3_FALLBACK
        tracks.append(a + b * frames[:, channels.index(driver)])
    return np.stack(tracks, axis=1) if tracks else np.zeros((frames.shape[0], 0))


def articulate_to_spectrum(ema, formant_count=3, bump_amplitude=1.0, bump_width_hz=80.0,
                           floor_amplitude=0.01, floor_ref_hz=100.0, n_fft=N_FFT, sample_rate=SAMPLE_RATE):
    """Ground-truth magnitude spectrogram for an EMA recording.

    Frames are computed on the 62.5 Hz grid (groups of four EMA frames).
    Each frame is a sum of Gaussian bumps at the formant frequencies plus a
    floor that falls 6 dB per octave above ``floor_ref_hz``.
    """
    tracks = formant_tracks(ema, formant_count)
    freqs = np.arange(n_fft // 2 + 1) * sample_rate / n_fft
    floor = floor_amplitude * np.minimum(1.0, floor_ref_hz / np.maximum(freqs, 1e-12))
    diff = freqs[None, None, :] - tracks[:, :, None]
    bumps = bump_amplitude * np.exp(-0.5 * (diff / bump_width_hz) ** 2)
    return bumps.sum(axis=1) + floor[None, :]


def transcript_from_tracks(f1, frames_per_char=FRAMES_PER_CHAR):
    """Pseudo-transcript: one letter per segment from the mean F1 height."""
    f1 = np.asarray(f1, dtype=np.float64)
    lo, hi = FORMANTS[0][1] - 1.5 * FORMANTS[0][2], FORMANTS[0][1] + 1.5 * FORMANTS[0][2]
    chars = []
    for start in range(0, f1.shape[0] - frames_per_char + 1, frames_per_char):
        v = (f1[start:start + frames_per_char].mean() - lo) / (hi - lo)
        idx = int(np.clip(np.floor(v * len(TRANSCRIPT_ALPHABET)), 0, len(TRANSCRIPT_ALPHABET) - 1))
        chars.append(TRANSCRIPT_ALPHABET[idx])
    return "".join(chars)


@dataclass
class SyntheticUtterance:
    id: str
    ema: EmaRecording
    spec: np.ndarray
    mel: np.ndarray
    wave: object
    transcript: str = ""


def generate_utterance(config, utt_id):
    seed = utterance_seed(config.seed, utt_id)
    ema = generate_trajectory(seed, config.duration_s, config.sensors, config.dims)
    spec = articulate_to_spectrum(ema, config.formant_count, config.bump_amplitude, config.bump_width_hz,
                                  config.floor_amplitude, config.floor_ref_hz)
    mel = apply_mel(spec, make_mel_filterbank())
    wave = griffin_lim(spec, config.gl_iterations)
    transcript = transcript_from_tracks(formant_tracks(ema, 1)[:, 0])
    return SyntheticUtterance(utt_id, ema, spec, mel, wave, transcript)


def split_ids(ids, train_fraction, seed):
    """Seeded shuffle, then the first ``floor(n * train_fraction)`` ids train.

    At least one utterance always goes to training.
    """
    ids = list(ids)
    rng = np.random.default_rng([int(seed) & 0xFFFFFFFF, 0x5B117])
    order = [ids[i] for i in rng.permutation(len(ids))]
    n_train = max(1, int(np.floor(len(ids) * train_fraction + 1e-9)))
    return sorted(order[:n_train]), sorted(order[n_train:])


def build_corpus(config, out_dir):
    """Generate, split and write a corpus; returns the manifest dict.

    Layout under ``out_dir``::

        manifest.json      ids, splits, paths, generator config and hash
        ema_stats.json     per-channel maxima over the training split
        ema/<id>.csv/.json trajectories and metadata
        wav/<id>.wav       phase-reconstructed ground-truth audio
        spec/<id>.npy      ground-truth magnitude spectrogram
        text/<id>.txt      pseudo-transcript
    """
    from .fileio import write_ema, write_json, write_stats, write_wav

    out = Path(out_dir)
    for sub in ("ema", "wav", "spec", "text"):
        (out / sub).mkdir(parents=True, exist_ok=True)
    ids = [f"utt{i:04d}" for i in range(config.n_utterances)]
    train_ids, test_ids = split_ids(ids, config.train_fraction, config.seed)
    train_set = set(train_ids)
    records = []
    train_recs = []
    for utt_id in ids:
        utt = generate_utterance(config, utt_id)
        paths = {
            "ema": f"ema/{utt_id}.csv",
            "wav": f"wav/{utt_id}.wav",
            "spec": f"spec/{utt_id}.npy",
            "text": f"text/{utt_id}.txt",
        }
        try:
            write_ema(out / paths["ema"], utt.ema, speaker_id="synth", utterance_id=utt_id)
            write_wav(out / paths["wav"], utt.wave)
            with open(out / paths["spec"], "wb") as fh:
                np.save(fh, utt.spec.astype("<f8"), allow_pickle=False)
            (out / paths["text"]).write_text(utt.transcript + "\n")
        except OSError as exc:
            raise OSError(f"failed writing utterance {utt_id} under {out}: {exc}") from exc
        split = "train" if utt_id in train_set else "test"
        if split == "train":
            train_recs.append(utt.ema)
        records.append({"id": utt_id, "split": split, "frames": int(utt.spec.shape[0]), **paths})
    stats = compute_ema_stats(train_recs)
    write_stats(out / "ema_stats.json", stats)
    warnings = []
    if not test_ids:
        warnings.append("empty test split")
    manifest = {
        "generator": config.to_dict(),
        "config_hash": config.digest(),
        "n_train": len(train_ids),
        "n_test": len(test_ids),
        "utterances": records,
        "stats": "ema_stats.json",
        "warnings": warnings,
    }
    write_json(out / "manifest.json", manifest)
    return manifest


@dataclass
class Corpus:
    """A loaded split: training examples plus per-utterance side data."""

    root: Path
    manifest: dict
    examples: list
    waves: dict = field(default_factory=dict)
    transcripts: dict = field(default_factory=dict)
    sensors: tuple = SENSORS

    @property
    def config_hash(self):
        return self.manifest.get("config_hash", "")

    @property
    def ids(self):
        return [ex.id for ex in self.examples]


def load_corpus(root, split="train", sensors=None, stats=None, radius=2):
    """Read one split from disk as frame-aligned :class:`Example` objects.

    EMA goes through sensor selection, normalization with the training-split
    maxima (``ema_stats.json`` unless ``stats`` is given), 4:1 decimation and
    context windowing; EMA and spectrogram are truncated to a common length.
    """
    from .fileio import read_ema, read_json, read_stats, read_wav
    from .training import Example

    root = Path(root)
    manifest = read_json(root / "manifest.json")
    if split not in ("train", "test", "all"):
        raise InvalidInputError(f"unknown split {split!r}")
    stats = stats if stats is not None else read_stats(root / manifest.get("stats", "ema_stats.json"))
    sensors = tuple(sensors) if sensors else tuple(manifest["generator"]["sensors"])
    examples, waves, texts = [], {}, {}
    for rec in manifest["utterances"]:
        if split != "all" and rec["split"] != split:
            continue
        ema = read_ema(root / rec["ema"])
        spec = np.load(root / rec["spec"], allow_pickle=False)
        feats = prepare_ema(ema, stats, sensors, radius)
        t = min(feats.shape[0], spec.shape[0])
        examples.append(Example(rec["id"], feats[:t], spec[:t]))
        waves[rec["id"]] = read_wav(root / rec["wav"])
        texts[rec["id"]] = (root / rec["text"]).read_text().strip()
    return Corpus(root, manifest, examples, waves, texts, sensors)
