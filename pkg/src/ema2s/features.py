"""Signal-processing front end.

Short-time Fourier analysis and its inverse, the mel projection used by
the losses, EMA normalization / frame alignment / context windowing, and
Griffin-Lim phase reconstruction. The module-level functions are pure;
the estimator classes at the bottom wrap them in the scikit-learn
``fit``/``transform`` protocol so that the EMA front end can sit in a
:class:`sklearn.pipeline.Pipeline`.
"""

import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import get_window
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_matrix, check_sequences, check_signal
from .exceptions import DegenerateChannelError, InvalidInputError

logger = logging.getLogger(__name__)

SAMPLE_RATE = 16000
EMA_RATE = 250
N_FFT = 1024
HOP = 256
N_MELS = 80

SENSORS = ("UL", "LL", "UJ", "LJ", "T1", "T2", "T3", "T4", "VM")
FEWER_SENSORS = ("UL", "LL", "LJ", "T1")
AXES = ("x", "y", "z")


# ---------------------------------------------------------------------------
# data containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Waveform:
    samples: np.ndarray
    sample_rate: int = SAMPLE_RATE

    def __post_init__(self):
        if self.sample_rate <= 0:
            raise InvalidInputError("sample_rate must be positive")
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 1 or not np.all(np.isfinite(arr)):
            raise InvalidInputError("waveform samples must be a finite 1-D array")
        object.__setattr__(self, "samples", arr)

    def __len__(self):
        return self.samples.shape[0]


def channel_names(sensors, dims=2):
    """Column labels ``<SENSOR>_x, <SENSOR>_y[, <SENSOR>_z]`` in sensor order."""
    if not 2 <= dims <= 3:
        raise InvalidInputError("EMA coordinates are 2-D or 3-D")
    return [f"{s}_{a}" for s in sensors for a in AXES[:dims]]


@dataclass(frozen=True)
class EmaRecording:
    """Raw sensor trajectories, one row per 250 Hz frame.

    ``coords`` holds ``dims`` Cartesian coordinates per sensor, grouped by
    sensor in the order of ``sensors``.
    """

    sensors: tuple
    coords: np.ndarray
    sample_rate: int = EMA_RATE
    dims: int = 2
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        sensors = tuple(self.sensors)
        unknown = set(sensors) - set(SENSORS)
        if unknown:
            raise InvalidInputError(f"unknown sensor labels {sorted(unknown)}")
        if len(set(sensors)) != len(sensors):
            raise InvalidInputError("duplicate sensor labels")
        coords = check_matrix(self.coords, "coords", width=self.dims * len(sensors), allow_empty=True)
        object.__setattr__(self, "sensors", sensors)
        object.__setattr__(self, "coords", coords)

    @property
    def channels(self):
        return channel_names(self.sensors, self.dims)

    def __len__(self):
        return self.coords.shape[0]

    def select(self, sensors):
        """Restrict to a sensor subset, keeping the requested order."""
        missing = [s for s in sensors if s not in self.sensors]
        if missing:
            raise InvalidInputError(f"recording lacks sensors {missing}")
        cols = []
        for s in sensors:
            start = self.sensors.index(s) * self.dims
            cols.extend(range(start, start + self.dims))
        return EmaRecording(tuple(sensors), self.coords[:, cols], self.sample_rate, self.dims, dict(self.meta))

    def column(self, name):
        return self.coords[:, self.channels.index(name)]


# ---------------------------------------------------------------------------
# Fourier analysis
# ---------------------------------------------------------------------------


def _hann(n_fft):
    return get_window("hann", n_fft, fftbins=True)


def _frame(padded, n_fft, hop, n_frames):
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return padded[idx]


def stft_complex(samples, n_fft=N_FFT, hop=HOP):
    """Centered STFT, shape ``(1 + len // hop, n_fft // 2 + 1)``."""
    x = check_signal(samples)
    if n_fft % 2 or n_fft <= 0:
        raise InvalidInputError("n_fft must be a positive even integer")
    if not 0 < hop <= n_fft:
        raise InvalidInputError("hop must lie in (0, n_fft]")
    pad = n_fft // 2
    padded = np.pad(x, pad, mode="reflect")
    n_frames = 1 + x.shape[0] // hop
    frames = _frame(padded, n_fft, hop, n_frames) * _hann(n_fft)
    return np.fft.rfft(frames, axis=1)


def stft_magnitude(w, n_fft=N_FFT, hop=HOP):
    """Magnitude spectrogram of a waveform (Hann window, reflective centering).

    Parameters
    ----------
    w : Waveform or array_like
        Mono signal.
    n_fft, hop : int
        Window length and frame shift in samples.

    Returns
    -------
    ndarray, shape (1 + len(w) // hop, n_fft // 2 + 1)
    """
    samples = w.samples if isinstance(w, Waveform) else w
    return np.abs(stft_complex(samples, n_fft, hop))


def istft(spec, n_fft=N_FFT, hop=HOP, length=None):
    """Least-squares inverse of :func:`stft_complex` (weighted overlap-add)."""
    spec = np.asarray(spec)
    if spec.ndim != 2 or spec.shape[1] != n_fft // 2 + 1:
        raise InvalidInputError(f"spectrogram must have {n_fft // 2 + 1} columns")
    n_frames = spec.shape[0]
    window = _hann(n_fft)
    frames = np.fft.irfft(spec, n=n_fft, axis=1) * window
    total = n_fft + hop * (n_frames - 1)
    out = np.zeros(total)
    norm = np.zeros(total)
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    np.add.at(out, idx, frames)
    np.add.at(norm, idx, np.broadcast_to(window**2, frames.shape))
    out /= np.maximum(norm, 1e-11)
    pad = n_fft // 2
    if length is None:
        length = hop * (n_frames - 1)
    out = out[pad:pad + length]
    if out.shape[0] < length:
        out = np.pad(out, (0, length - out.shape[0]))
    return out


def zero_phase(mag):
    """``mag`` with zero phase relative to each frame centre.

    Frames are analysed from their first sample, so a phase of zero at the
    frame centre is a sign flip on odd bins.
    """
    signs = np.where(np.arange(mag.shape[1]) % 2, -1.0, 1.0)
    return mag * signs


def griffin_lim(s, iterations=60, n_fft=N_FFT, hop=HOP, sample_rate=SAMPLE_RATE, momentum=0.9):
    """Reconstruct a waveform whose STFT magnitude approximates ``s``.

    Starts from zero phase and alternates inverse / forward transforms,
    keeping the phase and replacing the magnitude with ``s``. ``momentum``
    extrapolates the phase estimate between iterations (0 gives the plain
    algorithm). ``iterations=0`` is the inverse transform of ``s`` with zero
    phase; runs with fewer iterations are prefixes of longer ones.
    """
    mag = check_matrix(s, "spectrogram", width=n_fft // 2 + 1, nonnegative=True)
    if iterations < 0:
        raise InvalidInputError("iterations must be >= 0")
    length = hop * (mag.shape[0] - 1)
    x = istft(zero_phase(mag).astype(np.complex128), n_fft, hop, length)
    previous = None
    for _ in range(iterations):
        if length == 0:
            break
        rebuilt = stft_complex(x, n_fft, hop)
        target = rebuilt if previous is None else rebuilt + momentum * (rebuilt - previous)
        previous = rebuilt
        x = istft(mag * np.exp(1j * np.angle(target)), n_fft, hop, length)
    return Waveform(x, sample_rate)


def spectral_error(s, w, n_fft=N_FFT, hop=HOP):
    """Relative L2 distance between ``s`` and the STFT magnitude of ``w``."""
    rebuilt = stft_magnitude(w, n_fft, hop)
    t = min(rebuilt.shape[0], s.shape[0])
    ref = np.linalg.norm(s[:t])
    if ref == 0:
        return float(np.linalg.norm(rebuilt[:t]))
    return float(np.linalg.norm(rebuilt[:t] - s[:t]) / ref)


# ---------------------------------------------------------------------------
# mel projection
# ---------------------------------------------------------------------------


def hz_to_mel(f):
    return 2595.0 * np.log10(1.0 + np.asarray(f, dtype=np.float64) / 700.0)


def mel_to_hz(m):
    return 700.0 * (10.0 ** (np.asarray(m, dtype=np.float64) / 2595.0) - 1.0)


@dataclass(frozen=True)
class MelFilterbank:
    weights: np.ndarray
    centers_hz: np.ndarray
    sample_rate: int
    fmin: float
    fmax: float

    @property
    def m_bins(self):
        return self.weights.shape[0]

    @property
    def f_bins(self):
        return self.weights.shape[1]


def make_mel_filterbank(f_bins=N_FFT // 2 + 1, m_bins=N_MELS, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
    """Triangular filters with centers uniformly spaced on the mel scale.

    Filter ``m`` rises linearly from edge ``m`` to center ``m + 1`` and
    falls to edge ``m + 2`` of ``m_bins + 2`` mel-equispaced points; peak
    height is 1 (no area normalization).
    """
    if fmax is None:
        fmax = sample_rate / 2
    if m_bins < 2:
        raise InvalidInputError("m_bins must be >= 2")
    if f_bins < 2:
        raise InvalidInputError("f_bins must be >= 2")
    if not 0 <= fmin < fmax:
        raise InvalidInputError("need 0 <= fmin < fmax")
    if fmax > sample_rate / 2:
        raise InvalidInputError(f"fmax {fmax} exceeds Nyquist {sample_rate / 2}")
    n_fft = 2 * (f_bins - 1)
    bin_hz = np.arange(f_bins) * sample_rate / n_fft
    edges = mel_to_hz(np.linspace(hz_to_mel(fmin), hz_to_mel(fmax), m_bins + 2))
    lower, center, upper = edges[:-2, None], edges[1:-1, None], edges[2:, None]
    rising = (bin_hz - lower) / (center - lower)
    falling = (upper - bin_hz) / (upper - center)
    weights = np.maximum(0.0, np.minimum(rising, falling))
    empty = np.flatnonzero(weights.sum(axis=1) <= 0)
    if empty.size:
        raise InvalidInputError(f"mel filters {empty.tolist()} cover no frequency bin; reduce m_bins")
    return MelFilterbank(weights, edges[1:-1].copy(), sample_rate, float(fmin), float(fmax))


def apply_mel(s, fb):
    """Project spectrogram frames onto the filterbank: ``s @ fb.weights.T``."""
    weights = fb.weights if isinstance(fb, MelFilterbank) else np.asarray(fb)
    s = check_matrix(s, "spectrogram", allow_empty=True)
    if s.shape[1] != weights.shape[1]:
        raise InvalidInputError(
            f"spectrogram has {s.shape[1]} bins but filterbank expects {weights.shape[1]}"
        )
    return s @ weights.T


# ---------------------------------------------------------------------------
# EMA preprocessing
# ---------------------------------------------------------------------------


def compute_ema_stats(recordings):
    """Per-channel maximum absolute value over a (training) set of recordings."""
    recordings = list(recordings)
    if not recordings:
        raise InvalidInputError("no recordings to compute statistics from")
    names = recordings[0].channels
    peak = np.zeros(len(names))
    for rec in recordings:
        if rec.channels != names:
            raise InvalidInputError("recordings disagree on channel layout")
        if len(rec):
            peak = np.maximum(peak, np.abs(rec.coords).max(axis=0))
    return dict(zip(names, peak.tolist()))


def normalize_ema(rec, stats):
    """Divide every channel by its corpus-level maximum magnitude.

    Values outside [-1, 1] (test data beyond the training range) are kept
    and reported through the module logger; nothing is clipped.
    """
    try:
        scale = np.array([stats[name] for name in rec.channels], dtype=np.float64)
    except KeyError as exc:
        raise InvalidInputError(f"no normalization statistic for channel {exc}") from None
    bad = [name for name, v in zip(rec.channels, scale) if not v > 0]
    if bad:
        raise DegenerateChannelError(f"channels with zero maximum: {bad}")
    out = rec.coords / scale
    if out.size and np.abs(out).max() > 1.0:
        logger.warning(
            "EMA %s exceeds training range (max |x| = %.3f)",
            rec.meta.get("utterance_id", "<recording>"),
            float(np.abs(out).max()),
        )
    return out


def decimate_ema(frames, factor=4):
    """Average consecutive groups of ``factor`` frames; the remainder is dropped."""
    frames = check_matrix(frames, "EMA frames")
    n = frames.shape[0] // factor
    return frames[: n * factor].reshape(n, factor, frames.shape[1]).mean(axis=1)


def align_ema_to_spec(e, s, factor=4):
    """Bring 250 Hz EMA frames onto the 62.5 Hz spectrogram grid.

    Returns the decimated EMA and the spectrogram, both truncated to the
    shorter length.
    """
    e = check_matrix(e, "EMA frames")
    s = check_matrix(s, "spectrogram")
    dec = decimate_ema(e, factor)
    t = min(dec.shape[0], s.shape[0])
    if t == 0:
        raise InvalidInputError(f"fewer than {factor} EMA frames; nothing to align")
    return dec[:t], s[:t]


def context_window(frames, radius=2):
    """Stack each frame with its ``radius`` neighbours on both sides.

    Row ``t`` of the result is ``frames[t - radius], ..., frames[t + radius]``
    concatenated, with indices clamped to the valid range (edge replication).
    """
    frames = check_matrix(frames, "frames")
    t = frames.shape[0]
    offsets = np.arange(-radius, radius + 1)
    idx = np.clip(np.arange(t)[:, None] + offsets[None, :], 0, t - 1)
    return frames[idx].reshape(t, -1)


# ---------------------------------------------------------------------------
# scikit-learn wrappers
# ---------------------------------------------------------------------------


class EmaNormalizer(TransformerMixin, BaseEstimator):
    """Learn per-channel maxima on training recordings, then rescale.

    ``fit`` takes a list of :class:`EmaRecording`; ``transform`` returns a
    list of normalized coordinate matrices (or one matrix for one recording).
    """

    def fit(self, X, y=None):
        X = [X] if isinstance(X, EmaRecording) else list(X)
        self.stats_ = compute_ema_stats(X)
        self.channels_ = list(self.stats_)
        return self

    @classmethod
    def from_stats(cls, stats):
        est = cls()
        est.stats_ = dict(stats)
        est.channels_ = list(stats)
        return est

    def transform(self, X):
        check_is_fitted(self, "stats_")
        if isinstance(X, EmaRecording):
            return normalize_ema(X, self.stats_)
        return [normalize_ema(rec, self.stats_) for rec in X]


class FrameDecimator(TransformerMixin, BaseEstimator):
    """Stateless 4:1 group-mean decimation of EMA frames (250 -> 62.5 Hz)."""

    def __init__(self, factor=4):
        self.factor = factor

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        seqs, single = check_sequences(X, "EMA frames")
        out = [decimate_ema(x, self.factor) for x in seqs]
        return out[0] if single else out


class ContextWindower(TransformerMixin, BaseEstimator):
    """Stateless context-window expansion (five frames for ``radius=2``)."""

    def __init__(self, radius=2):
        self.radius = radius

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        seqs, single = check_sequences(X, "frames")
        out = [context_window(x, self.radius) for x in seqs]
        return out[0] if single else out


class MelProjector(TransformerMixin, BaseEstimator):
    """Spectrogram -> mel-spectrogram projection as a transformer."""

    def __init__(self, n_mels=N_MELS, sample_rate=SAMPLE_RATE, fmin=0.0, fmax=None):
        self.n_mels = n_mels
        self.sample_rate = sample_rate
        self.fmin = fmin
        self.fmax = fmax

    def fit(self, X, y=None):
        seqs, _ = check_sequences(X, "spectrogram")
        self.filterbank_ = make_mel_filterbank(seqs[0].shape[1], self.n_mels, self.sample_rate, self.fmin, self.fmax)
        return self

    def transform(self, X):
        check_is_fitted(self, "filterbank_")
        seqs, single = check_sequences(X, "spectrogram")
        out = [apply_mel(s, self.filterbank_) for s in seqs]
        return out[0] if single else out


def prepare_ema(recordings, stats, sensors=None, radius=2, factor=4):
    """Full EMA path: select sensors, normalize, decimate, context-window."""
    single = isinstance(recordings, EmaRecording)
    recs = [recordings] if single else list(recordings)
    out = []
    for rec in recs:
        if sensors is not None:
            rec = rec.select(sensors)
        out.append(context_window(decimate_ema(normalize_ema(rec, stats), factor), radius))
    return out[0] if single else out
