"""Objective evaluation: MCD, STOI and character correct rate.

MCD is computed from mel-cepstra of the 80-bin mel-spectrogram without
time warping (reference and synthesis share the EMA timeline). STOI
follows the published short-time objective intelligibility algorithm with
a pinned windowed-sinc resampler. CCR compares transcripts of the
reference and synthesized waveforms produced by a pluggable transcriber.
"""

import csv
import io
import logging
import math
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.fft import dct
from scipy.signal import firwin, resample_poly

from ._validation import check_matrix, check_signal
from .exceptions import ConfigurationError, InvalidInputError
from .features import SAMPLE_RATE, Waveform, apply_mel, stft_magnitude

logger = logging.getLogger(__name__)

MCD_SCALE = 10.0 / math.log(10.0)
LOG_FLOOR = 1e-10


# ---------------------------------------------------------------------------
# mel-cepstral distortion
# ---------------------------------------------------------------------------


def mel_cepstrum(mel, order=24):
    """Orthonormal DCT-II of ``log(mel + 1e-10)``, coefficients ``0..order``."""
    mel = check_matrix(mel, "mel-spectrogram", nonnegative=True, allow_empty=True)
    if order < 0 or order + 1 > mel.shape[1]:
        raise InvalidInputError(f"order {order} needs at most {mel.shape[1] - 1}")
    return dct(np.log(mel + LOG_FLOOR), type=2, norm="ortho", axis=1)[:, : order + 1]


def mcd(ref, syn):
    """Mean over frames of ``(10 / ln 10) * sqrt(2 * sum_d (ref_d - syn_d)^2)``, d >= 1."""
    ref = np.asarray(ref, dtype=np.float64)
    syn = np.asarray(syn, dtype=np.float64)
    if ref.shape != syn.shape:
        raise InvalidInputError(f"cepstra shapes differ: {ref.shape} vs {syn.shape}")
    if ref.ndim != 2 or ref.shape[0] == 0:
        raise InvalidInputError("cepstra must be non-empty (frames, order + 1) matrices")
    diff = ref[:, 1:] - syn[:, 1:]
    return float(np.mean(MCD_SCALE * np.sqrt(2.0 * np.sum(diff * diff, axis=1))))


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------

STOI_FS = 10000
STOI_FRAME = 256
STOI_NFFT = 512
STOI_BANDS = 15
STOI_MIN_FREQ = 150.0
STOI_SEGMENT = 30
STOI_BETA = -15.0
STOI_DYN_RANGE = 40.0
RESAMPLE_KERNEL = 64
_EPS = np.finfo(np.float64).eps


def resample(x, fs_in, fs_out, kernel=RESAMPLE_KERNEL):
    """Polyphase windowed-sinc resampling.

    The low-pass kernel spans ``kernel`` input samples (Kaiser window,
    beta 5) so the result does not depend on library defaults.
    """
    if fs_in == fs_out:
        return np.asarray(x, dtype=np.float64)
    g = math.gcd(int(fs_in), int(fs_out))
    up, down = int(fs_out) // g, int(fs_in) // g
    taps = firwin(kernel * up + 1, 1.0 / max(up, down), window=("kaiser", 5.0))
    return resample_poly(np.asarray(x, dtype=np.float64), up, down, window=taps)


def third_octave_bands(fs=STOI_FS, nfft=STOI_NFFT, num_bands=STOI_BANDS, min_freq=STOI_MIN_FREQ):
    """Binary band-to-bin matrix and centre frequencies of the one-third octave bands."""
    f = np.linspace(0, fs, nfft + 1)[: nfft // 2 + 1]
    k = np.arange(num_bands, dtype=np.float64)
    centers = 2.0 ** (k / 3.0) * min_freq
    lows = min_freq * 2.0 ** ((2 * k - 1) / 6.0)
    highs = min_freq * 2.0 ** ((2 * k + 1) / 6.0)
    obm = np.zeros((num_bands, f.shape[0]))
    for i in range(num_bands):
        lo = int(np.argmin(np.square(f - lows[i])))
        hi = int(np.argmin(np.square(f - highs[i])))
        obm[i, lo:hi] = 1.0
    return obm, centers


def _stoi_window(n):
    return np.hanning(n + 2)[1:-1]


def _frames(x, n, hop):
    starts = range(0, x.shape[0] - n + 1, hop)
    return np.array([x[s:s + n] for s in starts]).reshape(-1, n)


def remove_silent_frames(x, y, dyn_range=STOI_DYN_RANGE, framelen=STOI_FRAME, hop=STOI_FRAME // 2):
    """Drop frames of ``x`` more than ``dyn_range`` dB below its loudest frame.

    The same frames are removed from ``y``; both signals are rebuilt by
    overlap-add.
    """
    w = _stoi_window(framelen)
    xf = _frames(x, framelen, hop) * w
    yf = _frames(y, framelen, hop) * w
    if xf.shape[0] == 0:
        return x[:0], y[:0]
    energy = 20.0 * np.log10(np.linalg.norm(xf, axis=1) + _EPS)
    keep = energy > energy.max() - dyn_range
    xf, yf = xf[keep], yf[keep]
    n = xf.shape[0]
    length = (n - 1) * hop + framelen if n else 0
    xs = np.zeros(length)
    ys = np.zeros(length)
    for i in range(n):
        xs[i * hop:i * hop + framelen] += xf[i]
        ys[i * hop:i * hop + framelen] += yf[i]
    return xs, ys


def _band_envelopes(x, obm):
    w = _stoi_window(STOI_FRAME)
    hop = STOI_FRAME // 2
    starts = range(0, x.shape[0] - STOI_FRAME, hop)
    spec = np.array([np.fft.rfft(x[s:s + STOI_FRAME] * w, n=STOI_NFFT) for s in starts])
    if spec.size == 0:
        return np.zeros((obm.shape[0], 0))
    return np.sqrt(obm @ (np.abs(spec) ** 2).T)


def stoi(ref, deg, fs=SAMPLE_RATE):
    """Short-time objective intelligibility of ``deg`` against ``ref``.

    Parameters
    ----------
    ref, deg : Waveform or array_like
        Equal-length clean and processed signals.
    fs : int
        Sample rate when plain arrays are given.

    Returns
    -------
    float
        Mean correlation of clipped, normalized band envelopes over
        384 ms windows; roughly in [0, 1].
    """
    if isinstance(ref, Waveform):
        fs = ref.sample_rate
        ref = ref.samples
    if isinstance(deg, Waveform):
        deg = deg.samples
    x = check_signal(ref, "reference")
    y = check_signal(deg, "degraded")
    if x.shape != y.shape:
        raise InvalidInputError(f"signals differ in length: {x.shape[0]} vs {y.shape[0]}")
    x = resample(x, fs, STOI_FS)
    y = resample(y, fs, STOI_FS)
    x, y = remove_silent_frames(x, y)
    obm, _ = third_octave_bands()
    x_tob = _band_envelopes(x, obm)
    y_tob = _band_envelopes(y, obm)
    n_frames = x_tob.shape[1]
    if n_frames < STOI_SEGMENT:
        raise InvalidInputError(
            f"only {n_frames} non-silent frames; STOI needs {STOI_SEGMENT} (384 ms)"
        )
    segs = np.arange(STOI_SEGMENT, n_frames + 1)
    idx = segs[:, None] - STOI_SEGMENT + np.arange(STOI_SEGMENT)[None, :]
    x_seg = x_tob[:, idx].transpose(1, 0, 2)  # (segments, bands, frames)
    y_seg = y_tob[:, idx].transpose(1, 0, 2)
    norm = np.linalg.norm(x_seg, axis=2, keepdims=True) / (np.linalg.norm(y_seg, axis=2, keepdims=True) + _EPS)
    y_prime = np.minimum(y_seg * norm, x_seg * (1.0 + 10.0 ** (-STOI_BETA / 20.0)))
    xc = x_seg - x_seg.mean(axis=2, keepdims=True)
    yc = y_prime - y_prime.mean(axis=2, keepdims=True)
    xc /= np.linalg.norm(xc, axis=2, keepdims=True) + _EPS
    yc /= np.linalg.norm(yc, axis=2, keepdims=True) + _EPS
    return float(np.mean(np.sum(xc * yc, axis=2)))


# ---------------------------------------------------------------------------
# transcripts
# ---------------------------------------------------------------------------


def levenshtein(a, b):
    """Unit-cost edit distance (insertions, deletions, substitutions)."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


@dataclass(frozen=True)
class TranscriptPair:
    reference: str
    hypothesis: str


def ccr(pair, hypothesis=None):
    """Character correct rate, clamped to [0, 1].

    Accepts a :class:`TranscriptPair` or ``(reference, hypothesis)``.
    """
    if hypothesis is not None:
        pair = TranscriptPair(pair, hypothesis)
    if not pair.reference:
        raise InvalidInputError("CCR needs a non-empty reference transcript")
    n = len(pair.reference)
    return max(0.0, (n - levenshtein(pair.reference, pair.hypothesis)) / n)


class IdentityTranscriber:
    """Returns the stored ground-truth transcript of the utterance."""

    name = "identity"

    def __init__(self, transcripts):
        self.transcripts = dict(transcripts)

    def transcribe(self, wave, utt_id):
        try:
            return self.transcripts[utt_id]
        except KeyError:
            raise InvalidInputError(f"no transcript for {utt_id}") from None


class CorruptingTranscriber:
    """Ground-truth transcript with random character errors at ``rate``.

    The corruption is seeded by the utterance id and the waveform content,
    so the same waveform always gets the same transcript.
    """

    name = "corrupt"

    def __init__(self, transcripts, rate=0.1, seed=0, alphabet="aeiouy"):
        if not 0 <= rate <= 1:
            raise ConfigurationError("corruption rate must lie in [0, 1]")
        self.base = IdentityTranscriber(transcripts)
        self.rate = rate
        self.seed = seed
        self.alphabet = alphabet

    def transcribe(self, wave, utt_id):
        text = self.base.transcribe(wave, utt_id)
        samples = wave.samples if isinstance(wave, Waveform) else np.asarray(wave, dtype=np.float64)
        digest = zlib.crc32(np.ascontiguousarray(samples, dtype="<f8").tobytes())
        rng = np.random.default_rng([self.seed, zlib.crc32(utt_id.encode()), digest])
        out = []
        for ch in text:
            if rng.random() >= self.rate:
                out.append(ch)
                continue
            op = rng.integers(3)
            if op == 0:
                out.append(self.alphabet[rng.integers(len(self.alphabet))])
            elif op == 1:
                out.append(ch + self.alphabet[rng.integers(len(self.alphabet))])
            # op == 2 deletes the character
        return "".join(out)


class FormantTranscriber:
    """Reads the lowest pseudo-formant track off the waveform's spectrogram.

    Applies the same letter quantization the synthetic corpus uses for its
    transcripts, so it acts as a content-sensitive recognizer on that corpus.
    """

    name = "formant"

    def __init__(self, band=(250.0, 950.0), sample_rate=SAMPLE_RATE, n_fft=1024, hop=256):
        self.band = band
        self.sample_rate = sample_rate
        self.n_fft = n_fft
        self.hop = hop

    def transcribe(self, wave, utt_id=None):
        from .synthdata import transcript_from_tracks

        spec = stft_magnitude(wave, self.n_fft, self.hop)
        freqs = np.arange(spec.shape[1]) * self.sample_rate / self.n_fft
        lo, hi = np.searchsorted(freqs, self.band)
        f1 = freqs[lo + np.argmax(spec[:, lo:hi], axis=1)]
        return transcript_from_tracks(f1)


def make_transcriber(name, transcripts=None, **kwargs):
    """Look up a transcriber implementation by its config name."""
    if name == "identity":
        return IdentityTranscriber(transcripts or {})
    if name == "corrupt":
        return CorruptingTranscriber(transcripts or {}, **kwargs)
    if name == "formant":
        return FormantTranscriber(**kwargs)
    raise ConfigurationError(f"unknown transcriber {name!r}")


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

METRIC_KEYS = ("mcd_db", "stoi", "ccr")


@dataclass
class MetricsReport:
    """Per-utterance metric records plus their means.

    ``pesq`` is always ``None``; the column is kept so reports line up with
    four-metric comparison tables.
    """

    records: list
    metadata: dict = field(default_factory=dict)
    failures: list = field(default_factory=list)

    @property
    def aggregate(self):
        agg = {}
        for key in METRIC_KEYS:
            vals = [r[key] for r in self.records]
            agg[key] = float(np.mean(vals)) if vals else None
        agg["pesq"] = None
        agg["n"] = len(self.records)
        agg["failures"] = len(self.failures)
        return agg

    def to_json_dict(self):
        return {"aggregate": self.aggregate, "metadata": self.metadata, "failures": self.failures,
                "records": self.records}

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "mcd_db", "pesq", "stoi", "ccr"])
        for r in self.records:
            writer.writerow([r["id"], repr(r["mcd_db"]), "", repr(r["stoi"]), repr(r["ccr"])])
        agg = self.aggregate
        writer.writerow(["__mean__"] + [repr(agg[k]) if agg[k] is not None else "" for k in ("mcd_db",)]
                        + [""] + [repr(agg[k]) if agg[k] is not None else "" for k in ("stoi", "ccr")])
        return buf.getvalue()

    def save(self, out_dir, stem="metrics"):
        from .fileio import write_json

        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{stem}.csv").write_text(self.to_csv())
        write_json(out / f"{stem}.json", self.to_json_dict())

    @classmethod
    def load(cls, path):
        from .fileio import read_json

        d = read_json(path)
        return cls(d["records"], d.get("metadata", {}), d.get("failures", []))


def score_utterance(utt_id, ref_spec, syn_spec, ref_wave, syn_wave, filterbank, transcriber, order=24):
    """All metrics for one utterance given reference and synthesized outputs."""
    t = min(ref_spec.shape[0], syn_spec.shape[0])
    ref_cep = mel_cepstrum(apply_mel(ref_spec[:t], filterbank), order)
    syn_cep = mel_cepstrum(apply_mel(syn_spec[:t], filterbank), order)
    n = min(len(ref_wave), len(syn_wave))
    ref_w = Waveform(ref_wave.samples[:n], ref_wave.sample_rate)
    syn_w = Waveform(syn_wave.samples[:n], syn_wave.sample_rate)
    reference = transcriber.transcribe(ref_w, utt_id)
    hypothesis = transcriber.transcribe(syn_w, utt_id)
    return {
        "id": utt_id,
        "mcd_db": mcd(ref_cep, syn_cep),
        "stoi": stoi(ref_w, syn_w),
        "ccr": ccr(TranscriptPair(reference, hypothesis)),
    }


def evaluate_pairs(items, filterbank, transcriber, order=24, metadata=None):
    """Score ``(id, ref_spec, syn_spec, ref_wave, syn_wave)`` tuples.

    Failures are recorded and skipped; records are sorted by id.
    """
    records, failures = [], []
    for utt_id, ref_spec, syn_spec, ref_wave, syn_wave in sorted(items, key=lambda it: it[0]):
        try:
            records.append(score_utterance(utt_id, ref_spec, syn_spec, ref_wave, syn_wave,
                                           filterbank, transcriber, order))
        except Exception as exc:  # noqa: BLE001 - one bad utterance must not end the run
            logger.warning("evaluation failed for %s: %s", utt_id, exc)
            failures.append({"id": utt_id, "error": f"{type(exc).__name__}: {exc}"})
    return MetricsReport(records, dict(metadata or {}), failures)


def evaluate_run(corpus, checkpoint, transcriber, iterations=60, order=24, metadata=None, mel_dir=None,
                 wav_dir=None):
    """Synthesize every utterance of ``corpus`` and score it against ground truth.

    Parameters
    ----------
    corpus : synthdata.Corpus
        Test split; its stored waveforms are the references.
    checkpoint : training.Checkpoint
        Stage-2 checkpoint.
    transcriber : object with ``transcribe(wave, utt_id)``
    iterations : int
        Griffin-Lim iterations for the synthesized waveform.
    mel_dir : path, optional
        Where to write synthesized mel-spectrograms for an external vocoder.
    wav_dir : path, optional
        Where to write synthesized waveforms.
    """
    from .features import griffin_lim
    from .fileio import write_wav
    from .training import synthesize

    fb = checkpoint.filterbank()
    items = []
    for ex in corpus.examples:
        mel_path = None if mel_dir is None else Path(mel_dir) / f"{ex.id}.f32"
        syn_spec, _, syn_wave = synthesize(ex.ema, checkpoint, iterations, mel_path)
        if wav_dir is not None:
            write_wav(Path(wav_dir) / f"{ex.id}.wav", syn_wave)
        ref_wave = corpus.waves.get(ex.id) or griffin_lim(ex.spec, iterations)
        items.append((ex.id, ex.spec, syn_spec, ref_wave, syn_wave))
    meta = {"variant": checkpoint.variant, "seed": checkpoint.seed, "corpus_hash": corpus.config_hash,
            "sensors": list(corpus.sensors), "transcriber": getattr(transcriber, "name", "custom")}
    meta.update(metadata or {})
    return evaluate_pairs(items, fb, transcriber, order, meta)
