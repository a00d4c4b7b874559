import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ema2s.exceptions import ConfigurationError, InvalidInputError
from ema2s.features import Waveform
from ema2s.metrics import (
    CorruptingTranscriber,
    FormantTranscriber,
    IdentityTranscriber,
    MetricsReport,
    TranscriptPair,
    ccr,
    evaluate_pairs,
    levenshtein,
    make_transcriber,
    mcd,
    mel_cepstrum,
    resample,
    stoi,
    third_octave_bands,
)
from ema2s.features import make_mel_filterbank

# Values of the reference STOI implementation (pystoi 0.4) on speech_like()
# with noise from default_rng(0), computed once in a scratch session.
PYSTOI_BY_SNR = {20: 0.987609, 10: 0.926035, 0: 0.660384}
PYSTOI_NOISE = 0.078007


def speech_like(seconds=2.0, fs=16000):
    """Harmonic source with vibrato under a syllable-rate envelope."""
    t = np.arange(int(seconds * fs)) / fs
    f0 = 120 + 20 * np.sin(2 * np.pi * 0.7 * t)
    phase = 2 * np.pi * np.cumsum(f0) / fs
    source = sum(np.sin(k * phase) / k for k in range(1, 31))
    return source * (0.1 + np.sin(2 * np.pi * 3.5 * t) ** 2)


def at_snr(x, noise, snr_db):
    return x + noise * np.sqrt(np.mean(x**2) / 10 ** (snr_db / 10) / np.mean(noise**2))


# ---------------------------------------------------------------------------
# MCD
# ---------------------------------------------------------------------------


def test_mcd_identity_is_exactly_zero():
    c = np.random.default_rng(0).standard_normal((12, 25))
    assert mcd(c, c) == 0.0


def test_mcd_single_coefficient_unit_difference():
    ref = np.zeros((5, 25))
    syn = ref.copy()
    syn[:, 3] = 1.0
    assert abs(mcd(ref, syn) - 10 / math.log(10) * math.sqrt(2)) < 1e-9
    assert mcd(ref, syn) == pytest.approx(6.141851463713754, abs=1e-12)


def test_mcd_ignores_energy_coefficient():
    ref = np.zeros((3, 25))
    syn = ref.copy()
    syn[:, 0] = 7.0
    assert mcd(ref, syn) == 0.0


def test_mcd_shape_errors():
    with pytest.raises(InvalidInputError):
        mcd(np.zeros((3, 25)), np.zeros((4, 25)))
    with pytest.raises(InvalidInputError):
        mcd(np.zeros((0, 25)), np.zeros((0, 25)))


def test_mel_cepstrum_matches_direct_dct():
    mel = np.random.default_rng(1).random((4, 80))
    got = mel_cepstrum(mel, 24)
    n = 80
    k = np.arange(25)[:, None]
    basis = np.cos(np.pi * k * (2 * np.arange(n)[None, :] + 1) / (2 * n)) * math.sqrt(2 / n)
    basis[0] /= math.sqrt(2)
    np.testing.assert_allclose(got, np.log(mel + 1e-10) @ basis.T, atol=1e-10)
    assert np.all(np.isfinite(mel_cepstrum(np.zeros((2, 80)))))
    with pytest.raises(InvalidInputError):
        mel_cepstrum(mel, 80)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000))
def test_mcd_is_a_symmetric_nonnegative_distance(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.standard_normal((2, 6, 25))
    assert mcd(a, b) == pytest.approx(mcd(b, a))
    assert mcd(a, b) >= 0


# ---------------------------------------------------------------------------
# STOI
# ---------------------------------------------------------------------------


def test_stoi_self_is_one():
    x = speech_like()
    assert stoi(x, x) >= 0.999


def test_stoi_matches_reference_and_decreases_with_noise():
    x = speech_like()
    noise = np.random.default_rng(0).standard_normal(x.shape[0])
    values = [stoi(x, at_snr(x, noise, snr)) for snr in (20, 10, 0)]
    for snr, value in zip((20, 10, 0), values):
        assert value == pytest.approx(PYSTOI_BY_SNR[snr], abs=1e-3)
    assert values[0] > values[1] > values[2]
    assert stoi(x, noise) == pytest.approx(PYSTOI_NOISE, abs=1e-3)


def test_stoi_accepts_waveforms_and_validates():
    x = speech_like(1.0)
    assert stoi(Waveform(x), Waveform(x)) >= 0.999
    with pytest.raises(InvalidInputError):
        stoi(x, x[:-1])
    with pytest.raises(InvalidInputError):
        stoi(x[:3000], x[:3000])


def test_third_octave_bands():
    obm, centers = third_octave_bands()
    assert obm.shape == (15, 257)
    assert centers[0] == 150.0 and centers[-1] == pytest.approx(150 * 2 ** (14 / 3))
    assert np.all(obm.sum(axis=1) >= 1)


def test_resample_preserves_a_low_tone():
    fs = 16000
    t = np.arange(fs) / fs
    y = resample(np.sin(2 * np.pi * 440 * t), fs, 10000)
    assert y.shape == (10000,)
    t2 = np.arange(10000) / 10000
    np.testing.assert_allclose(y[500:-500], np.sin(2 * np.pi * 440 * t2)[500:-500], atol=2e-3)


# ---------------------------------------------------------------------------
# CCR
# ---------------------------------------------------------------------------


def test_levenshtein_examples():
    assert levenshtein("kitten", "sitting") == 3
    assert levenshtein("", "abc") == 3
    assert levenshtein("abc", "abc") == 0


def test_ccr_examples():
    assert ccr(TranscriptPair("kitten", "sitting")) == 0.5
    assert ccr("abc", "abc") == 1.0
    assert ccr("ab", "xxxxxx") == 0.0
    with pytest.raises(InvalidInputError):
        ccr("", "a")


@settings(max_examples=50, deadline=None)
@given(a=st.text("abc", max_size=8), b=st.text("abc", max_size=8), c=st.text("abc", max_size=8))
def test_levenshtein_is_a_metric(a, b, c):
    assert levenshtein(a, b) == levenshtein(b, a)
    assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)
    assert (levenshtein(a, b) == 0) == (a == b)
    assert abs(len(a) - len(b)) <= levenshtein(a, b) <= max(len(a), len(b))


# ---------------------------------------------------------------------------
# transcribers and reports
# ---------------------------------------------------------------------------


def test_transcribers():
    texts = {"u": "aeiou" * 4}
    w = Waveform(np.random.default_rng(0).standard_normal(4000))
    assert IdentityTranscriber(texts).transcribe(w, "u") == texts["u"]
    corrupt = CorruptingTranscriber(texts, rate=0.5, seed=1)
    assert corrupt.transcribe(w, "u") == corrupt.transcribe(w, "u")
    assert corrupt.transcribe(w, "u") != texts["u"]
    assert CorruptingTranscriber(texts, rate=0.0).transcribe(w, "u") == texts["u"]
    with pytest.raises(InvalidInputError):
        IdentityTranscriber(texts).transcribe(w, "missing")
    with pytest.raises(ConfigurationError):
        make_transcriber("whisper")
    assert isinstance(make_transcriber("formant"), FormantTranscriber)


def test_formant_transcriber_reads_a_tone():
    t = np.arange(16000) / 16000
    text = FormantTranscriber().transcribe(Waveform(np.sin(2 * np.pi * 300 * t)))
    assert set(text) == {"a"} and len(text) == 7


def test_report_aggregation_and_roundtrip(tmp_path):
    fb = make_mel_filterbank()
    rng = np.random.default_rng(0)
    x = speech_like(1.0)
    spec = rng.random((20, 513)) + 0.01
    items = [("b", spec, spec, Waveform(x), Waveform(x)),
             ("a", spec, spec * 1.5, Waveform(x), Waveform(x * 0.5)),
             ("c", spec, spec, Waveform(x[:100]), Waveform(x[:100]))]
    report = evaluate_pairs(items, fb, IdentityTranscriber({"a": "ab", "b": "ab", "c": "ab"}))
    assert [r["id"] for r in report.records] == ["a", "b"]
    assert report.failures[0]["id"] == "c"
    agg = report.aggregate
    assert agg["n"] == 2 and agg["failures"] == 1 and agg["pesq"] is None
    assert report.records[1]["mcd_db"] == 0.0
    lines = report.to_csv().splitlines()
    assert lines[0] == "id,mcd_db,pesq,stoi,ccr"
    assert len(lines) == 4 and lines[-1].startswith("__mean__")
    report.save(tmp_path)
    back = MetricsReport.load(tmp_path / "metrics.json")
    assert back.records == report.records and back.aggregate == agg
