import logging

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ema2s.exceptions import DegenerateChannelError, InvalidInputError
from ema2s.features import (
    FEWER_SENSORS,
    SENSORS,
    ContextWindower,
    EmaNormalizer,
    EmaRecording,
    FrameDecimator,
    MelProjector,
    Waveform,
    align_ema_to_spec,
    apply_mel,
    channel_names,
    compute_ema_stats,
    context_window,
    decimate_ema,
    griffin_lim,
    istft,
    make_mel_filterbank,
    normalize_ema,
    prepare_ema,
    spectral_error,
    stft_complex,
    stft_magnitude,
)

# Peak bin of every filter of the 80-band 0-8000 Hz bank at 16 kHz / 1024
# points, recomputed in plain Python from mel(f) = 2595 log10(1 + f/700).
MEL_PEAK_BINS = [
    1, 3, 4, 6, 8, 9, 11, 13, 14, 16, 18, 20, 22, 24, 27, 29, 31, 34, 36, 39,
    41, 44, 47, 50, 53, 56, 59, 62, 66, 69, 73, 76, 80, 84, 88, 93, 97, 101, 106, 111,
    116, 121, 126, 131, 137, 143, 149, 155, 161, 167, 174, 181, 188, 196, 203, 211, 219, 227, 236, 245,
    254, 264, 273, 283, 294, 304, 315, 327, 339, 351, 363, 376, 389, 403, 417, 432, 447, 462, 478, 495,
]


def naive_stft(x, n_fft=1024, hop=256):
    """Direct O(n^2) windowed transform with reflect centering."""
    pad = n_fft // 2
    padded = np.concatenate([x[1:pad + 1][::-1], x, x[-pad - 1:-1][::-1]])
    n = np.arange(n_fft)
    window = 0.5 - 0.5 * np.cos(2 * np.pi * n / n_fft)
    k = np.arange(n_fft // 2 + 1)
    basis = np.exp(-2j * np.pi * np.outer(n, k) / n_fft)
    frames = [padded[t * hop:t * hop + n_fft] * window for t in range(1 + len(x) // hop)]
    return np.abs(np.array(frames) @ basis)


def tone(freq, seconds=1.0, sr=16000):
    t = np.arange(int(seconds * sr)) / sr
    return Waveform(np.sin(2 * np.pi * freq * t), sr)


# ---------------------------------------------------------------------------
# STFT
# ---------------------------------------------------------------------------


def test_zero_waveform_gives_zero_spectrogram_of_expected_length():
    s = stft_magnitude(Waveform(np.zeros(16000)))
    assert s.shape == (63, 513)
    assert not s.any()


def test_sine_peaks_at_expected_bin():
    s = stft_magnitude(tone(1000.0))
    # frames 0-1 and the last two overlap the reflected padding
    assert np.all(s[2:-2].argmax(axis=1) == 64)
    one = naive_stft(tone(1000.0).samples)[10]
    np.testing.assert_allclose(s[10], one, rtol=1e-6, atol=1e-9)


def test_stft_matches_naive_transform_on_noise():
    x = np.random.default_rng(3).standard_normal(16384)
    ref = naive_stft(x)
    got = stft_magnitude(Waveform(x))
    assert got.shape == ref.shape == (65, 513)
    assert np.max(np.abs(got - ref)) / np.max(ref) < 1e-6


def test_stft_is_pure():
    x = Waveform(np.random.default_rng(0).standard_normal(5000))
    np.testing.assert_array_equal(stft_magnitude(x), stft_magnitude(x))


@pytest.mark.parametrize("bad", [np.zeros(0), np.array([0.0, np.nan])])
def test_stft_rejects_bad_waveforms(bad):
    with pytest.raises(InvalidInputError):
        stft_magnitude(bad)


def test_waveform_validation():
    with pytest.raises(InvalidInputError):
        Waveform(np.zeros(4), sample_rate=0)
    with pytest.raises(InvalidInputError):
        Waveform(np.zeros((2, 2)))


def test_istft_inverts_stft():
    x = np.random.default_rng(1).standard_normal(8192)
    back = istft(stft_complex(x), length=len(x))
    np.testing.assert_allclose(back, x, atol=1e-10)


# ---------------------------------------------------------------------------
# mel
# ---------------------------------------------------------------------------


def test_filterbank_shape_and_positivity():
    fb = make_mel_filterbank(513, 80, 16000, 0.0, 8000.0)
    assert fb.weights.shape == (80, 513)
    assert np.all(fb.weights >= 0)
    assert np.all(fb.weights.sum(axis=1) > 0)
    assert np.all(np.diff(fb.centers_hz) > 0)


def test_filterbank_peak_bins_match_independent_recomputation():
    fb = make_mel_filterbank()
    assert fb.weights.argmax(axis=1).tolist() == MEL_PEAK_BINS
    np.testing.assert_allclose(fb.centers_hz[:3], [22.120066, 44.939128, 68.479274], atol=1e-6)
    assert fb.centers_hz[-1] == pytest.approx(7733.50059, abs=1e-5)


def test_adjacent_filters_overlap():
    w = make_mel_filterbank().weights
    assert all(np.any((w[m] > 0) & (w[m + 1] > 0)) for m in range(79))


@pytest.mark.parametrize("kwargs", [{"fmax": 9000.0}, {"m_bins": 1}, {"fmin": 500.0, "fmax": 400.0}, {"m_bins": 400}])
def test_filterbank_rejects_bad_configuration(kwargs):
    with pytest.raises(InvalidInputError):
        make_mel_filterbank(**kwargs)


def test_apply_mel_matches_triple_loop():
    fb = make_mel_filterbank()
    s = np.random.default_rng(2).random((10, 513))
    ref = np.zeros((10, 80))
    for t in range(10):
        for m in range(80):
            acc = 0.0
            for f in range(513):
                acc += s[t, f] * fb.weights[m, f]
            ref[t, m] = acc
    np.testing.assert_allclose(apply_mel(s, fb), ref, rtol=0, atol=1e-9)


def test_apply_mel_identities():
    fb = make_mel_filterbank()
    assert not apply_mel(np.zeros((3, 513)), fb).any()
    onehot = np.zeros((1, 513))
    onehot[0, 100] = 1.0
    np.testing.assert_array_equal(apply_mel(onehot, fb)[0], fb.weights[:, 100])
    with pytest.raises(InvalidInputError):
        apply_mel(np.zeros((3, 512)), fb)


@settings(max_examples=30, deadline=None)
@given(a=st.floats(0, 10), b=st.floats(0, 10), seed=st.integers(0, 2**31 - 1))
def test_apply_mel_is_linear(a, b, seed):
    fb = make_mel_filterbank()
    rng = np.random.default_rng(seed)
    s1, s2 = rng.random((4, 513)), rng.random((4, 513))
    lhs = apply_mel(a * s1 + b * s2, fb)
    rhs = a * apply_mel(s1, fb) + b * apply_mel(s2, fb)
    np.testing.assert_allclose(lhs, rhs, rtol=1e-9, atol=1e-9)


def test_mel_projector_transformer():
    s = np.random.default_rng(0).random((5, 513))
    proj = MelProjector().fit([s])
    np.testing.assert_allclose(proj.transform(s), apply_mel(s, make_mel_filterbank()))
    assert len(proj.transform([s, s])) == 2


# ---------------------------------------------------------------------------
# EMA preprocessing
# ---------------------------------------------------------------------------


def recording(coords, sensors=("UL",)):
    return EmaRecording(tuple(sensors), np.asarray(coords, dtype=float))


def test_channel_names_and_recording_layout():
    assert channel_names(("UL", "T1")) == ["UL_x", "UL_y", "T1_x", "T1_y"]
    rec = EmaRecording(SENSORS, np.zeros((10, 18)))
    assert rec.select(FEWER_SENSORS).coords.shape == (10, 8)
    with pytest.raises(InvalidInputError):
        EmaRecording(("UL", "XX"), np.zeros((3, 4)))
    with pytest.raises(InvalidInputError):
        EmaRecording(("UL",), np.zeros((3, 3)))
    with pytest.raises(InvalidInputError):
        recording(np.zeros((3, 2))).select(("T1",))


def test_normalize_constant_and_symmetric_channels():
    rec = recording(np.column_stack([np.full(6, 2.5), np.linspace(-3, 3, 6)]))
    out = normalize_ema(rec, compute_ema_stats([rec]))
    np.testing.assert_array_equal(out[:, 0], 1.0)
    assert out[:, 1].min() == -1.0 and out[:, 1].max() == 1.0


def test_normalize_zero_channel_is_degenerate():
    rec = recording(np.column_stack([np.zeros(4), np.ones(4)]))
    with pytest.raises(DegenerateChannelError):
        normalize_ema(rec, compute_ema_stats([rec]))


def test_normalize_out_of_range_is_logged_not_clipped(caplog):
    train = recording(np.ones((4, 2)))
    test = recording(np.full((4, 2), 3.0))
    with caplog.at_level(logging.WARNING, logger="ema2s.features"):
        out = normalize_ema(test, compute_ema_stats([train]))
    assert np.all(out == 3.0)
    assert "exceeds training range" in caplog.text


@settings(max_examples=25, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 30), st.just(4)), elements=st.floats(-50, 50)))
def test_training_split_normalization_hits_unit_peak(coords):
    rec = EmaRecording(("UL", "LL"), coords)
    stats = compute_ema_stats([rec])
    if min(stats.values()) == 0:
        return
    out = normalize_ema(rec, stats)
    assert np.all(np.abs(out) <= 1.0)
    np.testing.assert_allclose(np.abs(out).max(axis=0), 1.0)


def test_context_window_examples():
    f = np.arange(12, dtype=float).reshape(4, 3)
    out = context_window(f)
    assert out.shape == (4, 15)
    np.testing.assert_array_equal(out[0], np.concatenate([f[0], f[0], f[0], f[1], f[2]]))
    np.testing.assert_array_equal(out[3], np.concatenate([f[1], f[2], f[3], f[3], f[3]]))


@settings(max_examples=30, deadline=None)
@given(t=st.integers(1, 25), d=st.integers(1, 6), seed=st.integers(0, 1000))
def test_context_window_index_oracle(t, d, seed):
    f = np.random.default_rng(seed).standard_normal((t, d))
    out = context_window(f)
    assert out.shape == (t, 5 * d)
    for row in range(t):
        expect = [f[min(max(row + k, 0), t - 1)] for k in range(-2, 3)]
        np.testing.assert_array_equal(out[row], np.concatenate(expect))


def test_align_examples():
    s = np.zeros((100, 513))
    for n in (400, 403):
        e, s2 = align_ema_to_spec(np.zeros((n, 2)), s)
        assert e.shape[0] == s2.shape[0] == 100
    with pytest.raises(InvalidInputError):
        align_ema_to_spec(np.zeros((3, 2)), s)


@settings(max_examples=30, deadline=None)
@given(n_ema=st.integers(4, 200), n_spec=st.integers(1, 60), seed=st.integers(0, 1000))
def test_align_group_mean_oracle(n_ema, n_spec, seed):
    rng = np.random.default_rng(seed)
    e = rng.standard_normal((n_ema, 3))
    e2, s2 = align_ema_to_spec(e, np.ones((n_spec, 5)))
    assert e2.shape[0] == s2.shape[0] == min(n_ema // 4, n_spec)
    for t in range(e2.shape[0]):
        np.testing.assert_allclose(e2[t], sum(e[4 * t + k] for k in range(4)) / 4, atol=1e-12)


def test_prepare_ema_width_and_transformers():
    rng = np.random.default_rng(0)
    recs = [EmaRecording(SENSORS, rng.standard_normal((40, 18))) for _ in range(2)]
    stats = compute_ema_stats(recs)
    full = prepare_ema(recs, stats)
    fewer = prepare_ema(recs[0], stats, sensors=FEWER_SENSORS)
    assert full[0].shape == (10, 90)
    assert fewer.shape == (10, 40)
    norm = EmaNormalizer().fit(recs)
    chain = ContextWindower().transform(FrameDecimator().transform(norm.transform(recs)))
    np.testing.assert_array_equal(chain[0], full[0])
    np.testing.assert_array_equal(EmaNormalizer.from_stats(stats).transform(recs[1]), norm.transform(recs[1]))
    assert decimate_ema(np.ones((9, 2))).shape == (2, 2)


# ---------------------------------------------------------------------------
# Griffin-Lim
# ---------------------------------------------------------------------------


def test_griffin_lim_zero_spectrogram():
    w = griffin_lim(np.zeros((20, 513)), 5)
    assert not w.samples.any()


def test_griffin_lim_zero_iterations_is_zero_phase_inverse():
    s = stft_magnitude(tone(440.0, 0.5))
    w = griffin_lim(s, 0)
    sign = np.where(np.arange(513) % 2, -1.0, 1.0)
    expect = istft((s * sign).astype(complex), length=256 * (s.shape[0] - 1))
    np.testing.assert_allclose(w.samples, expect, atol=1e-12)


def test_griffin_lim_on_tone_converges_monotonically():
    s = stft_magnitude(tone(440.0))
    errs = [spectral_error(s, griffin_lim(s, n)) for n in (0, 15, 30, 60)]
    assert all(b <= a for a, b in zip(errs, errs[1:]))
    assert errs[-1] < 0.15


def test_griffin_lim_rejects_negative_input():
    with pytest.raises(InvalidInputError):
        griffin_lim(-np.ones((3, 513)))
    with pytest.raises(InvalidInputError):
        griffin_lim(np.ones((3, 513)), -1)
