"""Shared fixtures: tiny architectures, synthetic examples, finite differences."""

import numpy as np

from ema2s.model import ArchitectureConfig
from ema2s.training import Example


def small_arch(spec_bins=8, ema_width=6):
    return ArchitectureConfig(
        spec_bins=spec_bins,
        ema_width=ema_width,
        spec_hidden=(4, 3),
        ema_hidden=(3, 4),
        decoder_hidden=(4, 3),
        spec_embed_width=5,
        ema_embed_width=5,
    )


def tiny_mel(spec_bins=8):
    """Mel settings that fit an ``spec_bins``-wide spectrogram."""
    return {"n_mels": 3, "fmin": 0.0, "fmax": 8000.0, "sample_rate": 16000}


def tiny_corpus(n=3, frames=(6, 6, 5), spec_bins=8, ema_width=6, seed=0):
    rng = np.random.default_rng(seed)
    return [
        Example(f"u{i:03d}", rng.uniform(-1, 1, (frames[i % len(frames)], ema_width)),
                rng.random((frames[i % len(frames)], spec_bins)))
        for i in range(n)
    ]


def finite_difference_check(loss, params, grads, step=1e-5, max_entries=40, seed=0):
    """Worst ``|analytic - fd| / max(1, |fd|)`` over sampled entries."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for name, value in params.items():
        flat = value.reshape(-1)
        picks = rng.choice(flat.size, size=min(max_entries, flat.size), replace=False)
        for idx in picks:
            saved = flat[idx]
            flat[idx] = saved + step
            plus = loss(params)
            flat[idx] = saved - step
            minus = loss(params)
            flat[idx] = saved
            fd = (plus - minus) / (2 * step)
            worst = max(worst, abs(grads[name].reshape(-1)[idx] - fd) / max(1.0, abs(fd)))
    return worst
