"""scikit-learn estimator facade over the two-stage trainer."""

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from ._validation import check_paired, check_sequences
from .features import apply_mel, griffin_lim
from .model import ArchitectureConfig, build_networks
from .training import Example, TrainConfig, evaluate_loss, get_variant, train_stage1, train_stage2


class EMA2SRegressor(RegressorMixin, BaseEstimator):
    """Map context-windowed EMA feature sequences to magnitude spectrograms.

    ``fit`` runs spectral-encoder pretraining (when the variant uses it)
    followed by EMA-encoder training; ``predict`` uses only the EMA encoder
    and the shared decoder.

    Parameters
    ----------
    variant : {"EMA2S", "S_I", "S_II", "S_III"}
        Loss configuration.
    spec_hidden, ema_hidden, decoder_hidden : tuple of int
        Per-direction BLSTM widths.
    embed_width : int
        Shared embedding width of both encoders.
    learning_rate, epochs, seed, gradient_clip_norm, utterances_per_step
        Optimizer settings shared by both stages.
    stage1_epochs : int, optional
        Epochs for stage 1; defaults to ``epochs``.
    n_mels, fmin, fmax, sample_rate
        Mel projection used by the mel loss.
    gl_iterations : int
        Griffin-Lim iterations used by :meth:`synthesize`.

    Attributes
    ----------
    checkpoint_ : training.Checkpoint
        Stage-2 result.
    stage1_checkpoint_ : training.Checkpoint or None
    n_features_in_ : int
    """

    def __init__(self, variant="EMA2S", spec_hidden=(196, 256), ema_hidden=(128, 256),
                 decoder_hidden=(256, 256, 256), embed_width=256, learning_rate=1e-3, epochs=50,
                 stage1_epochs=None, seed=0, gradient_clip_norm=5.0, utterances_per_step=1,
                 n_mels=80, fmin=0.0, fmax=8000.0, sample_rate=16000, gl_iterations=60):
        self.variant = variant
        self.spec_hidden = spec_hidden
        self.ema_hidden = ema_hidden
        self.decoder_hidden = decoder_hidden
        self.embed_width = embed_width
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.stage1_epochs = stage1_epochs
        self.seed = seed
        self.gradient_clip_norm = gradient_clip_norm
        self.utterances_per_step = utterances_per_step
        self.n_mels = n_mels
        self.fmin = fmin
        self.fmax = fmax
        self.sample_rate = sample_rate
        self.gl_iterations = gl_iterations

    def _train_config(self, epochs):
        return TrainConfig(learning_rate=self.learning_rate, epochs=epochs, seed=self.seed,
                           gradient_clip_norm=self.gradient_clip_norm,
                           utterances_per_step=self.utterances_per_step)

    def fit(self, X, y):
        """Fit on lists of EMA feature matrices ``X`` and spectrograms ``y``."""
        X, _ = check_sequences(X, "X")
        y, _ = check_sequences(y, "y", nonnegative=True)
        check_paired(X, y)
        variant = get_variant(self.variant)
        arch = ArchitectureConfig(
            spec_bins=y[0].shape[1], ema_width=X[0].shape[1], spec_hidden=self.spec_hidden,
            ema_hidden=self.ema_hidden, decoder_hidden=self.decoder_hidden,
            spec_embed_width=self.embed_width, ema_embed_width=self.embed_width,
        )
        mel = {"n_mels": self.n_mels, "fmin": self.fmin, "fmax": self.fmax, "sample_rate": self.sample_rate}
        corpus = [Example(f"seq{i:05d}", e, s) for i, (e, s) in enumerate(zip(X, y))]
        self.stage1_checkpoint_ = None
        if variant.stage1_enabled:
            epochs = self.stage1_epochs if self.stage1_epochs is not None else self.epochs
            self.stage1_checkpoint_ = train_stage1(corpus, self._train_config(epochs), variant, arch, mel)
        self.checkpoint_ = train_stage2(corpus, self._train_config(self.epochs), variant,
                                        self.stage1_checkpoint_, arch, mel)
        self.n_features_in_ = arch.ema_width
        self.loss_history_ = list(self.checkpoint_.loss_history)
        return self

    @classmethod
    def from_checkpoint(cls, checkpoint):
        """Wrap an existing stage-2 checkpoint without retraining."""
        a = checkpoint.arch
        est = cls(variant=checkpoint.variant, spec_hidden=a.spec_hidden, ema_hidden=a.ema_hidden,
                  decoder_hidden=a.decoder_hidden, embed_width=a.embed_width, seed=checkpoint.seed,
                  n_mels=checkpoint.mel["n_mels"], fmin=checkpoint.mel["fmin"], fmax=checkpoint.mel["fmax"],
                  sample_rate=checkpoint.mel["sample_rate"])
        est.checkpoint_ = checkpoint
        est.stage1_checkpoint_ = None
        est.n_features_in_ = a.ema_width
        est.loss_history_ = list(checkpoint.loss_history)
        return est

    def predict(self, X):
        """Spectrogram(s) for one EMA matrix or a list of them."""
        check_is_fitted(self, "checkpoint_")
        seqs, single = check_sequences(X, "X", width=self.n_features_in_)
        nets = build_networks(self.checkpoint_.arch)
        p = self.checkpoint_.params
        out = [nets["decoder"](p, nets["ema_encoder"](p, e)) for e in seqs]
        return out[0] if single else out

    def predict_mel(self, X):
        fb = self.checkpoint_.filterbank() if hasattr(self, "checkpoint_") else None
        specs = self.predict(X)
        if isinstance(specs, np.ndarray):
            return apply_mel(specs, fb)
        return [apply_mel(s, fb) for s in specs]

    def synthesize(self, X):
        """Waveform(s) by phase reconstruction from the predicted spectrogram."""
        specs = self.predict(X)
        n_fft = 2 * (self.checkpoint_.arch.spec_bins - 1)

        def wave(s):
            return griffin_lim(s, self.gl_iterations, n_fft=n_fft, hop=n_fft // 4, sample_rate=self.sample_rate)

        return wave(specs) if isinstance(specs, np.ndarray) else [wave(s) for s in specs]

    def score(self, X, y, sample_weight=None):
        """Negative mean spectrogram L1 error (higher is better)."""
        check_is_fitted(self, "checkpoint_")
        X, _ = check_sequences(X, "X", width=self.n_features_in_)
        y, _ = check_sequences(y, "y")
        check_paired(X, y)
        corpus = [Example(f"seq{i:05d}", e, s) for i, (e, s) in enumerate(zip(X, y))]
        return -evaluate_loss(corpus, self.checkpoint_).l_spec
