"""Two-stage training and the four loss variants.

Stage 1 fits the spectral encoder and shared decoder as a spectrogram
autoencoder. Stage 2 fits the EMA encoder and the decoder against the
spectrogram targets and, for the multimodal variants, against the frozen
spectral-encoder embeddings (deep feature loss). Every ``|.|`` is a mean
absolute error over all matrix elements.
"""

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .exceptions import ConfigurationError, DivergenceError, InvalidInputError
from .features import MelFilterbank, apply_mel, griffin_lim, make_mel_filterbank
from .model import ArchitectureConfig, build_networks, init_params, subset

logger = logging.getLogger(__name__)

TERMS = ("spec", "mel", "df")


@dataclass(frozen=True)
class LossBreakdown:
    l_spec: float = 0.0
    l_mel: float = 0.0
    l_df: float = 0.0
    total: float = 0.0

    @classmethod
    def from_terms(cls, values, enabled):
        """Zero out disabled terms and sum the rest."""
        kept = {t: (float(values.get(t, 0.0)) if t in enabled else 0.0) for t in TERMS}
        return cls(kept["spec"], kept["mel"], kept["df"], kept["spec"] + kept["mel"] + kept["df"])

    def to_dict(self):
        return asdict(self)

    def is_finite(self):
        return bool(np.isfinite([self.l_spec, self.l_mel, self.l_df, self.total]).all())


@dataclass(frozen=True)
class VariantConfig:
    """Which loss terms each training stage uses.

    ``stage1_terms`` empty means the variant skips stage 1 and has no
    spectral encoder.
    """

    name: str
    stage1_terms: tuple
    stage2_terms: tuple
    uses_spectral_encoder: bool
    loss_columns: str = ""

    @property
    def stage1_enabled(self):
        return bool(self.stage1_terms)

    def __post_init__(self):
        if "df" in self.stage2_terms and not self.uses_spectral_encoder:
            raise ConfigurationError(f"{self.name}: deep feature loss needs the spectral encoder")
        if self.uses_spectral_encoder and not self.stage1_terms:
            raise ConfigurationError(f"{self.name}: spectral encoder must be trained in stage 1")
        if "spec" not in self.stage2_terms:
            raise ConfigurationError(f"{self.name}: stage 2 always includes the spectrogram loss")
        if "df" in self.stage1_terms:
            raise ConfigurationError("stage 1 has no deep feature term")


VARIANTS = {
    "S_I": VariantConfig("S_I", (), ("spec",), False, "L2_spec"),
    "S_II": VariantConfig("S_II", (), ("spec", "mel"), False, "L2_spec, L2_mel"),
    "S_III": VariantConfig("S_III", ("spec",), ("spec", "df"), True, "L1_spec, L2_spec, L2_df"),
    "EMA2S": VariantConfig("EMA2S", ("spec", "mel"), ("spec", "mel", "df"), True, "L1, L2"),
}


def get_variant(name):
    if isinstance(name, VariantConfig):
        return name
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(f"unknown variant {name!r}; choose from {sorted(VARIANTS)}") from None


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    epochs: int = 50
    seed: int = 0
    gradient_clip_norm: float = 5.0
    utterances_per_step: int = 1
    checkpoint_every: int = 10
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ConfigurationError("learning_rate must be >= 0")
        if self.epochs < 1:
            raise ConfigurationError("epochs must be >= 1")
        if self.utterances_per_step < 1:
            raise ConfigurationError("utterances_per_step must be >= 1")
        if self.gradient_clip_norm is not None and self.gradient_clip_norm <= 0:
            raise ConfigurationError("gradient_clip_norm must be positive or None")

    def to_dict(self):
        return asdict(self)


@dataclass
class Example:
    """One frame-aligned training pair: EMA features ``ema`` and target ``spec``."""

    id: str
    ema: np.ndarray
    spec: np.ndarray

    def __post_init__(self):
        if self.ema.shape[0] != self.spec.shape[0]:
            raise InvalidInputError(
                f"{self.id}: EMA has {self.ema.shape[0]} frames, spectrogram {self.spec.shape[0]}"
            )


@dataclass
class Checkpoint:
    params: dict
    arch: ArchitectureConfig
    stage: int
    step: int
    variant: str
    seed: int
    loss_history: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)
    mel: dict = field(default_factory=lambda: {"n_mels": 80, "fmin": 0.0, "fmax": 8000.0, "sample_rate": 16000})

    def filterbank(self):
        return make_mel_filterbank(self.arch.spec_bins, self.mel["n_mels"], self.mel["sample_rate"],
                                   self.mel["fmin"], self.mel["fmax"])


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def _weights(M):
    return M.weights if isinstance(M, MelFilterbank) else None


def _mel(M, x):
    if callable(M) and not isinstance(M, MelFilterbank):
        return M(x)
    return x @ _weights(M).T if np.ndim(x) == 3 else apply_mel(x, M)


def _mae(a, b):
    return float(np.mean(np.abs(a - b)))


def stage1_loss(s, E_spec, D, M, terms=("spec", "mel")):
    """Spectral reconstruction loss through the spectral encoder.

    ``E_spec`` and ``D`` are callables on frame matrices; ``M`` is a
    :class:`MelFilterbank` or a callable.
    """
    s = np.asarray(s, dtype=np.float64)
    if s.shape[0] == 0:
        raise InvalidInputError("empty spectrogram")
    recon = D(E_spec(s))
    values = {"spec": _mae(recon, s)}
    if "mel" in terms:
        values["mel"] = _mae(_mel(M, recon), _mel(M, s))
    return LossBreakdown.from_terms(values, terms)


def stage2_loss(e, s, E_ema, E_spec, D, M, terms=("spec", "mel", "df")):
    """EMA-driven reconstruction loss plus the deep feature term."""
    e = np.asarray(e, dtype=np.float64)
    s = np.asarray(s, dtype=np.float64)
    if e.shape[0] != s.shape[0]:
        raise InvalidInputError(f"EMA has {e.shape[0]} frames but spectrogram has {s.shape[0]}")
    z = E_ema(e)
    recon = D(z)
    values = {"spec": _mae(recon, s)}
    if "mel" in terms:
        values["mel"] = _mae(_mel(M, recon), _mel(M, s))
    if "df" in terms:
        if E_spec is None:
            raise ConfigurationError("deep feature loss requested without a spectral encoder")
        values["df"] = _mae(z, E_spec(s))
    return LossBreakdown.from_terms(values, terms)


def _l1_grad(pred, target):
    return np.sign(pred - target) / pred.size


def _reconstruction(pred, target, mel_w, terms):
    """Loss values and ``dL/dpred`` for the spectrogram and mel terms."""
    values = {"spec": _mae(pred, target)}
    dpred = _l1_grad(pred, target)
    if "mel" in terms:
        mp, mt = pred @ mel_w.T, target @ mel_w.T
        values["mel"] = _mae(mp, mt)
        dpred = dpred + _l1_grad(mp, mt) @ mel_w
    return values, dpred


def stage1_gradients(params, nets, s, mel_w, terms):
    """Loss and gradients of stage 1 on a batch ``s`` of shape ``(B, T, F)``."""
    z, enc_cache = nets["spec_encoder"].forward(params, s)
    recon, dec_cache = nets["decoder"].forward(params, z)
    values, drecon = _reconstruction(recon, s, mel_w, terms)
    grads, dz = nets["decoder"].backward(params, dec_cache, drecon)
    enc_grads, _ = nets["spec_encoder"].backward(params, enc_cache, dz)
    grads.update(enc_grads)
    return LossBreakdown.from_terms(values, terms), grads


def stage2_gradients(params, nets, e, s, mel_w, terms, spec_embedding=None):
    """Stage-2 loss and gradients; ``spec_embedding`` is treated as a constant."""
    z, enc_cache = nets["ema_encoder"].forward(params, e)
    recon, dec_cache = nets["decoder"].forward(params, z)
    values, drecon = _reconstruction(recon, s, mel_w, terms)
    grads, dz = nets["decoder"].backward(params, dec_cache, drecon)
    if "df" in terms:
        values["df"] = _mae(z, spec_embedding)
        dz = dz + _l1_grad(z, spec_embedding)
    enc_grads, _ = nets["ema_encoder"].backward(params, enc_cache, dz)
    grads.update(enc_grads)
    return LossBreakdown.from_terms(values, terms), grads


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Per-parameter first/second-moment optimizer over a dict of arrays."""

    def __init__(self, names, shapes, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = {n: np.zeros(shapes[n]) for n in names}
        self.v = {n: np.zeros(shapes[n]) for n in names}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name in self.m:
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            params[name] = params[name] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def clip_by_global_norm(grads, max_norm):
    if max_norm is None:
        return grads, None
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        scale = max_norm / norm
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def _check_corpus(corpus, arch):
    corpus = list(corpus)
    if not corpus:
        raise InvalidInputError("training corpus is empty")
    for ex in corpus:
        if ex.spec.shape[1] != arch.spec_bins:
            raise InvalidInputError(f"{ex.id}: spectrogram has {ex.spec.shape[1]} bins, expected {arch.spec_bins}")
    return corpus


def _length_groups(examples):
    """Split a step's examples into equal-length stacks (no padding)."""
    groups = {}
    for ex in examples:
        groups.setdefault(ex.spec.shape[0], []).append(ex)
    return list(groups.values())


def _accumulate(parts):
    """Combine per-group ``(n, loss, grads)`` into example-weighted means."""
    total = sum(n for n, _, _ in parts)
    grads = {}
    values = dict.fromkeys(TERMS, 0.0)
    for n, loss, g in parts:
        w = n / total
        for k, v in g.items():
            grads[k] = grads[k] + w * v if k in grads else w * v
        values["spec"] += w * loss.l_spec
        values["mel"] += w * loss.l_mel
        values["df"] += w * loss.l_df
    return values, grads


def _run(params, trainable, examples, config, stage, variant, arch, compute, seed_offset, on_epoch=None):
    """Shared loop for both stages; mutates nothing outside ``params`` copies."""
    shapes = {k: params[k].shape for k in trainable}
    opt = Adam(trainable, shapes, config.learning_rate, config.beta1, config.beta2, config.eps)
    rng = np.random.default_rng([config.seed, seed_offset])
    terms = variant.stage1_terms if stage == 1 else variant.stage2_terms
    ckpt = Checkpoint(params, arch, stage, 0, variant.name, config.seed)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(examples))
        epoch_vals = []
        for start in range(0, len(order), config.utterances_per_step):
            chunk = [examples[i] for i in order[start:start + config.utterances_per_step]]
            parts = [(len(g), *compute(params, g)) for g in _length_groups(chunk)]
            values, grads = _accumulate(parts)
            loss = LossBreakdown.from_terms(values, terms)
            if not loss.is_finite() or not all(np.all(np.isfinite(grads[k])) for k in trainable):
                raise DivergenceError(
                    f"stage {stage} diverged at step {ckpt.step + 1} (epoch {epoch})",
                    checkpoint=replace(ckpt, params=dict(params)),
                )
            grads, _ = clip_by_global_norm({k: grads[k] for k in trainable}, config.gradient_clip_norm)
            opt.step(params, grads)
            ckpt.step += 1
            ckpt.loss_history.append(loss)
            epoch_vals.append(loss.total)
        ckpt.epoch_losses.append(float(np.mean(epoch_vals)))
        logger.info("stage %d epoch %d/%d mean loss %.6f", stage, epoch, config.epochs, ckpt.epoch_losses[-1])
        if on_epoch is not None:
            on_epoch(epoch, ckpt)
    return ckpt


def train_stage1(corpus, config=TrainConfig(), variant="EMA2S", arch=None, mel=None, on_epoch=None):
    """Fit the spectral encoder and the shared decoder.

    Parameters
    ----------
    corpus : list of Example
        Only the ``spec`` fields are used.
    config : TrainConfig
    variant : str or VariantConfig
        Must have stage 1 enabled; selects the stage-1 loss terms.
    arch : ArchitectureConfig, optional
        Defaults to the published layer sizes.
    mel : dict, optional
        Mel filterbank settings (``n_mels``, ``fmin``, ``fmax``, ``sample_rate``).
    on_epoch : callable, optional
        Called as ``on_epoch(epoch, checkpoint)`` after every epoch.

    Returns
    -------
    Checkpoint
    """
    variant = get_variant(variant)
    if not variant.stage1_enabled:
        raise ConfigurationError(f"variant {variant.name} has no stage 1")
    arch = arch or ArchitectureConfig()
    corpus = _check_corpus(corpus, arch)
    params = init_params(arch, config.seed)
    nets = build_networks(arch)
    ckpt_mel = _mel_settings(mel)
    mel_w = _filterbank(arch, ckpt_mel).weights
    trainable = list(subset(params, "spec_encoder")) + list(subset(params, "decoder"))

    def compute(p, group):
        s = np.stack([ex.spec for ex in group])
        return stage1_gradients(p, nets, s, mel_w, variant.stage1_terms)

    ckpt = _run(params, trainable, corpus, config, 1, variant, arch, compute, 1, on_epoch)
    ckpt.mel = ckpt_mel
    return ckpt


def train_stage2(corpus, config=TrainConfig(), variant="EMA2S", stage1_checkpoint=None, arch=None, mel=None,
                 on_epoch=None):
    """Fit the EMA encoder and the shared decoder.

    Variants with a spectral encoder continue from ``stage1_checkpoint``
    (decoder and spectral encoder weights); the spectral encoder stays
    frozen. Variants without one start from fresh weights.
    """
    variant = get_variant(variant)
    if variant.uses_spectral_encoder:
        if stage1_checkpoint is None:
            raise ConfigurationError(f"variant {variant.name} needs a stage-1 checkpoint")
        if stage1_checkpoint.stage != 1:
            raise ConfigurationError("stage1_checkpoint is not a stage-1 checkpoint")
        arch = stage1_checkpoint.arch
        mel = stage1_checkpoint.mel
    arch = arch or ArchitectureConfig()
    corpus = _check_corpus(corpus, arch)
    for ex in corpus:
        if ex.ema.shape[1] != arch.ema_width:
            raise InvalidInputError(f"{ex.id}: EMA width {ex.ema.shape[1]} != {arch.ema_width}")
    params = init_params(arch, config.seed)
    if variant.uses_spectral_encoder:
        params.update(subset(stage1_checkpoint.params, "spec_encoder"))
        params.update(subset(stage1_checkpoint.params, "decoder"))
        params = {k: v.copy() for k, v in params.items()}
    nets = build_networks(arch)
    ckpt_mel = _mel_settings(mel)
    mel_w = _filterbank(arch, ckpt_mel).weights
    trainable = list(subset(params, "ema_encoder")) + list(subset(params, "decoder"))
    targets = {}
    if "df" in variant.stage2_terms:
        for ex in corpus:
            targets[ex.id] = nets["spec_encoder"](params, ex.spec)

    def compute(p, group):
        e = np.stack([ex.ema for ex in group])
        s = np.stack([ex.spec for ex in group])
        emb = np.stack([targets[ex.id] for ex in group]) if targets else None
        return stage2_gradients(p, nets, e, s, mel_w, variant.stage2_terms, emb)

    ckpt = _run(params, trainable, corpus, config, 2, variant, arch, compute, 2, on_epoch)
    ckpt.mel = ckpt_mel
    return ckpt


def train(corpus, config=TrainConfig(), variant="EMA2S", arch=None, mel=None):
    """Run whichever stages ``variant`` requires; returns ``(stage1, stage2)``."""
    variant = get_variant(variant)
    stage1 = None
    if variant.stage1_enabled:
        stage1 = train_stage1(corpus, config, variant, arch, mel)
    return stage1, train_stage2(corpus, config, variant, stage1, arch, mel)


def _mel_settings(mel):
    out = {"n_mels": 80, "fmin": 0.0, "fmax": 8000.0, "sample_rate": 16000}
    out.update(mel or {})
    return out


def _filterbank(arch, mel):
    return make_mel_filterbank(arch.spec_bins, mel["n_mels"], mel["sample_rate"], mel["fmin"], mel["fmax"])


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def predict_spectrogram(e, checkpoint):
    if checkpoint.stage != 2:
        raise ConfigurationError("synthesis needs a stage-2 checkpoint")
    nets = build_networks(checkpoint.arch)
    return nets["decoder"](checkpoint.params, nets["ema_encoder"](checkpoint.params, e))


def synthesize(e, checkpoint, iterations=60, mel_path=None):
    """EMA features -> (spectrogram, mel-spectrogram, waveform).

    The spectral encoder is not used. When ``mel_path`` is given the
    mel-spectrogram is also written in the external-vocoder format.
    """
    spec = predict_spectrogram(e, checkpoint)
    mel = apply_mel(spec, checkpoint.filterbank())
    n_fft = 2 * (checkpoint.arch.spec_bins - 1)
    wave = griffin_lim(spec, iterations, n_fft=n_fft, hop=n_fft // 4, sample_rate=checkpoint.mel["sample_rate"])
    if mel_path is not None:
        from .fileio import write_mel

        write_mel(mel_path, mel)
    return spec, mel, wave


def evaluate_loss(corpus, checkpoint):
    """Mean per-utterance stage-2 loss of ``checkpoint`` on ``corpus``.

    All three terms are reported regardless of the variant (``l_df`` only
    when the checkpoint carries a trained spectral encoder).
    """
    variant = get_variant(checkpoint.variant)
    nets = build_networks(checkpoint.arch)
    fb = checkpoint.filterbank()
    p = checkpoint.params
    terms = TERMS if variant.uses_spectral_encoder else ("spec", "mel")
    rows = []
    for ex in corpus:
        rows.append(stage2_loss(
            ex.ema, ex.spec,
            lambda x: nets["ema_encoder"](p, x),
            (lambda x: nets["spec_encoder"](p, x)) if "df" in terms else None,
            lambda z: nets["decoder"](p, z),
            fb, terms,
        ))
    return LossBreakdown(
        float(np.mean([r.l_spec for r in rows])),
        float(np.mean([r.l_mel for r in rows])),
        float(np.mean([r.l_df for r in rows])),
        float(np.mean([r.total for r in rows])),
    )
