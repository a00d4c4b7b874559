import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ema2s.exceptions import ConfigurationError, DivergenceError, InvalidInputError
from ema2s.features import make_mel_filterbank
from ema2s.model import build_networks, init_params, subset
from ema2s.training import (
    VARIANTS,
    Adam,
    Example,
    LossBreakdown,
    TrainConfig,
    clip_by_global_norm,
    evaluate_loss,
    get_variant,
    stage1_gradients,
    stage1_loss,
    stage2_gradients,
    stage2_loss,
    synthesize,
    train,
    train_stage1,
    train_stage2,
)

from .helpers import finite_difference_check, small_arch, tiny_corpus, tiny_mel

FB = make_mel_filterbank()


def ident(x):
    return x


# ---------------------------------------------------------------------------
# loss identities
# ---------------------------------------------------------------------------


def test_stage1_identity_decoder_gives_zero():
    s = np.random.default_rng(0).random((7, 513))
    loss = stage1_loss(s, ident, ident, FB)
    assert loss.total == 0.0 and loss.l_spec == 0.0 and loss.l_mel == 0.0


def test_stage2_identical_embeddings_give_zero_deep_feature_loss():
    rng = np.random.default_rng(1)
    s, e = rng.random((7, 513)), rng.random((7, 90))
    z = rng.random((7, 256))
    loss = stage2_loss(e, s, lambda _: z, lambda _: z.copy(), lambda _: s * 0.5, FB)
    assert loss.l_df == 0.0
    assert loss.l_spec > 0


@pytest.mark.parametrize("name", sorted(VARIANTS))
def test_disabled_terms_are_exactly_zero_and_totals_add_up(name):
    v = VARIANTS[name]
    rng = np.random.default_rng(2)
    s, e = rng.random((5, 513)), rng.random((5, 90))
    z1, z2 = rng.random((5, 256)), rng.random((5, 256))
    enc = (lambda _: z2) if v.uses_spectral_encoder else None
    loss = stage2_loss(e, s, lambda _: z1, enc, lambda _: rng.random((5, 513)), FB, v.stage2_terms)
    for term, value in (("spec", loss.l_spec), ("mel", loss.l_mel), ("df", loss.l_df)):
        assert (value > 0) == (term in v.stage2_terms)
    assert abs(loss.total - (loss.l_spec + loss.l_mel + loss.l_df)) < 1e-9
    if v.stage1_enabled:
        l1 = stage1_loss(s, ident, lambda _: s + 0.1, FB, v.stage1_terms)
        assert (l1.l_mel > 0) == ("mel" in v.stage1_terms)
        assert l1.l_df == 0.0


def test_loss_values_follow_mean_absolute_error():
    s = np.zeros((2, 513))
    loss = stage1_loss(s, ident, lambda x: x + 0.25, FB)
    assert loss.l_spec == pytest.approx(0.25)
    assert loss.l_mel == pytest.approx(0.25 * FB.weights.sum(axis=1).mean())


def test_loss_input_errors():
    with pytest.raises(InvalidInputError):
        stage1_loss(np.zeros((0, 513)), ident, ident, FB)
    with pytest.raises(InvalidInputError):
        stage2_loss(np.zeros((3, 90)), np.zeros((4, 513)), ident, ident, ident, FB)
    with pytest.raises(ConfigurationError):
        stage2_loss(np.zeros((3, 2)), np.zeros((3, 513)), ident, None, lambda z: np.zeros((3, 513)), FB)


@settings(max_examples=25, deadline=None)
@given(a=st.lists(st.floats(0, 5), min_size=3, max_size=3), enabled=st.sets(st.sampled_from(["spec", "mel", "df"])))
def test_loss_breakdown_totals(a, enabled):
    lb = LossBreakdown.from_terms(dict(zip(("spec", "mel", "df"), a)), enabled)
    assert lb.total == pytest.approx(lb.l_spec + lb.l_mel + lb.l_df, abs=1e-9)
    assert lb.total >= 0 and lb.is_finite()


# ---------------------------------------------------------------------------
# gradients
# ---------------------------------------------------------------------------


def _mel_w(arch):
    return make_mel_filterbank(arch.spec_bins, tiny_mel()["n_mels"]).weights


def test_stage1_gradients_match_finite_differences():
    arch = small_arch()
    params = init_params(arch, 3)
    params["decoder.proj.b"] = params["decoder.proj.b"] + 0.4
    params["spec_encoder.proj.b"] = params["spec_encoder.proj.b"] + 0.4
    nets = build_networks(arch)
    s = np.random.default_rng(4).random((1, 5, arch.spec_bins))
    mel_w = _mel_w(arch)
    loss, grads = stage1_gradients(params, nets, s, mel_w, ("spec", "mel"))
    trainable = {**subset(params, "spec_encoder"), **subset(params, "decoder")}

    def f(p):
        return stage1_gradients({**params, **p}, nets, s, mel_w, ("spec", "mel"))[0].total

    assert set(grads) == set(trainable)
    assert finite_difference_check(f, trainable, grads) < 1e-4


def test_stage2_gradients_match_finite_differences():
    arch = small_arch()
    params = init_params(arch, 5)
    params["decoder.proj.b"] = params["decoder.proj.b"] + 0.4
    params["ema_encoder.proj.b"] = params["ema_encoder.proj.b"] + 0.4
    nets = build_networks(arch)
    rng = np.random.default_rng(6)
    e = rng.uniform(-1, 1, (1, 5, arch.ema_width))
    s = rng.random((1, 5, arch.spec_bins))
    target = rng.random((1, 5, arch.embed_width))
    mel_w = _mel_w(arch)
    terms = ("spec", "mel", "df")
    _, grads = stage2_gradients(params, nets, e, s, mel_w, terms, target)
    trainable = {**subset(params, "ema_encoder"), **subset(params, "decoder")}
    assert set(grads) == set(trainable)

    def f(p):
        return stage2_gradients({**params, **p}, nets, e, s, mel_w, terms, target)[0].total

    assert finite_difference_check(f, trainable, grads) < 1e-4


def test_clip_by_global_norm():
    g = {"a": np.array([3.0, 0.0]), "b": np.array([4.0])}
    clipped, norm = clip_by_global_norm(g, 1.0)
    assert norm == pytest.approx(5.0)
    assert np.sqrt(sum(np.sum(v * v) for v in clipped.values())) == pytest.approx(1.0)
    same, _ = clip_by_global_norm(g, 10.0)
    assert same["a"] is g["a"]
    assert clip_by_global_norm(g, None) == (g, None)


def test_adam_first_step_moves_by_learning_rate():
    params = {"w": np.array([1.0, -1.0])}
    opt = Adam(["w"], {"w": (2,)}, lr=0.1)
    opt.step(params, {"w": np.array([2.0, -0.5])})
    np.testing.assert_allclose(params["w"], [0.9, -0.9], atol=1e-6)


# ---------------------------------------------------------------------------
# training loops
# ---------------------------------------------------------------------------


def cfg(**kw):
    base = {"epochs": 2, "learning_rate": 1e-2, "seed": 0}
    base.update(kw)
    return TrainConfig(**base)


def test_train_stage1_is_deterministic():
    corpus = tiny_corpus()
    a = train_stage1(corpus, cfg(), "EMA2S", small_arch(), tiny_mel())
    b = train_stage1(corpus, cfg(), "EMA2S", small_arch(), tiny_mel())
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    assert a.loss_history == b.loss_history
    assert a.step == 6 and len(a.epoch_losses) == 2


def test_zero_learning_rate_keeps_parameters():
    corpus = tiny_corpus()
    arch = small_arch()
    ck = train_stage1(corpus, cfg(learning_rate=0.0), "EMA2S", arch, tiny_mel())
    init = init_params(arch, 0)
    assert all(np.array_equal(ck.params[k], init[k]) for k in init)


def test_stage2_freezes_spectral_encoder_and_updates_the_rest():
    corpus = tiny_corpus()
    s1 = train_stage1(corpus, cfg(), "EMA2S", small_arch(), tiny_mel())
    s2 = train_stage2(corpus, cfg(), "EMA2S", s1)
    for k in subset(s1.params, "spec_encoder"):
        np.testing.assert_array_equal(s2.params[k], s1.params[k])
    assert any(not np.array_equal(s2.params[k], s1.params[k]) for k in subset(s1.params, "decoder"))
    assert all(loss.l_df > 0 for loss in s2.loss_history)
    assert s2.stage == 2 and s2.variant == "EMA2S"


def test_stage2_errors_and_fresh_decoder_variants():
    corpus = tiny_corpus()
    with pytest.raises(ConfigurationError):
        train_stage2(corpus, cfg(), "EMA2S", None, small_arch(), tiny_mel())
    with pytest.raises(ConfigurationError):
        train_stage1(corpus, cfg(), "S_I", small_arch(), tiny_mel())
    s2 = train_stage2(corpus, cfg(), "S_I", None, small_arch(), tiny_mel())
    assert all(loss.l_mel == 0 and loss.l_df == 0 for loss in s2.loss_history)


def test_variant_table():
    assert VARIANTS["S_I"].stage2_terms == ("spec",)
    assert VARIANTS["S_II"].stage2_terms == ("spec", "mel")
    assert VARIANTS["S_III"].stage1_terms == ("spec",) and VARIANTS["S_III"].stage2_terms == ("spec", "df")
    assert VARIANTS["EMA2S"].stage2_terms == ("spec", "mel", "df")
    assert not VARIANTS["S_II"].uses_spectral_encoder
    with pytest.raises(ConfigurationError):
        get_variant("S_IV")


def test_batched_steps_group_equal_lengths():
    corpus = tiny_corpus(n=4, frames=(6, 6, 5, 5))
    ck = train_stage1(corpus, cfg(utterances_per_step=4, epochs=1), "EMA2S", small_arch(), tiny_mel())
    assert ck.step == 1


@pytest.mark.filterwarnings("ignore:invalid value encountered:RuntimeWarning")
def test_divergence_raises_with_checkpoint():
    corpus = tiny_corpus()
    corpus[1] = Example(corpus[1].id, corpus[1].ema, np.full_like(corpus[1].spec, np.inf))
    with pytest.raises(DivergenceError) as info:
        train_stage1(corpus, cfg(), "EMA2S", small_arch(), tiny_mel())
    assert info.value.checkpoint is not None


def test_corpus_validation():
    with pytest.raises(InvalidInputError):
        train_stage1([], cfg(), "EMA2S", small_arch(), tiny_mel())
    with pytest.raises(InvalidInputError):
        Example("x", np.zeros((3, 6)), np.zeros((4, 8)))
    with pytest.raises(ConfigurationError):
        TrainConfig(epochs=0)


def test_train_synthesize_and_evaluate():
    corpus = tiny_corpus()
    s1, s2 = train(corpus, cfg(), "S_III", small_arch(), tiny_mel())
    assert s1.stage == 1 and s2.variant == "S_III"
    spec, mel, wave = synthesize(corpus[0].ema, s2, iterations=2)
    assert spec.shape == corpus[0].spec.shape and np.all(spec >= 0)
    assert mel.shape == (spec.shape[0], 3)
    assert len(wave) == 3 * (spec.shape[0] - 1)
    ev = evaluate_loss(corpus, s2)
    assert ev.is_finite() and ev.l_df >= 0
    with pytest.raises(ConfigurationError):
        synthesize(corpus[0].ema, s1)
