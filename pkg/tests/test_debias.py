from dataclasses import replace

import numpy as np
import pytest

from distilbias import analysis as A
from distilbias import debias as D
from distilbias import models
from distilbias import synthdata as sd
from distilbias import tensor as T
from distilbias.debias import DebiasMethod, TrainConfig

import _oracles as O

CFG = sd.VecSpurConfig(n_train=1000, n_id_test=1000, n_ood_test=1000, n_transfer_test=200, n_heldout=400)
FAST = TrainConfig(lr=1e-2, epochs=10, seed=0)
SPEC = models.spec_for("mlp", "M")


@pytest.fixture(scope="module")
def bundle():
    return sd.generate(CFG, 0)


@pytest.fixture(scope="module")
def erm(bundle):
    return D.train_erm(SPEC, bundle, FAST)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(epochs=0)
    with pytest.raises(ValueError):
        TrainConfig(lr=0.0)
    with pytest.raises(ValueError):
        DebiasMethod("jtt")
    with pytest.raises(ValueError):
        DebiasMethod("sigma_damp", tau_damp=0.5)


def test_default_optimiser_settings():
    assert TrainConfig.paper_default("attn") == TrainConfig(lr=5e-5, epochs=5)
    assert TrainConfig.paper_default("mlp", 3) == TrainConfig(lr=4e-5, epochs=100, seed=3)
    assert DebiasMethod("sigma_damp").tau_damp == 4.0


def test_erm_learns_and_is_deterministic(bundle, erm):
    again = D.train_erm(SPEC, bundle, FAST)
    assert again.param_bytes() == erm.param_bytes()
    assert erm.provenance["loss_last"] < erm.provenance["loss_first"]
    assert D.accuracy(erm, bundle["id_test"].x, bundle["id_test"].y) > 0.9


# --- product of experts -----------------------------------------------------

def test_poe_combine_oracles():
    np.testing.assert_allclose(np.exp(D.poe_combine([[0.0, 0.0]], [[0.0, 0.0]])), [[0.5, 0.5]], atol=1e-15)
    a = np.array([[1.0, -2.0], [0.3, 0.9]])
    np.testing.assert_allclose(D.poe_combine(a, np.zeros_like(a)), T.log_softmax_vec(a), atol=1e-15)
    b = np.array([[0.5, 0.0], [-1.0, 2.0]])
    pa, pb = np.exp(T.log_softmax_vec(a)), np.exp(T.log_softmax_vec(b))
    direct = pa * pb / (pa * pb).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(np.exp(D.poe_combine(a, b)), direct, atol=1e-15)
    with pytest.raises(ValueError):
        D.poe_combine(a, b[:1])


def test_poe_loss_gradient_matches_finite_difference():
    rng = np.random.default_rng(0)
    z0, blp = rng.normal(size=(5, 2)), T.log_softmax_vec(rng.normal(size=(5, 2)))
    y, idx = rng.integers(0, 2, 5), np.arange(5)
    loss = D.poe_loss(y, blp)
    z = T.param(z0)
    (g,) = T.backward(loss(z, idx), [z])
    for i in np.ndindex(z0.shape):
        hi, lo = z0.copy(), z0.copy()
        hi[i] += 1e-6
        lo[i] -= 1e-6
        fd = (float(loss(T.Tensor(hi), idx).data) - float(loss(T.Tensor(lo), idx).data)) / 2e-6
        assert abs(g[i] - fd) < 1e-7


@pytest.mark.parametrize("kind", ["biasfeature", "weak"])
def test_poe_bias_model_is_frozen_and_absent_at_inference(bundle, kind, monkeypatch):
    trained = {}
    real = D.train_bias_model

    def spy(*args, **kw):
        trained["model"] = real(*args, **kw)
        trained["bytes"] = trained["model"].param_bytes()
        return trained["model"]

    monkeypatch.setattr(D, "train_bias_model", spy)
    model = D.train_poe(SPEC, bundle, FAST, bias_kind=kind)
    bias = trained["model"]
    assert bias.param_bytes() == trained["bytes"]
    assert model.provenance["bias_model"] == bias.digest()
    assert set(model.params) == set(models.init_params(SPEC, 0).params)

    seen = []
    real_build = models.build
    monkeypatch.setattr(models, "build", lambda m, *a, **k: seen.append(m.digest()) or real_build(m, *a, **k))
    A.evaluate(model, bundle)
    assert seen and bias.digest() not in seen


def test_bias_model_must_beat_chance(bundle):
    balanced = sd.balanced_train(bundle, 0)
    with pytest.raises(D.BiasModelTooWeak):
        D.prepare(DebiasMethod("poe_biasfeature"), SPEC, bundle, FAST, train=balanced)


def test_unknown_poe_kind(bundle):
    with pytest.raises(ValueError):
        D.train_poe(SPEC, bundle, FAST, bias_kind="oracle")


# --- sigma damp -----------------------------------------------------------------

def test_sigma_damp_tau_one_is_erm(bundle, erm):
    damped = D.train_sigma_damp(SPEC, bundle, FAST, tau_damp=1.0)
    assert damped.param_bytes() == erm.param_bytes()


def test_sigma_damp_shrinks_gradients():
    spec = models.spec_for("mlp", "S")
    m = O.perturb(models.init_params(spec, 1), 1)
    x, y = O.random_batch(spec, 32, 1)
    idx = np.arange(32)

    def grad_norm(loss_fn):
        fwd = models.build(m, x)
        grads = T.backward(loss_fn(fwd.logits, idx), list(fwd.params.values()))
        return np.sqrt(sum(float((g ** 2).sum()) for g in grads))

    assert grad_norm(D.sigma_damp_loss(y, 4.0)) < grad_norm(D.ce_loss(y))
    with pytest.raises(ValueError):
        D.sigma_damp_loss(y, 0.9)


# --- DFR ----------------------------------------------------------------------

def test_dfr_changes_only_the_head(bundle, erm):
    dfr = D.train_dfr(SPEC, bundle, FAST)
    head = set(erm.head_names())
    for k in erm.params:
        same = np.array_equal(erm.params[k], dfr.params[k])
        assert same != (k in head), k
    assert dfr.provenance["dfr"]["n_heldout"] == len(bundle["heldout"])


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_dfr_improves_worst_group(seed):
    b = sd.generate(CFG, seed)
    tc = replace(FAST, seed=seed)
    erm_wg = A.evaluate(D.train_erm(SPEC, b, tc), b).ood_score
    dfr_wg = A.evaluate(D.train_dfr(SPEC, b, tc), b).ood_score
    assert dfr_wg >= erm_wg + 0.10


def test_dfr_rejects_unbalanced_or_empty_heldout(bundle, erm):
    with pytest.raises(ValueError):
        D.dfr_retrain(erm, bundle["train"], FAST)
    with pytest.raises(ValueError):
        D.dfr_retrain(erm, bundle["heldout"].subset(np.array([], dtype=int)), FAST)


# --- PSG ------------------------------------------------------------------------

def test_final_layer_grad_norms_match_autograd(erm, bundle):
    ds = bundle["train"]
    closed = D.final_layer_grad_norms(erm, ds.x[:6], ds.y[:6])
    for i in range(6):
        fwd = models.build(erm, ds.x[i:i + 1], trainable=erm.head_names())
        grads = T.backward(T.batch_cross_entropy(fwd.logits, ds.y[i:i + 1]),
                           [fwd.params[k] for k in erm.head_names()])
        assert closed[i] == pytest.approx(np.sqrt(sum(float((g ** 2).sum()) for g in grads)), rel=1e-10)


@pytest.mark.parametrize("full", [False, True])
def test_psg_weights_distribution(erm, bundle, full):
    ds = bundle["train"].subset(np.arange(200)) if full else bundle["train"]
    w = D.psg_weights(erm, ds, full_params=full)
    assert (w >= 0).all() and w.sum() == pytest.approx(1.0, abs=1e-12)
    minority = np.isin(ds.group, (1, 2))
    # hard (bias-conflicting) samples get more mass per sample
    assert w[minority].mean() > w[~minority].mean()


def test_psg_resample_is_seeded(erm, bundle):
    w = D.psg_weights(erm, bundle["train"])
    a, b = D.resample(bundle["train"], w, 4), D.resample(bundle["train"], w, 4)
    assert np.array_equal(a.x, b.x) and len(a) == len(bundle["train"])


def test_psg_trains(bundle):
    model = D.train_psg(SPEC, bundle, FAST)
    assert "bias_model" in model.provenance
    assert A.evaluate(model, bundle).id_score > 0.8


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_is_reported(bundle):
    with pytest.raises(D.TrainingDiverged):
        D.train_erm(SPEC, bundle, replace(FAST, lr=1e308, epochs=2))
