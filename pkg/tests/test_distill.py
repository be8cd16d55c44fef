from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distilbias import analysis as A
from distilbias import distill as K
from distilbias import models
from distilbias import synthdata as sd
from distilbias import tensor as T
from distilbias.debias import DebiasMethod, TrainConfig
from distilbias.distill import DistillConfig, ScaleOrderError

import _oracles as O

CFG = sd.VecSpurConfig(n_train=600, n_id_test=600, n_ood_test=600, n_transfer_test=200, n_heldout=200)
FAST = TrainConfig(lr=1e-2, epochs=4, seed=0)
DCFG = DistillConfig(train=FAST)


def spec(scale):
    return models.spec_for("mlp", scale)


@pytest.fixture(scope="module")
def bundle():
    return sd.generate(CFG, 0)


@pytest.fixture(scope="module")
def teacher(bundle):
    from distilbias.debias import train_erm
    return train_erm(spec("L"), bundle, FAST, role="teacher_scratch")


# --- kd_loss -----------------------------------------------------------------

def test_kd_loss_examples():
    assert K.kd_loss([0.4, -0.1], [0.4, -0.1], 0, 0.0, 2.0) == 0.0
    assert K.kd_loss([0.4, -0.1], [3.0, 1.0], 1, 1.0, 2.0) == T.cross_entropy([0.4, -0.1], 1)
    # direct KL of softmax([1, 0]) against uniform, frozen
    want = 0.11094407167172735
    assert O.kl_direct(O.softmax_direct([1.0, 0.0]), [0.5, 0.5]) == pytest.approx(want, abs=1e-15)
    assert K.kd_loss([0.0, 0.0], [1.0, 0.0], 0, 0.0, 1.0) == pytest.approx(want, abs=1e-15)


def test_kd_loss_errors():
    with pytest.raises(ValueError):
        K.kd_loss([0.0, 0.0], [0.0, 0.0, 0.0], 0, 0.5, 2.0)
    with pytest.raises(ValueError):
        K.kd_loss([0.0, 0.0], [0.0, 0.0], 0, 0.5, 0.0)
    with pytest.raises(ValueError):
        DistillConfig(alpha=1.5)
    with pytest.raises(ValueError):
        DistillConfig(remedy="prune")


logits = st.lists(st.floats(-8, 8), min_size=2, max_size=2)


@given(logits, logits, st.integers(0, 1), st.floats(0.2, 5.0))
def test_kd_loss_endpoints_and_continuity(s, t, y, tau):
    ce = T.cross_entropy(s, y)
    kl = tau * tau * T.kl_div(T.softmax_temp(t, tau), T.softmax_temp(s, tau))
    assert K.kd_loss(s, t, y, 1.0, tau) == ce
    assert K.kd_loss(s, t, y, 0.0, tau) == pytest.approx(kl, rel=1e-12, abs=1e-15)
    for a in (1e-9, 0.5, 1 - 1e-9):
        assert K.kd_loss(s, t, y, a, tau) == pytest.approx(a * ce + (1 - a) * kl, rel=1e-9, abs=1e-12)


def test_kd_term_matches_scalar_loss_and_finite_differences():
    rng = np.random.default_rng(3)
    z0, t = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    probs = T.softmax_temp(t, 2.0)
    node = K.kd_term(T.Tensor(z0), probs, 2.0)
    scalar = np.mean([K.kd_loss(z0[i], t[i], 0, 0.0, 2.0) for i in range(4)])
    assert float(node.data) == pytest.approx(scalar, abs=1e-12)
    z = T.param(z0)
    (g,) = T.backward(K.kd_term(z, probs, 2.0), [z])
    for i in np.ndindex(z0.shape):
        hi, lo = z0.copy(), z0.copy()
        hi[i] += 1e-6
        lo[i] -= 1e-6
        fd = (np.mean([K.kd_loss(hi[r], t[r], 0, 0.0, 2.0) for r in range(4)])
              - np.mean([K.kd_loss(lo[r], t[r], 0, 0.0, 2.0) for r in range(4)])) / 2e-6
        assert abs(g[i] - fd) / max(1.0, abs(fd)) < 1e-4


# --- distill ------------------------------------------------------------------

def test_distill_freezes_teacher_and_records_provenance(teacher, bundle):
    before = teacher.param_bytes()
    student = K.distill(teacher, spec("T"), bundle, DCFG, DebiasMethod("erm"))
    assert teacher.param_bytes() == before
    assert student.role == "distilled"
    p = student.provenance
    assert (p["teacher_scale"], p["method"], p["seed"]) == ("L", "erm", 0)
    assert p["chain"] == ["L", "T"]


def test_distill_scale_order(teacher, bundle):
    small = models.init_params(spec("T"), 0)
    with pytest.raises(ScaleOrderError):
        K.distill(small, spec("M"), bundle, DCFG)
    with pytest.raises(ScaleOrderError):
        K.distill(teacher, models.spec_for("attn", "T"), bundle, DCFG)


def test_self_distillation_runs(bundle):
    t = models.init_params(spec("T"), 5, "teacher_scratch")
    s = K.distill(t, spec("T"), bundle, DCFG)
    assert s.provenance["teacher_scale"] == "T"


@pytest.mark.parametrize("seed", [17, 23, 42])
def test_distilled_student_agrees_with_teacher(seed):
    from distilbias.debias import train_erm
    b = sd.generate(CFG, seed)
    cfg = replace(FAST, seed=seed)
    t = train_erm(spec("L"), b, cfg, role="teacher_scratch")
    s = K.distill(t, spec("T"), b, DistillConfig(train=cfg))
    assert A.agreement(t, s, b["id_test"]) > 0.5


def test_debias_objective_replaces_hard_label_term(teacher, bundle):
    plain = K.distill(teacher, spec("T"), bundle, DCFG, DebiasMethod("sigma_damp"))
    off = K.distill(teacher, spec("T"), bundle, replace(DCFG, combine_debias=False), DebiasMethod("sigma_damp"))
    assert plain.param_bytes() != off.param_bytes()
    erm = K.distill(teacher, spec("T"), bundle, DCFG, DebiasMethod("erm"))
    assert off.param_bytes() == erm.param_bytes()


# --- IKD --------------------------------------------------------------------------

def _recording(calls):
    def fn(t, s, *a, **k):
        calls.append((t.spec.scale.value, s.scale.value))
        return K.distill(t, s, *a, **k)
    return fn


def test_ikd_adjacent_is_one_step_and_equals_distill(teacher, bundle):
    calls = []
    chained = K.ikd_chain(teacher, "B", bundle, DCFG, distill_fn=_recording(calls))
    assert calls == [("L", "B")]
    direct = K.distill(teacher, spec("B"), bundle, DCFG)
    assert chained.param_bytes() == direct.param_bytes()


def test_ikd_walks_the_full_ladder(teacher, bundle):
    calls = []
    out = K.ikd_chain(teacher, "T", bundle, DCFG, distill_fn=_recording(calls))
    assert calls == [("L", "B"), ("B", "M"), ("M", "S"), ("S", "T")]
    assert out.provenance["chain"] == ["L", "B", "M", "S", "T"]
    assert len(out.provenance["ikd_intermediates"]) == 4
    assert out.provenance["teacher_scale"] == "S"
    direct = K.distill(teacher, spec("T"), bundle, DCFG)
    assert out.param_bytes() != direct.param_bytes()


def test_ikd_target_must_be_smaller(teacher, bundle):
    with pytest.raises(ScaleOrderError):
        K.ikd_chain(teacher, "L", bundle, DCFG)


# --- Init -------------------------------------------------------------------------

def test_init_same_scale_copies_everything(teacher):
    clone = K.init_from_teacher(teacher, spec("L"))
    assert clone.param_bytes() == teacher.param_bytes()
    partial = K.init_from_teacher(teacher, spec("L"), reinit_head=True)
    assert partial.param_bytes(["W0", "b0"]) == teacher.param_bytes(["W0", "b0"])
    assert partial.param_bytes(["W_out"]) != teacher.param_bytes(["W_out"])


def test_init_slices_leading_blocks():
    t = O.perturb(models.init_params(spec("B"), 2), 2)
    s = K.init_from_teacher(t, spec("T"))
    assert np.array_equal(s.params["W0"], t.params["W0"][:, :16])
    assert np.array_equal(s.params["b0"], t.params["b0"][:16])
    fresh = models.init_params(spec("T"), 0)
    assert np.array_equal(s.params["W_out"], fresh.params["W_out"])


def test_init_attention_slicing():
    t = O.perturb(models.init_params(models.spec_for("attn", "L"), 2), 2)
    s = K.init_from_teacher(t, models.spec_for("attn", "S"))
    for name, v in s.params.items():
        if name not in ("W_out", "b_out"):
            block = t.params[name][tuple(slice(0, n) for n in v.shape)]
            assert np.array_equal(v, block), name


def test_init_errors():
    with pytest.raises(ValueError):
        K.init_from_teacher(models.init_params(spec("L"), 0), models.spec_for("attn", "T"))
    with pytest.raises(ScaleOrderError):
        K.init_from_teacher(models.init_params(spec("T"), 0), spec("M"))


def test_init_raises_layer_cka():
    from distilbias.debias import train_erm
    gains = []
    for seed in (17, 23, 42):
        b = sd.generate(CFG, seed)
        t = train_erm(spec("M"), b, replace(FAST, seed=seed), role="teacher_scratch")
        probe = b["id_test"]
        inited = K.init_from_teacher(t, spec("S"), seed)
        rand = models.init_params(spec("S"), seed)
        c_init = A.cka_matrix(t, inited, probe).grid[0, 0]
        c_rand = A.cka_matrix(t, rand, probe).grid[0, 0]
        gains.append(c_init - c_rand)
    assert np.mean(gains) > 0
