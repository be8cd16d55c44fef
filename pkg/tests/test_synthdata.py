import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from distilbias import synthdata as sd
from distilbias.synthdata import ConfigError, TokSpurConfig, VecSpurConfig

SMALL_VEC = VecSpurConfig(n_train=600, n_id_test=400, n_ood_test=400, n_transfer_test=400, n_heldout=200)
SMALL_TOK = TokSpurConfig(n_train=600, n_id_test=300, n_ood_test=300, n_transfer_test=300, n_heldout=200)


def sigma3(p, n):
    return 3 * math.sqrt(p * (1 - p) / n)


@pytest.mark.parametrize("seed", [0, 1, 17])
def test_noiseless_core_oracle_is_perfect(seed):
    b = sd.generate(replace(SMALL_VEC, noise_sd=0.0), seed)
    for name in sd.SPLITS:
        ds = b[name]
        assert np.mean(sd.core_oracle(ds, b.config) == ds.y) == 1.0


def test_group_counts_binomial():
    cfg = replace(SMALL_VEC, rho_train=0.9, n_train=1000)
    counts = sd.generate(cfg, 3)["train"].group_counts()
    # groups are 2y+s: (0,0) and (1,1) are aligned
    expected = (450, 50, 50, 450)
    for c, e in zip(counts, expected):
        p = e / 1000
        assert abs(c - e) <= 3 * math.sqrt(1000 * p * (1 - p))


def test_rho_half_has_no_spurious_information():
    cfg = replace(SMALL_VEC, rho_train=0.5, n_train=4000)
    ds = sd.generate(cfg, 5)["train"]
    assert sd.mutual_information_bits(ds.y, ds.s) < 0.01


@pytest.mark.parametrize("cfg", [SMALL_VEC, SMALL_TOK], ids=["vec", "tok"])
def test_train_correlation_and_spurious_only_learnability(cfg):
    b = sd.generate(cfg, 11)
    tr, ood = b["train"], b["ood_test"]
    assert abs(np.mean(tr.s == tr.y) - cfg.rho_train) <= sigma3(cfg.rho_train, len(tr))
    # depth-0 classifier on the spurious attribute: predict y = s
    acc_train = np.mean(tr.s == tr.y)
    acc_ood = np.mean(ood.s == ood.y)
    if cfg.kind == "tok":
        # the bias-token indicator is the attribute itself
        assert np.array_equal(sd.spurious_view(tr, cfg)[:, 0], tr.s)
    assert acc_train >= cfg.rho_train - sigma3(cfg.rho_train, len(tr))
    assert acc_ood <= 1 - cfg.rho_ood + sigma3(0.5, len(ood))


def test_tok_rho_one_label_one_has_bias_token():
    cfg = replace(SMALL_TOK, rho_train=1.0)
    tr = sd.generate(cfg, 2)["train"]
    has_bias = (tr.x == cfg.bias_token).any(axis=1)
    assert has_bias[tr.y == 1].all()
    assert not has_bias[tr.y == 0].any()


def test_tok_ood_anticorrelated():
    cfg = replace(SMALL_TOK, rho_ood=0.0)
    ood = sd.generate(cfg, 4)["ood_test"]
    pred = (ood.x == cfg.bias_token).any(axis=1).astype(int)
    assert np.mean(pred == ood.y) <= 0.5 + sigma3(0.5, len(ood))


def test_tok_core_pattern_exactly_once_and_label_rule():
    b = sd.generate(SMALL_TOK, 6)
    a, c = SMALL_TOK.core_tokens
    for name in sd.SPLITS:
        ds = b[name]
        assert ((ds.x == a).sum(axis=1) == 1).all()
        assert ((ds.x == c).sum(axis=1) == 1).all()
        assert np.array_equal(sd.core_oracle(ds, SMALL_TOK), ds.y)


@pytest.mark.parametrize("cfg", [SMALL_VEC, SMALL_TOK], ids=["vec", "tok"])
def test_splits_disjoint_and_groups_consistent(cfg):
    b = sd.generate(cfg, 8)
    seen = set()
    for name in sd.SPLITS:
        ds = b[name]
        assert np.array_equal(ds.group, 2 * ds.y + ds.s)
        hashes = set(ds.row_hashes())
        assert not (hashes & seen)
        seen |= hashes
    assert min(b["id_test"].group_counts()) > 0
    held = b["heldout"].group_counts()
    assert len(set(held)) == 1


@pytest.mark.parametrize("cfg", [SMALL_VEC, SMALL_TOK], ids=["vec", "tok"])
def test_seed_determinism_and_roundtrip(cfg, tmp_path):
    a, b = sd.generate(cfg, 21), sd.generate(cfg, 21)
    pa, pb = tmp_path / "a.txt", tmp_path / "b.txt"
    sd.save_bundle(a, pa)
    sd.save_bundle(b, pb)
    assert pa.read_bytes() == pb.read_bytes()
    back = sd.load_bundle(pa)
    for name in sd.SPLITS:
        assert back[name].x.tobytes() == a[name].x.tobytes()
        assert np.array_equal(back[name].y, a[name].y) and np.array_equal(back[name].s, a[name].s)
    assert back.config == a.config and back.seed == 21
    assert sd.generate(cfg, 22)["train"].x.tobytes() != a["train"].x.tobytes()


def test_file_format_header_and_records(tmp_path):
    p = tmp_path / "d.txt"
    sd.save_bundle(sd.generate(SMALL_TOK, 1), p)
    lines = p.read_text(encoding="utf-8").splitlines()
    assert '"seed": 1' in lines[0]
    split, y, s, g, payload = lines[1].split(",", 4)
    assert split == "train" and int(g) == 2 * int(y) + int(s)
    assert len(payload.split(",")) == SMALL_TOK.seq_len


def test_transfer_split_shift():
    vec = sd.generate(SMALL_VEC, 3)["transfer_test"]
    assert abs(np.mean(vec.s == vec.y) - sd.RHO_TRANSFER) <= sigma3(0.5, len(vec))
    tok = sd.generate(SMALL_TOK, 3)["transfer_test"]
    upper = set(SMALL_TOK.fillers[len(SMALL_TOK.fillers) // 2:].tolist())
    special = {SMALL_TOK.bias_token, SMALL_TOK.null_token, *SMALL_TOK.core_tokens}
    assert set(np.unique(tok.x).tolist()) <= upper | special


@pytest.mark.parametrize("bad", [
    dict(rho_train=1.2), dict(rho_ood=0.7), dict(core_margin=0.0), dict(noise_sd=-1.0),
    dict(n_train=0), dict(n_heldout=10), dict(dim=3),
])
def test_vec_config_errors(bad):
    with pytest.raises(ConfigError):
        sd.generate(replace(SMALL_VEC, **bad), 0)


@pytest.mark.parametrize("bad", [dict(seq_len=3), dict(bias_token=0), dict(vocab_size=7), dict(rho_train=0.2)])
def test_tok_config_errors(bad):
    with pytest.raises(ConfigError):
        sd.generate(replace(SMALL_TOK, **bad), 0)


# --- group_balance ----------------------------------------------------------

def _ds(counts, seed=0):
    g = np.repeat(np.arange(4), counts)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(len(g), 3))
    return sd.GroupedDataset(x, g // 2, g % 2, "train", "vec")


def test_group_balance_min_rule():
    out = sd.group_balance(_ds((450, 50, 50, 450)), 0)
    assert out.group_counts() == (50, 50, 50, 50)
    assert np.mean(out.y) == 0.5


def test_group_balance_balanced_is_permutation():
    ds = _ds((20, 20, 20, 20))
    out = sd.group_balance(ds, 3)
    assert out.group_counts() == (20, 20, 20, 20)
    assert sorted(out.row_hashes()) == sorted(ds.row_hashes())


def test_group_balance_empty_group():
    with pytest.raises(ConfigError):
        sd.group_balance(_ds((10, 0, 5, 5)), 0)


@given(st.lists(st.integers(1, 40), min_size=4, max_size=4), st.integers(0, 1000))
def test_group_balance_property(counts, seed):
    out = sd.group_balance(_ds(counts, seed), seed)
    assert out.group_counts() == (min(counts),) * 4
    assert np.mean(out.y) == 0.5
    assert set(out.row_hashes()) <= set(_ds(counts, seed).row_hashes())


# --- corrupt_counterpart -----------------------------------------------------

@pytest.mark.parametrize("cfg", [SMALL_VEC, SMALL_TOK], ids=["vec", "tok"])
def test_corrupt_involution_and_oracle(cfg):
    ds = sd.generate(cfg, 9)["id_test"]
    for i in range(25):
        s0 = ds[i]
        c = sd.corrupt_counterpart(s0, cfg)
        back = sd.corrupt_counterpart(c, cfg)
        assert np.array_equal(back.x, s0.x) and back.s == s0.s
        assert c.y == s0.y and c.s == 1 - s0.s and c.group == 2 * s0.y + (1 - s0.s)
    cor = sd.corrupt(ds, cfg)
    assert np.array_equal(sd.core_oracle(cor, cfg), sd.core_oracle(ds, cfg))
    assert np.array_equal(cor.s, 1 - ds.s)
    assert np.array_equal(sd.corrupt(cor, cfg).x, ds.x)


def test_balanced_train_is_balanced():
    b = sd.generate(SMALL_VEC, 4)
    bt = sd.balanced_train(b, 4)
    counts = bt.group_counts()
    assert len(set(counts)) == 1
    assert len(bt) == 4 * min(b["train"].group_counts()) + len(b["heldout"])
