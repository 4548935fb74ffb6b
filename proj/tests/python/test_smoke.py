import json

import numpy as np
import pytest

import bigs


def toy_config(arch=bigs.Arch.gated, routing=bigs.Routing.ssm, vocab=40):
    c = bigs.ModelConfig.defaults(arch, routing, 16)
    c.n_layers = 2
    c.n_state = 8
    c.max_len = 16
    c.vocab_size = vocab
    c.n_heads = 2
    return c


def test_scan_matches_convolution():
    p = bigs.init_s4d(16, seed=3)
    u = np.random.default_rng(0).normal(size=64)
    np.testing.assert_allclose(bigs.scan(p, u), bigs.convolve(p, u), atol=1e-10)
    k = bigs.kernel(p, 64)
    assert k.shape == (64,)
    # impulse response is the kernel plus the skip term at lag 0
    impulse = np.zeros(64)
    impulse[0] = 1.0
    y = bigs.scan(p, impulse)
    assert y[0] == pytest.approx(k[0] + p.d)
    np.testing.assert_allclose(y[1:], k[1:], atol=1e-12)


def test_kernel_prefix_is_length_independent():
    p = bigs.init_s4d(8, seed=1)
    np.testing.assert_array_equal(bigs.kernel(p, 32), bigs.kernel(p, 128)[:32])


def test_ssm_apply_is_causal():
    p = bigs.init_s4d(8, seed=2)
    x = np.random.default_rng(1).normal(size=(32, 3))
    y = bigs.ssm_apply(p, x)
    x2 = x.copy()
    x2[20] += 1.0
    y2 = bigs.ssm_apply(p, x2)
    assert np.abs(y2[:20] - y[:20]).max() < 1e-12
    assert np.abs(y2[20:] - y[20:]).max() > 0


def test_param_count_identities():
    for d in (16, 64):
        assert bigs.param_count(bigs.ModelConfig.defaults(bigs.Arch.gated, bigs.Routing.ssm, d)).block_weights == 13 * d * d
        assert (
            bigs.param_count(bigs.ModelConfig.defaults(bigs.Arch.stacked, bigs.Routing.attention, d)).block_weights
            == 12 * d * d
        )
    assert 330e6 <= bigs.param_count(bigs.ModelConfig.bigs_large()).total <= 370e6


def test_model_logits_and_checkpoint(tmp_path):
    m = bigs.Model(toy_config(), seed=4)
    tokens = np.arange(5, 21, dtype=np.int32)
    z = m.logits(tokens)
    assert z.shape == (16, 40)
    m.save(tmp_path / "ck")
    r = bigs.Model.load(tmp_path / "ck")
    np.testing.assert_array_equal(r.logits(tokens), z)
    assert r.config == m.config
    assert m.config.to_dict()["d_model"] == 16
    with pytest.raises(ValueError):
        m.logits(np.zeros((2, 2, 2), dtype=np.int32))


def test_forward_branch_directions():
    m = bigs.Model(toy_config(), seed=5)
    tokens = np.full(16, 7, dtype=np.int32)
    fwd, bwd = m.forward_branches(tokens)
    t2 = tokens.copy()
    t2[8] = 9
    fwd2, bwd2 = m.forward_branches(t2)
    assert np.abs(fwd2[0][:8] - fwd[0][:8]).max() < 1e-12
    assert np.abs(bwd2[0][9:] - bwd[0][9:]).max() < 1e-12


def test_masking_and_training():
    docs = bigs.synthetic_corpus(200, seed=1)
    vocab = bigs.build_vocab(docs, 512)
    assert vocab.token(bigs.Vocab.MASK) == vocab.tokens[4]
    ids, labels, stats = bigs.mask_tokens(vocab.encode(" ".join(docs)), 0.15, len(vocab), seed=2)
    assert 0.12 < stats.selected / stats.positions < 0.18
    assert sum(l >= 0 for l in labels) == stats.selected
    shard = bigs.build_shard(docs, vocab, 16, seed=3)
    assert shard.input_ids.shape == (len(shard), 16)
    m = bigs.Model(toy_config(vocab=len(vocab)), seed=6)
    before = bigs.evaluate(m, shard, max_rows=64)
    hist = bigs.train(m, shard, steps=30, lr=3e-3, seed=7)
    assert hist["loss"].shape == (30,)
    assert hist["loss"][-10:].mean() < hist["loss"][:10].mean()
    assert bigs.evaluate(m, shard, max_rows=64)["loss"] < before["loss"]


def test_flops_crossover():
    for L, ratio in ((128, 1.03), (512, 0.94), (1024, 0.90), (4096, 0.63)):
        b = bigs.flop_estimate(bigs.ModelConfig.bigs_large(), L)
        t = bigs.flop_estimate(bigs.ModelConfig.bert_large(), L)
        assert abs(b["total"] / t["total"] - ratio) < 0.1
        assert sum(v for k, v in b.items() if k != "total") == b["total"]


def test_kernel_dump():
    m = bigs.Model(toy_config(), seed=8)
    kernels = bigs.dump_kernels(m)
    assert len(kernels) == 4
    for k in kernels:
        assert k["normalized"].min() == 0.0 and k["normalized"].max() == 1.0
    with pytest.raises(Exception):
        bigs.dump_kernels(bigs.Model(toy_config(bigs.Arch.stacked, bigs.Routing.attention), seed=1))


def test_cli_in_process(tmp_path):
    code, out, err = bigs.cli(["flops", "--out", str(tmp_path)])
    assert code == 0, err
    assert "4096" in out
    snap = json.loads((tmp_path / "run_config.json").read_text())
    assert snap["subcommand"] == "flops"
    code, _, err = bigs.cli(["eval", "--out", str(tmp_path)])
    assert code != 0 and "checkpoint" in err
