import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedprov.lm import (GREEDY, Adam, ArchConfig, DecodingPolicy, ModelParams, NumericalError,
                        TokenSeq, Vocab, batch_logits, build_model, context_windows, cross_entropy,
                        generate, local_train, logits, loss_and_grad, normalize_text, pretrain,
                        sample_next, softmax, split_documents, training_pairs, zeros_model)

from conftest import random_docs


def test_parameter_count_matches_formula():
    arch = ArchConfig(vocab_size=64, context_length=16, hidden=32, n_layers=2, embed_dim=16)
    expected = 64 * 16 + (16 * 16 * 32 + 32) + (32 * 32 + 32) + (32 * 64 + 64)
    assert arch.n_params == expected == 12416
    model = build_model(arch, seed=0)
    assert model.dim == expected
    assert sum(s.stop - s.start for s in model.layout.layer_slices) == expected
    assert model.layout.layer_names == ("embedding", "hidden_0", "hidden_1", "output")


def test_build_model_is_deterministic_in_seed(tiny_arch):
    a, b = build_model(tiny_arch, 5), build_model(tiny_arch, 5)
    assert a.vector.tobytes() == b.vector.tobytes()
    assert not np.array_equal(a.vector, build_model(tiny_arch, 6).vector)


def test_zero_width_layers_rejected():
    with pytest.raises(ValueError):
        ArchConfig(vocab_size=10, hidden=0)
    with pytest.raises(ValueError):
        ArchConfig(vocab_size=1)


def test_wrong_vector_length_rejected(tiny_arch):
    with pytest.raises(ValueError):
        ModelParams(tiny_arch, np.zeros(3))


def test_forward_matches_hand_written_network(tiny_model):
    t = tiny_model.tensors()
    ctx = np.array([[0, 4, 2], [6, 6, 1]])
    expect = []
    for row in ctx:
        h = np.concatenate([t["embedding.weight"][tok] for tok in row])
        h = np.tanh(h @ t["hidden_0.weight"] + t["hidden_0.bias"])
        h = np.tanh(h @ t["hidden_1.weight"] + t["hidden_1.bias"])
        expect.append(h @ t["output.weight"] + t["output.bias"])
    np.testing.assert_allclose(batch_logits(tiny_model, ctx), np.array(expect), rtol=1e-12)


_MODEL = build_model(ArchConfig(vocab_size=7, context_length=3, hidden=5, n_layers=2, embed_dim=2), seed=3)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(0, 6), min_size=1, max_size=12))
def test_next_token_distribution_is_normalized(context):
    p = softmax(logits(_MODEL, context))
    assert p.shape == (7,)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1.0) < 1e-12


def test_left_padding_with_pad_id():
    ctx = context_windows(np.array([5, 6, 7]), np.array([0, 1, 3]), 2)
    np.testing.assert_array_equal(ctx, [[0, 0], [0, 5], [6, 7]])


def test_zero_model_is_uniform_and_loss_is_log_v(tiny_arch, docs):
    model = zeros_model(tiny_arch)
    np.testing.assert_allclose(softmax(logits(model, [1, 2])), np.full(7, 1 / 7))
    assert cross_entropy(model, docs) == pytest.approx(math.log(7), abs=1e-12)


def test_cross_entropy_empty_dataset(tiny_model):
    with pytest.raises(ValueError):
        cross_entropy(tiny_model, [])


def test_gradient_matches_finite_differences(tiny_model, docs):
    assert tiny_model.dim <= 200
    ctx, tgt = training_pairs(docs, tiny_model.arch.context_length)
    ctx, tgt = ctx[:30], tgt[:30]
    _, g = loss_and_grad(tiny_model, ctx, tgt)
    h = 1e-6
    fd = np.empty_like(g)
    for i in range(tiny_model.dim):
        v = tiny_model.vector.copy()
        v[i] += h
        up, _ = loss_and_grad(tiny_model.replace(v), ctx, tgt)
        v[i] -= 2 * h
        down, _ = loss_and_grad(tiny_model.replace(v), ctx, tgt)
        fd[i] = (up - down) / (2 * h)
    rel = np.linalg.norm(g - fd) / np.linalg.norm(fd)
    assert rel < 1e-4


def test_greedy_argmax_and_lowest_id_tie_break():
    assert sample_next([0.0, 5.0, 0.0, 0.0], GREEDY) == 1
    assert sample_next([2.0, 2.0, 1.0], GREEDY) == 0


def test_multinomial_frequencies():
    rng = np.random.default_rng(0)
    z = np.tile([0.0, math.log(3.0)], (100_000, 1))
    from fedprov.lm import sample_rows
    draws = sample_rows(z, DecodingPolicy("multinomial", 1.0), rng)
    assert abs(np.mean(draws == 1) - 0.75) < 0.01


def test_negative_temperature_rejected():
    with pytest.raises(ValueError):
        DecodingPolicy.from_temperature(-0.1)


def test_multinomial_needs_rng():
    with pytest.raises(ValueError):
        sample_next([0.0, 1.0], DecodingPolicy("multinomial", 1.0))


def test_generate_appends_exactly_length(tiny_model):
    out = generate(tiny_model, [1, 2, 3, 4], 1, GREEDY)
    assert len(out) == 5 and out.prompt_len == 4
    np.testing.assert_array_equal(out.tokens[:4], [1, 2, 3, 4])
    with pytest.raises(ValueError):
        generate(tiny_model, [1, 2], 0, GREEDY)


def test_greedy_generation_is_deterministic(tiny_model):
    a = generate(tiny_model, [1, 2, 3], 20, GREEDY)
    b = generate(tiny_model, [1, 2, 3], 20, GREEDY)
    np.testing.assert_array_equal(a.tokens, b.tokens)
    # greedy decoding always takes the argmax of the current distribution
    for t in range(3, 23):
        assert a.tokens[t] == int(np.argmax(logits(tiny_model, a.tokens[:t])))


def test_pretraining_reduces_loss():
    text = "the cat sat on the mat. " * 40
    vocab = Vocab.from_text(text)
    docs = split_documents(vocab.encode(text), 48)
    model = build_model(ArchConfig(vocab.size, 4, 16, 1, 4), seed=0)
    before = cross_entropy(model, docs)
    trained, curve = pretrain(model, docs, epochs=5, lr=1e-2, batch_size=32, seed=0)
    assert cross_entropy(trained, docs) < 0.5 * before
    assert curve[-1]["train_loss"] < curve[0]["train_loss"]


def test_local_train_single_step_is_normalized_gradient_step(tiny_model, docs):
    ctx, tgt = training_pairs(docs, tiny_model.arch.context_length)
    rng = np.random.default_rng(7)
    batch = np.random.default_rng(7).permutation(len(tgt))[:16]
    _, g = loss_and_grad(tiny_model, ctx[batch], tgt[batch])
    delta = local_train(tiny_model, docs, steps=1, lr=0.05, batch_size=16, rng=rng)
    np.testing.assert_allclose(delta, -0.05 * g / np.linalg.norm(g), rtol=1e-10, atol=1e-15)
    assert np.linalg.norm(delta) == pytest.approx(0.05)


def test_local_train_at_stationary_point_returns_zero():
    # two symbols, targets balanced, all weights zero: the full-batch gradient is exactly 0
    model = zeros_model(ArchConfig(vocab_size=2, context_length=2, hidden=3, n_layers=1, embed_dim=2))
    docs = [TokenSeq(np.array([0, 1, 0, 1, 0]))]
    _, g = loss_and_grad(model, *training_pairs(docs, 2))
    assert not g.any()
    delta = local_train(model, docs, steps=3, lr=0.1, batch_size=4)
    assert not delta.any()


def test_local_train_nonfinite_gradient(tiny_model, docs):
    v = tiny_model.vector.copy()
    v[0] = np.nan
    with pytest.raises(NumericalError):
        local_train(tiny_model.replace(v), docs, steps=1, lr=0.1)


def test_local_train_one_epoch_by_default(tiny_model, docs):
    n_pairs = sum(len(d) - 1 for d in docs)
    a = local_train(tiny_model, docs, None, 0.01, 64, np.random.default_rng(0))
    b = local_train(tiny_model, docs, math.ceil(n_pairs / 64), 0.01, 64, np.random.default_rng(0))
    np.testing.assert_array_equal(a, b)
    assert a.shape == (tiny_model.dim,)


def test_adam_zero_gradient_leaves_params():
    opt = Adam(0.1)
    p = np.array([1.0, -2.0])
    np.testing.assert_array_equal(opt.step(p, np.zeros(2)), p)


def test_adam_first_step_is_sign_step():
    opt = Adam(0.01, eps=0.0)
    out = opt.step(np.zeros(3), np.array([3.0, -0.2, 1e-3]))
    np.testing.assert_allclose(out, [-0.01, 0.01, -0.01])


def test_normalize_text():
    assert normalize_text("Hello,  World!\n It's 42.") == "hello, world it's ."


def test_vocab_roundtrip_and_pad():
    v = Vocab.from_text("abc ab")
    assert v.chars == ("\x00", " ", "a", "b", "c")
    assert v.decode(v.encode("cab a")) == "cab a"
    with pytest.raises(ValueError):
        v.encode("z")


def test_random_docs_helper_has_no_pad():
    docs = random_docs(np.random.default_rng(0), 3, 10, 5)
    assert all(d.tokens.min() >= 1 for d in docs)
