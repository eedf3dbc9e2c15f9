import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from sceneprior.autodiff import Tensor, gradient_check, numeric_gradient, ops, tape_gradient
from sceneprior.generator import FULL_SCALE_GENERATOR, GeneratorConfig, SceneGenerator

CFG = GeneratorConfig(d_model=16, heads=4, ff_widths=(32, 16), n_max=5)
GEN = SceneGenerator(CFG, np.random.default_rng(0))


def _features(seed, k, d=16):
    return np.random.default_rng(seed).standard_normal((k, d))


def _unit(seed, d=16):
    z = np.random.default_rng([seed, 99]).standard_normal(d)
    return z / np.linalg.norm(z)


def test_config_validation():
    with pytest.raises(ValueError):
        GeneratorConfig(d_model=10, heads=4, ff_widths=(8, 10))
    with pytest.raises(ValueError):
        GeneratorConfig(n_max=0)
    with pytest.raises(ValueError):
        GeneratorConfig(d_model=16, heads=4, ff_widths=(32, 8))
    assert FULL_SCALE_GENERATOR.d_model == 512 and FULL_SCALE_GENERATOR.heads == 4


@given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_encoder_is_permutation_equivariant(k, seed, r):
    x = _features(seed, k)
    perm = list(range(k))
    r.shuffle(perm)
    out = GEN.encode_context(x).value[0]
    out_p = GEN.encode_context(x[perm]).value[0]
    assert np.abs(out_p - out[perm]).max() < 1e-9


@given(st.integers(1, 8), st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_decode_next_is_permutation_invariant(k, seed, r):
    ctx = _features(seed, k)
    perm = list(range(k))
    r.shuffle(perm)
    z = _unit(seed)
    a = GEN.decode_next(ctx, z).value
    b = GEN.decode_next(ctx[perm], z).value
    assert np.abs(a - b).max() < 1e-9


def test_single_key_attention_returns_value_projection():
    # softmax over one key is 1, so the query (hence z) cannot matter
    x = _features(3, 1)[None]
    attn = GEN.decoder.attn
    outs = [attn(Tensor(_unit(s)[None, None]), Tensor(x)).value for s in range(3)]
    expected = attn.out(attn.v(Tensor(x))).value
    for o in outs:
        np.testing.assert_allclose(o, expected, atol=1e-14)
    enc = GEN.encoder.attn
    n = GEN.encoder.norm1(Tensor(x))
    np.testing.assert_allclose(enc(n, n).value, enc.out(enc.v(n)).value, atol=1e-14)


def test_duplicate_features_give_identical_rows():
    x = _features(4, 4)
    x[2] = x[0]
    out = GEN.encode_context(x).value[0]
    assert np.abs(out[0] - out[2]).max() == 0.0


def test_attention_rows_sum_to_one():
    GEN.encode_context(_features(5, 6))
    w = GEN.encoder.attn.last_weights
    np.testing.assert_allclose(w.sum(axis=-1), 1.0, atol=1e-12)
    GEN.decode_next(_features(5, 6), _unit(5))
    np.testing.assert_allclose(GEN.decoder.attn.last_weights.sum(axis=-1), 1.0, atol=1e-12)


def test_errors():
    with pytest.raises(ValueError, match="latent dim"):
        GEN.decode_next(_features(0, 3), np.ones(8))
    with pytest.raises(ValueError, match="start token"):
        GEN.encode_context(np.zeros((1, 0, 16)))
    with pytest.raises(ValueError, match="n_max"):
        GEN.rollout(_unit(0), steps=6)


def test_rollout_shapes_and_determinism():
    z = _unit(1)
    assert GEN.rollout(z, steps=0).shape == (1, 1, 16)
    np.testing.assert_array_equal(GEN.rollout(z, steps=0).value[0, 0], GEN.start_token.value)
    a = GEN.rollout(z).value
    assert a.shape == (1, CFG.n_max + 1, 16)
    assert a.tobytes() == GEN.rollout(z).value.tobytes()
    assert np.all(np.isfinite(a))


def test_rollout_batches_independently():
    zs = np.stack([_unit(s) for s in range(3)])
    both = GEN.rollout(zs, steps=3).value
    for i in range(3):
        np.testing.assert_allclose(both[i], GEN.rollout(zs[i], steps=3).value[0], atol=1e-12)


def test_layer_norm_flag():
    plain = SceneGenerator(GeneratorConfig(16, 4, (32, 16), 3, layer_norm=False), np.random.default_rng(0))
    assert not any("norm" in k for k in plain.named_params())
    assert any("norm" in k for k in GEN.named_params())
    assert plain.rollout(_unit(2)).shape == (1, 4, 16)


def test_decode_next_gradient_wrt_every_parameter():
    small = SceneGenerator(GeneratorConfig(8, 2, (16, 8), 3), np.random.default_rng(1))
    ctx = np.random.default_rng(2).standard_normal((3, 8))
    z = _unit(3, 8)

    def f(_):
        return ops.sum(ops.square(small.decode_next(small.encode_context(ctx), z)))

    worst = 0.0
    for name, p in small.named_params().items():
        if name.endswith("attn.k.bias"):
            # adds the same score to every key, which softmax ignores: the
            # true gradient is zero and the FD quotient is pure round-off
            assert np.abs(tape_gradient(f, p)).max() < 1e-15
            assert np.abs(numeric_gradient(f, p)).max() < 1e-9
            continue
        # the checked tensor is the live parameter, perturbed in place by the oracle
        worst = max(worst, gradient_check(f, p))
    assert worst < 1e-5
