import numpy as np
import pytest

from interlace.autodiff import ConfigurationError, Tensor, gradcheck
from interlace.decoder import (
    CrossLayerParams,
    InterlacedBlock,
    class_contrastive_loss,
    cross_attend_masked,
    decode,
    decoder_loss,
    interlaced_block,
)


def zero_projection_layer(rng, dim, width):
    p = CrossLayerParams.init(rng, dim, width)
    p.attn.wo = Tensor(np.zeros((dim, dim)))
    p.attn.bo = Tensor(np.zeros(dim))
    p.mlp_w2 = Tensor(np.zeros((width, dim)))
    p.mlp_b2 = Tensor(np.zeros(dim))
    return p


def zero_projection_block(rng, dim, width):
    return InterlacedBlock(odd=zero_projection_layer(rng, dim, width),
                           even=zero_projection_layer(rng, dim, width))


def test_masked_class_values_inert():
    rng = np.random.default_rng(0)
    dim, width, C = 8, 8, 2
    params = CrossLayerParams.init(rng, dim, width)
    q = Tensor(rng.normal(size=(5, dim)))
    kv = rng.normal(size=(6, dim))
    out_a, _, _ = cross_attend_masked(q, Tensor(kv), params, heads=2, n_class=C)
    poisoned = kv.copy()
    poisoned[:C] = 1e9
    out_b, _, _ = cross_attend_masked(q, Tensor(poisoned), params, heads=2,
                                      n_class=C)
    np.testing.assert_allclose(out_b.data, out_a.data, atol=1e-10)


def test_zero_projections_residual_identity():
    rng = np.random.default_rng(1)
    dim, width, C = 8, 8, 2
    params = zero_projection_layer(rng, dim, width)
    q = Tensor(rng.normal(size=(4, dim)))
    kv = Tensor(rng.normal(size=(5, dim)))
    out, _, _ = cross_attend_masked(q, kv, params, heads=2, n_class=C)
    np.testing.assert_allclose(out.data, q.data, atol=1e-14)


def test_single_data_key_forced_mass():
    rng = np.random.default_rng(2)
    dim, C = 8, 2
    params = CrossLayerParams.init(rng, dim, 8)
    q = Tensor(rng.normal(size=(4, dim)))
    kv = Tensor(rng.normal(size=(C + 1, dim)))  # exactly one data token
    _, weights, _ = cross_attend_masked(q, kv, params, heads=2, n_class=C)
    np.testing.assert_allclose(weights[:, C], 1.0, atol=1e-12)


def test_no_data_tokens_rejected():
    rng = np.random.default_rng(3)
    params = CrossLayerParams.init(rng, 4, 4)
    with pytest.raises(ConfigurationError):
        cross_attend_masked(Tensor(np.zeros((3, 4))), Tensor(np.zeros((2, 4))),
                            params, heads=1, n_class=2)


def test_block_shapes_preserved():
    rng = np.random.default_rng(4)
    dim, C, S, T = 8, 3, 6, 4
    block = InterlacedBlock.init(rng, dim, 8)
    f3d = Tensor(rng.normal(size=(C + S, dim)))
    f2d = Tensor(rng.normal(size=(C + T, dim)))
    f3d_new, f2d_new, _, _ = interlaced_block(f3d, f2d, block, heads=2, n_class=C)
    assert f3d_new.shape == (C + S, dim)
    assert f2d_new.shape == (C + T, dim)


def test_block_composed_identity():
    rng = np.random.default_rng(5)
    dim, C = 8, 2
    block = zero_projection_block(rng, dim, 8)
    f3d = Tensor(rng.normal(size=(C + 5, dim)))
    f2d = Tensor(rng.normal(size=(C + 3, dim)))
    f3d_new, f2d_new, _, _ = interlaced_block(f3d, f2d, block, heads=2, n_class=C)
    np.testing.assert_allclose(f3d_new.data, f3d.data, atol=1e-14)
    np.testing.assert_allclose(f2d_new.data, f2d.data, atol=1e-14)


def test_even_layer_consumes_odd_output():
    # instrumented sequencing check: run the block by hand and confirm the
    # even layer keyed on the odd layer's output, not the block input
    rng = np.random.default_rng(6)
    dim, C = 8, 2
    block = InterlacedBlock.init(rng, dim, 8)
    f3d = Tensor(rng.normal(size=(C + 5, dim)))
    f2d = Tensor(rng.normal(size=(C + 3, dim)))

    f3d_new, f2d_new, _, _ = interlaced_block(f3d, f2d, block, heads=2, n_class=C)

    f3d_mid, _, _ = cross_attend_masked(f3d, f2d, block.odd, heads=2, n_class=C)
    from_updated, _, _ = cross_attend_masked(f2d, f3d_mid, block.even, heads=2,
                                             n_class=C)
    from_input, _, _ = cross_attend_masked(f2d, f3d, block.even, heads=2,
                                           n_class=C)
    np.testing.assert_allclose(f2d_new.data, from_updated.data, atol=1e-12)
    assert not np.allclose(f2d_new.data, from_input.data)


def test_decode_record_counts():
    rng = np.random.default_rng(7)
    dim, C = 8, 2
    f3d = Tensor(rng.normal(size=(C + 4, dim)))
    f2d = Tensor(rng.normal(size=(C + 3, dim)))
    for r in (1, 2):
        blocks = [InterlacedBlock.init(rng, dim, 8) for _ in range(r)]
        trace = decode(f3d, f2d, blocks, heads=2, n_class=C)
        assert len(trace.attention) == 2 * r
        assert trace.parities == ["odd", "even"] * r
        assert len(trace.class_class_logits) == 2 * r


def test_decode_identity_blocks():
    rng = np.random.default_rng(8)
    dim, C = 8, 2
    f3d = Tensor(rng.normal(size=(C + 4, dim)))
    f2d = Tensor(rng.normal(size=(C + 3, dim)))
    blocks = [zero_projection_block(rng, dim, 8) for _ in range(2)]
    trace = decode(f3d, f2d, blocks, heads=2, n_class=C)
    np.testing.assert_allclose(trace.tokens_3d.data, f3d.data, atol=1e-13)
    np.testing.assert_allclose(trace.tokens_2d.data, f2d.data, atol=1e-13)


def test_decode_requires_blocks():
    with pytest.raises(ConfigurationError):
        decode(Tensor(np.zeros((3, 4))), Tensor(np.zeros((3, 4))), [], 1, 1)


def test_contrastive_single_class_zero():
    loss = class_contrastive_loss([Tensor(np.array([[2.7]]))])
    assert loss.item() == pytest.approx(0.0, abs=1e-12)


def test_contrastive_hand_cases():
    # post-exp A = [[3, 1], [1, 3]] -> 4 * (-ln 0.75)
    logits = Tensor(np.log(np.array([[3.0, 1.0], [1.0, 3.0]])))
    loss = class_contrastive_loss([logits])
    assert loss.item() == pytest.approx(4.0 * -np.log(0.75), abs=1e-9)
    assert loss.item() == pytest.approx(1.15073, abs=1e-5)

    ones = Tensor(np.zeros((2, 2)))  # post-exp all ones
    loss = class_contrastive_loss([ones])
    assert loss.item() == pytest.approx(4.0 * np.log(2.0), abs=1e-9)
    assert loss.item() == pytest.approx(2.77259, abs=1e-5)


def test_contrastive_layer_average():
    a = Tensor(np.log(np.array([[3.0, 1.0], [1.0, 3.0]])))
    b = Tensor(np.zeros((2, 2)))
    loss = class_contrastive_loss([a, b])
    expect = 0.5 * (4.0 * -np.log(0.75) + 4.0 * np.log(2.0))
    assert loss.item() == pytest.approx(expect, abs=1e-12)


def test_decoder_loss_arithmetic():
    rng = np.random.default_rng(9)
    dim, C = 8, 2
    f3d = Tensor(rng.normal(size=(C + 4, dim)))
    f2d = Tensor(rng.normal(size=(C + 3, dim)))
    blocks = [InterlacedBlock.init(rng, dim, 8)]
    trace = decode(f3d, f2d, blocks, heads=2, n_class=C)
    tags = np.array([1.0, 0.0])
    out = decoder_loss(trace, tags, alpha=0.5)
    expect = (out.class_2d.item() + out.class_3d.item()
              + 0.5 * out.contrastive.item())
    assert out.total.item() == pytest.approx(expect, abs=1e-12)


def test_decoder_loss_alpha_zero_ignores_attention():
    rng = np.random.default_rng(10)
    dim, C = 8, 2
    f3d = Tensor(rng.normal(size=(C + 4, dim)))
    f2d = Tensor(rng.normal(size=(C + 3, dim)))
    blocks = [InterlacedBlock.init(rng, dim, 8)]
    trace = decode(f3d, f2d, blocks, heads=2, n_class=C)
    tags = np.array([1.0, 1.0])
    base = decoder_loss(trace, tags, alpha=0.0).total.item()
    # perturb only the class-class logit records
    trace.class_class_logits = [cc + 5.0 for cc in trace.class_class_logits]
    again = decoder_loss(trace, tags, alpha=0.0).total.item()
    assert again == pytest.approx(base, abs=1e-12)


def test_decoder_loss_gradcheck():
    rng = np.random.default_rng(11)
    dim, C, S, T = 8, 2, 4, 3
    block = InterlacedBlock.init(rng, dim, 8)
    params = list(block.named("b").values())
    for t in params:
        t.requires_grad = True
    f3d = Tensor(rng.normal(size=(C + S, dim)))
    f2d = Tensor(rng.normal(size=(C + T, dim)))
    tags = np.array([1.0, 0.0])

    def fn(*_):
        trace = decode(f3d, f2d, [block], heads=2, n_class=C)
        return decoder_loss(trace, tags, alpha=0.5).total

    assert gradcheck(fn, params).passed
