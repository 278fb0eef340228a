import numpy as np
import pytest

from gelovec.block import GeloVecBlock
from gelovec.errors import DimensionError
from gelovec.network import Identity, ModelConfig, build_model
from gelovec.train import bce_loss, grad_check

NARROW = dict(input_size=(32, 32), stage_channels=(4, 4, 8, 8, 8), decoder_channels=(8, 8, 4, 4, 4))


def tally(cfg):
    """Parameter count from the layer list, written out by hand."""
    ch = cfg.stage_channels
    bn = lambda c: 2 * c  # noqa: E731
    total = cfg.in_channels * ch[0] * 49 + bn(ch[0])
    for s, n in enumerate(cfg.blocks):
        cin, cout = ch[s], ch[s + 1]
        for i in range(n):
            stride = 2 if i == 0 and s > 0 else 1
            total += cin * cout * 9 + bn(cout) + cout * cout * 9 + bn(cout)
            if stride != 1 or cin != cout:
                total += cin * cout + bn(cout)
            cin = cout
    if cfg.gelovec:
        for c in ch:
            r = dk = c // 4
            total += (c * 4 * r + 4 * r) + (4 * r * c + c)   # basis projection and back
            total += 2 + 2                                  # distance and gate 1x1 convs
            total += c * c * 9 + c                          # edge conv
            total += 3 * (c * dk + dk) + dk * c + c         # q, k, v, output
            total += 8 + 2                                  # neighbor weights, lambda, gamma
    skips = [ch[3], ch[2], ch[1], 0, 0]
    cin = ch[4]
    for cout, skip in zip(cfg.decoder_channels, skips):
        total += cin * cout * 4 + cout
        total += (cout + skip) * cout * 9 + bn(cout) + cout * cout * 9 + bn(cout)
        cin = cout
    return total + cin * cfg.out_channels + cfg.out_channels


@pytest.fixture(scope="module")
def desk():
    return build_model(ModelConfig(), seed=0)


def test_full_scale_encoder_shapes():
    model = build_model(ModelConfig.full_scale(gelovec=False), seed=0)
    x = np.zeros((1, 3, 224, 224), np.float32)
    bottleneck, skips = model.encoder.forward(x)
    assert [s.shape[1:] for s in skips] == [(64, 56, 56), (64, 56, 56), (128, 28, 28), (256, 14, 14)]
    assert bottleneck.shape[1:] == (512, 7, 7)


def test_desk_bottleneck(desk):
    x = np.random.default_rng(0).random((2, 3, 64, 64)).astype(np.float32)
    bottleneck, skips = desk.encoder.forward(x)
    assert bottleneck.shape == (2, 512, 2, 2)
    assert [s.shape[2] for s in skips] == [16, 16, 8, 4]


def test_output_range_and_shape(desk):
    x = np.random.default_rng(1).random((2, 3, 64, 64)).astype(np.float32)
    out = desk.eval().forward(x)
    assert out.shape == (2, 1, 64, 64)
    assert np.all((out > 0) & (out < 1))


@pytest.mark.parametrize("gelovec,expected", [(True, 12_184_135), (False, 7_952_129)])
def test_parameter_count(gelovec, expected):
    cfg = ModelConfig(gelovec=gelovec)
    model = build_model(cfg)
    assert model.num_parameters() == tally(cfg) == expected


def test_full_scale_parameter_count():
    cfg = ModelConfig.full_scale()
    assert build_model(cfg).num_parameters() == tally(cfg)


def test_bypass_reproduces_baseline_encoder():
    x = np.random.default_rng(2).random((2, 3, 64, 64)).astype(np.float32)
    gv = build_model(ModelConfig(gelovec=True), seed=5)
    base = build_model(ModelConfig(gelovec=False), seed=5)
    gv.encoder.refiners = [Identity() for _ in gv.encoder.refiners]
    a, skips_a = gv.encoder.forward(x)
    b, skips_b = base.encoder.forward(x)
    assert a.tobytes() == b.tobytes()
    for sa, sb in zip(skips_a, skips_b):
        assert sa.tobytes() == sb.tobytes()


def test_placement(desk):
    names = [name for name, mod in desk.modules() if isinstance(mod, GeloVecBlock)]
    assert names == [f"encoder.gelovec{i}." for i in range(1, 6)]
    widths = [b.cfg.channels for b in desk.gelovec_blocks()]
    assert widths == [64, 64, 128, 256, 512]
    # the two Low blocks hold independent parameters
    b1, b2 = desk.gelovec_blocks()[:2]
    assert not np.array_equal(b1.basis_proj.params["weight"], b2.basis_proj.params["weight"])


def test_same_seed_identical():
    x = np.random.default_rng(3).random((2, 3, 32, 32)).astype(np.float32)
    y = (np.random.default_rng(4).random((2, 1, 32, 32)) > 0.5).astype(np.float32)
    cfg = ModelConfig(**NARROW)
    a, b = build_model(cfg, seed=7), build_model(cfg, seed=7)
    for (_, pa), (_, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert pa.tobytes() == pb.tobytes()
    assert bce_loss(a.forward(x), y)[0] == bce_loss(b.forward(x), y)[0]


def test_split_batch_equality(desk):
    x = np.random.default_rng(5).random((4, 3, 64, 64)).astype(np.float32)
    desk.eval()
    whole = desk.forward(x)
    parts = np.concatenate([desk.forward(x[:2]), desk.forward(x[2:])])
    np.testing.assert_allclose(whole, parts, rtol=1e-5, atol=1e-6)


def test_eval_is_pure(desk):
    desk.eval()
    before = {k: v.copy() for k, v in desk.state_dict().items()}
    desk.forward(np.random.default_rng(6).random((2, 3, 64, 64)).astype(np.float32))
    for k, v in desk.state_dict().items():
        assert v.tobytes() == before[k].tobytes(), k


def test_input_shape_checked(desk):
    with pytest.raises(DimensionError, match="64"):
        desk.forward(np.zeros((1, 3, 32, 32), np.float32))
    with pytest.raises(ValueError):
        ModelConfig(input_size=(48, 48))


def test_end_to_end_gradient_narrow():
    model = build_model(ModelConfig(**NARROW), seed=1)
    for block in model.gelovec_blocks():
        block.params["gamma"][...] = 0.5
    x = np.random.default_rng(8).random((2, 3, 32, 32))
    report = grad_check(model, x, max_exhaustive=16, probes=2, seed=1)
    assert report["passed"], sorted(report["errors"].items(), key=lambda kv: -kv[1])[:5]
