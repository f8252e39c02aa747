import numpy as np
import pytest

from fundseg import autodiff as ad
from fundseg import maskhead as mh
from fundseg.autodiff import Tensor
from fundseg.errors import ConfigurationError, ContractError, DimensionError, FormatError
from fundseg.losses import mask_loss
from fundseg.maskhead import MaskHeadConfig, SkipType

TINY = dict(input_size=16, blocks=2, channels=(2, 3))


def test_mirror_structure_default():
    m = mh.build(MaskHeadConfig())
    enc, dec = m.encoder_layers(), m.decoder_layers()
    assert len(enc) == len(dec) == 9
    # each decoder layer restores the shape its encoder mirror consumed
    x = np.zeros((1, 64, 64))
    shapes_in, shapes_out = [], []
    with ad.no_grad():
        t = Tensor(x)
        for l in enc:
            shapes_in.append(t.shape)
            t = ad.conv2d(t, l.weight, l.bias, l.stride, l.padding)
        for l in dec:
            t = ad.conv2d_transpose(t, l.weight, l.bias, l.stride, l.padding, l.output_padding)
            shapes_out.append(t.shape)
    assert shapes_out[:-1] == shapes_in[::-1][:-1]
    assert shapes_out[-1] == (16, 64, 64)


def test_config_errors():
    with pytest.raises(ConfigurationError, match="divisible"):
        MaskHeadConfig(input_size=16, blocks=5, channels=(1, 1, 1, 1, 1))
    with pytest.raises(ConfigurationError, match="power of two"):
        MaskHeadConfig(input_size=48, blocks=4, channels=(4, 4, 4, 4))
    with pytest.raises(ConfigurationError):
        MaskHeadConfig(channels=(16, 32))
    with pytest.raises(ConfigurationError):
        MaskHeadConfig(skip_type="t4")
    assert MaskHeadConfig(skip_type="t2").skip_type is SkipType.T2


def test_zero_init_gives_half():
    m = mh.build(MaskHeadConfig(), init="zeros")
    out = mh.forward(m, np.random.default_rng(0).random((1, 64, 64)))
    assert out.shape == (2, 64, 64)
    assert np.all(out.data == 0.5)


def test_outputs_in_unit_interval_and_batched():
    m = mh.build(MaskHeadConfig(**TINY), seed=3)
    x = np.random.default_rng(1).random((4, 1, 16, 16))
    batched = mh.forward(m, x).data
    assert batched.shape == (4, 2, 16, 16)
    assert np.all((batched > 0) & (batched < 1))
    np.testing.assert_allclose(mh.forward(m, x[2]).data, batched[2], atol=1e-14)
    with pytest.raises(DimensionError):
        mh.forward(m, np.zeros((1, 8, 8)))


def test_skip_topology_is_live():
    x = np.random.default_rng(2).random((1, 16, 16))
    outs = {s: mh.forward(mh.build(MaskHeadConfig(skip_type=s, **TINY), seed=0), x).data for s in SkipType}
    assert np.max(np.abs(outs[SkipType.T2] - outs[SkipType.T3])) > 0
    assert np.max(np.abs(outs[SkipType.T1] - outs[SkipType.T3])) > 0


def test_predict_mask_rounding():
    p = np.array([127 / 255, 127.5 / 255, 128 / 255, 0.0, 1.0])
    assert mh.predict_mask(p).tolist() == [0, 255, 255, 0, 255]
    assert mh.predict_mask(p, threshold=0).tolist() == [255, 255, 255, 0, 255]
    with pytest.raises(ContractError):
        mh.predict_mask(p, threshold=300)
    with pytest.raises(ContractError):
        mh.predict_mask(np.array([1.2]))


@pytest.mark.parametrize("skip", list(SkipType))
def test_checkpoint_roundtrip(tmp_path, skip):
    m = mh.build(MaskHeadConfig(skip_type=skip, **TINY), seed=5)
    path = tmp_path / "m.redh"
    mh.save_checkpoint(m, path)
    back = mh.load_checkpoint(path)
    assert back.config == m.config
    for a, b in zip(m.parameters(), back.parameters()):
        assert np.array_equal(a.data, b.data)
    raw = path.read_bytes()
    for blob, msg in ((b"XXXXX" + raw[5:], "magic"), (raw[:-3], "truncated"), (raw + b"\0", "trailing")):
        path.write_bytes(blob)
        with pytest.raises(FormatError, match=msg):
            mh.load_checkpoint(path)


def _flat_model_loss(model, x, gt, alpha):
    shapes = [p.shape for p in model.parameters()]
    sizes = [int(np.prod(s)) for s in shapes]
    flat = np.concatenate([p.data.ravel() for p in model.parameters()])

    def f(v):
        tensors, at = [], 0
        for shape, n in zip(shapes, sizes):
            tensors.append(ad.reshape(ad.getitem(v, slice(at, at + n)), shape))
            at += n
        pred = mh.forward(model.with_parameters(tensors), x)
        return mask_loss(pred, gt, alpha)

    return f, flat


@pytest.mark.parametrize("skip", list(SkipType))
@pytest.mark.parametrize("alpha", [0.0, 0.3, 0.7, 1.0])
def test_full_model_gradient(skip, alpha):
    rng = np.random.default_rng(17)
    model = mh.build(MaskHeadConfig(skip_type=skip, **TINY), seed=1)
    x = rng.random((1, 16, 16))
    gt = (rng.random((2, 16, 16)) > 0.5).astype(float)
    f, flat = _flat_model_loss(model, x, gt, alpha)
    assert ad.finite_diff_check(f, flat) < 1e-4
