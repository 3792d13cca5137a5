import numpy as np
import pytest
from scipy.ndimage import gaussian_filter

from cryoforge import diffcore as dc
from cryoforge.diffcore import Tensor
from cryoforge.poseencoder import (
    EncoderConfig, PoseEncoder, encode, gaussian_filter_bank, gaussian_kernel,
    s2s2_to_rotation, standardize,
)

SMALL = EncoderConfig(input_side=16, conv_channels=(4, 8), fc_width=16, translation_range=6.0)


def test_gaussian_kernel_normalised_and_symmetric():
    k = gaussian_kernel(1.5)
    assert len(k) == 2 * 5 + 1
    assert k.sum() == pytest.approx(1.0)
    np.testing.assert_allclose(k, k[::-1])
    with pytest.raises(ValueError):
        gaussian_kernel(0.0)


def test_filter_bank_matches_scipy_gaussian_filter(rng):
    img = rng.normal(size=(20, 20))
    bank = gaussian_filter_bank(img, (1.0, 2.0))
    assert bank.shape == (3, 20, 20)
    np.testing.assert_array_equal(bank[0], img)
    for j, s in enumerate((1.0, 2.0)):
        ref = gaussian_filter(img, s, mode="constant", truncate=np.ceil(3 * s) / s)
        np.testing.assert_allclose(bank[j + 1], ref, atol=1e-12)
    stack = gaussian_filter_bank(rng.normal(size=(2, 20, 20)), (1.0,))
    assert stack.shape == (2, 2, 20, 20)


def test_standardize(rng):
    x = standardize(3 + 2 * rng.normal(size=(3, 8, 8)))
    np.testing.assert_allclose(x.mean(axis=(1, 2)), 0, atol=1e-12)
    np.testing.assert_allclose(x.std(axis=(1, 2)), 1)
    np.testing.assert_array_equal(standardize(np.full((4, 4), 2.0)), 0.0)


def test_s2s2_reference_case():
    R = s2s2_to_rotation(np.array([0.0, 1, 0, 1, 0, 0])).data
    np.testing.assert_allclose(R, [[0, 1, 0], [1, 0, 0], [0, 0, -1]], atol=1e-15)


def test_s2s2_gives_rotations_and_first_column_direction(rng):
    v = rng.normal(size=(20, 6))
    R = s2s2_to_rotation(v).data
    np.testing.assert_allclose(np.swapaxes(R, 1, 2) @ R, np.broadcast_to(np.eye(3), R.shape),
                               atol=1e-12)
    np.testing.assert_allclose(np.linalg.det(R), 1)
    np.testing.assert_allclose(R[:, :, 0], v[:, :3] / np.linalg.norm(v[:, :3], axis=1,
                                                                    keepdims=True))


def test_s2s2_gradient(rng):
    v = Tensor(rng.normal(size=(2, 6)), requires_grad=True)
    w = rng.normal(size=(2, 3, 3))
    fn = lambda: dc.tsum(dc.mul(s2s2_to_rotation(v), w))
    fn().backward()
    assert dc.max_rel_error(v.grad, dc.numerical_grad(fn, v)) < 1e-6


def test_s2s2_rejects_degenerate_inputs():
    with pytest.raises(ValueError, match="zero"):
        s2s2_to_rotation(np.array([0.0, 0, 0, 1, 0, 0]))
    with pytest.raises(ValueError, match="parallel"):
        s2s2_to_rotation(np.array([1.0, 2, 3, 2, 4, 6]))
    with pytest.raises(dc.ShapeError):
        s2s2_to_rotation(np.zeros(5))


def test_config_validation():
    with pytest.raises(ValueError, match="pooling"):
        EncoderConfig(input_side=20, conv_channels=(4, 8, 16))
    with pytest.raises(ValueError):
        EncoderConfig(filter_sigmas=(0.0,))
    assert EncoderConfig().n_filters == 4


def test_encoder_outputs(rng):
    enc = PoseEncoder(SMALL, seed=1)
    imgs = rng.normal(size=(5, 16, 16))
    R, t = enc.encode_batch(imgs)
    assert R.shape == (5, 3, 3) and t.shape == (5, 2)
    np.testing.assert_allclose(np.swapaxes(R.data, 1, 2) @ R.data,
                               np.broadcast_to(np.eye(3), (5, 3, 3)), atol=1e-12)
    assert np.all(np.abs(t.data) < SMALL.translation_range)
    with pytest.raises(dc.ShapeError):
        enc.encode_batch(rng.normal(size=(2, 8, 8)))


def test_encoder_is_invariant_to_intensity_affine_maps(rng):
    enc = PoseEncoder(SMALL, seed=2)
    img = rng.normal(size=(16, 16))
    R1, t1 = encode(img, SMALL, enc)
    R2, t2 = encode(5.0 * img - 3.0, SMALL, enc)
    np.testing.assert_allclose(R1, R2, atol=1e-10)
    np.testing.assert_allclose(t1, t2, atol=1e-10)


def test_float32_orthonormality(rng):
    with dc.precision(np.float32):
        enc = PoseEncoder(SMALL, seed=0)
        R, _ = enc.encode_batch(rng.normal(size=(8, 16, 16)))
    assert R.data.dtype == np.float32
    err = np.abs(np.swapaxes(R.data, 1, 2).astype(float) @ R.data - np.eye(3)).max()
    assert err < 1e-5


def test_encoder_gradients(rng):
    cfg = EncoderConfig(input_side=8, conv_channels=(2, 3), fc_width=4, translation_range=2.0)
    enc = PoseEncoder(cfg, seed=3)
    imgs = rng.normal(size=(2, 8, 8))
    w = rng.normal(size=(2, 3, 3))
    fn = lambda: dc.tsum(dc.mul(enc.encode_batch(imgs)[0], w)) + dc.tsum(enc.encode_batch(imgs)[1])
    for name in ("conv0.weight", "conv1.bias", "fc.weight", "rot.bias", "trans.weight"):
        p = enc[name]
        for q in enc.params:
            q.grad = None
        fn().backward()
        assert dc.max_rel_error(p.grad, dc.numerical_grad(fn, p)) < 1e-4, name


def test_encoder_round_trip(rng):
    enc = PoseEncoder(SMALL, seed=4)
    buf = enc.to_bytes()
    back, end = PoseEncoder.from_bytes(buf)
    assert end == len(buf)
    np.testing.assert_array_equal(back.flat(), enc.flat())
    assert back.config == enc.config
    img = rng.normal(size=(16, 16))
    np.testing.assert_array_equal(encode(img, SMALL, back)[0], encode(img, SMALL, enc)[0])
    with pytest.raises(ValueError, match="magic"):
        PoseEncoder.from_bytes(b"XXXX" + buf[4:])
    with pytest.raises(ValueError, match="truncated"):
        PoseEncoder.from_bytes(buf[:-8])


def test_encode_checks_config(rng):
    enc = PoseEncoder(SMALL)
    other = EncoderConfig(input_side=16, conv_channels=(4, 8), fc_width=32)
    with pytest.raises(ValueError):
        encode(rng.normal(size=(16, 16)), other, enc)


def test_seeded_initialisation_is_deterministic():
    assert np.array_equal(PoseEncoder(SMALL, 7).flat(), PoseEncoder(SMALL, 7).flat())
    assert not np.array_equal(PoseEncoder(SMALL, 7).flat(), PoseEncoder(SMALL, 8).flat())
