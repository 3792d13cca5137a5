import math

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from cryoforge import diffcore as dc
from cryoforge.dataio import mrc_read, mrc_write
from cryoforge.forwardmodel import CtfParams, ctf_eval, translate_phase
from cryoforge.implicitvol import evaluate, make_volume, randomize
from cryoforge.metrics import (
    align_rotations, euler_zyz, fsc, mirror_matrix, mirror_rotation, zyz_angles,
)
from cryoforge.poseencoder import s2s2_to_rotation
from cryoforge.spectral import (
    FreqGrid2D, fft2_centered, ifft2_centered, negate_index, random_rotations,
)
from cryoforge.trainer import rot180

SETTINGS = settings(max_examples=40, deadline=None,
                    suppress_health_check=[HealthCheck.function_scoped_fixture])
finite = st.floats(-10, 10, allow_nan=False, allow_infinity=False)
even_side = st.sampled_from([2, 4, 6, 8, 12, 16])
angles = st.tuples(st.floats(-math.pi, math.pi), st.floats(0.01, math.pi - 0.01),
                   st.floats(-math.pi, math.pi))
seeds = st.integers(0, 2 ** 32 - 1)


@SETTINGS
@given(side=even_side, seed=seeds)
def test_centered_fft_is_unitary_and_invertible(side, seed):
    x = np.random.default_rng(seed).normal(size=(side, side))
    X = fft2_centered(x)
    assert abs(np.linalg.norm(X) - np.linalg.norm(x)) < 1e-10 * max(1.0, np.linalg.norm(x))
    np.testing.assert_allclose(ifft2_centered(X).real, x, atol=1e-10)


@SETTINGS
@given(side=even_side)
def test_negate_index_is_an_involution_fixing_dc(side):
    i = negate_index(side)
    np.testing.assert_array_equal(i[i], np.arange(side))
    assert i[side // 2] == side // 2 and i[0] == 0


@SETTINGS
@given(side=even_side, seed=seeds)
def test_real_images_have_hermitian_spectra(side, seed):
    X = fft2_centered(np.random.default_rng(seed).normal(size=(side, side)))
    i = negate_index(side)
    np.testing.assert_allclose(X[i][:, i], np.conj(X), atol=1e-10)
    np.testing.assert_allclose(fft2_centered(rot180(ifft2_centered(X).real)), np.conj(X),
                               atol=1e-10)


@SETTINGS
@given(a=angles)
def test_zyz_round_trip(a):
    R = euler_zyz(*a)
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(euler_zyz(*zyz_angles(R)), R, atol=1e-10)


@SETTINGS
@given(a=angles)
def test_mirror_identity(a):
    Rt, resid = mirror_rotation(*a)
    assert resid < 1e-12
    R = euler_zyz(*a)
    F = np.diag([1.0, 1.0, -1.0])
    np.testing.assert_allclose(F @ R, mirror_matrix(R) @ F, atol=1e-12)
    np.testing.assert_allclose(Rt, mirror_matrix(R), atol=1e-12)


@SETTINGS
@given(v=arrays(np.float64, (6,), elements=st.floats(-5, 5)))
def test_s2s2_output_is_a_rotation(v):
    a, b = v[:3], v[3:]
    na = np.linalg.norm(a)
    if na < 1e-3 or np.linalg.norm(b - (b @ a) / na ** 2 * a) < 1e-3:
        return
    R = s2s2_to_rotation(v).data
    np.testing.assert_allclose(R.T @ R, np.eye(3), atol=1e-10)
    assert np.linalg.det(R) > 0


@SETTINGS
@given(seed=seeds, n=st.integers(3, 12))
def test_alignment_is_invariant_to_global_rotation(seed, n):
    rng = np.random.default_rng(seed)
    gt = random_rotations(n, rng)
    pred = random_rotations(n, rng)
    G = random_rotations(1, rng)[0]
    a = align_rotations(pred, gt)
    b = align_rotations(G @ pred, gt)
    assert abs(a.median - b.median) < 1e-8
    assert np.all(a.errors >= 0) and np.all(a.errors <= 8 + 1e-9)


@SETTINGS
@given(seed=seeds, s=st.floats(0.1, 10))
def test_fsc_symmetric_and_scale_invariant(seed, s):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(8, 8, 8)), rng.normal(size=(8, 8, 8))
    c1 = fsc(a, b, 1.0).correlations
    np.testing.assert_allclose(fsc(b, a, 1.0).correlations, c1, atol=1e-12)
    np.testing.assert_allclose(fsc(s * a, b, 1.0).correlations, c1, atol=1e-10)
    assert np.all(np.abs(c1) <= 1 + 1e-12)


@SETTINGS
@given(du=st.floats(5e3, 3e4), dv=st.floats(5e3, 3e4), ang=st.floats(-math.pi, math.pi),
       w=st.floats(0.0, 0.3))
def test_ctf_is_bounded_and_centrosymmetric(du, dv, ang, w):
    g = FreqGrid2D(16, 3.0)
    params = CtfParams(defocus_u=du, defocus_v=dv, astigmatism_angle=ang, amplitude_contrast=w)
    c = ctf_eval(params, g)
    assert np.all(np.abs(c) <= 1 + 1e-12)
    i = negate_index(16)
    np.testing.assert_allclose(c[1:, 1:], c[i][:, i][1:, 1:], atol=1e-12)


@SETTINGS
@given(t=st.tuples(st.integers(-3, 3), st.integers(-3, 3)), seed=seeds)
def test_integer_translations_roll_images(t, seed):
    g = FreqGrid2D(8, 2.0)
    x = np.random.default_rng(seed).normal(size=(8, 8))
    shifted = ifft2_centered(fft2_centered(x) * translate_phase(np.array(t) * 2.0, g)).real
    np.testing.assert_allclose(shifted, np.roll(x, (t[1], t[0]), axis=(0, 1)), atol=1e-10)


@SETTINGS
@given(pts=arrays(np.float64, (5, 3), elements=st.floats(-0.2, 0.2)),
       kind=st.sampled_from(["fouriernet", "siren", "pe_mlp"]))
def test_implicit_fields_are_hermitian(pts, kind):
    vol = randomize(make_volume(kind, 6, pixel_size=2.0), seed=0)
    np.testing.assert_array_equal(evaluate(vol, -pts).numpy(), np.conj(evaluate(vol, pts).numpy()))


@SETTINGS
@given(shape=st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
       seed=seeds, apix=st.floats(0.5, 10))
def test_mrc_round_trip(tmp_path_factory, shape, seed, apix):
    vol = np.random.default_rng(seed).normal(size=shape).astype(np.float32)
    path = tmp_path_factory.mktemp("mrc") / "v.mrc"
    mrc_write(vol, apix, path)
    back, a = mrc_read(path)
    np.testing.assert_array_equal(back, vol)
    # pixel size is stored as a float32 cell length over the grid size
    assert abs(a - apix) <= 1e-6 * apix


@SETTINGS
@given(x=arrays(np.float64, (3, 4), elements=finite))
def test_tanh_gradient_matches_closed_form(x):
    t = dc.Tensor(x, requires_grad=True)
    dc.tsum(dc.tanh(t)).backward()
    np.testing.assert_allclose(t.grad, 1 - np.tanh(x) ** 2, atol=1e-12)
