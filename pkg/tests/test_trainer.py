import math

import numpy as np
import pytest

from cryoforge import diffcore as dc
from cryoforge.dataio import DatasetSpec, generate_dataset
from cryoforge.diffcore import Tensor
from cryoforge.forwardmodel import Pose, ctf_eval
from cryoforge.implicitvol import make_volume, randomize
from cryoforge.poseencoder import EncoderConfig, PoseEncoder
from cryoforge.spectral import (
    FreqGrid2D, band_mask, default_phantom, fft2_centered, ifft2_centered, negate_index,
    random_rotations,
)
from cryoforge.trainer import (
    METRIC_COLUMNS, RZ_PI, NumericalAbort, PreparedData, SpectralSampler, TrainConfig,
    EpochSampler, compute_metrics, evaluate_poses, load_checkpoint, read_metrics, render,
    resolve_pose, rot180, symmetric_loss, train,
)

L, APIX = 16, 4.0
ENC = EncoderConfig(input_side=L, conv_channels=(4, 8), fc_width=16, translation_range=6.0)


@pytest.fixture(scope="module")
def dataset():
    with dc.precision(np.float64):
        return generate_dataset(DatasetSpec(n_particles=24, side=L, pixel_size=APIX, seed=3,
                                            shift_sigma=2.0))


@pytest.fixture
def models():
    enc = PoseEncoder(ENC, seed=0)
    vol = randomize(make_volume("fouriernet", 8, pixel_size=APIX), seed=1, scale=0.5)
    return enc, vol


# -- rot180 ------------------------------------------------------------------------
def test_rot180_is_involution_about_dc(rng):
    x = rng.normal(size=(3, 8, 8))
    y = rot180(x)
    np.testing.assert_array_equal(rot180(y), x)
    # the DC pixel (L/2, L/2) is fixed; (i, j) -> (L - i, L - j) mod L
    assert y[0, 4, 4] == x[0, 4, 4]
    assert y[0, 1, 2] == x[0, 7, 6]
    with pytest.raises(ValueError):
        rot180(np.zeros((5, 5)))


def test_rot180_negates_frequencies(rng):
    img = rng.normal(size=(8, 8))
    a = fft2_centered(rot180(img))
    b = fft2_centered(img)
    i = negate_index(8)
    np.testing.assert_allclose(a, b[i][:, i], atol=1e-12)


def test_rot180_is_an_inplane_pi_rotation_of_projections(rng):
    p = default_phantom(32, 6.0)
    g = FreqGrid2D(32, 6.0)
    from cryoforge.spectral import phantom_projection_real
    R = random_rotations(1, rng)[0]
    np.testing.assert_allclose(rot180(phantom_projection_real(p, R, g)),
                               phantom_projection_real(p, R @ RZ_PI, g), atol=1e-9)


def test_resolve_pose():
    R = random_rotations(1, np.random.default_rng(0))[0]
    p = Pose(R, np.array([1.0, -2.0]))
    assert resolve_pose(p, "original") is p
    q = resolve_pose(p, "rotated")
    np.testing.assert_allclose(q.rotation, R @ np.diag([-1.0, -1, 1]))
    np.testing.assert_allclose(q.translation, [-1.0, 2.0])
    with pytest.raises(ValueError):
        resolve_pose(p, "other")


def test_resolve_pose_render_consistency(rng, models):
    # the rotated branch's pose, resolved, renders the original image exactly
    _, vol = models
    grid = FreqGrid2D(L, APIX)
    sampler = SpectralSampler(grid)
    k = sampler.kcoords
    ctf = np.ones(len(k))
    R = random_rotations(1, rng)[0]
    t = np.array([1.5, -0.7])
    pred_rot = render(vol, R[None], t[None], ctf, k, 1.0).numpy()[0]
    # image on the full grid, then rotate by pi
    full = np.zeros((L, L), complex)
    full.reshape(-1)[sampler.index] = pred_rot
    i = negate_index(L)
    mirror = np.conj(full[i][:, i])
    pad = np.where(full != 0, full, mirror)
    img_rot = ifft2_centered(pad * band_mask(L))
    img_orig = rot180(img_rot.real)
    res = resolve_pose(Pose(R, t), "rotated")
    direct = render(vol, res.rotation[None], res.translation[None], ctf, k, 1.0).numpy()[0]
    via = sampler.take(fft2_centered(img_orig))
    assert np.abs(direct - via).max() / np.abs(direct).max() < 1e-6


# -- sampler -------------------------------------------------------------------------
def test_spectral_sampler_covers_disk_once():
    s = SpectralSampler(FreqGrid2D(L, APIX))
    c = np.arange(L) - L // 2
    y, x = np.meshgrid(c, c, indexing="ij")
    disk = (x * x + y * y < (L // 2) ** 2) & band_mask(L)
    # weights sum to the number of in-disk bins
    assert s.weights.sum() == disk.sum()
    assert (s.weights == 1).sum() == 1


def test_half_disk_loss_equals_full_disk_sum(rng):
    grid = FreqGrid2D(L, APIX)
    s = SpectralSampler(grid)
    a, b = rng.normal(size=(L, L)), rng.normal(size=(L, L))
    A, B = fft2_centered(a), fft2_centered(b)
    c = np.arange(L) - L // 2
    y, x = np.meshgrid(c, c, indexing="ij")
    disk = (x * x + y * y < (L // 2) ** 2) & band_mask(L)
    full = np.sum(np.abs(A - B)[disk] ** 2)
    half = np.sum(s.weights * np.abs(s.take(A) - s.take(B)) ** 2)
    assert half == pytest.approx(full, rel=1e-12)


# -- symmetric loss ----------------------------------------------------------------------
def loss_inputs(ds, idx):
    prep = PreparedData.from_dataset(ds)
    return prep, (prep.images[idx], prep.spectra[idx], prep.ctf[idx])


def test_symmetric_not_above_plain(dataset, models):
    enc, vol = models
    prep, (im, sp, ct) = loss_inputs(dataset, np.arange(8))
    sym = symmetric_loss(im, sp, ct, enc, vol, prep.sampler, prep.image_scale)
    plain = symmetric_loss(im, sp, ct, enc, vol, prep.sampler, prep.image_scale, "plain_l2")
    assert sym.loss.item() <= plain.loss.item()
    np.testing.assert_allclose(sym.per_image_residuals[:, 0], plain.per_image_residuals[:, 0])
    np.testing.assert_allclose(sym.loss.item(), sym.per_image_residuals.min(axis=1).sum())
    assert not plain.branch_won.any()


def test_symmetric_loss_invariant_to_rot180(dataset, models):
    enc, vol = models
    prep, (im, sp, ct) = loss_inputs(dataset, np.arange(4))
    for j in range(4):
        a = symmetric_loss(im[j:j + 1], sp[j:j + 1], ct[j:j + 1], enc, vol, prep.sampler,
                           prep.image_scale).loss.item()
        rim = rot180(im[j:j + 1])
        rsp = prep.sampler.take(fft2_centered(rim.astype(np.float64)))
        b = symmetric_loss(rim, rsp, ct[j:j + 1], enc, vol, prep.sampler,
                           prep.image_scale).loss.item()
        assert abs(a - b) <= 1e-10 * max(abs(a), 1.0)


def test_losing_branch_gets_no_gradient(dataset, models):
    enc, vol = models
    prep, (im, sp, ct) = loss_inputs(dataset, np.arange(1))
    out = symmetric_loss(im, sp, ct, enc, vol, prep.sampler, prep.image_scale)
    for p in enc.params + vol.params:
        p.grad = None
    out.loss.backward()
    won_grads = [p.grad.copy() for p in enc.params]
    # recompute the winning branch alone: gradients must match exactly
    chosen = rot180(im) if out.branch_won[0] else im
    target = np.conj(sp) if out.branch_won[0] else sp
    from cryoforge.trainer import _residuals
    for p in enc.params + vol.params:
        p.grad = None
    R, t = enc.encode_batch(chosen)
    dc.tsum(_residuals(render(vol, R, t, ct, prep.sampler.kcoords, prep.image_scale), target,
                       prep.sampler.weights)).backward()
    for g, p in zip(won_grads, enc.params):
        np.testing.assert_array_equal(g, p.grad)


def test_routing_matches_smaller_residual(dataset, models):
    enc, vol = models
    prep, (im, sp, ct) = loss_inputs(dataset, np.arange(12))
    out = symmetric_loss(im, sp, ct, enc, vol, prep.sampler, prep.image_scale)
    r = out.per_image_residuals
    np.testing.assert_array_equal(out.branch_won, r[:, 1] < r[:, 0])


def test_loss_mode_validation(dataset, models):
    enc, vol = models
    prep, (im, sp, ct) = loss_inputs(dataset, np.arange(2))
    with pytest.raises(ValueError):
        symmetric_loss(im, sp, ct, enc, vol, prep.sampler, prep.image_scale, "bogus")
    with pytest.raises(dc.ShapeError):
        symmetric_loss(im, sp[:, :5], ct, enc, vol, prep.sampler, prep.image_scale)


def test_composed_graph_gradients(dataset):
    # encoder -> slice -> synthesize -> loss at L = 16, central differences in 64-bit
    cfg = EncoderConfig(input_side=L, conv_channels=(2, 3), fc_width=4, translation_range=4.0)
    enc = PoseEncoder(cfg, seed=5)
    vol = randomize(make_volume("fouriernet", 4, pixel_size=APIX), seed=6, scale=0.3)
    prep, (im, sp, ct) = loss_inputs(dataset, np.arange(2))

    def fn():
        return symmetric_loss(im, sp, ct, enc, vol, prep.sampler, prep.image_scale).loss

    fn().backward()
    for p in (enc["conv0.weight"], enc["rot.weight"], enc["trans.bias"], vol.params[0],
              vol.params[-1]):
        idx = np.random.default_rng(0).choice(p.size, min(p.size, 12), replace=False)
        num = dc.numerical_grad(fn, p, indices=idx).ravel()[idx]
        assert dc.max_rel_error(p.grad.ravel()[idx], num) < 1e-4


# -- configuration and sampling ---------------------------------------------------------
def test_train_config_validation_and_digest():
    a = TrainConfig()
    assert a.digest() == TrainConfig().digest()
    assert a.digest() != TrainConfig(seed=1).digest()
    for bad in (dict(batch_size=0), dict(learning_rate=0), dict(max_iters=-1),
                dict(loss_mode="x"), dict(eval_every=0)):
        with pytest.raises(ValueError):
            TrainConfig(**bad)


def test_epoch_sampler_covers_each_epoch():
    s = EpochSampler(10, 3, seed=0)
    seen = np.concatenate([s.next() for _ in range(3)])
    assert len(set(seen.tolist())) == 9
    assert len(s.next()) == 3


# -- training loop -----------------------------------------------------------------------
def run(dataset, tmp_path, iters=6, **kw):
    enc = PoseEncoder(ENC, seed=0)
    vol = make_volume("fouriernet", 8, pixel_size=APIX,
                      output_scale=PreparedData.from_dataset(dataset).amplitude_scale())
    cfg = TrainConfig(batch_size=4, learning_rate=1e-3, max_iters=iters, eval_every=3,
                      eval_subset=12, **kw)
    return train(dataset, enc, vol, cfg, run_dir=tmp_path, comment="manifest test")


def test_training_reduces_loss_and_logs(dataset, tmp_path):
    res = run(dataset, tmp_path, iters=30)
    assert res.losses[-5:].mean() < res.losses[:5].mean()
    rows = read_metrics(tmp_path / "metrics.csv")
    assert [r["iter"] for r in rows] == [0, 3, 6, 9, 12, 15, 18, 21, 24, 27, 30]
    assert rows[0]["loss"] is None
    assert (tmp_path / "metrics.csv").read_text().startswith("# manifest test\n")
    header = (tmp_path / "metrics.csv").read_text().splitlines()[1]
    assert header.split(",") == METRIC_COLUMNS


def test_training_is_deterministic(dataset, tmp_path):
    a = run(dataset, tmp_path / "a")
    b = run(dataset, tmp_path / "b")
    np.testing.assert_array_equal(a.losses, b.losses)
    np.testing.assert_array_equal(a.volume.flat(), b.volume.flat())
    strip = lambda rows: [{k: v for k, v in r.items() if k != "wall_seconds"} for r in rows]
    assert strip(read_metrics(tmp_path / "a" / "metrics.csv")) == \
        strip(read_metrics(tmp_path / "b" / "metrics.csv"))


def test_zero_iterations(dataset, tmp_path):
    res = run(dataset, tmp_path, iters=0)
    rows = read_metrics(tmp_path / "metrics.csv")
    assert len(rows) == 1 and rows[0]["iter"] == 0
    assert len(res.losses) == 0
    assert load_checkpoint(tmp_path / "checkpoint.ckpt").iteration == 0


def test_checkpoint_reproduces_last_metrics(dataset, tmp_path):
    run(dataset, tmp_path)
    ck = load_checkpoint(tmp_path / "checkpoint.ckpt")
    assert ck.iteration == 6 and ck.config.batch_size == 4
    m = compute_metrics(dataset, ck.encoder, ck.volume, ck.config.eval_subset,
                        mode=ck.config.loss_mode)
    last = read_metrics(tmp_path / "metrics.csv")[-1]
    assert m.fsc_resolution_px == pytest.approx(last["fsc_resolution_px"], rel=1e-9)
    assert m.rot_err_median == pytest.approx(last["rot_err_median"], rel=1e-9)
    assert m.trans_err_mean == pytest.approx(last["trans_err_mean"], rel=1e-9)


def test_nan_abort_writes_checkpoint(dataset, tmp_path, monkeypatch):
    import cryoforge.trainer as tr
    real = tr.symmetric_loss

    def poisoned(*a, **k):
        out = real(*a, **k)
        out.loss = dc.mul(out.loss, np.nan)
        return out

    monkeypatch.setattr(tr, "symmetric_loss", poisoned)
    with pytest.raises(NumericalAbort) as info:
        run(dataset, tmp_path)
    assert info.value.iteration == 0
    assert info.value.checkpoint.endswith("nan_abort.ckpt")
    assert load_checkpoint(info.value.checkpoint).iteration == 0


def test_evaluate_poses_resolves_branches(dataset, models):
    enc, vol = models
    ev = evaluate_poses(dataset, enc, vol, np.arange(6))
    assert len(ev.poses) == 6 and ev.throughput > 0
    for p in ev.poses:
        np.testing.assert_allclose(p.rotation.T @ p.rotation, np.eye(3), atol=1e-10)


def test_metrics_with_ground_truth_encoder(dataset, monkeypatch):
    # a perfect oracle: exact poses and the analytic volume give saturated FSC and zero error
    from cryoforge import trainer as tr
    from cryoforge.metrics import align_rotations
    prep = PreparedData.from_dataset(dataset)
    gt = dataset.gt_rotations()
    gt_t = dataset.gt_translations()

    def oracle(ds, encoder, vol, indices=None, chunk=64, prepared=None, mode="symmetric"):
        idx = np.arange(len(ds)) if indices is None else indices
        return tr.PoseEvaluation([Pose(gt[i], gt_t[i]) for i in idx], np.zeros(len(idx), bool),
                                 1.0)

    monkeypatch.setattr(tr, "evaluate_poses", oracle)
    monkeypatch.setattr(tr, "aligned_volume", lambda vol, side, apix, M, shift: dataset.gt_volume())
    m = compute_metrics(dataset, None, None, None, prep)
    assert m.fsc_resolution_px == 2.0
    assert m.rot_err_median < 1e-20 and m.trans_err_mean < 1e-20
    assert m.hand == "same"
