import numpy as np
import pytest

from evresid.diffops import Tensor
from evresid.diffops.nn import upsample_matrix
from evresid.model import FlowModel, ModelConfig
from evresid.synth import sample_scene
from evresid.train import (LossConfig, NoiseSpec, SceneDataset, TrainConfig, inject_noise, load_training_checkpoint,
                           loss_l1, loss_l2, make_regional_noise, make_white_noise, masked_l1, save_training_checkpoint,
                           train_global, train_residual)
from evresid.train.trainer import _augment, _freeze_outputs, _GTCache, residual_losses

TINY = ModelConfig(D=8, hidden_dim=8, context_dim=8, motion_dim=8, J=2, m=2, r_l=2)


class Ones:
    """Stub generator: every normal draw is 1, every uniform draw is 0."""

    def standard_normal(self, shape):
        return np.ones(shape)

    def random(self):
        return 0.0


class Const(Ones):
    def __init__(self, c):
        self.c = c

    def standard_normal(self, shape):
        return np.full(shape, self.c)


@pytest.fixture(scope="module")
def data():
    return SceneDataset.from_specs([sample_scene(s, "linear", resolution=(32, 32)) for s in range(4)])


@pytest.fixture(scope="module")
def sine_data():
    return SceneDataset.from_specs([sample_scene(s, "sinusoid", resolution=(32, 32)) for s in range(2)])


# -- noise


def test_regional_s1_is_the_grid(rng):
    a = make_regional_noise(5, 7, 1, np.random.default_rng(3))
    g = np.random.default_rng(3).standard_normal((5, 7, 2)).transpose(2, 0, 1)
    np.testing.assert_array_equal(a, g)


def test_regional_constant_grid_gives_constant_field():
    out = make_regional_noise(13, 17, 6, Const(0.7))
    assert out.shape == (2, 13, 17)
    np.testing.assert_allclose(out, 0.7, atol=1e-14)


def test_white_noise_stub_and_shape():
    np.testing.assert_array_equal(make_white_noise(3, 4, Ones()), np.ones((2, 3, 4)))
    assert make_white_noise(5, 6, np.random.default_rng(0)).shape == (2, 5, 6)


def high_frequency_fraction(fields):
    power = (np.abs(np.fft.fft2(fields, axes=(-2, -1))) ** 2).mean(axis=(0, 1))
    fy = np.abs(np.fft.fftfreq(power.shape[0]))[:, None]
    fx = np.abs(np.fft.fftfreq(power.shape[1]))[None, :]
    high = np.maximum(fx, fy) > 0.25
    return power[high].sum() / power.sum()


def test_noise_monte_carlo_statistics():
    rng = np.random.default_rng(11)
    H, W, n = 24, 30, 10_000
    reg = np.stack([make_regional_noise(H, W, 6, rng) for _ in range(n)])
    white = np.stack([make_white_noise(H, W, rng) for _ in range(n)])
    assert np.abs(reg.mean(axis=0)).max() < 0.05
    # exact per-pixel variance is the sum of squared interpolation weights: 1 where the
    # half-pixel grid lands on a node, below 1 wherever neighbours are blended
    wy = (upsample_matrix(4, 6) ** 2).sum(axis=1)[:H]
    wx = (upsample_matrix(5, 6) ** 2).sum(axis=1)[:W]
    expected = np.outer(wy, wx)
    assert expected.max() <= 1.0 and expected.mean() < 0.8
    assert np.abs(reg.var(axis=0) - expected).max() < 0.07
    assert reg.var(axis=0).mean() < 0.8
    assert np.abs(white.mean(axis=0)).max() < 0.05
    assert np.abs(white.var(axis=0) - 1.0).max() < 0.1
    assert abs(white.var() - 1.0) < 0.01
    assert high_frequency_fraction(reg) < high_frequency_fraction(white)


def test_injection_example():
    v = np.zeros((2, 4, 4))
    v[0] = 10.0
    out, hit = inject_noise(v, NoiseSpec("white", weight=0.3, p_inject=1.0), Ones())
    assert hit
    np.testing.assert_allclose(out[0], 13.0)
    np.testing.assert_allclose(out[1], 3.0)
    out, _ = inject_noise(Tensor(v), NoiseSpec("regional", weight=0.3, p_inject=1.0), Ones())
    np.testing.assert_allclose(out.data[:, 0, 0], (13.0, 3.0))


def test_injection_identities(rng):
    v = rng.standard_normal((2, 6, 6))
    out, _ = inject_noise(v, NoiseSpec(weight=0.0, p_inject=1.0), rng)
    np.testing.assert_array_equal(out, v)
    spec = NoiseSpec(p_inject=0.0)
    assert not any(inject_noise(v, spec, rng)[1] for _ in range(1000))
    out, hit = inject_noise(v, NoiseSpec(p_inject=1.0), rng, training=False)
    assert out is v and not hit
    assert inject_noise(v, NoiseSpec("none", p_inject=1.0), rng)[0] is v


def test_injection_probability(rng):
    spec = NoiseSpec(p_inject=0.6)
    v = np.ones((2, 6, 6))
    hits = np.mean([inject_noise(v, spec, rng)[1] for _ in range(4000)])
    assert abs(hits - 0.6) < 0.03


@pytest.mark.parametrize("kw", [{"pattern": "pink"}, {"S": 0}, {"S": 2.5}, {"p_inject": 1.5}, {"weight": -0.1}])
def test_noise_spec_validation(kw):
    with pytest.raises(ValueError):
        NoiseSpec(**kw)


# -- losses


def const_err(value, shape=(4, 5)):
    """A prediction whose per-pixel |du| + |dv| is ``value``."""
    return np.full((2,) + shape, value / 2.0)


def test_loss_l1_example():
    gt = np.zeros((2, 4, 5))
    loss = loss_l1([const_err(1.0), const_err(0.5)], gt, LossConfig(gamma=0.8))
    assert loss.item() == pytest.approx(1.3, abs=1e-12)
    assert loss_l1([gt, gt], gt).item() == 0.0
    assert loss_l1([const_err(1.0), const_err(0.5)], gt, LossConfig(gamma=1.0)).item() == pytest.approx(1.5)


def test_loss_l2_examples(rng):
    gt = rng.standard_normal((2, 6, 7))
    assert loss_l2(gt.copy(), gt).item() == 0.0
    assert loss_l2(gt + 1.0, gt).item() == pytest.approx(2.0, abs=1e-12)
    pred = rng.standard_normal((2, 6, 7))
    mask = rng.random((6, 7)) > 0.3
    oracle = np.mean([abs(pred[0, y, x] - gt[0, y, x]) + abs(pred[1, y, x] - gt[1, y, x])
                      for y in range(6) for x in range(7) if mask[y, x]])
    assert loss_l2(pred, gt, mask).item() == pytest.approx(oracle, abs=1e-12)


def test_loss_errors():
    with pytest.raises(ValueError):
        masked_l1(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)), np.zeros((2, 2), bool))
    with pytest.raises(ValueError):
        loss_l1([], np.zeros((2, 2, 2)))
    with pytest.raises(ValueError):
        LossConfig(gamma=0.0)


# -- training loops


def param_bytes(params):
    return [p.data.tobytes() for p in params]


def test_global_overfit_loss_decreases(data):
    m = FlowModel(TINY)
    res = train_global(m, data, TrainConfig(steps=100, lr=2e-3, flip=False))
    h = np.array([r["total"] for r in res.history])
    assert h[-20:].mean() < 0.8 * h[:20].mean()


def test_zero_lr_leaves_parameters_unchanged(data):
    m = FlowModel(TINY)
    before = param_bytes(m.parameters())
    train_global(m, data, TrainConfig(steps=3, lr=0.0))
    assert param_bytes(m.parameters()) == before


def test_global_determinism_50_steps(data, tmp_path):
    runs = []
    for k in range(2):
        m = FlowModel(TINY)
        runs.append(train_global(m, data, TrainConfig(steps=50, lr=1e-3), log_path=tmp_path / f"{k}.csv"))
    assert [r["total"] for r in runs[0].history] == [r["total"] for r in runs[1].history]
    assert (tmp_path / "0.csv").read_bytes() == (tmp_path / "1.csv").read_bytes()


def test_checkpoint_resume_continues_identically(data, tmp_path):
    cfg = TrainConfig(steps=6, lr=1e-3)
    full = train_global(FlowModel(TINY), data, cfg).history

    m = FlowModel(TINY)
    part = train_global(m, data, TrainConfig(steps=3, lr=1e-3))
    save_training_checkpoint(tmp_path / "c.evck", m, part.optimizer, part.step)
    m2 = FlowModel(ModelConfig(**{**TINY.to_dict(), "seed": 5}))
    from evresid.diffops import Adam

    opt = Adam(m2.global_parameters(), lr=1e-3, clip=cfg.clip)
    step = load_training_checkpoint(tmp_path / "c.evck", m2, opt)
    assert step == 3
    rest = train_global(m2, data, cfg, optimizer=opt, start_step=step)
    assert [r["total"] for r in part.history + rest.history] == [r["total"] for r in full]


def test_checkpoint_restores_identical_loss(data, tmp_path):
    m = FlowModel(TINY)
    train_global(m, data, TrainConfig(steps=2, lr=1e-3))
    save_training_checkpoint(tmp_path / "m.evck", m)
    m2 = FlowModel(ModelConfig(**{**TINY.to_dict(), "seed": 9}))
    load_training_checkpoint(tmp_path / "m.evck", m2)
    a = m.predict(data[0].voxels)
    b = m2.predict(data[0].voxels)
    assert a["global"].tobytes() == b["global"].tobytes()


def test_residual_freezes_global_parameters(sine_data):
    m = FlowModel(TINY)
    g_before = param_bytes(m.global_parameters())
    r_before = param_bytes(m.refiner_parameters())
    res = train_residual(m, sine_data, NoiseSpec(), cfg=TrainConfig(steps=4, lr=1e-3))
    assert param_bytes(m.global_parameters()) == g_before
    assert param_bytes(m.refiner_parameters()) != r_before
    for row in res.history:
        assert row["total"] == pytest.approx(row["L1"] + row["L2"], abs=1e-12)


def test_residual_loss_additivity(sine_data):
    m = FlowModel(TINY)
    fz = _freeze_outputs(m, sine_data, False, _GTCache(sine_data))
    l1, l2, _ = residual_losses(m, fz[0], NoiseSpec(p_inject=1.0), LossConfig(m=2), np.random.default_rng(0))
    total = l1 + l2
    assert abs(total.item() - (l1.item() + l2.item())) <= 1e-12


def test_supervision_only_at_ltr_timestamp(sine_data, monkeypatch):
    m = FlowModel(TINY)
    seen = []
    orig = m.refine_pyramid

    def spy(pyr, fraction, *a, **k):
        seen.append(fraction)
        return orig(pyr, fraction, *a, **k)

    monkeypatch.setattr(m, "refine_pyramid", spy)
    sine_data.audit["gt_reads"] = 0
    train_residual(m, sine_data, NoiseSpec(), cfg=TrainConfig(steps=3, lr=1e-3))
    assert seen and set(seen) == {1.0}
    # only the LTR ground truth is fetched: once per sample
    assert sine_data.audit["gt_reads"] == len(sine_data)


def test_intermediate_pyramids_get_no_gradient(sine_data):
    m = FlowModel(TINY)
    m.refiner.head.conv2.weight.data[...] = 0.05  # zero-initialized head would block every gradient
    fz = _freeze_outputs(m, sine_data, False, _GTCache(sine_data))[0]
    for n, pyr in fz.cv.pyramids.items():
        for level in pyr:
            level.requires_grad = True
            level.grad = None
    l1, l2, _ = residual_losses(m, fz, NoiseSpec(p_inject=0.0), LossConfig(m=2), np.random.default_rng(0))
    l1.backward()
    N = TINY.N
    assert np.abs(fz.cv.pyramids[N][0].grad).max() > 0
    for n in range(1, N):
        g = fz.cv.pyramids[n][0].grad
        assert g is None or not np.any(g)


def test_self_supervised_reads_no_ground_truth(sine_data):
    m = FlowModel(TINY)
    sine_data.audit["gt_reads"] = 0
    train_residual(m, sine_data, NoiseSpec(), cfg=TrainConfig(steps=3, lr=1e-3), self_supervised=True)
    assert sine_data.audit["gt_reads"] == 0


def test_residual_determinism(sine_data):
    runs = [train_residual(FlowModel(TINY), sine_data, NoiseSpec(), cfg=TrainConfig(steps=5, lr=1e-3)).history
            for _ in range(2)]
    assert [r["total"] for r in runs[0]] == [r["total"] for r in runs[1]]


def test_train_config_unknown_key():
    with pytest.raises(KeyError):
        TrainConfig.from_dict({"steps": 3, "momentum": 0.9})


# -- augmentation


def _ramp_sample(h=16, w=24):
    ys, xs = np.mgrid[0:h, 0:w].astype(float)
    vox = np.stack([np.stack([xs + 100 * ys, -xs])] * 3)  # (N+1, B, H, W)
    flow = np.stack([xs, ys])
    return vox, flow, xs > 3


def test_crop_keeps_voxels_flow_and_mask_aligned():
    vox, flow, mask = _ramp_sample()
    cfg = TrainConfig(flip=False, crop=(8, 16))
    for seed in range(5):
        v, f, m = _augment(np.random.default_rng(seed), cfg, vox, flow, mask)
        assert v.shape == (3, 2, 8, 16) and f.shape == (2, 8, 16) and m.shape == (8, 16)
        y0, x0 = int(f[1, 0, 0]), int(f[0, 0, 0])
        assert np.array_equal(v, vox[..., y0:y0 + 8, x0:x0 + 16])
        assert np.array_equal(m, mask[y0:y0 + 8, x0:x0 + 16])


def test_invert_negates_events_only():
    vox, flow, mask = _ramp_sample()
    cfg = TrainConfig(flip=False, invert=True)
    signs = set()
    for seed in range(20):
        v, f, m = _augment(np.random.default_rng(seed), cfg, vox, flow, mask)
        assert np.array_equal(f, flow) and np.array_equal(m, mask)
        signs.add(1 if np.array_equal(v, vox) else -1 if np.array_equal(v, -vox) else 0)
    assert signs == {1, -1}


def test_no_augmentation_is_identity():
    vox, flow, mask = _ramp_sample()
    v, f, m = _augment(np.random.default_rng(0), TrainConfig(flip=False), vox, flow, mask)
    assert np.array_equal(v, vox) and np.array_equal(f, flow) and np.array_equal(m, mask)


@pytest.mark.parametrize("crop", [(8,), (12, 16), (0, 8)])
def test_crop_validation(crop):
    with pytest.raises(ValueError):
        TrainConfig(crop=crop)


def test_crop_larger_than_sample():
    vox, flow, mask = _ramp_sample()
    with pytest.raises(ValueError):
        _augment(np.random.default_rng(0), TrainConfig(crop=(32, 32)), vox, flow, mask)
