import math

import numpy as np
import pytest
import torch

from vdblur.data import build_samples, make_synthetic_dataset
from vdblur.errors import ConfigurationError, TrainingError
from vdblur.losses import content_loss
from vdblur.training import (
    PlateauDecay,
    TrainConfig,
    TrainState,
    augment,
    init_weights,
    iter_batches,
    load_generator,
    make_generator,
    sample_batch,
    toy_config,
    train_gan,
    train_generator,
)


def tiny(**kw):
    base = dict(channels=4, stem_channels=2, head_channels=8, num_blocks=1, patch_size=16, batch_size=2,
                max_steps=6, eval_every=0, checkpoint_every=3)
    base.update(kw)
    return toy_config(**base)


@pytest.fixture(scope="module")
def pairs():
    return make_synthetic_dataset(None, n_clips=3, n_frames=6, size=(24, 24), seed=11)


@pytest.fixture(scope="module")
def samples(pairs):
    return build_samples(pairs[:2], 5)


def test_config_defaults_and_validation():
    c = TrainConfig()
    assert (c.batch_size, c.patch_size, c.lr_phase1, c.lr_plateau, c.alpha) == (4, 128, 1e-4, 1e-5, 2e-4)
    with pytest.raises(ConfigurationError):
        TrainConfig(lr_phase1=0)
    with pytest.raises(ConfigurationError):
        TrainConfig(window_T=4)
    with pytest.raises(ConfigurationError):
        TrainConfig(alpha=-1)
    with pytest.raises(ConfigurationError, match="unknown"):
        TrainConfig.from_dict({"batchsize": 3})
    assert TrainConfig.from_dict(c.to_dict()) == c


def test_init_statistics():
    g = init_weights(make_generator(TrainConfig()), seed=0)
    w = torch.cat([u.kernels.detach().ravel() for u in g.units.values()]).double()
    assert abs(float(w.mean())) < 1e-4
    assert float(w.std()) == pytest.approx(0.01, rel=0.01)
    assert all(float(u.bias.detach().abs().max()) == 0 for u in g.units.values())


def test_init_deterministic():
    a = make_generator(tiny(), seed=3)
    b = make_generator(tiny(), seed=3)
    c = make_generator(tiny(), seed=4)
    for (k, v), (_, w), (_, u) in zip(a.state_dict().items(), b.state_dict().items(), c.state_dict().items()):
        assert torch.equal(v, w)
    assert any(not torch.equal(v, u) for v, u in zip(a.state_dict().values(), c.state_dict().values()))


def test_augment_consistent(samples):
    rng = np.random.default_rng(0)
    s = samples[3]
    out = augment(s, rng, 16)
    assert out.window.luma.shape == (5, 16, 16)
    assert out.target.shape == (16, 16)
    # the same transform is applied to window and target: find it by brute force
    found = False
    for oy in range(24 - 16 + 1):
        for ox in range(24 - 16 + 1):
            crop_t = s.target[oy : oy + 16, ox : ox + 16]
            crop_w = s.window.luma[:, oy : oy + 16, ox : ox + 16]
            for fh in (False, True):
                for fv in (False, True):
                    t, w = crop_t, crop_w
                    if fh:
                        t, w = t[:, ::-1], w[..., ::-1]
                    if fv:
                        t, w = t[::-1], w[..., ::-1, :]
                    if np.array_equal(t, out.target) and np.array_equal(w, out.window.luma):
                        found = True
    assert found


def test_augment_too_small(samples):
    with pytest.raises(ConfigurationError):
        augment(samples[0], np.random.default_rng(0), 64)


def test_batches_stateless(samples):
    cfg = tiny()
    x1, y1, i1 = sample_batch(samples, cfg, 5)
    x2, y2, i2 = sample_batch(samples, cfg, 5)
    assert torch.equal(x1, x2) and torch.equal(y1, y2)
    assert len(set(i1.tolist())) == len(i1)


def test_prefetch_matches_serial(samples):
    serial = list(iter_batches(samples, tiny(), 0, 4))
    threaded = list(iter_batches(samples, tiny(workers=2), 0, 4))
    for a, b in zip(serial, threaded):
        assert a[0] == b[0] and torch.equal(a[1], b[1]) and torch.equal(a[2], b[2])


def test_plateau_decay():
    p = PlateauDecay(window=2, patience=3)
    fired = [p.update(s, l) for s, l in enumerate([5, 4, 3, 3, 3, 3, 3, 3])]
    assert fired.count(True) == 1
    assert fired.index(True) == 6
    q = PlateauDecay(2, 3)
    q.load(p.state())
    assert q.decayed and q.best == p.best


@pytest.mark.parametrize("lr", [1e-6, 1e-3])
def test_small_lr_step_decreases_loss(samples, lr):
    cfg = tiny(optimizer="sgd", batch_size=4, flip=False)
    g = make_generator(cfg).double()
    x, y, _ = sample_batch(samples, cfg, 0)
    x, y = x.double(), y.double()
    opt = torch.optim.SGD(g.parameters(), lr=lr)
    g.train()
    before = content_loss(y, g(x))
    before.backward()
    opt.step()
    with torch.no_grad():
        after = content_loss(y, g(x))
    assert float(after) < float(before.detach())


def test_training_reduces_loss(samples):
    st = train_generator(tiny(max_steps=60, lr_phase1=3e-3), samples)
    first = np.mean([h["content_loss"] for h in st.history[:10]])
    last = np.mean([h["content_loss"] for h in st.history[-10:]])
    assert last < first


def test_deterministic_checkpoints(tmp_path, samples):
    cfg = tiny()
    train_generator(cfg, samples, out_dir=tmp_path / "a")
    train_generator(cfg, samples, out_dir=tmp_path / "b")
    for name in ("generator_0000003.ckpt", "generator_0000006.ckpt"):
        assert (tmp_path / "a/checkpoints" / name).read_bytes() == (tmp_path / "b/checkpoints" / name).read_bytes()


def test_resume_exact(tmp_path, samples):
    cfg = tiny(optimizer="adam")
    full = train_generator(cfg, samples, out_dir=tmp_path / "full")
    train_generator(cfg.replace(max_steps=3), samples, out_dir=tmp_path / "half")
    resumed = train_generator(cfg, samples, out_dir=tmp_path / "half",
                              resume=tmp_path / "half/checkpoints/generator_latest.ckpt")
    assert resumed.step == 6
    for k, v in full.generator.state_dict().items():
        assert torch.equal(v, resumed.generator.state_dict()[k]), k
    assert [h["content_loss"] for h in full.history[3:]] == [h["content_loss"] for h in resumed.history]


def test_log_written(tmp_path, samples):
    train_generator(tiny(), samples, out_dir=tmp_path)
    lines = (tmp_path / "logs/train_log.csv").read_text().splitlines()
    assert lines[0] == "step,content_loss,adv_loss,d_loss,lr,val_psnr"
    assert len(lines) == 7


def test_nonfinite_aborts(samples):
    cfg = tiny()
    bad = [type(s)(s.window, np.full_like(s.target, np.nan)) for s in samples]
    with pytest.raises(TrainingError, match="step 0"):
        train_generator(cfg, bad)


def test_empty_dataset():
    with pytest.raises(TrainingError):
        train_generator(tiny(), [])


def test_gan_alpha_zero_matches_content_only(samples):
    # with alpha = 0 the generator sees exactly the content-loss gradient
    cfg = tiny(alpha=0.0, max_steps=4, optimizer="sgd", lr_gan=1e-3)
    st1 = train_generator(tiny(max_steps=2), samples)
    gan = train_gan(cfg, samples, st1)
    ref = train_generator(cfg.replace(lr_phase1=1e-3, max_steps=4, plateau_window=10**6),
                          samples, resume=_fresh_phase1(st1, cfg))
    for k, v in gan.generator.state_dict().items():
        assert torch.allclose(v, ref.generator.state_dict()[k], rtol=0, atol=0), k


def _fresh_phase1(st, cfg):
    import copy

    from vdblur.training import make_optimizer

    g = copy.deepcopy(st.generator)
    opt = make_optimizer(cfg, g.parameters(), cfg.lr_gan)
    return TrainState(config=cfg, generator=g, opt_g=opt, lr=cfg.lr_gan, plateau=PlateauDecay(10**6, 10**6))


def test_gan_phase_runs_and_tracks_best(tmp_path, pairs, samples):
    st1 = train_generator(tiny(max_steps=4), samples, out_dir=tmp_path / "p1")
    cfg = tiny(max_steps=6, eval_every=3)
    st = train_gan(cfg, samples, tmp_path / "p1/checkpoints/generator_latest.ckpt", out_dir=tmp_path / "p2",
                   val_pairs=pairs[2:])
    assert st.phase == "gan" and st.step == 6
    assert st.best_psnr is not None and st.best_step in (0, 3, 6)
    assert all(math.isfinite(h["d_loss"]) and h["adv_loss"] < 0 for h in st.history)
    g = load_generator(tmp_path / "p2/checkpoints/gan_latest.ckpt")
    for k, v in st.best_generator.items():
        assert torch.equal(g.state_dict()[k], v)
    with pytest.raises(TrainingError):
        train_gan(cfg, samples)


def test_gan_resume_exact(tmp_path, samples):
    st1 = train_generator(tiny(max_steps=2), samples)
    cfg = tiny(max_steps=4, checkpoint_every=2)
    full = train_gan(cfg, samples, st1)
    train_gan(cfg.replace(max_steps=2), samples, st1, out_dir=tmp_path)
    resumed = train_gan(cfg, samples, resume=tmp_path / "checkpoints/gan_latest.ckpt")
    for k, v in full.generator.state_dict().items():
        assert torch.equal(v, resumed.generator.state_dict()[k]), k
    for k, v in full.discriminator.state_dict().items():
        assert torch.equal(v, resumed.discriminator.state_dict()[k]), k


def test_discriminator_learns(samples):
    # a frozen, poor generator makes the discriminator's job easy; its loss should fall
    st1 = train_generator(tiny(max_steps=1), samples)
    cfg = tiny(max_steps=80, lr_gan=1e-6, lr_disc=2e-3)
    st = train_gan(cfg, samples, st1)
    d = [h["d_loss"] for h in st.history]
    assert np.mean(d[-10:]) < np.mean(d[:10])


def test_window_mismatch(samples):
    st1 = train_generator(tiny(max_steps=1), samples)
    with pytest.raises(ConfigurationError, match="T=5"):
        train_gan(tiny(window_T=3), samples, st1)


def test_he_init_scale():
    g = init_weights(make_generator(tiny()), seed=0, scheme="he")
    for u in g.units.values():
        k = u.kernels.detach().double()
        fan_in = k[0].numel()
        assert float(k.std()) == pytest.approx(math.sqrt(2.0 / fan_in), rel=0.35)
    with pytest.raises(ConfigurationError):
        init_weights(make_generator(tiny()), seed=0, scheme="xavier")
    with pytest.raises(ConfigurationError):
        TrainConfig(init_scheme="xavier")
