import dataclasses

import numpy as np
import pytest

from i2icodec.autodiff import ops
from i2icodec.autodiff.gradcheck import probe_gradients, relative_error
from i2icodec.autodiff.tensor import Tensor
from i2icodec.data import DatasetSpec, generate_dataset
from i2icodec.networks import Mode, NetConfig, Networks, init_params
from i2icodec.training import (REPORT_FIELDS, ConfigError, OptimConfig, TrainConfig, TrainState,
                               discriminator_step, generator_names, l1, loss_autoencoding,
                               loss_translation, r1_penalty_grads, read_loss_log, run_training,
                               sample_targets, train_step_autoencoding, train_step_pretrain,
                               train_step_translation, train_step_unified)

# a very small float64 network for exact gradient checks
FD_NET = NetConfig(image_size=16, stages=2, base_width=4, max_width=8, latent_channels=4,
                   hyper_channels=2, style_dim=4, seed_dim=3, mapping_hidden=8, style_hidden=8,
                   disc_base_width=4)


def fd_setup(seed=3):
    cfg = TrainConfig(net=FD_NET, data=DatasetSpec(image_size=16), distortion_scale=10.0)
    params = init_params(FD_NET, seed).astype(np.float64)
    x = np.random.default_rng(1).random((2, 3, 16, 16))
    return cfg, params, Networks(FD_NET, params), x, np.array([0, 1])


def loss_gradcheck(which: str) -> float:
    cfg, params, nets, x, y = fd_setup()

    def fn():
        rng = np.random.default_rng(7)
        if which == "T":
            return loss_translation(nets, Tensor(x), y, cfg, rng, 0.7).total
        return loss_autoencoding(nets, Tensor(x), y, cfg, rng).total

    return probe_gradients(fn, [params[n] for n in params], n_probes=100, step=1e-6)


def small_cfg(smoke_cfg, **changes) -> TrainConfig:
    return dataclasses.replace(smoke_cfg, **changes)


def run_log(cfg, data, out):
    run_training(cfg, data.train, out)
    return (out / "loss_log.csv").read_text()


# -- loss pieces ---------------------------------------------------------------------

def test_sample_targets_never_match_source():
    rng = np.random.default_rng(0)
    y = rng.integers(0, 3, 500)
    t = sample_targets(rng, y, 3)
    assert np.all(t != y) and set(t) == {0, 1, 2}
    with pytest.raises(ConfigError):
        sample_targets(rng, y, 1)


def test_identical_styles_give_zero_diversity():
    cfg, params, nets, x, y = fd_setup()
    for k in range(FD_NET.num_domains):
        params[f"map.head{k}.w"].data[:] = 0   # every seed maps to the same style
    terms = loss_translation(nets, Tensor(x), y, cfg, np.random.default_rng(0))
    assert terms.ds.item() == 0.0


def test_l1_of_identical_images_is_zero(rng):
    a = Tensor(rng.random((2, 3, 4, 4)))
    assert l1(a, a).item() == 0.0
    assert ops.mse(a, a).item() == 0.0


def test_translation_total_identity_and_diversity_sign():
    cfg, params, nets, x, y = fd_setup()
    totals = {}
    for g in (0.5, 1.0):
        t = loss_translation(nets, Tensor(x), y, cfg, np.random.default_rng(4), g)
        expected = (t.adv.item() + cfg.gamma_sty * t.sty.item() - g * t.ds.item()
                    + cfg.gamma_cyc * t.cyc.item() + cfg.lambda_t * t.rate_bpp.item())
        assert relative_error(t.total.item(), expected) < 1e-9
        totals[g] = (t.total.item(), t.ds.item())
    assert totals[0.5][1] == totals[1.0][1] > 0
    # more weight on a positive diversity term lowers the objective
    assert totals[1.0][0] < totals[0.5][0]
    assert totals[0.5][0] - totals[1.0][0] == pytest.approx(0.5 * totals[1.0][1], rel=1e-9)


def test_autoencoding_lambda_zero_and_linearity():
    cfg, params, nets, x, y = fd_setup()

    def terms(lam):
        return loss_autoencoding(nets, Tensor(x), y, dataclasses.replace(cfg, lambda_a=lam),
                                 np.random.default_rng(5))

    t0, t1, t2 = terms(0.0), terms(3.0), terms(6.0)
    base = cfg.distortion_scale * t0.mse.item() + cfg.beta * t0.adv2.item()
    assert t0.total.item() == pytest.approx(base, rel=1e-12)
    r1 = t1.total.item() - base
    r2 = t2.total.item() - base
    assert r1 == pytest.approx(3.0 * t1.rate_bpp.item(), rel=1e-9)
    assert r2 == pytest.approx(2 * r1, rel=1e-9)


@pytest.mark.parametrize("which", ["T", "A"])
def test_loss_assembly_gradients(which):
    assert loss_gradcheck(which) < 1e-4


def test_r1_penalty_gradient_is_exact():
    cfg, params, nets, x, y = fd_setup()
    _, grads = r1_penalty_grads(nets, x, y, "T", 1.0)
    rng = np.random.default_rng(0)
    names = params.names("disc.T.")
    worst = 0.0
    for _ in range(30):
        k = names[rng.integers(len(names))]
        a = params[k].data.reshape(-1)
        i = rng.integers(a.size)
        orig = a[i]
        a[i] = orig + 1e-6
        vp, _ = r1_penalty_grads(nets, x, y, "T", 1.0)
        a[i] = orig - 1e-6
        vm, _ = r1_penalty_grads(nets, x, y, "T", 1.0)
        a[i] = orig
        worst = max(worst, relative_error((vp - vm) / 2e-6, grads[k].reshape(-1)[i], 1e-10))
    assert worst < 1e-4


def test_r1_penalty_value(rng):
    cfg, params, nets, x, y = fd_setup()
    xt = Tensor(x.copy(), requires_grad=True)
    ops.sum(nets.discriminate(xt, y, "A")).backward()
    value, _ = r1_penalty_grads(nets, x, y, "A", 2.0)
    assert value == pytest.approx((xt.grad ** 2).sum() / len(x), rel=1e-12)
    zero, grads = r1_penalty_grads(nets, x, y, "A", 0.0)
    assert zero == 0.0 and not any(g.any() for g in grads.values())


# -- parameter partitions --------------------------------------------------------------

def _changed(before, params):
    return {n for n in before if np.any(before[n] != params[n].data)}


def test_discriminator_step_touches_only_its_discriminator():
    cfg, params, nets, x, y = fd_setup()
    fake = np.random.default_rng(2).random(x.shape)
    for which in ("A", "T"):
        before = params.snapshot()
        discriminator_step(nets, x, y, fake, y, which, cfg)
        changed = _changed(before, params)
        assert changed and all(n.startswith(f"disc.{which}.") for n in changed)


def test_generator_passes_respect_partitions(smoke_cfg, smoke_data):
    state = TrainState.fresh(small_cfg(smoke_cfg, pretrain_iters=0))
    x, y = state.sample_batch(smoke_data.train)
    params = state.model.params
    allowed = {
        "A": ("enc.", "dec.", "hyper.", "prior.A.", "disc.A."),
        "T": ("enc.", "dec.", "map.", "sty.", "hyper.", "prior.T.", "disc.T."),
    }
    for step, m in ((train_step_autoencoding, "A"), (train_step_translation, "T")):
        before = params.snapshot()
        step(state, x, y)
        changed = _changed(before, params)
        assert all(n.startswith(allowed[m]) for n in changed)
        assert any(n.startswith(f"disc.{m}.") for n in changed)
        assert any(n.startswith(f"prior.{m}.") for n in changed)


def test_generator_name_sets():
    params = init_params(FD_NET)
    a = set(generator_names(params, Mode.A))
    t = set(generator_names(params, Mode.T))
    assert not any(n.startswith(("disc.", "map.", "sty.", "prior.T.")) for n in a)
    assert not any(n.startswith(("disc.", "prior.A.")) for n in t)
    assert set(generator_names(params, Mode.A, True)) == set(params.names(("enc.", "dec.")))


def test_pretraining_leaves_other_networks_at_initialization(smoke_cfg, smoke_data):
    state = TrainState.fresh(smoke_cfg)
    init = state.model.params.snapshot()
    while state.phase == "pretrain":
        reports = train_step_unified(state, smoke_data.train)
        assert [r.phase for r in reports] == ["pretrain"]
    changed = _changed(init, state.model.params)
    assert changed and all(n.startswith(("enc.", "dec.")) for n in changed)


# -- schedules and determinism ----------------------------------------------------------

def test_defaults_match_desk_schedule():
    cfg = TrainConfig()
    assert (cfg.pretrain_iters, cfg.joint_iters) == (2500, 5000)
    o = OptimConfig()
    assert (o.lr, o.lr_mapping, o.lr_disc, o.beta1, o.beta2, o.batch_size) == (1e-4, 5e-5, 1e-4, 0.0, 0.99, 8)
    assert cfg.r1_weight == 1.0


def test_gamma_ds_anneals_linearly(smoke_cfg):
    cfg = small_cfg(smoke_cfg, pretrain_iters=4, joint_iters=10, gamma_ds=2.0)
    state = TrainState.fresh(cfg)
    values = []
    for it in range(4, 14):
        state.iteration = it
        values.append(state.gamma_ds())
    np.testing.assert_allclose(values, 2.0 * (1 - np.arange(10) / 10))
    state.cfg = dataclasses.replace(cfg, ds_anneal=False)
    assert state.gamma_ds() == 2.0


def test_loss_report_identities_hold_every_iteration(smoke_run, smoke_cfg):
    rows = read_loss_log(smoke_run / "loss_log.csv")
    assert list(rows[0]) == list(REPORT_FIELDS)
    cfg = smoke_cfg
    seen = set()
    for r in rows:
        f = {k: float(v) for k, v in r.items() if k not in ("phase", "mode")}
        seen.add((r["phase"], r["mode"]))
        if r["mode"] == "T":
            expected = (f["adv"] + cfg.gamma_sty * f["sty"] - f["gamma_ds"] * f["ds"]
                        + cfg.gamma_cyc * f["cyc"] + cfg.lambda_t * f["rate_bpp"])
            assert relative_error(f["total_T"], expected) < 1e-6
            assert f["total"] == f["total_T"]
        elif r["phase"] == "joint":
            expected = (cfg.distortion_scale * f["rd_distortion"] + cfg.lambda_a * f["rate_bpp"]
                        + cfg.beta * f["adv2"])
            assert relative_error(f["total_A"], expected) < 1e-6
        else:
            assert relative_error(f["total_A"], cfg.distortion_scale * f["rd_distortion"]) < 1e-6
        if r["phase"] == "joint":
            size = cfg.net.image_size
            assert relative_error(f["rate_bpp"], f["rate_bits"] / size ** 2) < 1e-6
    assert seen == {("pretrain", "A"), ("joint", "A"), ("joint", "T")}


def test_seeded_runs_are_identical(tmp_path, smoke_cfg, smoke_data, smoke_run):
    assert run_log(smoke_cfg, smoke_data, tmp_path) == (smoke_run / "loss_log.csv").read_text()
    assert (tmp_path / "model.i2p").read_bytes() == (smoke_run / "model.i2p").read_bytes()


def test_different_seeds_diverge(tmp_path, smoke_cfg, smoke_data, smoke_run):
    other = run_log(small_cfg(smoke_cfg, seed=1), smoke_data, tmp_path)
    assert other != (smoke_run / "loss_log.csv").read_text()


def test_resume_reproduces_uninterrupted_run(tmp_path, smoke_cfg, smoke_data, smoke_run):
    run_training(smoke_cfg, smoke_data.train, tmp_path, until=7)
    # resume from the iteration-5 checkpoint: rows 5 and 6 are recomputed
    run_training(smoke_cfg, smoke_data.train, tmp_path, resume=tmp_path / "step_000005.i2p")
    assert (tmp_path / "loss_log.csv").read_text() == (smoke_run / "loss_log.csv").read_text()
    assert (tmp_path / "model.i2p").read_bytes() == (smoke_run / "model.i2p").read_bytes()


def test_disabling_translation_gives_a_pure_compression_trainer(tmp_path, smoke_cfg, smoke_data):
    cfg = small_cfg(smoke_cfg, enable_t=False, checkpoint_every=0)
    run_training(cfg, smoke_data.train, tmp_path)
    rows = read_loss_log(tmp_path / "loss_log.csv")
    assert {r["mode"] for r in rows} == {"A"}
    # reference: pretraining followed by plain rate-distortion steps
    ref = TrainState.fresh(cfg)
    init = ref.model.params.snapshot()
    expected = []
    while ref.iteration < cfg.total_iters:
        x, y = ref.sample_batch(smoke_data.train)
        step = train_step_pretrain if ref.phase == "pretrain" else train_step_autoencoding
        expected.append(step(ref, x, y).row())
        ref.iteration += 1
    assert [list(r.values()) for r in rows] == expected
    changed = _changed(init, ref.model.params)
    assert not any(n.startswith(("map.", "sty.", "disc.T.", "prior.T.")) for n in changed)


def test_disabling_autoencoding_matches_translation_only_schedule(tmp_path, smoke_cfg, smoke_data):
    a = small_cfg(smoke_cfg, enable_a=False, pretrain_iters=0, checkpoint_every=0)
    b = small_cfg(smoke_cfg, schedule="i2icodec", checkpoint_every=0)
    assert run_log(a, smoke_data, tmp_path / "a") == run_log(b, smoke_data, tmp_path / "b")
    rows = read_loss_log(tmp_path / "a" / "loss_log.csv")
    assert {r["mode"] for r in rows} == {"T"}


def test_train_state_round_trip(tmp_path, smoke_cfg, smoke_data):
    state = TrainState.fresh(small_cfg(smoke_cfg, pretrain_iters=1))
    train_step_unified(state, smoke_data.train)
    train_step_unified(state, smoke_data.train)
    state.save(tmp_path / "s.i2p")
    back = TrainState.load(tmp_path / "s.i2p")
    assert back.iteration == 2
    assert back.model.to_bytes() == state.model.to_bytes()
    for n, st in state.model.params.adam.items():
        np.testing.assert_array_equal(back.model.params.adam[n].m, st.m)
        assert back.model.params.adam[n].step == st.step
    assert back.rng_t.integers(1 << 30) == state.rng_t.integers(1 << 30)


# -- configuration validation ----------------------------------------------------------

@pytest.mark.parametrize("change, field", [
    (dict(lambda_t=-1.0), "lambda_t"),
    (dict(joint_iters=-5), "joint_iters"),
    (dict(schedule="gan"), "schedule"),
    (dict(data=DatasetSpec(image_size=32)), "data.image_size"),
])
def test_invalid_configurations_name_the_field(change, field):
    with pytest.raises(ConfigError) as info:
        TrainConfig(**change)
    assert info.value.field == field


def test_single_domain_is_rejected():
    with pytest.raises((ConfigError, ValueError)):
        TrainConfig(net=NetConfig(num_domains=1))


def test_dataset_mismatch_is_rejected(tmp_path, smoke_cfg):
    wrong = generate_dataset(DatasetSpec(image_size=32, n_train=4, n_test=1), seed=0)
    with pytest.raises(ConfigError):
        run_training(smoke_cfg, wrong.train, tmp_path)
