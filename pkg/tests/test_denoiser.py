import numpy as np
import pytest

from LatentPrefPython import ConfigException, DivergenceException, ShapeException
from tensor import RngStream, Tensor, asTensor, finiteDiffGrad, grad, relativeError, zeroGrad
import denoiser
from denoiser import (
    NULL_CONDITION,
    Condition,
    DenoiserConfig,
    DivergenceGuard,
    Denoiser,
    cfgEval,
    denoiseForward,
    epsilonLoss,
    generate,
    pretrainDenoiser,
    timestepEmbed,
    )
import diffusion
import mpcf


class ConstantNet(object):
    """Predicts 1 for a real prompt and 0 for the null prompt."""
    def forward(self, x, t, cond):
        ids = denoiser.conditionIds(cond)
        value = 0.0 if np.all(ids == NULL_CONDITION) else 1.0
        return Tensor(np.full(asTensor(x).shape, value)), None


def test_timestep_embed_at_zero():
    e = timestepEmbed(0, 8).numpy()
    assert np.array_equal(e[0::2], np.zeros(4))
    assert np.array_equal(e[1::2], np.ones(4))


def test_timestep_embed_is_injective_and_bounded():
    e = timestepEmbed(np.arange(1000), 16).numpy()
    assert len(np.unique(np.round(e, 12), axis = 0)) == 1000
    assert np.all(np.linalg.norm(e, axis = 1) <= np.sqrt(16) + 1e-12)


def test_timestep_embed_rejects_odd_width():
    with pytest.raises(ConfigException):
        timestepEmbed(3, 5)


def test_config_validation():
    with pytest.raises(ConfigException):
        DenoiserConfig(L = 0)
    with pytest.raises(ConfigException):
        DenoiserConfig(width = 2)
    with pytest.raises(ConfigException):
        DenoiserConfig(size = 6, L = 2)
    cfg = DenoiserConfig()
    assert cfg.widths == [16, 32]
    assert cfg.midWidth == 32
    assert cfg.featureDim == 80
    assert DenoiserConfig(**cfg.asDict()) == cfg


def test_forward_shapes_and_taps(tinyNet, tinyConfig):
    x = np.random.default_rng(0).standard_normal(tinyConfig.latentShape)
    eps, feats = denoiseForward(x, 500, 1, tinyNet)
    assert eps.shape == tinyConfig.latentShape
    assert len(feats.vDown) == tinyConfig.L
    assert [v.shape[0] for v in feats.vDown] == tinyConfig.widths
    assert feats.vMid.shape == (tinyConfig.midWidth,)


def test_forward_batch_matches_single(tinyNet, tinyConfig):
    g = np.random.default_rng(1)
    xs = g.standard_normal((3,) + tinyConfig.latentShape)
    ts = np.array([10, 400, 900])
    ids = [1, 2, 0]
    batch, feats = tinyNet.forward(xs, ts, ids)
    assert feats.vMid.shape == (3, tinyConfig.midWidth)
    for i in range(3):
        single = tinyNet.forward(xs[i], int(ts[i]), ids[i])[0].numpy()
        assert np.allclose(batch.numpy()[i], single, atol = 1e-12)


def test_forward_is_deterministic(tinyNet, tinyConfig):
    x = np.random.default_rng(2).standard_normal(tinyConfig.latentShape)
    a = tinyNet.forward(x, 300, Condition(2))
    b = tinyNet.forward(x, 300, Condition(2))
    assert np.array_equal(a[0].numpy(), b[0].numpy())
    assert np.array_equal(a[1].vMid.numpy(), b[1].vMid.numpy())


def test_forward_rejects_wrong_shape(tinyNet):
    with pytest.raises(ShapeException):
        tinyNet.forward(np.zeros((3, 4, 4)), 10, 1)


def test_condition_out_of_vocabulary(tinyNet):
    with pytest.raises(ConfigException):
        tinyNet.condition(7)
    assert tinyNet.condition(0).isNull


def test_cfg_guidance_one_is_the_conditional_prediction(tinyNet, tinyConfig):
    x = np.random.default_rng(3).standard_normal(tinyConfig.latentShape)
    assert np.array_equal(cfgEval(x, 200, 1, tinyNet, 1.0).numpy(), tinyNet.forward(x, 200, 1)[0].numpy())


def test_cfg_formula():
    out = cfgEval(Tensor([0.5]), 10, 1, ConstantNet(), 2.0)
    assert out.item() == pytest.approx(2.0)


def test_cfg_is_linear_in_guidance(tinyNet, tinyConfig):
    x = np.random.default_rng(4).standard_normal(tinyConfig.latentShape)
    e1, e2, e3 = (cfgEval(x, 200, 2, tinyNet, g).numpy() for g in (1.0, 2.0, 3.0))
    assert np.allclose(e3 - e2, e2 - e1, atol = 1e-12)
    with pytest.raises(ConfigException):
        cfgEval(x, 200, 2, tinyNet, 0.5)


def test_pretraining_loss_gradient_matches_finite_differences(tinyNet, tinyConfig, schedule):
    g = np.random.default_rng(5)
    x0 = g.standard_normal((2,) + tinyConfig.latentShape)
    eps = g.standard_normal((2,) + tinyConfig.latentShape)
    t = np.array([100, 700])
    ids = np.array([1, 0])
    params = tinyNet.parameters()
    zeroGrad(params)
    analytic = grad(epsilonLoss(tinyNet, x0, t, eps, ids, schedule))
    coords = dict((p, list(range(0, p.size, max(1, p.size // 5)))) for p in params)
    numeric = finiteDiffGrad(lambda: epsilonLoss(tinyNet, x0, t, eps, ids, schedule), params, coords = coords)
    for p in params:
        idx = coords[p]
        assert relativeError(analytic[p].flat[idx], numeric[p].flat[idx], floor = 1e-6) < 1e-4, p.name


@pytest.mark.slow
def test_pretraining_loss_gradient_matches_finite_differences_100_seeds(tinyConfig, schedule, gradientError):
    shape = (2,) + tinyConfig.latentShape
    for seed in range(100):
        net = Denoiser(tinyConfig, RngStream(seed).derive("init"))
        g = np.random.default_rng(seed)
        x0, eps = g.standard_normal(shape), g.standard_normal(shape)
        t = g.integers(0, 1000, 2)
        ids = g.integers(0, tinyConfig.vocab, 2)
        loss = lambda: epsilonLoss(net, x0, t, eps, ids, schedule)
        assert gradientError(loss, net.parameters(), seed) < 1e-4, "seed %s" % seed


def test_zero_steps_leave_the_net_unchanged(tinyNet, task, schedule):
    before = [p.values.copy() for p in tinyNet.parameters()]
    data = task.dataset(8, RngStream(1))
    net, curve = pretrainDenoiser(data, tinyNet, 0, 0.01, RngStream(2), schedule)
    assert curve == []
    assert all(np.array_equal(a, p.values) for a, p in zip(before, net.parameters()))


def test_identical_seeds_give_identical_weights(tinyConfig, task, schedule):
    data = task.dataset(16, RngStream(1))
    nets = []
    for _ in range(2):
        net = Denoiser(tinyConfig, RngStream(3))
        pretrainDenoiser(data, net, 5, 0.01, RngStream(4), schedule, batchSize = 4)
        nets.append(net)
    for (name, a), (_, b) in zip(nets[0].namedParameters(), nets[1].namedParameters()):
        assert np.array_equal(a.values, b.values), name


def test_pretraining_rejects_empty_dataset(tinyNet, tinyConfig, schedule):
    empty = (np.zeros((0,) + tinyConfig.latentShape), np.zeros(0, dtype = np.int64))
    with pytest.raises(ConfigException):
        pretrainDenoiser(empty, tinyNet, 1, 0.01, RngStream(0), schedule)


def test_divergence_guard_aborts_with_the_curve():
    guard = DivergenceGuard(factor = 10.0, patience = 3)
    guard.update(1.0)
    guard.update(20.0)
    guard.update(5.0)
    guard.update(20.0)
    guard.update(30.0)
    with pytest.raises(DivergenceException) as info:
        guard.update(40.0)
    assert info.value.lossCurve == [1.0, 20.0, 5.0, 20.0, 30.0, 40.0]


def test_copy_is_independent(tinyNet):
    other = tinyNet.copy()
    p = other.params["out.b"]
    p.assign(p.values + 1.0)
    assert not np.array_equal(p.values, tinyNet.params["out.b"].values)


def test_load_named_parameters_checks_names(tinyNet, tinyConfig):
    named = tinyNet.namedParameters()[1:]
    with pytest.raises(ShapeException):
        Denoiser(tinyConfig, RngStream(0)).loadNamedParameters([(n, p.values) for n, p in named])


def test_synthetic_task_targets(task, tinyConfig):
    assert task.targets.shape == (tinyConfig.vocab,) + tinyConfig.latentShape
    assert np.array_equal(task.targets[0], np.zeros(tinyConfig.latentShape))
    exact = task.sampleLatents([1, 2], RngStream(0), align = 1.0, rough = 0.0)
    assert np.allclose(exact, task.targets[[1, 2]])
    latents, ids = task.dataset(10, RngStream(1))
    assert latents.shape == (10,) + tinyConfig.latentShape
    assert np.all((ids >= 1) & (ids < tinyConfig.vocab))


def test_generate_is_deterministic_at_eta_zero(tinyNet, schedule):
    config = diffusion.SamplerConfig(0.0, diffusion.inferenceTimesteps(1000, 5))
    a = generate(tinyNet, [1, 2], RngStream(8), schedule, config)
    b = generate(tinyNet, [1, 2], RngStream(8), schedule, config)
    assert a.shape == (2,) + tinyNet.config.latentShape
    assert np.array_equal(a, b)


@pytest.mark.slow
def test_pretraining_reduces_the_loss(tinyConfig, task, schedule):
    net = Denoiser(tinyConfig, RngStream(3))
    data = task.dataset(256, RngStream(1))
    _, curve = pretrainDenoiser(data, net, 1500, 0.01, RngStream(4), schedule, batchSize = 16)
    assert np.mean(curve[-100:]) < 0.8 * np.mean(curve[:20])


@pytest.mark.slow
def test_trained_net_generates_better_aligned_samples(tinyConfig, task, schedule):
    untrained = Denoiser(tinyConfig, RngStream(3))
    trained = untrained.copy()
    pretrainDenoiser(task.dataset(256, RngStream(1)), trained, 1500, 0.01, RngStream(4), schedule, batchSize = 16)
    config = diffusion.SamplerConfig(0.0, diffusion.inferenceTimesteps(1000, 20))
    ids = np.array([1 + i % (tinyConfig.vocab - 1) for i in range(256)])
    rewards = []
    for net in (untrained, trained):
        x0 = generate(net, ids, RngStream(11), schedule, config)
        rewards.append(mpcf.hiddenReward(x0, ids, task.targets).mean())
    assert rewards[1] > rewards[0]
