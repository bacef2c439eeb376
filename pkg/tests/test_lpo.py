import math

import numpy as np
import pytest
from scipy import stats

from LatentPrefPython import ConfigException, DegenerateInputException, DegenerateSamplingWarning
from tensor import RngStream, Tensor, finiteDiffGrad, grad, relativeError, zeroGrad
from denoiser import Denoiser, generate, pretrainDenoiser
import diffusion
import lpo
from lpo import (
    DpoSample,
    GroupRollout,
    LpoConfig,
    LpoTrainer,
    StepSample,
    ThresholdPolicy,
    activeSteps,
    clippedSurrogate,
    dpoLoss,
    dynamicThreshold,
    grpoAdvantages,
    grpoLoss,
    pairGap,
    selectPair,
    spoLoss,
    stepLogprob,
    )
from lrm import Lrm
import mpcf


TIMESTEPS = diffusion.inferenceTimesteps(1000, 5)


class OracleScorer(object):
    """Scores latents with the hidden reward of the synthetic task."""
    def __init__(self, targets, scale = 20.0):
        self.targets = targets
        self.scale = scale

    def scoreArray(self, xT, t, cond):
        xT = np.asarray(xT)
        ids = np.broadcast_to(np.asarray(cond.id if hasattr(cond, "id") else cond), (len(xT),))
        return self.scale * mpcf.hiddenReward(xT, ids, self.targets)


def smallConfig(**options):
    settings = dict(K = 3, epochs = 1, promptsPerEpoch = 2, inferenceSteps = 5, batchSize = 4,
                    threshold = ThresholdPolicy("constant", value = 0.0))
    settings.update(options)
    return LpoConfig(**settings)


def perturbed(net, scale = 0.05, seed = 0):
    other = net.copy()
    g = np.random.default_rng(seed)
    for _, p in other.namedParameters():
        p.assign(p.values + scale * g.standard_normal(p.shape))
    return other


def stepSample(shape, seed = 0, t = 800, tPrev = 600):
    g = np.random.default_rng(seed)
    return StepSample(g.standard_normal(shape), g.standard_normal(shape), g.standard_normal(shape), t, tPrev, 1)


def sameWeights(a, b):
    return all(np.array_equal(p.values, q.values) for (_, p), (_, q) in zip(a.namedParameters(), b.namedParameters()))


# Thresholds ---------------------------------------------------------------------

def test_threshold_policy_validation():
    with pytest.raises(ConfigException):
        ThresholdPolicy("linear")
    with pytest.raises(ConfigException):
        ThresholdPolicy(thMin = 0.6, thMax = 0.5)
    with pytest.raises(ConfigException):
        ThresholdPolicy("constant", value = 1.5)
    assert ThresholdPolicy("constant").value == 0.5


def test_lpo_config_validation():
    for options in (dict(K = 1), dict(beta = 0.0), dict(timestepLo = 500, timestepHi = 400),
                    dict(timestepHi = 1000), dict(eta = 0.0), dict(guidance = 0.5),
                    dict(softmaxOver = "middle"), dict(lrmTimestep = "half"), dict(clipEps = 1.0)):
        with pytest.raises(ConfigException):
            LpoConfig(**options).validate(1000)
    LpoConfig().validate(1000)
    assert LpoConfig(inferenceSteps = 20).timesteps(1000)[0] == 950


def test_active_steps_exclude_the_deterministic_final_step(schedule):
    steps = activeSteps(TIMESTEPS, 0, 950, 1.0, schedule)
    assert [t for t, _, _ in steps] == [800, 600, 400, 200]
    assert [tPrev for _, tPrev, _ in steps] == [600, 400, 200, 0]
    assert activeSteps(TIMESTEPS, 0, 950, 0.0, schedule) == []
    assert [t for t, _, _ in activeSteps(TIMESTEPS, 300, 700, 1.0, schedule)] == [600, 400]


def test_dynamic_threshold_endpoints(schedule):
    policy = ThresholdPolicy()
    steps = activeSteps(TIMESTEPS, 0, 950, 1.0, schedule)
    sigmas = dict((t, s) for t, _, s in steps)
    tMax = max(sigmas, key = sigmas.get)
    tMin = min(sigmas, key = sigmas.get)
    assert dynamicThreshold(tMax, policy, schedule, 0, 950, TIMESTEPS) == pytest.approx(0.5)
    assert dynamicThreshold(tMin, policy, schedule, 0, 950, TIMESTEPS) == pytest.approx(0.35)


def test_dynamic_threshold_is_monotone_in_sigma(schedule):
    for kind in ("stddev", "variance"):
        policy = ThresholdPolicy(kind)
        steps = sorted(activeSteps(TIMESTEPS, 0, 950, 1.0, schedule), key = lambda s: s[2])
        ths = [dynamicThreshold(t, policy, schedule, 0, 950, TIMESTEPS) for t, _, _ in steps]
        assert ths == sorted(ths)
        assert all(0.35 <= th <= 0.5 for th in ths)


def test_timestep_threshold_midpoint(schedule):
    policy = ThresholdPolicy("timestep")
    assert dynamicThreshold(475, policy, schedule, 0, 950) == pytest.approx(0.425)
    assert dynamicThreshold(0, policy, schedule, 0, 950) == pytest.approx(0.35)
    assert dynamicThreshold(950, policy, schedule, 0, 950) == pytest.approx(0.5)


def test_constant_threshold(schedule):
    assert dynamicThreshold(800, ThresholdPolicy("constant", value = 0.42), schedule, 0, 950, TIMESTEPS) == 0.42


def test_degenerate_threshold_ranges(schedule):
    with pytest.raises(DegenerateInputException):
        dynamicThreshold(400, ThresholdPolicy("timestep"), schedule, 400, 400)
    with pytest.raises(DegenerateInputException):
        dynamicThreshold(400, ThresholdPolicy(), schedule, 300, 500, TIMESTEPS)


def test_sigma_threshold_needs_an_inference_timestep(schedule):
    timesteps = [950, 800, 600, 400, 200, 0]
    with pytest.raises(ConfigException):
        dynamicThreshold(700, ThresholdPolicy("stddev"), schedule, 0, 950, timesteps)
    with pytest.raises(ConfigException):
        dynamicThreshold(700, ThresholdPolicy("variance"), schedule, 0, 950, timesteps)
    assert 0.35 <= dynamicThreshold(600, ThresholdPolicy("stddev"), schedule, 0, 950, timesteps) <= 0.5


# Pair selection -----------------------------------------------------------------

def test_select_pair_example():
    win, lose, gap = pairGap([2.0, 1.0, 0.0, -1.0])
    assert (win, lose) == (0, 3)
    assert gap == pytest.approx(0.90515, abs = 1e-5)
    assert selectPair([2.0, 1.0, 0.0, -1.0], 0.5) == (0, 3)
    assert selectPair([2.0, 1.0, 0.0, -1.0], 0.95) is None


def test_equal_scores_never_qualify():
    assert pairGap([0.7, 0.7, 0.7])[2] == 0.0
    assert selectPair([0.7, 0.7, 0.7], 1e-9) is None


def test_gap_is_tanh_of_half_the_spread():
    g = np.random.default_rng(0)
    for _ in range(200):
        scores = g.normal(0.0, 3.0, 4)
        gap = pairGap(scores)[2]
        assert gap == pytest.approx(math.tanh((scores.max() - scores.min()) / 2.0), abs = 1e-12)
        assert pairGap(scores + 11.0)[2] == pytest.approx(gap, abs = 1e-12)


def test_ties_take_the_lowest_index():
    assert pairGap([1.0, 1.0, 0.0, 0.0])[:2] == (0, 2)


def test_softmax_over_all_scores():
    scores = [2.0, 1.0, 0.0, -1.0]
    p = np.exp(scores) / np.exp(scores).sum()
    assert pairGap(scores, "all")[2] == pytest.approx(p[0] - p[3])
    with pytest.raises(ConfigException):
        pairGap(scores, "none")
    with pytest.raises(ConfigException):
        pairGap([1.0])


# Losses -------------------------------------------------------------------------

def test_step_logprob_matches_scipy():
    g = np.random.default_rng(1)
    x, m = g.standard_normal((2, 3, 3)), g.standard_normal((2, 3, 3))
    expected = stats.norm.logpdf(x, loc = m, scale = 0.37).sum()
    assert stepLogprob(Tensor(x), Tensor(m), 0.37).item() == pytest.approx(expected, abs = 1e-10)
    peak = stepLogprob(Tensor(m), Tensor(m), 0.37).item()
    assert peak == pytest.approx(-m.size * (math.log(0.37) + 0.5 * math.log(2.0 * math.pi)))
    assert stepLogprob(Tensor(x), Tensor(m), 0.37).item() < peak
    with pytest.raises(DegenerateInputException):
        stepLogprob(Tensor(x), Tensor(m), 0.0)


def test_spo_and_dpo_losses_at_the_reference(tinyNet, tinyConfig, schedule):
    ref = tinyNet.copy()
    sample = stepSample(tinyConfig.latentShape)
    assert spoLoss(sample, tinyNet, ref, 500.0, 1.0, schedule).item() == pytest.approx(math.log(2.0))
    g = np.random.default_rng(2)
    shape = tinyConfig.latentShape
    separate = DpoSample(*[g.standard_normal(shape) for _ in range(4)], t = 600, tPrev = 400, cond = 2)
    assert dpoLoss([separate], tinyNet, ref, 500.0, 1.0, schedule).item() == pytest.approx(math.log(2.0))


def test_spo_loss_equals_dpo_loss_on_a_shared_parent(tinyNet, tinyConfig, schedule):
    model = perturbed(tinyNet)
    samples = [stepSample(tinyConfig.latentShape, seed) for seed in range(3)]
    spo = spoLoss(samples, model, tinyNet, 2.0, 1.0, schedule).item()
    dpo = dpoLoss([DpoSample.fromStepSample(s) for s in samples], model, tinyNet, 2.0, 1.0, schedule).item()
    assert spo == pytest.approx(dpo, rel = 1e-12)
    assert spo != pytest.approx(math.log(2.0))


def test_spo_loss_decreases_with_the_margin(tinyNet, tinyConfig, schedule):
    model = perturbed(tinyNet)
    sample = stepSample(tinyConfig.latentShape)
    margin = lpo.dpoMargins([DpoSample.fromStepSample(sample)], model, tinyNet, 1.0, schedule).numpy()[0]
    losses = [spoLoss(sample, model, tinyNet, beta, 1.0, schedule).item() for beta in (0.5, 1.0, 2.0)]
    if margin > 0:
        assert losses[0] > losses[1] > losses[2]
    else:
        assert losses[0] < losses[1] < losses[2]


def test_spo_loss_gradient_matches_finite_differences(tinyNet, tinyConfig, schedule):
    model = perturbed(tinyNet)
    samples = [stepSample(tinyConfig.latentShape, seed, t = 600, tPrev = 400) for seed in range(2)]
    params = model.parameters()
    zeroGrad(params)
    analytic = grad(spoLoss(samples, model, tinyNet, 1.0, 1.0, schedule))
    coords = dict((p, list(range(0, p.size, max(1, p.size // 4)))) for p in params)
    numeric = finiteDiffGrad(lambda: spoLoss(samples, model, tinyNet, 1.0, 1.0, schedule), params, coords = coords)
    for p in params:
        idx = coords[p]
        assert relativeError(analytic[p].flat[idx], numeric[p].flat[idx], floor = 1e-5) < 1e-4, p.name


@pytest.mark.slow
def test_preference_loss_gradients_match_finite_differences_100_seeds(tinyNet, tinyConfig, schedule, gradientError):
    shape = tinyConfig.latentShape
    sigma = diffusion.ddimSigma(600, 400, 1.0, schedule)
    for seed in range(100):
        model = perturbed(tinyNet, seed = seed)
        old = perturbed(model, scale = 1e-4, seed = seed + 1000)
        g = np.random.default_rng(seed)
        step = stepSample(shape, seed, t = 600, tPrev = 400)
        pair = DpoSample(*[g.standard_normal(shape) for _ in range(4)], t = 600, tPrev = 400, cond = 1 + seed % 2)
        rollout = GroupRollout(g.standard_normal(shape), g.standard_normal((4,) + shape), g.standard_normal(4),
                               600, 400, 1 + seed % 2, np.zeros(shape), sigma)
        losses = {
            "spo": lambda: spoLoss([step], model, tinyNet, 1.0, 1.0, schedule),
            "dpo": lambda: dpoLoss([pair], model, tinyNet, 1.0, 1.0, schedule),
            "grpo": lambda: grpoLoss([rollout], model, old, tinyNet, 0.1, 0.1, 1.0, schedule),
            }
        for name, loss in sorted(losses.items()):
            assert gradientError(loss, model.parameters(), seed, floor = 1e-3) < 1e-4, "%s seed %s" % (name, seed)


def test_loss_arguments(tinyNet, tinyConfig, schedule):
    with pytest.raises(ConfigException):
        dpoLoss([], tinyNet, tinyNet, 1.0, 1.0, schedule)
    with pytest.raises(ConfigException):
        dpoLoss([DpoSample.fromStepSample(stepSample(tinyConfig.latentShape))], tinyNet, tinyNet, 0.0, 1.0, schedule)
    x = np.ones(tinyConfig.latentShape)
    with pytest.raises(DegenerateInputException):
        StepSample(x, x, x, 800, 600, 1)


def test_grpo_advantages():
    assert np.allclose(grpoAdvantages([1, 2, 3, 4]), [-1.34164, -0.44721, 0.44721, 1.34164], atol = 1e-5)
    assert np.array_equal(grpoAdvantages([3.0, 3.0, 3.0]), np.zeros(3))
    g = np.random.default_rng(3)
    for _ in range(20):
        r = g.standard_normal(6)
        a = grpoAdvantages(r)
        assert abs(a.mean()) < 1e-12
        assert a.std() == pytest.approx(1.0, abs = 1e-10)
        assert np.allclose(grpoAdvantages(4.0 * r - 7.0), a, atol = 1e-12)
    with pytest.raises(ConfigException):
        grpoAdvantages([1.0])


def test_clipped_surrogate():
    assert clippedSurrogate(Tensor([2.0]), np.array([1.0]), 0.1).numpy()[0] == pytest.approx(1.1)
    assert clippedSurrogate(Tensor([0.5]), np.array([1.0]), 0.1).numpy()[0] == pytest.approx(0.5)
    assert clippedSurrogate(Tensor([2.0]), np.array([-1.0]), 0.1).numpy()[0] == pytest.approx(-2.0)
    assert clippedSurrogate(Tensor([0.5]), np.array([-1.0]), 0.1).numpy()[0] == pytest.approx(-0.9)


def test_grpo_loss_is_zero_at_the_snapshot(tinyNet, tinyConfig, schedule):
    g = np.random.default_rng(4)
    sigma = diffusion.ddimSigma(800, 600, 1.0, schedule)
    rollout = GroupRollout(g.standard_normal(tinyConfig.latentShape), g.standard_normal((4,) + tinyConfig.latentShape),
                           [1.0, 2.0, 3.0, 4.0], 800, 600, 1, np.zeros(tinyConfig.latentShape), sigma)
    loss = grpoLoss([rollout], tinyNet, tinyNet.copy(), tinyNet.copy(), 0.1, 0.1, 1.0, schedule)
    assert abs(loss.item()) < 1e-12
    assert grpoLoss(rollout, perturbed(tinyNet), tinyNet, tinyNet, 0.1, 0.1, 1.0, schedule).item() != 0.0
    with pytest.raises(ConfigException):
        grpoLoss([rollout], tinyNet, tinyNet, tinyNet, 1.5, 0.1, 1.0, schedule)


def test_uninformative_groups():
    rollout = GroupRollout(np.zeros((1, 2, 2)), np.ones((3, 1, 2, 2)), [0.2, 0.2, 0.2], 800, 600, 1, np.zeros((1, 2, 2)), 0.5)
    assert not rollout.isInformative


# Trainers -----------------------------------------------------------------------

@pytest.fixture
def tinyLrm(tinyNet):
    return Lrm.fromDenoiser(tinyNet, RngStream(21).derive("head"), nD = 8)


def test_run_lpo_records_samples_and_updates(tinyNet, tinyLrm, schedule):
    before = tinyNet.copy()
    config = smallConfig(epochs = 2)
    net, history = lpo.runLpo(config, tinyNet, tinyLrm, [1, 2], RngStream(3), schedule, rewardFn = lambda net: 0.25)
    assert [h["epoch"] for h in history] == [-1, 0, 1]
    assert history[0]["oracle_reward"] == 0.25
    first = history[1]
    assert set(first["counts_per_timestep"]) == {"800", "600", "400", "200"}
    assert first["samples"] == sum(first["counts_per_timestep"].values())
    assert first["samples"] > 0
    assert np.isfinite(first["mean_loss"])
    assert first["update_norm"] > 0.0
    assert not sameWeights(net, before)


def test_threshold_of_one_leaves_the_model_unchanged(tinyNet, tinyLrm, schedule):
    before = tinyNet.copy()
    config = smallConfig(threshold = ThresholdPolicy("constant", value = 1.0))
    with pytest.warns(DegenerateSamplingWarning):
        net, history = lpo.runLpo(config, tinyNet, tinyLrm, [1], RngStream(3), schedule)
    assert history[0]["samples"] == 0
    assert history[0]["mean_loss"] is None
    assert sameWeights(net, before)


def test_sample_count_is_nonincreasing_in_the_threshold(tinyNet, tinyLrm, schedule):
    counts = []
    for value in (0.0, 0.2, 0.5, 0.8):
        trainer = LpoTrainer(smallConfig(threshold = ThresholdPolicy("constant", value = value), promptsPerEpoch = 4), tinyLrm, schedule)
        counts.append(len(trainer.collectSamples(tinyNet, [1, 2], RngStream(9))[0]))
    assert counts == sorted(counts, reverse = True)


def test_sigma_threshold_keeps_at_least_the_constant_maximum(tinyNet, task, schedule):
    # Rollouts do not depend on the threshold, so both trainers see the same
    # candidates and the sigma-scaled threshold (never above 0.5) keeps a superset.
    scorer = OracleScorer(task.targets)
    counts = dict()
    for name, policy in (("stddev", ThresholdPolicy("stddev")), ("constant", ThresholdPolicy("constant", value = 0.5))):
        trainer = LpoTrainer(LpoConfig(K = 4, inferenceSteps = 10, promptsPerEpoch = 8, threshold = policy), scorer, schedule)
        counts[name] = trainer.collectSamples(tinyNet, [1, 2], RngStream(12))[1]
    assert set(counts["stddev"]) == set(counts["constant"])
    for t in counts["stddev"]:
        assert counts["stddev"][t] >= counts["constant"][t], t
    assert sum(counts["stddev"].values()) >= sum(counts["constant"].values())


def test_parallel_rollouts_match_serial(tinyNet, tinyLrm, schedule):
    serial = LpoTrainer(smallConfig(promptsPerEpoch = 3), tinyLrm, schedule).rollout(tinyNet, [1, 2], RngStream(5))
    parallel = LpoTrainer(smallConfig(promptsPerEpoch = 3, workers = 3), tinyLrm, schedule).rollout(tinyNet, [1, 2], RngStream(5))
    for (condA, groupsA), (condB, groupsB) in zip(serial, parallel):
        assert condA == condB
        for a, b in zip(groupsA, groupsB):
            assert np.array_equal(a[1], b[1])
            assert np.array_equal(a[2], b[2])


def test_lrm_timestep_modes(tinyLrm, schedule):
    assert LpoTrainer(smallConfig(), tinyLrm, schedule).lrmTimestep(600) == 600
    assert LpoTrainer(smallConfig(lrmTimestep = "zero"), tinyLrm, schedule).lrmTimestep(600) == 0


def test_trainer_needs_stochastic_steps(tinyLrm, schedule):
    with pytest.raises(ConfigException):
        LpoTrainer(smallConfig(timestepLo = 0, timestepHi = 100), tinyLrm, schedule)


def test_run_grpo_is_deterministic(tinyNet, tinyLrm, schedule):
    results = []
    for _ in range(2):
        net = tinyNet.copy()
        results.append(lpo.runGrpo(smallConfig(), net, tinyLrm, [1, 2], RngStream(6), schedule))
    (netA, historyA), (netB, historyB) = results
    assert historyA == historyB
    assert sameWeights(netA, netB)
    assert historyA[0]["samples"] > 0


def test_run_dpo_uses_every_pair(tinyNet, task, schedule):
    pairs = [sp.pair for sp in mpcf.generateCorpus(task, 6, RngStream(0))]
    before = tinyNet.copy()
    net, history = lpo.runDpo(smallConfig(beta = 5.0), tinyNet, pairs, RngStream(7), schedule)
    assert history[0]["samples"] == 6
    assert sum(history[0]["counts_per_timestep"].values()) == 6
    assert np.isfinite(history[0]["mean_loss"])
    assert not sameWeights(net, before)
    with pytest.raises(ConfigException):
        lpo.runDpo(smallConfig(), tinyNet, [], RngStream(7), schedule)


def pretrainedTiny(tinyConfig, task, schedule):
    net = Denoiser(tinyConfig, RngStream(3))
    pretrainDenoiser(task.dataset(256, RngStream(1)), net, 800, 0.01, RngStream(4), schedule, batchSize = 16)
    return net


def oracleReward(model, task, schedule, n = 256):
    """Mean hidden reward of n deterministic samples; every call sees the same seeds."""
    sampler = diffusion.SamplerConfig(0.0, diffusion.inferenceTimesteps(1000, 10))
    ids = np.array([1 + i % (task.config.vocab - 1) for i in range(n)])
    return float(mpcf.hiddenReward(generate(model, ids, RngStream(11), schedule, sampler), ids, task.targets).mean())


def tuningConfig(**options):
    settings = dict(K = 6, epochs = 3, promptsPerEpoch = 32, inferenceSteps = 10)
    settings.update(options)
    return LpoConfig(**settings)


@pytest.mark.slow
def test_full_range_lpo_beats_the_low_noise_quarter(tinyConfig, task, schedule):
    net = pretrainedTiny(tinyConfig, task, schedule)
    base = oracleReward(net, task, schedule)
    scorer = OracleScorer(task.targets, scale = 100.0)

    def gain(**options):
        tuned, _ = lpo.runLpo(tuningConfig(**options), net.copy(), scorer, [1, 2], RngStream(8), schedule)
        return oracleReward(tuned, task, schedule) - base

    full = gain()
    low = gain(timestepHi = 250)
    constant = gain(threshold = ThresholdPolicy("constant", value = 0.5))
    assert low > 0.0
    assert full > low
    assert full >= constant - 0.02


@pytest.mark.slow
def test_grpo_improves_the_oracle_reward(tinyConfig, task, schedule):
    net = pretrainedTiny(tinyConfig, task, schedule)
    base = oracleReward(net, task, schedule)
    config = tuningConfig()
    assert (config.clipEps, config.klBeta) == (0.1, 0.1)
    tuned, history = lpo.runGrpo(config, net.copy(), OracleScorer(task.targets), [1, 2], RngStream(9), schedule)
    assert all(h["samples"] > 0 for h in history)
    assert oracleReward(tuned, task, schedule) > base
