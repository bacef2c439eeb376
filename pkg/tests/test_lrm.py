import math

import numpy as np
import pytest

from LatentPrefPython import ConfigException, DegenerateInputException, ShapeException
from tensor import Parameter, RngStream, SgdMomentum, Tensor, add, finiteDiffGrad, grad, relativeError, zeroGrad
from denoiser import Condition
import diffusion
import lrm
from lrm import (
    Lrm,
    LrmHead,
    LrmTrainer,
    PreferencePair,
    btLoss,
    btLossFromScores,
    encodeText,
    lrmScore,
    lrmScoreBatch,
    pairsToArrays,
    pairwiseAccuracy,
    scoreFromFeatures,
    vfe,
    )
import mpcf


def makeLrm(net, seed = 1, gs = lrm.DEFAULT_GS, nD = 8):
    return Lrm.fromDenoiser(net, RngStream(seed).derive("head"), gs = gs, nD = nD)


def makePairs(task, n, seed = 0, labelNoise = 0.0, margin = 0.0):
    return [sp.pair for sp in mpcf.generateCorpus(task, n, RngStream(seed), labelNoise = labelNoise, margin = margin)]


def test_vfe_example():
    assert np.allclose(vfe(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), 7.5).numpy(), [7.5, -6.5])


def test_vfe_is_disabled_at_gs_one():
    v = Tensor([0.3, -1.2, 4.0])
    assert vfe(v, Tensor([9.0, 9.0, 9.0]), 1.0) is v


def test_vfe_with_equal_inputs_returns_the_input():
    v = np.array([0.25, -0.5])
    assert np.array_equal(vfe(v, v, 3.0).numpy(), v)


def test_vfe_rejects_bad_arguments():
    with pytest.raises(ConfigException):
        vfe([1.0], [0.0], 0.9)
    with pytest.raises(ShapeException):
        vfe([1.0, 2.0], [0.0], 2.0)


def test_encode_text_with_identity_projection():
    head = LrmHead(4, 10, nD = 4)
    head.textProj.assign(np.eye(4))
    embedding = np.array([0.5, -1.0, 2.0, 0.0])
    assert np.array_equal(encodeText(Condition(1, embedding), head).numpy(), embedding)


def test_encode_text_zero_projection_gives_zero_vector(tinyNet):
    head = LrmHead(tinyNet.config.nP, tinyNet.config.featureDim, nD = 6)
    assert np.array_equal(encodeText(2, head, tinyNet).numpy(), np.zeros(6))
    with pytest.raises(ConfigException):
        encodeText(2, head)


def test_score_from_features_bounds():
    tau = math.exp(lrm.TAU_INIT_LOG)
    assert tau == pytest.approx(14.2857, abs = 1e-3)
    logTau = Parameter(np.array(lrm.TAU_INIT_LOG))
    assert scoreFromFeatures(Tensor([[1.0, 2.0]]), Tensor([[2.0, 4.0]]), logTau).numpy()[0] == pytest.approx(tau)
    assert abs(scoreFromFeatures(Tensor([[1.0, 0.0]]), Tensor([[0.0, 3.0]]), logTau).numpy()[0]) < 1e-10
    a = scoreFromFeatures(Tensor([[0.3, -0.7, 1.1]]), Tensor([[1.0, 0.5, 0.2]]), logTau).numpy()
    b = scoreFromFeatures(Tensor([[3.0, -7.0, 11.0]]), Tensor([[1.0, 0.5, 0.2]]), logTau).numpy()
    assert np.allclose(a, b, atol = 1e-12)


def test_scores_are_bounded_by_tau(tinyNet, tinyConfig):
    model = makeLrm(tinyNet)
    g = np.random.default_rng(0)
    x = 3.0 * g.standard_normal((32,) + tinyConfig.latentShape)
    scores = model.scoreArray(x, g.integers(0, 1000, 32), g.integers(0, tinyConfig.vocab, 32))
    assert np.all(np.abs(scores) <= model.head.tau + 1e-12)


def test_single_score_matches_batch(tinyNet, tinyConfig):
    model = makeLrm(tinyNet)
    x = np.random.default_rng(1).standard_normal((2,) + tinyConfig.latentShape)
    batch = lrmScoreBatch(x, 300, 1, model).numpy()
    assert lrmScore(x[1], 300, Condition(1), model).item() == pytest.approx(batch[1], abs = 1e-12)
    assert np.allclose(model.scoreArray(x, 300, 1), batch, atol = 1e-12)
    with pytest.raises(ShapeException):
        lrmScore(x, 300, 1, model)


def test_zero_visual_projection_is_degenerate(tinyNet, tinyConfig):
    cfg = tinyNet.config
    model = Lrm(tinyNet, LrmHead(cfg.nP, cfg.featureDim, nD = 4))
    with pytest.raises(DegenerateInputException):
        lrmScore(np.ones(tinyConfig.latentShape), 10, 1, model)


def test_lrm_construction_checks(tinyNet):
    cfg = tinyNet.config
    with pytest.raises(ConfigException):
        Lrm(tinyNet, LrmHead(cfg.nP, cfg.featureDim, rng = RngStream(0)), gs = 0.5)
    with pytest.raises(ShapeException):
        Lrm(tinyNet, LrmHead(cfg.nP, cfg.featureDim + 1, rng = RngStream(0)))


def test_bt_loss_examples():
    assert btLossFromScores(Tensor(1.0), Tensor(1.0)).item() == pytest.approx(math.log(2.0))
    assert btLossFromScores(Tensor(math.log(3.0)), Tensor(0.0)).item() == pytest.approx(math.log(4.0 / 3.0))
    assert btLossFromScores(Tensor(4.0), Tensor(-2.0), 0.5).item() == pytest.approx(btLossFromScores(Tensor(-2.0), Tensor(4.0), 0.5).item())


def test_bt_loss_swap_identity():
    for sW, sL in [(0.3, -1.1), (5.0, 4.0), (-2.0, 1.5)]:
        loss = btLossFromScores(Tensor(sW), Tensor(sL)).item()
        swapped = btLossFromScores(Tensor(sL), Tensor(sW)).item()
        assert swapped == pytest.approx(-math.log(1.0 - math.exp(-loss)), rel = 1e-9)


def test_bt_loss_survives_large_scores():
    loss = btLossFromScores(Tensor([900.0]), Tensor([-900.0])).item()
    assert np.isfinite(loss) and loss == pytest.approx(0.0, abs = 1e-12)
    assert btLossFromScores(Tensor([-900.0]), Tensor([900.0])).item() == pytest.approx(1800.0)


def test_bt_loss_gradient_matches_finite_differences(tinyNet, tinyConfig, schedule):
    model = makeLrm(tinyNet, nD = 4)
    g = np.random.default_rng(2)
    pair = PreferencePair(g.standard_normal(tinyConfig.latentShape), g.standard_normal(tinyConfig.latentShape), 1)
    epsW = g.standard_normal(tinyConfig.latentShape)
    epsL = g.standard_normal(tinyConfig.latentShape)
    head = model.head.parameters()
    zeroGrad(model.parameters())
    analytic = grad(btLoss(pair, 250, epsW, epsL, model, schedule))
    coords = {head[0]: [0, 5], head[1]: [0, 7, 13], head[2]: [0]}
    numeric = finiteDiffGrad(lambda: btLoss(pair, 250, epsW, epsL, model, schedule), head, coords = coords)
    for p in head:
        idx = coords[p]
        assert relativeError(analytic[p].flat[idx], numeric[p].flat[idx], floor = 1e-4) < 1e-4, p.name


@pytest.mark.slow
def test_bt_loss_gradient_matches_finite_differences_100_seeds(tinyNet, tinyConfig, schedule, gradientError):
    shape = tinyConfig.latentShape
    for seed in range(100):
        model = makeLrm(tinyNet, seed = seed, nD = 4)
        g = np.random.default_rng(seed)
        pair = PreferencePair(g.standard_normal(shape), g.standard_normal(shape), 1 + seed % 2)
        epsW, epsL = g.standard_normal(shape), g.standard_normal(shape)
        t = int(g.integers(0, 1000))
        loss = lambda: btLoss(pair, t, epsW, epsL, model, schedule)
        assert gradientError(loss, model.parameters(), seed) < 1e-4, "seed %s" % seed


def test_preference_pair_validation():
    with pytest.raises(DegenerateInputException):
        PreferencePair(np.ones((2, 4, 4)), np.ones((2, 4, 4)), 1)
    with pytest.raises(ShapeException):
        PreferencePair(np.ones((2, 4, 4)), np.ones((2, 2, 2)), 1)
    pair = PreferencePair(np.ones((2, 4, 4)), np.zeros((2, 4, 4)), 2)
    assert pair.cond.id == 2
    back = pair.swapped()
    assert back.target == 0.0
    assert np.array_equal(back.x0Win, pair.x0Lose)


def test_pairs_to_arrays():
    with pytest.raises(ConfigException):
        pairsToArrays([])
    pairs = [PreferencePair(np.full((1, 2, 2), i + 1.0), np.zeros((1, 2, 2)), 1 + i % 2, 1.0 - 0.5 * (i == 2)) for i in range(3)]
    x0W, x0L, ids, targets = pairsToArrays(pairs)
    assert x0W.shape == (3, 1, 2, 2)
    assert list(ids) == [1, 2, 1]
    assert list(targets) == [1.0, 1.0, 0.5]


def test_oracle_scorer_is_perfectly_accurate_on_clean_latents(task, schedule):
    pairs = makePairs(task, 60)
    oracle = lambda x, t, ids: mpcf.hiddenReward(x, ids, task.targets)
    assert pairwiseAccuracy(pairs, diffusion.X0_LEVEL, oracle, RngStream(3), schedule) == 1.0


def test_constant_scorer_counts_ties_as_half(task, schedule):
    pairs = makePairs(task, 10)
    constant = lambda x, t, ids: np.zeros(len(x))
    assert pairwiseAccuracy(pairs, 0, constant, RngStream(3), schedule) == 0.5


def test_random_scorer_is_near_chance(task, schedule):
    pairs = makePairs(task, 400)
    g = np.random.default_rng(4)
    noise = lambda x, t, ids: g.standard_normal(len(x))
    # binomial sd at n = 400 is 0.025
    assert abs(pairwiseAccuracy(pairs, 0, noise, RngStream(3), schedule) - 0.5) < 0.1


def test_training_is_reproducible(tinyNet, task, schedule):
    pairs = makePairs(task, 12)
    results = []
    for _ in range(2):
        model = makeLrm(tinyNet)
        _, curve = LrmTrainer(schedule, lr = 0.01, batchSize = 4).train(pairs, model, 3, RngStream(7))
        results.append((model, curve, pairwiseAccuracy(pairs, 0, model, RngStream(8), schedule)))
    assert results[0][1] == results[1][1]
    assert results[0][2] == results[1][2]
    for (name, a), (_, b) in zip(results[0][0].namedParameters(), results[1][0].namedParameters()):
        assert np.array_equal(a.values, b.values), name


def test_zero_training_steps(tinyNet, task, schedule):
    model = makeLrm(tinyNet)
    before = [p.values.copy() for p in model.parameters()]
    _, curve = lrm.trainLrm(makePairs(task, 4), model, 0, 0.01, RngStream(7), schedule)
    assert curve == []
    assert all(np.array_equal(a, p.values) for a, p in zip(before, model.parameters()))
    with pytest.raises(ConfigException):
        lrm.trainLrm([], model, 1, 0.01, RngStream(7), schedule)


def test_training_leaves_the_optimized_model_alone(tinyNet, task, schedule):
    before = [p.values.copy() for p in tinyNet.parameters()]
    model = makeLrm(tinyNet)
    lrm.trainLrm(makePairs(task, 8), model, 2, 0.05, RngStream(7), schedule, batchSize = 4)
    assert all(np.array_equal(a, p.values) for a, p in zip(before, tinyNet.parameters()))


def test_full_batch_loss_decreases_at_small_lr(tinyNet, task, schedule):
    model = makeLrm(tinyNet)
    pairs = makePairs(task, 6)
    g = np.random.default_rng(9)
    draws = [(int(g.integers(0, 1000)), g.standard_normal(p.x0Win.shape), g.standard_normal(p.x0Win.shape)) for p in pairs]

    def batchLoss():
        total = None
        for pair, (t, epsW, epsL) in zip(pairs, draws):
            loss = btLoss(pair, t, epsW, epsL, model, schedule)
            total = loss if total is None else add(total, loss)
        return total * (1.0 / len(pairs))

    opt = SgdMomentum(model.parameters(), 1e-4, momentum = 0.0)
    losses = []
    for _ in range(10):
        opt.zeroGrad()
        loss = batchLoss()
        grad(loss)
        opt.step()
        losses.append(loss.item())
    assert all(b < a for a, b in zip(losses, losses[1:]))


@pytest.mark.slow
def test_untrained_heads_rank_at_chance_on_average(tinyNet, task, schedule):
    # Negating the visual projection flips every score, so the accuracy of a
    # freshly drawn head is symmetric about one half.
    held = makePairs(task, 200, seed = 1, margin = 1.0)
    accs = [pairwiseAccuracy(held, 0, makeLrm(tinyNet, seed = seed), RngStream(8), schedule) for seed in range(400)]
    assert np.mean(accs) == pytest.approx(0.5, abs = 0.05)


@pytest.mark.slow
def test_training_separates_held_out_pairs(tinyNet, task, schedule):
    train = makePairs(task, 1000, seed = 0, margin = 1.0)
    held = makePairs(task, 300, seed = 1, margin = 1.0)
    model = makeLrm(tinyNet)
    LrmTrainer(schedule, lr = 0.01, batchSize = 16, warmupSteps = 50).train(train, model, 3000, RngStream(7))
    assert pairwiseAccuracy(held, 0, model, RngStream(8), schedule) >= 0.90

    x0W, x0L, ids, _ = pairsToArrays(held)
    early = model.scoreArray(x0W, 0, ids) > model.scoreArray(x0L, 0, ids)
    late = model.scoreArray(x0W, 750, ids) > model.scoreArray(x0L, 750, ids)
    assert np.any(early != late)


@pytest.mark.slow
def test_feature_enhancement_favours_alignment_over_aesthetics(tinyNet, task, schedule):
    # Same initial heads, training pairs and batches; only the enhancement scale differs.
    train = makePairs(task, 600, seed = 0)
    records = mpcf.scoreRecords(mpcf.generateCorpus(task, 400, RngStream(2), labelNoise = 0.0))
    corr = {1.0: [], lrm.DEFAULT_GS: []}
    for seed in range(3):
        for gs in corr:
            model = makeLrm(tinyNet, seed = seed, gs = gs)
            LrmTrainer(schedule, lr = 0.01, batchSize = 16, warmupSteps = 50).train(train, model, 1500, RngStream(30 + seed))
            aes, clip, _ = mpcf.corrMetrics(model, records)
            corr[gs].append((aes, clip))
    aesPlain, clipPlain = np.mean(corr[1.0], axis = 0)
    aesEnhanced, clipEnhanced = np.mean(corr[lrm.DEFAULT_GS], axis = 0)
    assert clipEnhanced > clipPlain
    assert aesEnhanced <= aesPlain
