"""
Name: lpo.py
Desc: Step-level preference optimization in the noisy latent space.

      During a rollout the current model denoises one trajectory per prompt.
      At every active step K children are drawn from the shared parent, the
      latent reward model scores them at the child's noise level, and the
      best and worst children form a training sample when their softmax gap
      exceeds a timestep-dependent threshold. The model is then trained on
      the collected samples with a DPO-style loss on the single transition,
      against a frozen copy of itself taken before the run.

      The same rollout structure drives a step-wise GRPO trainer, and an
      offline Diffusion-DPO trainer works from the preference corpus.

      A step "at t" is the transition from timestep t to tPrev, the next
      inference timestep. The final step into the clean level has sigma = 0
      and is never trained on.
"""
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from LatentPrefPython import (
    NUMERIC_FLOOR,
    Component,
    ConfigException,
    DegenerateInputException,
    ShapeException,
    warnDegenerate,
    )
from tensor import (
    SgdMomentum,
    Tensor,
    asTensor,
    clip,
    concat,
    exp,
    gaussianLogProb,
    grad,
    logSigmoid,
    mean,
    minimum,
    noGrad,
    softmax,
    tsum,
    )
from denoiser import cfgEval, conditionIds, makeDenoiserEval
from lrm import FixedEncoder
import diffusion


THRESHOLD_KINDS = ("stddev", "variance", "timestep", "constant")
SOFTMAX_MODES = ("extremes", "all")
LRM_TIMESTEP_MODES = ("real", "zero")
GRPO_MIN_STD = 1e-8
LOG_RATIO_LIMIT = 20.0


class ThresholdPolicy(object):
    """
    ThresholdPolicy(kind = "stddev", thMin = 0.35, thMax = 0.5, value = None)

    kind is stddev (interpolate by sigma_t), variance (by sigma_t^2),
    timestep (by t) or constant (always value, thMax when value is None).
    """
    def __init__(self, kind = "stddev", thMin = 0.35, thMax = 0.5, value = None):
        if kind not in THRESHOLD_KINDS:
            raise ConfigException("Threshold kind must be one of %s, got %r." % (THRESHOLD_KINDS, kind))
        self.kind = kind
        self.thMin = float(thMin)
        self.thMax = float(thMax)
        self.value = self.thMax if value is None else float(value)
        if not (0.0 <= self.thMin <= self.thMax <= 1.0):
            raise ConfigException("Need 0 <= thMin <= thMax <= 1, got %s and %s." % (thMin, thMax))
        if kind == "constant" and not (0.0 <= self.value <= 1.0):
            raise ConfigException("Constant threshold must lie in [0, 1], got %s." % value)

    def __repr__(self):
        if self.kind == "constant":
            return "<lpo.ThresholdPolicy( constant %g )>" % self.value
        return "<lpo.ThresholdPolicy( %s [%g, %g] )>" % (self.kind, self.thMin, self.thMax)


class LpoConfig(object):
    """
    LpoConfig(**options)

    Settings of the LPO, GRPO and DPO trainers. Defaults: K = 4, beta = 500,
    timesteps [0, 950], 5 epochs, eta = 1, stddev thresholds [0.35, 0.5].
    """
    def __init__(self, K = 4, beta = 500.0, timestepLo = 0, timestepHi = 950, epochs = 5, eta = 1.0,
                 threshold = None, promptsPerEpoch = 16, inferenceSteps = 20, guidance = 1.0,
                 lr = 0.002, momentum = 0.9, batchSize = 16, maxGradNorm = 1.0,
                 lrmTimestep = "real", softmaxOver = "extremes", clipEps = 0.1, klBeta = 0.1,
                 workers = 1):
        self.K = int(K)
        self.beta = float(beta)
        self.timestepLo = int(timestepLo)
        self.timestepHi = int(timestepHi)
        self.epochs = int(epochs)
        self.eta = float(eta)
        self.threshold = threshold if threshold is not None else ThresholdPolicy()
        self.promptsPerEpoch = int(promptsPerEpoch)
        self.inferenceSteps = int(inferenceSteps)
        self.guidance = float(guidance)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.batchSize = int(batchSize)
        self.maxGradNorm = maxGradNorm
        self.lrmTimestep = lrmTimestep
        self.softmaxOver = softmaxOver
        self.clipEps = float(clipEps)
        self.klBeta = float(klBeta)
        self.workers = int(workers)

    def validate(self, T):
        if self.K < 2:
            raise ConfigException("K must be >= 2, got %s." % self.K)
        if self.beta <= 0.0:
            raise ConfigException("beta must be > 0, got %s." % self.beta)
        if not (0 <= self.timestepLo <= self.timestepHi < T):
            raise ConfigException("Need 0 <= timestepLo <= timestepHi < T = %s, got [%s, %s]." % (T, self.timestepLo, self.timestepHi))
        if not (0.0 < self.eta <= 1.0):
            raise ConfigException("Preference optimization needs 0 < eta <= 1, got %s." % self.eta)
        if self.epochs < 0 or self.promptsPerEpoch < 1 or self.batchSize < 1 or self.workers < 1:
            raise ConfigException("epochs, promptsPerEpoch, batchSize and workers must be positive.")
        if self.guidance < 1.0:
            raise ConfigException("Guidance scale must be >= 1, got %s." % self.guidance)
        if self.lrmTimestep not in LRM_TIMESTEP_MODES:
            raise ConfigException("lrm_timestep must be one of %s, got %r." % (LRM_TIMESTEP_MODES, self.lrmTimestep))
        if self.softmaxOver not in SOFTMAX_MODES:
            raise ConfigException("softmax_over must be one of %s, got %r." % (SOFTMAX_MODES, self.softmaxOver))
        if not (0.0 < self.clipEps < 1.0):
            raise ConfigException("clipEps must lie in (0, 1), got %s." % self.clipEps)
        if self.klBeta < 0.0:
            raise ConfigException("klBeta must be >= 0, got %s." % self.klBeta)

    def timesteps(self, T):
        return diffusion.inferenceTimesteps(T, self.inferenceSteps)


class StepSample(object):
    """A qualified transition: parent at t, winning and losing children at tPrev."""
    def __init__(self, xParent, xWin, xLose, t, tPrev, cond):
        self.xParent = np.asarray(xParent, dtype = np.float64)
        self.xWin = np.asarray(xWin, dtype = np.float64)
        self.xLose = np.asarray(xLose, dtype = np.float64)
        self.t = int(t)
        self.tPrev = int(tPrev)
        self.cond = int(conditionIds(cond))
        if not (self.xParent.shape == self.xWin.shape == self.xLose.shape):
            raise ShapeException("StepSample latents differ in shape.")
        if np.array_equal(self.xWin, self.xLose):
            raise DegenerateInputException("StepSample winner and loser are identical.")

    def __repr__(self):
        return "<lpo.StepSample( t = %s, tPrev = %s, cond = %s )>" % (self.t, self.tPrev, self.cond)


class DpoSample(object):
    """Winning and losing transitions of two independent chains at the same step."""
    def __init__(self, xParentWin, xChildWin, xParentLose, xChildLose, t, tPrev, cond):
        self.xParentWin = np.asarray(xParentWin, dtype = np.float64)
        self.xChildWin = np.asarray(xChildWin, dtype = np.float64)
        self.xParentLose = np.asarray(xParentLose, dtype = np.float64)
        self.xChildLose = np.asarray(xChildLose, dtype = np.float64)
        self.t = int(t)
        self.tPrev = int(tPrev)
        self.cond = int(conditionIds(cond))

    @classmethod
    def fromStepSample(cls, sample):
        return cls(sample.xParent, sample.xWin, sample.xParent, sample.xLose, sample.t, sample.tPrev, sample.cond)


class GroupRollout(object):
    """
    K candidates of one parent with their rewards and group-normalized
    advantages. mean is the transition mean under the rollout-time model.
    """
    def __init__(self, xParent, candidates, rewards, t, tPrev, cond, mean_, sigma):
        self.xParent = np.asarray(xParent, dtype = np.float64)
        self.candidates = np.asarray(candidates, dtype = np.float64)
        self.rewards = np.asarray(rewards, dtype = np.float64)
        self.advantages = grpoAdvantages(self.rewards)
        self.t = int(t)
        self.tPrev = int(tPrev)
        self.cond = int(conditionIds(cond))
        self.mean = np.asarray(mean_, dtype = np.float64)
        self.sigma = float(sigma)

    @property
    def isInformative(self):
        return bool(np.any(self.advantages != 0.0))


# Thresholds and pair selection --------------------------------------------------

def activeSteps(timesteps, tLo, tHi, eta, schedule):
    """[(t, tPrev, sigma)] for the inference steps in [tLo, tHi] with sigma above the floor."""
    steps = []
    for i, t in enumerate(timesteps):
        tPrev = diffusion.previousTimestep(timesteps, i)
        if not (tLo <= t <= tHi):
            continue
        sigma = diffusion.ddimSigma(t, tPrev, eta, schedule)
        if sigma > NUMERIC_FLOOR:
            steps.append((t, tPrev, sigma))
    return steps


def _interpolate(x, xMin, xMax, thMin, thMax):
    if not xMax > xMin:
        raise DegenerateInputException("Threshold range is degenerate (%g to %g)." % (xMin, xMax))
    th = (x - xMin) / (xMax - xMin) * (thMax - thMin) + thMin
    return min(thMax, max(thMin, th))


def dynamicThreshold(t, policy, schedule, tLo, tHi, timesteps = None, eta = 1.0):
    """
    Name: dynamicThreshold(t, policy, schedule, tLo, tHi, timesteps = None, eta = 1.0)
    Args: t, the inference timestep being thresholded
          timesteps, the sampler's inference timesteps (20 evenly strided
                     steps by default)
          eta, sampler stochasticity, which sets sigma_t
    Desc: th_t = (x_t - x_min) / (x_max - x_min) * (thMax - thMin) + thMin with
          x = sigma (stddev), sigma^2 (variance) or t (timestep). Extremes of
          sigma run over the active steps in [tLo, tHi]; those of t are tLo
          and tHi. Raises DegenerateInputException on an empty range.
    """
    if policy.kind == "constant":
        return policy.value
    if policy.kind == "timestep":
        return _interpolate(float(t), float(tLo), float(tHi), policy.thMin, policy.thMax)

    if timesteps is None:
        timesteps = diffusion.inferenceTimesteps(schedule.T)
    steps = activeSteps(timesteps, tLo, tHi, eta, schedule)
    if not steps:
        raise DegenerateInputException("No active steps in [%s, %s]." % (tLo, tHi))
    sigmas = np.array([s for _, _, s in steps])
    timesteps = list(timesteps)
    if t not in timesteps:
        raise ConfigException("t=%s is not an inference timestep." % t)
    i = timesteps.index(t)
    sigma = diffusion.ddimSigma(t, diffusion.previousTimestep(timesteps, i), eta, schedule)
    if policy.kind == "variance":
        sigmas = sigmas ** 2
        sigma = sigma ** 2
    return _interpolate(sigma, float(sigmas.min()), float(sigmas.max()), policy.thMin, policy.thMax)


def pairGap(scores, softmaxOver = "extremes"):
    """
    Name: pairGap(scores, softmaxOver = "extremes")
    Desc: (winIndex, loseIndex, gap). The highest and lowest scores are
          normalized by softmax, over the two extremes or over all scores;
          gap is the difference of their probabilities. Ties take the lowest
          index. Over the extremes gap = tanh((max - min) / 2).
    """
    scores = np.asarray(scores, dtype = np.float64)
    if scores.ndim != 1 or scores.size < 2:
        raise ConfigException("Pair selection needs K >= 2 scores.")
    win = int(np.argmax(scores))
    lose = int(np.argmin(scores))
    if softmaxOver == "extremes":
        p = softmax(Tensor([scores[win], scores[lose]])).values
        gap = float(p[0] - p[1])
    elif softmaxOver == "all":
        p = softmax(Tensor(scores)).values
        gap = float(p[win] - p[lose])
    else:
        raise ConfigException("softmax_over must be one of %s, got %r." % (SOFTMAX_MODES, softmaxOver))
    return win, lose, gap


def selectPair(scores, th, softmaxOver = "extremes"):
    """
    Name: selectPair(scores, th, softmaxOver = "extremes")
    Desc: (winIndex, loseIndex) when the normalized gap exceeds th, else None.

    >>> selectPair([2.0, 1.0, 0.0, -1.0], 0.5)
    (0, 3)
    """
    win, lose, gap = pairGap(scores, softmaxOver)
    if gap > th:
        return win, lose
    return None


# Losses -------------------------------------------------------------------------

def stepLogprob(xChild, mean_, sigma, perSample = False):
    """
    Name: stepLogprob(xChild, mean, sigma, perSample = False)
    Desc: Gaussian log density of a transition. sigma <= 0 raises
          DegenerateInputException; preference optimization needs eta > 0.
    """
    if sigma <= 0.0:
        raise DegenerateInputException("Transition log-probability needs sigma > 0, got %r (eta must be > 0)." % sigma)
    return gaussianLogProb(xChild, mean_, sigma, perSample)


def transitionMean(net, xParent, t, tPrev, cond, sigma, schedule, guidance = 1.0):
    """DDIM transition mean of net for a parent (or batch of parents sharing t)."""
    epsPred = cfgEval(xParent, t, cond, net, guidance)
    return diffusion.ddimMean(xParent, epsPred, t, tPrev, sigma, schedule)


def _groupByStep(samples):
    groups = {}
    for i, s in enumerate(samples):
        groups.setdefault((s.t, s.tPrev), []).append(i)
    return sorted(groups.items(), key = lambda kv: -kv[0][0])


def _logRatios(net, refNet, parents, children, t, tPrev, ids, sigma, schedule, guidance):
    meanModel = transitionMean(net, parents, t, tPrev, ids, sigma, schedule, guidance)
    with noGrad():
        meanRef = transitionMean(refNet, parents, t, tPrev, ids, sigma, schedule, guidance)
    return stepLogprob(children, meanModel, sigma, True) - stepLogprob(children, meanRef, sigma, True)


def _asList(samples):
    if isinstance(samples, (list, tuple)):
        return list(samples)
    return [samples]


def dpoMargins(samples, model, refModel, eta, schedule, guidance = 1.0):
    """Per-sample Delta_w - Delta_l for DpoSamples (log-ratio of winner minus loser)."""
    margins = []
    for (t, tPrev), idx in _groupByStep(samples):
        sigma = diffusion.ddimSigma(t, tPrev, eta, schedule)
        group = [samples[i] for i in idx]
        ids = np.array([s.cond for s in group], dtype = np.int64)
        deltaW = _logRatios(model, refModel, Tensor(np.stack([s.xParentWin for s in group])), Tensor(np.stack([s.xChildWin for s in group])), t, tPrev, ids, sigma, schedule, guidance)
        deltaL = _logRatios(model, refModel, Tensor(np.stack([s.xParentLose for s in group])), Tensor(np.stack([s.xChildLose for s in group])), t, tPrev, ids, sigma, schedule, guidance)
        margins.append(deltaW - deltaL)
    return concat(margins, axis = 0)


def dpoLoss(samples, model, refModel, beta, eta, schedule, guidance = 1.0):
    """
    Name: dpoLoss(samples, model, refModel, beta, eta, schedule, guidance = 1.0)
    Args: samples, one DpoSample or a list of them
    Desc: Mean of -log sigmoid(beta * (Delta_w - Delta_l)), Delta_* being the
          model-versus-reference log-ratio of each chain's own transition.
          Equals ln 2 when the weights are identical.
    """
    if beta <= 0.0:
        raise ConfigException("beta must be > 0, got %s." % beta)
    samples = _asList(samples)
    if not samples:
        raise ConfigException("dpoLoss needs at least one sample.")
    return mean(logSigmoid(dpoMargins(samples, model, refModel, eta, schedule, guidance) * beta) * -1.0)


def spoLoss(samples, model, refModel, beta, eta, schedule, guidance = 1.0):
    """
    Name: spoLoss(samples, model, refModel, beta, eta, schedule, guidance = 1.0)
    Args: samples, one StepSample or a list of them
    Desc: Mean of
            -log sigmoid(beta * [(log p(x_w) - log p_ref(x_w))
                                 - (log p(x_l) - log p_ref(x_l))])
          where both children are scored under transitions from their shared
          parent, with means recomputed from each model's weights.
    """
    samples = [DpoSample.fromStepSample(s) for s in _asList(samples)]
    return dpoLoss(samples, model, refModel, beta, eta, schedule, guidance)


def grpoAdvantages(rewards):
    """
    Name: grpoAdvantages(rewards)
    Desc: (r - mean) / std with the population std. All zeros when the std is
          below 1e-8.

    >>> grpoAdvantages([1, 2, 3, 4]).round(5)
    array([-1.34164, -0.44721,  0.44721,  1.34164])
    """
    rewards = np.asarray(rewards, dtype = np.float64)
    if rewards.ndim != 1 or rewards.size < 2:
        raise ConfigException("grpoAdvantages needs K >= 2 rewards.")
    std = rewards.std()
    if std < GRPO_MIN_STD:
        return np.zeros_like(rewards)
    return (rewards - rewards.mean()) / std


def clippedSurrogate(ratio, advantages, clipEps):
    """min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A), elementwise."""
    ratio = asTensor(ratio)
    return minimum(ratio * advantages, clip(ratio, 1.0 - clipEps, 1.0 + clipEps) * advantages)


def grpoLoss(rollouts, model, oldModel, refModel, clipEps, klBeta, eta, schedule, guidance = 1.0):
    """
    Name: grpoLoss(rollouts, model, oldModel, refModel, clipEps, klBeta, eta, schedule, guidance = 1.0)
    Desc: Mean over rollouts of

              -mean_i min(r_i A_i, clip(r_i, 1 - eps, 1 + eps) A_i)
              + klBeta * |mu - mu_ref|^2 / (2 sigma^2)

          with r_i = p(x_i) / p_old(x_i). Log-ratios are clamped to +-20
          before exponentiation.
    """
    if not (0.0 < clipEps < 1.0):
        raise ConfigException("clipEps must lie in (0, 1), got %s." % clipEps)
    rollouts = _asList(rollouts)
    if not rollouts:
        raise ConfigException("grpoLoss needs at least one rollout.")
    terms = []
    for r in rollouts:
        sigma = diffusion.ddimSigma(r.t, r.tPrev, eta, schedule)
        if sigma <= 0.0:
            raise DegenerateInputException("GRPO needs stochastic transitions (sigma > 0).")
        K = r.candidates.shape[0]
        parent = Tensor(r.xParent)
        meanModel = transitionMean(model, parent, r.t, r.tPrev, r.cond, sigma, schedule, guidance)
        with noGrad():
            meanOld = transitionMean(oldModel, parent, r.t, r.tPrev, r.cond, sigma, schedule, guidance)
            meanRef = transitionMean(refModel, parent, r.t, r.tPrev, r.cond, sigma, schedule, guidance)
        ratios = []
        for i in range(K):
            candidate = Tensor(r.candidates[i])
            logRatio = stepLogprob(candidate, meanModel, sigma) - stepLogprob(candidate, meanOld, sigma)
            ratios.append(exp(clip(logRatio, -LOG_RATIO_LIMIT, LOG_RATIO_LIMIT)))
        ratio = concat([q.reshape(1) for q in ratios], axis = 0)
        surrogate = mean(clippedSurrogate(ratio, r.advantages, clipEps))
        diff = meanModel - meanRef
        kl = tsum(diff * diff) * (1.0 / (2.0 * sigma * sigma))
        terms.append((kl * klBeta - surrogate).reshape(1))
    return mean(concat(terms, axis = 0))


# Trainers -----------------------------------------------------------------------

class LpoTrainer(Component):
    """
    LpoTrainer(config, lrm, schedule, rewardFn = None, debug = False)

    rewardFn(net) -> float is called after every epoch for the metrics;
    typically the mean hidden-oracle reward of eta = 0 generations.
    """
    def __init__(self, config, lrm, schedule, rewardFn = None, debug = False):
        Component.__init__(self, debug)
        config.validate(schedule.T)
        self.config = config
        self.lrm = lrm
        self.schedule = schedule
        self.rewardFn = rewardFn
        self.timesteps = config.timesteps(schedule.T)
        self.active = dict((t, (tPrev, sigma)) for t, tPrev, sigma in activeSteps(self.timesteps, config.timestepLo, config.timestepHi, config.eta, schedule))
        if not self.active:
            raise ConfigException("No stochastic inference steps in [%s, %s]." % (config.timestepLo, config.timestepHi))
        self._thresholds = dict()

    def threshold(self, t):
        if t not in self._thresholds:
            cfg = self.config
            self._thresholds[t] = dynamicThreshold(t, cfg.threshold, self.schedule, cfg.timestepLo, cfg.timestepHi, self.timesteps, cfg.eta)
        return self._thresholds[t]

    def lrmTimestep(self, tPrev):
        if self.config.lrmTimestep == "zero":
            return 0
        return max(tPrev, 0)

    def _rolloutPrompt(self, net, cond, rng):
        """One trajectory; returns the groups sampled at the active steps."""
        cfg = self.config
        shape = net.config.latentShape
        groups = []
        with noGrad():
            evaluator = makeDenoiserEval(net, cond, cfg.guidance)
            x = Tensor(rng.derive("xT").normal(shape))
            for i, t in enumerate(self.timesteps):
                stepRng = rng.child(i)
                tPrev = diffusion.previousTimestep(self.timesteps, i)
                if t not in self.active:
                    sigma = diffusion.ddimSigma(t, tPrev, cfg.eta, self.schedule)
                    noise = stepRng.normal(shape) if sigma > 0.0 else None
                    x = diffusion.ddimStep(x, evaluator(x, t), t, tPrev, cfg.eta, noise, self.schedule)[0]
                    continue
                group = diffusion.sampleGroup(x, t, tPrev, evaluator, cfg.K, cfg.eta, stepRng.derive("group"), self.schedule)
                candidates = np.stack([c.values for c, _, _ in group])
                scores = self.lrm.scoreArray(candidates, self.lrmTimestep(tPrev), cond)
                groups.append((x.values, candidates, scores, t, tPrev, group[0][1].values, group[0][2]))
                x = Tensor(candidates[int(stepRng.integers(0, cfg.K))])
        return groups

    def rollout(self, net, prompts, rng):
        """Groups of every prompt of an epoch, in prompt order."""
        cfg = self.config
        jobs = [(prompts[j % len(prompts)], rng.child(j)) for j in range(cfg.promptsPerEpoch)]
        if cfg.workers > 1:
            with ThreadPoolExecutor(max_workers = cfg.workers) as pool:
                results = list(pool.map(lambda job: self._rolloutPrompt(net, job[0], job[1]), jobs))
        else:
            results = [self._rolloutPrompt(net, cond, jobRng) for cond, jobRng in jobs]
        return [(cond, groups) for (cond, _), groups in zip(jobs, results)]

    def collectSamples(self, net, prompts, rng):
        """(StepSamples, {t: qualified count}) of one epoch."""
        cfg = self.config
        samples = []
        counts = dict((t, 0) for t in sorted(self.active, reverse = True))
        for cond, groups in self.rollout(net, prompts, rng):
            for parent, candidates, scores, t, tPrev, _, _ in groups:
                chosen = selectPair(scores, self.threshold(t), cfg.softmaxOver)
                if chosen is None:
                    continue
                win, lose = chosen
                samples.append(StepSample(parent, candidates[win], candidates[lose], t, tPrev, cond))
                counts[t] += 1
        return samples, counts

    def _optimizer(self, net):
        cfg = self.config
        return SgdMomentum(net.parameters(), cfg.lr, cfg.momentum, maxGradNorm = cfg.maxGradNorm)

    def _minimize(self, items, lossFn, opt, rng):
        cfg = self.config
        losses = []
        updateNorm = 0.0
        order = rng.permutation(len(items))
        for start in range(0, len(items), cfg.batchSize):
            batch = [items[i] for i in order[start:start + cfg.batchSize]]
            opt.zeroGrad()
            loss = lossFn(batch)
            grad(loss)
            updateNorm += opt.step()
            losses.append(loss.item())
        return losses, updateNorm

    def _epochMetrics(self, epoch, net, count, counts, losses, updateNorm):
        metrics = {
            "epoch": epoch,
            "samples": count,
            "counts_per_timestep": dict((str(t), c) for t, c in counts.items()),
            "mean_loss": float(np.mean(losses)) if losses else None,
            "update_norm": updateNorm,
            }
        if self.rewardFn is not None:
            metrics["oracle_reward"] = float(self.rewardFn(net))
        return metrics

    def run(self, dmo, prompts, rng):
        """
        Fine-tunes dmo in place. Returns (dmo, metrics) with one metrics dict
        per epoch, preceded by the epoch -1 baseline when rewardFn is set.
        """
        cfg = self.config
        if not prompts:
            raise ConfigException("LPO needs at least one prompt.")
        ref = dmo.copy()
        opt = self._optimizer(dmo)
        history = []
        if self.rewardFn is not None:
            history.append({"epoch": -1, "oracle_reward": float(self.rewardFn(dmo))})
        for epoch in range(cfg.epochs):
            epochRng = rng.derive("epoch%d" % epoch)
            samples, counts = self.collectSamples(dmo, prompts, epochRng.derive("rollout"))
            losses, updateNorm = [], 0.0
            if not samples:
                warnDegenerate("LPO epoch %s produced no qualified samples; skipping the update." % epoch)
            else:
                def lossFn(batch):
                    return spoLoss(batch, dmo, ref, cfg.beta, cfg.eta, self.schedule, cfg.guidance)
                losses, updateNorm = self._minimize(samples, lossFn, opt, epochRng.derive("order"))
            metrics = self._epochMetrics(epoch, dmo, len(samples), counts, losses, updateNorm)
            self._debugprint("lpo epoch %s: %s samples, loss %s" % (epoch, len(samples), metrics["mean_loss"]))
            history.append(metrics)
        return dmo, history


class GrpoTrainer(LpoTrainer):
    """Step-wise GRPO on the same rollouts, with a per-epoch old-model snapshot."""

    def collectRollouts(self, net, prompts, rng):
        rollouts = []
        counts = dict((t, 0) for t in sorted(self.active, reverse = True))
        for cond, groups in self.rollout(net, prompts, rng):
            for parent, candidates, scores, t, tPrev, mean_, sigma in groups:
                r = GroupRollout(parent, candidates, scores, t, tPrev, cond, mean_, sigma)
                if r.isInformative:
                    rollouts.append(r)
                    counts[t] += 1
        return rollouts, counts

    def run(self, dmo, prompts, rng):
        cfg = self.config
        if not prompts:
            raise ConfigException("GRPO needs at least one prompt.")
        ref = dmo.copy()
        opt = self._optimizer(dmo)
        history = []
        if self.rewardFn is not None:
            history.append({"epoch": -1, "oracle_reward": float(self.rewardFn(dmo))})
        for epoch in range(cfg.epochs):
            epochRng = rng.derive("epoch%d" % epoch)
            old = dmo.copy()
            rollouts, counts = self.collectRollouts(dmo, prompts, epochRng.derive("rollout"))
            losses, updateNorm = [], 0.0
            if not rollouts:
                warnDegenerate("GRPO epoch %s produced no informative groups; skipping the update." % epoch)
            else:
                def lossFn(batch):
                    return grpoLoss(batch, dmo, old, ref, cfg.clipEps, cfg.klBeta, cfg.eta, self.schedule, cfg.guidance)
                losses, updateNorm = self._minimize(rollouts, lossFn, opt, epochRng.derive("order"))
            metrics = self._epochMetrics(epoch, dmo, len(rollouts), counts, losses, updateNorm)
            self._debugprint("grpo epoch %s: %s groups, loss %s" % (epoch, len(rollouts), metrics["mean_loss"]))
            history.append(metrics)
        return dmo, history


class DpoTrainer(LpoTrainer):
    """
    Offline Diffusion-DPO on preference pairs. Each pair gets one active step
    (t, tPrev); winner and loser are noised to their own parents and their
    children are drawn from the DDIM posterior.
    """

    def dpoSamples(self, pairs, encoder, rng):
        cfg = self.config
        steps = sorted(self.active.items(), reverse = True)
        samples = []
        for i, pair in enumerate(pairs):
            pairRng = rng.child(i)
            t, (tPrev, _) = steps[int(pairRng.integers(0, len(steps)))]
            children = []
            for label, x0 in (("win", pair.x0Win), ("lose", pair.x0Lose)):
                x0 = encoder.encode(x0)
                eps = pairRng.derive(label + "/eps").normal(x0.shape)
                parent = diffusion.forwardNoise(x0, t, eps, self.schedule)
                child = diffusion.ddimPosteriorSample(x0, eps, t, tPrev, cfg.eta, pairRng.derive(label + "/noise").normal(x0.shape), self.schedule)[0]
                children.append((parent.values, child.values))
            (pw, cw), (pl, cl) = children
            samples.append(DpoSample(pw, cw, pl, cl, t, tPrev, pair.cond.id))
        return samples

    def run(self, dmo, pairs, rng, encoder = None):
        cfg = self.config
        if not pairs:
            raise ConfigException("DPO needs at least one preference pair.")
        if encoder is None:
            encoder = self.lrm.encoder if self.lrm is not None else None
        if encoder is None:
            encoder = FixedEncoder()
        ref = dmo.copy()
        opt = self._optimizer(dmo)
        history = []
        if self.rewardFn is not None:
            history.append({"epoch": -1, "oracle_reward": float(self.rewardFn(dmo))})
        for epoch in range(cfg.epochs):
            epochRng = rng.derive("epoch%d" % epoch)
            samples = self.dpoSamples(pairs, encoder, epochRng.derive("transitions"))
            counts = dict((t, 0) for t in sorted(self.active, reverse = True))
            for s in samples:
                counts[s.t] += 1

            def lossFn(batch):
                return dpoLoss(batch, dmo, ref, cfg.beta, cfg.eta, self.schedule, cfg.guidance)
            losses, updateNorm = self._minimize(samples, lossFn, opt, epochRng.derive("order"))
            metrics = self._epochMetrics(epoch, dmo, len(samples), counts, losses, updateNorm)
            self._debugprint("dpo epoch %s: loss %s" % (epoch, metrics["mean_loss"]))
            history.append(metrics)
        return dmo, history


def runLpo(config, dmo, lrm, prompts, rng, schedule = None, rewardFn = None, debug = False):
    """
    Name: runLpo(config, dmo, lrm, prompts, rng, schedule = None, rewardFn = None)
    Desc: Latent preference optimization of dmo with the frozen reward model
          lrm. Returns (dmo, metrics per epoch). An epoch without qualified
          samples raises DegenerateSamplingWarning and leaves dmo unchanged.
    """
    if schedule is None:
        schedule = diffusion.buildLinearSchedule()
    return LpoTrainer(config, lrm, schedule, rewardFn, debug).run(dmo, prompts, rng)


def runGrpo(config, dmo, lrm, prompts, rng, schedule = None, rewardFn = None, debug = False):
    """Step-wise GRPO with the LPO rollout structure. Returns (dmo, metrics)."""
    if schedule is None:
        schedule = diffusion.buildLinearSchedule()
    return GrpoTrainer(config, lrm, schedule, rewardFn, debug).run(dmo, prompts, rng)


def runDpo(config, dmo, pairs, rng, schedule = None, rewardFn = None, encoder = None, debug = False):
    """Offline Diffusion-DPO on PreferencePairs. Returns (dmo, metrics)."""
    if schedule is None:
        schedule = diffusion.buildLinearSchedule()
    return DpoTrainer(config, None, schedule, rewardFn, debug).run(dmo, pairs, rng, encoder)
