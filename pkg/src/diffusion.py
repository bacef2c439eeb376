"""
Name: diffusion.py
Desc: Noise schedules, forward noising, DDIM stochastic backward steps,
      Flow-Matching SDE backward steps and group sampling of candidates
      that share one parent latent.

      Timesteps are integers in [0, T). The level below timestep 0 (clean
      latents) is addressed as t = -1, where the cumulative signal level is 1
      and every transition into it is deterministic.

      Every function takes Tensors and returns Tensors built from the tensor
      primitives, so transition means stay differentiable with respect to the
      network that produced eps_pred. Wrap sampling code in tensor.noGrad().
"""
import math

import numpy as np

from LatentPrefPython import (
    NUMERIC_FLOOR,
    RADICAND_TOLERANCE,
    DEGENERATE_TIMESTEP,
    ConfigException,
    DegenerateInputException,
    NumericFaultException,
    ShapeException,
    warnDegenerate,
    )
from tensor import asTensor


X0_LEVEL = -1

DEFAULT_T = 1000
DEFAULT_BETA_START = 1e-4
DEFAULT_BETA_END = 2e-2
DEFAULT_INFERENCE_STEPS = 20


class NoiseSchedule(object):
    """
    NoiseSchedule(beta)

    Precomputed beta, alpha = 1 - beta and alphaBar = cumprod(alpha) tables
    for T = len(beta) discrete timesteps.
    """
    def __init__(self, beta):
        beta = np.array(beta, dtype = np.float64)
        if beta.ndim != 1 or beta.size < 2:
            raise ConfigException("A noise schedule needs T >= 2 timesteps, got %s." % beta.size)
        if np.any(beta <= 0.0) or np.any(beta >= 1.0):
            raise ConfigException("Every beta must lie in (0, 1).")
        self.T = beta.size
        self.beta = beta
        self.alpha = 1.0 - beta
        self.alphaBar = np.cumprod(self.alpha)
        if np.any(np.diff(self.alphaBar) >= 0.0):
            raise ConfigException("alphaBar is not strictly decreasing.")

    def __repr__(self):
        return "<diffusion.NoiseSchedule( T = %s, beta = [%g, %g] )>" % (self.T, self.beta[0], self.beta[-1])

    @classmethod
    def fromAlphaBar(cls, alphaBar):
        """Rebuilds the beta table from a strictly decreasing alphaBar list."""
        alphaBar = np.array(alphaBar, dtype = np.float64)
        previous = np.concatenate([[1.0], alphaBar[:-1]])
        return cls(1.0 - alphaBar / previous)

    def checkTimestep(self, t):
        if t != X0_LEVEL and not (0 <= t < self.T):
            raise ConfigException("Timestep %s outside [0, %s)." % (t, self.T))

    def alphaBarAt(self, t):
        """alphaBar for timestep t, 1.0 at the clean level (t = -1)."""
        self.checkTimestep(t)
        if t == X0_LEVEL:
            return 1.0
        return float(self.alphaBar[t])


def buildLinearSchedule(T = DEFAULT_T, betaStart = DEFAULT_BETA_START, betaEnd = DEFAULT_BETA_END):
    """
    Name: buildLinearSchedule(T = 1000, betaStart = 1e-4, betaEnd = 2e-2)
    Args: T, number of timesteps (>= 2)
          betaStart, betaEnd, endpoints with 0 < betaStart <= betaEnd < 1
    Desc: Linearly spaced beta including both endpoints.

    >>> s = buildLinearSchedule(2, 0.1, 0.2)
    >>> s.alphaBar
    array([0.9 , 0.72])
    """
    if T < 2:
        raise ConfigException("T must be at least 2, got %s." % T)
    if not (0.0 < betaStart <= betaEnd < 1.0):
        raise ConfigException("Need 0 < betaStart <= betaEnd < 1, got %s and %s." % (betaStart, betaEnd))
    return NoiseSchedule(np.linspace(betaStart, betaEnd, T))


def inferenceTimesteps(T = DEFAULT_T, steps = DEFAULT_INFERENCE_STEPS):
    """
    Name: inferenceTimesteps(T, steps)
    Desc: Evenly strided, strictly decreasing timesteps ending at 0.

    >>> inferenceTimesteps(1000, 20)[:3]
    [950, 900, 850]
    """
    if steps < 1 or steps > T:
        raise ConfigException("Need 1 <= steps <= T, got %s steps for T = %s." % (steps, T))
    stride = T // steps
    return [i * stride for i in range(steps)][::-1]


def previousTimestep(timesteps, index):
    """The timestep after timesteps[index] in sampling order, -1 past the end."""
    if index + 1 < len(timesteps):
        return timesteps[index + 1]
    return X0_LEVEL


class SamplerConfig(object):
    """
    SamplerConfig(eta, inferenceTimesteps, guidanceScale = 1.0)

    eta in [0, 1] sets the stochasticity of every DDIM step; guidanceScale
    is the classifier-free guidance used at generation time.
    """
    def __init__(self, eta, inferenceTimesteps, guidanceScale = 1.0):
        self.eta = float(eta)
        self.inferenceTimesteps = [int(t) for t in inferenceTimesteps]
        self.guidanceScale = float(guidanceScale)
        if not (0.0 <= self.eta <= 1.0):
            raise ConfigException("eta must lie in [0, 1], got %s." % eta)
        if self.guidanceScale < 1.0:
            raise ConfigException("guidance scale must be >= 1, got %s." % guidanceScale)
        if not self.inferenceTimesteps:
            raise ConfigException("No inference timesteps.")
        for a, b in zip(self.inferenceTimesteps, self.inferenceTimesteps[1:]):
            if b >= a:
                raise ConfigException("Inference timesteps must be strictly decreasing.")
        if self.inferenceTimesteps[-1] < 0:
            raise ConfigException("Inference timesteps must be >= 0.")

    def validate(self, T):
        if self.inferenceTimesteps[0] >= T:
            raise ConfigException("Inference timestep %s is not below T = %s." % (self.inferenceTimesteps[0], T))


class Trajectory(object):
    """
    Ordered (t, x_t) entries from the starting noise down to the clean level.
    The last entry carries t = -1.
    """
    def __init__(self, entries = None):
        self.entries = list(entries) if entries else []

    def append(self, t, x):
        if self.entries:
            lastT, lastX = self.entries[-1]
            if t >= lastT:
                raise ShapeException("Trajectory timesteps must decrease (%s after %s)." % (t, lastT))
            if x.shape != lastX.shape:
                raise ShapeException("Trajectory entry shape %s differs from %s." % (x.shape, lastX.shape))
        self.entries.append((t, x))

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def __getitem__(self, i):
        return self.entries[i]

    @property
    def timesteps(self):
        return [t for t, _ in self.entries]

    @property
    def final(self):
        return self.entries[-1][1]


def _checkShapes(a, b, what):
    if a.shape != b.shape:
        raise ShapeException("%s: shapes %s and %s differ." % (what, a.shape, b.shape))


def forwardNoise(x0, t, eps, schedule):
    """
    Name: forwardNoise(x0, t, eps, schedule)
    Desc: sqrt(alphaBar_t) * x0 + sqrt(1 - alphaBar_t) * eps
    """
    x0, eps = asTensor(x0), asTensor(eps)
    _checkShapes(x0, eps, "forwardNoise")
    ab = schedule.alphaBarAt(t)
    return x0 * math.sqrt(ab) + eps * math.sqrt(1.0 - ab)


def predictX0(xT, epsPred, t, schedule):
    """
    Name: predictX0(xT, epsPred, t, schedule)
    Desc: (x_t - sqrt(1 - alphaBar_t) * epsPred) / sqrt(alphaBar_t). Raises
          DegenerateInputException (DEGENERATE_TIMESTEP) when alphaBar_t is
          below the numeric floor.
    """
    xT, epsPred = asTensor(xT), asTensor(epsPred)
    _checkShapes(xT, epsPred, "predictX0")
    ab = schedule.alphaBarAt(t)
    if ab <= NUMERIC_FLOOR:
        raise DegenerateInputException("alphaBar at t = %s is %g." % (t, ab), ec = DEGENERATE_TIMESTEP)
    return (xT - epsPred * math.sqrt(1.0 - ab)) * (1.0 / math.sqrt(ab))


def _checkEta(eta):
    if not (0.0 <= eta <= 1.0):
        raise ConfigException("eta must lie in [0, 1], got %s." % eta)


def ddimSigma(t, tPrev, eta, schedule):
    """
    Name: ddimSigma(t, tPrev, eta, schedule)
    Desc: eta * sqrt((1 - ab_prev) / (1 - ab_t)) * sqrt(1 - ab_t / ab_prev),
          the strided DDIM standard deviation. Zero for the step into the
          clean level.

    >>> s = NoiseSchedule.fromAlphaBar([0.9, 0.8])
    >>> round(ddimSigma(1, 0, 1.0, s), 5)
    0.2357
    """
    if t <= tPrev:
        raise DegenerateInputException("ddimSigma needs t > tPrev, got %s and %s." % (t, tPrev), ec = DEGENERATE_TIMESTEP)
    _checkEta(eta)
    ab = schedule.alphaBarAt(t)
    abPrev = schedule.alphaBarAt(tPrev)
    if eta == 0.0 or tPrev == X0_LEVEL:
        return 0.0
    return eta * math.sqrt((1.0 - abPrev) / (1.0 - ab)) * math.sqrt(max(1.0 - ab / abPrev, 0.0))


def _clampedSqrt(radicand, what):
    if radicand < RADICAND_TOLERANCE:
        raise NumericFaultException("%s: negative radicand %g." % (what, radicand))
    return math.sqrt(max(radicand, 0.0))


def ddimMean(xT, epsPred, t, tPrev, sigma, schedule):
    """
    Name: ddimMean(xT, epsPred, t, tPrev, sigma, schedule)
    Desc: sqrt(ab_prev) * x0hat + sqrt(1 - ab_prev - sigma^2) * epsPred
    """
    x0hat = predictX0(xT, epsPred, t, schedule)
    abPrev = schedule.alphaBarAt(tPrev)
    direction = _clampedSqrt(1.0 - abPrev - sigma * sigma, "ddimMean")
    return x0hat * math.sqrt(abPrev) + asTensor(epsPred) * direction


def ddimStep(xT, epsPred, t, tPrev, eta, noise, schedule):
    """
    Name: ddimStep(xT, epsPred, t, tPrev, eta, noise, schedule)
    Args: xT, the latent at timestep t
          epsPred, the noise prediction at (xT, t)
          t, tPrev, the step, t > tPrev
          eta, stochasticity in [0, 1]
          noise, a standard normal draw shaped like xT (ignored when sigma is 0)
    Desc: One DDIM backward step. Returns (xPrev, mean, sigma) so that
          callers can evaluate the Gaussian transition density.
    """
    sigma = ddimSigma(t, tPrev, eta, schedule)
    mean_ = ddimMean(xT, epsPred, t, tPrev, sigma, schedule)
    if sigma == 0.0:
        return mean_, mean_, sigma
    noise = asTensor(noise)
    _checkShapes(mean_, noise, "ddimStep")
    return mean_ + noise * sigma, mean_, sigma


def ddimPosteriorSample(x0, eps, t, tPrev, eta, noise, schedule):
    """
    Name: ddimPosteriorSample(x0, eps, t, tPrev, eta, noise, schedule)
    Desc: Draws x_tPrev from the DDIM posterior given the clean latent x0 and
          the noise eps that produced x_t = forwardNoise(x0, t, eps).
          Returns (xPrev, mean, sigma).
    """
    x0, eps = asTensor(x0), asTensor(eps)
    _checkShapes(x0, eps, "ddimPosteriorSample")
    sigma = ddimSigma(t, tPrev, eta, schedule)
    abPrev = schedule.alphaBarAt(tPrev)
    direction = _clampedSqrt(1.0 - abPrev - sigma * sigma, "ddimPosteriorSample")
    mean_ = x0 * math.sqrt(abPrev) + eps * direction
    if sigma == 0.0:
        return mean_, mean_, sigma
    return mean_ + asTensor(noise) * sigma, mean_, sigma


def sampleGroup(xParent, t, tPrev, denoiserEval, K, eta, rng, schedule):
    """
    Name: sampleGroup(xParent, t, tPrev, denoiserEval, K, eta, rng, schedule)
    Args: xParent, the shared latent at timestep t
          denoiserEval, callable (x, t) -> eps Tensor
          K, number of candidates (>= 2)
          rng, RngStream; candidate i draws its noise from rng.child(i)
    Desc: K children of one parent. They share mean and sigma and differ only
          in the noise draw. Returns a list of (candidate, mean, sigma).
          eta == 0 makes every candidate identical and raises a
          DegenerateSamplingWarning.
    """
    if K < 2:
        raise ConfigException("sampleGroup needs K >= 2, got %s." % K)
    if eta == 0.0:
        warnDegenerate("sampleGroup with eta = 0 gives %s identical candidates." % K)
    xParent = asTensor(xParent)
    epsPred = denoiserEval(xParent, t)
    sigma = ddimSigma(t, tPrev, eta, schedule)
    mean_ = ddimMean(xParent, epsPred, t, tPrev, sigma, schedule)
    group = []
    for i in range(K):
        if sigma == 0.0:
            group.append((mean_, mean_, sigma))
        else:
            noise = rng.child(i).normal(xParent.shape)
            group.append((mean_ + noise * sigma, mean_, sigma))
    return group


def fullDenoise(xT, denoiserEval, config, rng, schedule):
    """
    Name: fullDenoise(xT, denoiserEval, config, rng, schedule)
    Desc: Runs ddimStep over config.inferenceTimesteps. Step i draws its noise
          from rng.child(i). Returns a Trajectory of len(timesteps) + 1
          entries whose last one is the clean-level output.
    """
    config.validate(schedule.T)
    timesteps = config.inferenceTimesteps
    x = asTensor(xT)
    trajectory = Trajectory()
    trajectory.append(timesteps[0], x)
    for i, t in enumerate(timesteps):
        tPrev = previousTimestep(timesteps, i)
        epsPred = denoiserEval(x, t)
        sigma = ddimSigma(t, tPrev, config.eta, schedule)
        noise = rng.child(i).normal(x.shape) if sigma > 0.0 else None
        x, _, _ = ddimStep(x, epsPred, t, tPrev, config.eta, noise, schedule)
        trajectory.append(tPrev, x)
    return trajectory


class FlowSchedule(object):
    """
    FlowSchedule(alphaPrime, sigmaPrime)

    Flow-Matching interpolation x_t = alphaPrime_t * x0 + sigmaPrime_t * eps,
    with clean data at t = 0 (alphaPrime_0 = 1, sigmaPrime_0 = 0).
    """
    def __init__(self, alphaPrime, sigmaPrime):
        self.alphaPrime = np.array(alphaPrime, dtype = np.float64)
        self.sigmaPrime = np.array(sigmaPrime, dtype = np.float64)
        if self.alphaPrime.shape != self.sigmaPrime.shape or self.alphaPrime.ndim != 1:
            raise ConfigException("alphaPrime and sigmaPrime must be vectors of equal length.")
        for table in (self.alphaPrime, self.sigmaPrime):
            if np.any(table < 0.0) or np.any(table > 1.0):
                raise ConfigException("Flow schedule values must lie in [0, 1].")
        if np.any(np.diff(self.alphaPrime) > 0.0):
            raise ConfigException("alphaPrime must decrease away from the data end.")
        self.T = self.alphaPrime.size


def buildLinearFlowSchedule(T = DEFAULT_T):
    """alphaPrime_t = 1 - t/T and sigmaPrime_t = t/T for t in [0, T)."""
    if T < 2:
        raise ConfigException("T must be at least 2, got %s." % T)
    s = np.arange(T, dtype = np.float64) / T
    return FlowSchedule(1.0 - s, s)


def flowSigma(t, tPrev, eta, fs):
    """eta * sqrt((sp_prev / sp_t)^2 * (1 - (ap_t / ap_prev)^2))"""
    if t <= tPrev:
        raise DegenerateInputException("flowSigma needs t > tPrev, got %s and %s." % (t, tPrev), ec = DEGENERATE_TIMESTEP)
    if tPrev < 0 or t >= fs.T:
        raise ConfigException("Flow timesteps must lie in [0, %s), got %s and %s." % (fs.T, t, tPrev))
    _checkEta(eta)
    sp, spPrev = fs.sigmaPrime[t], fs.sigmaPrime[tPrev]
    ap, apPrev = fs.alphaPrime[t], fs.alphaPrime[tPrev]
    if sp <= NUMERIC_FLOOR:
        raise DegenerateInputException("sigmaPrime at t = %s is %g." % (t, sp), ec = DEGENERATE_TIMESTEP)
    if apPrev <= NUMERIC_FLOOR:
        raise DegenerateInputException("alphaPrime at t = %s is %g." % (tPrev, apPrev), ec = DEGENERATE_TIMESTEP)
    return eta * math.sqrt((spPrev / sp) ** 2 * max(1.0 - (ap / apPrev) ** 2, 0.0))


def flowBackwardStep(xT, vPred, t, tPrev, eta, noise, fs):
    """
    Name: flowBackwardStep(xT, vPred, t, tPrev, eta, noise, fs)
    Desc: Stochastic backward step of a Flow-Matching model turned into an
          SDE. With x0hat = x_t - sp_t * v and epshat = x_t + ap_t * v:

              x_prev = ap_prev * x0hat + sqrt(sp_prev^2 - sigma^2) * epshat
                       + sigma * noise

          eta = 0 gives the deterministic update. Returns (xPrev, mean, sigma).
    """
    xT, vPred = asTensor(xT), asTensor(vPred)
    _checkShapes(xT, vPred, "flowBackwardStep")
    sigma = flowSigma(t, tPrev, eta, fs)
    sp, spPrev = fs.sigmaPrime[t], fs.sigmaPrime[tPrev]
    ap, apPrev = fs.alphaPrime[t], fs.alphaPrime[tPrev]
    direction = _clampedSqrt(spPrev * spPrev - sigma * sigma, "flowBackwardStep")
    x0hat = xT - vPred * sp
    epshat = xT + vPred * ap
    mean_ = x0hat * apPrev + epshat * direction
    if sigma == 0.0:
        return mean_, mean_, sigma
    noise = asTensor(noise)
    _checkShapes(mean_, noise, "flowBackwardStep")
    return mean_ + noise * sigma, mean_, sigma
