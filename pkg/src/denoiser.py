"""
Name: denoiser.py
Desc: A tiny conditional noise-prediction network, its feature taps, and the
      pre-training loop on the synthetic latent task.

      The network is a small U-Net: L down blocks (3x3 convolution,
      timestep/condition modulation, SiLU, 2x average downsample), one mid
      block, mirrored up blocks with skip connections and a 3x3 output head.
      Every block scales and shifts its channels with a projection of
      silu(time embedding + condition embedding). Pooled features are tapped
      at each down-block output (before downsampling) and at the mid-block
      output.

      Condition id 0 is the null prompt. Pre-training drops the condition to
      id 0 with probability condDropout so the unconditional pass is usable
      for classifier-free guidance and for the reward model's feature
      enhancement.
"""
import math

import numpy as np

from LatentPrefPython import (
    Component,
    ConfigException,
    DivergenceException,
    ShapeException,
    )
from tensor import (
    Parameter,
    SgdMomentum,
    Tensor,
    asTensor,
    avgPool2x,
    avgPoolSpatial,
    concat,
    conv2d,
    gather,
    grad,
    mean,
    noGrad,
    reshape,
    silu,
    upsample2x,
    )
import diffusion


NULL_CONDITION = 0


class DenoiserConfig(object):
    """
    DenoiserConfig(channels = 4, size = 8, L = 2, width = 16, nP = 16,
                   vocab = 5, timeEmbedDim = 16, ctxDim = 32)

    Block i has width * 2**i channels; the mid block keeps the last width.
    """
    def __init__(self, channels = 4, size = 8, L = 2, width = 16, nP = 16, vocab = 5, timeEmbedDim = 16, ctxDim = 32):
        self.channels = int(channels)
        self.size = int(size)
        self.L = int(L)
        self.width = int(width)
        self.nP = int(nP)
        self.vocab = int(vocab)
        self.timeEmbedDim = int(timeEmbedDim)
        self.ctxDim = int(ctxDim)
        self.validate()

    def validate(self):
        if self.L < 1:
            raise ConfigException("Denoiser needs L >= 1 down blocks.")
        if self.width < 4 or self.nP < 4 or self.ctxDim < 4:
            raise ConfigException("Denoiser widths must be >= 4.")
        if self.timeEmbedDim < 2 or self.timeEmbedDim % 2:
            raise ConfigException("timeEmbedDim must be a positive even number.")
        if self.vocab < 2:
            raise ConfigException("vocab must hold the null condition and at least one prompt.")
        if self.channels < 1:
            raise ConfigException("channels must be >= 1.")
        if self.size < 1 or self.size % (2 ** self.L):
            raise ConfigException("Latent size %s is not divisible by 2**L = %s." % (self.size, 2 ** self.L))

    @property
    def latentShape(self):
        return (self.channels, self.size, self.size)

    @property
    def widths(self):
        return [self.width * 2 ** i for i in range(self.L)]

    @property
    def midWidth(self):
        return self.widths[-1]

    @property
    def featureDim(self):
        """Length of [V_d1, ..., V_dL, V_mid]."""
        return sum(self.widths) + self.midWidth

    def asDict(self):
        return {
            "channels": self.channels,
            "size": self.size,
            "L": self.L,
            "width": self.width,
            "nP": self.nP,
            "vocab": self.vocab,
            "timeEmbedDim": self.timeEmbedDim,
            "ctxDim": self.ctxDim,
            }

    def __eq__(self, other):
        return isinstance(other, DenoiserConfig) and self.asDict() == other.asDict()

    def __ne__(self, other):
        return not self.__eq__(other)


class Condition(object):
    """
    Condition(id, embedding = None)

    A prompt of the toy vocabulary. embedding is the row of the condition
    table it was looked up from, when known.
    """
    def __init__(self, id, embedding = None):
        self.id = int(id)
        self.embedding = embedding

    def __repr__(self):
        return "<denoiser.Condition( id = %s )>" % self.id

    @property
    def isNull(self):
        return self.id == NULL_CONDITION


def conditionIds(cond):
    """Accepts a Condition, an int, or a sequence of either."""
    if isinstance(cond, Condition):
        return np.array(cond.id, dtype = np.int64)
    if isinstance(cond, (list, tuple)):
        return np.array([c.id if isinstance(c, Condition) else int(c) for c in cond], dtype = np.int64)
    return np.asarray(cond, dtype = np.int64)


class FeatureBundle(object):
    """Pooled down-block features vDown (one per block) and mid feature vMid."""
    def __init__(self, vDown, vMid):
        self.vDown = list(vDown)
        self.vMid = vMid

    def __repr__(self):
        return "<denoiser.FeatureBundle( down = %s, mid = %s )>" % ([v.shape for v in self.vDown], self.vMid.shape)


def timestepEmbed(t, dim):
    """
    Name: timestepEmbed(t, dim)
    Args: t, an integer timestep or an integer array of them
          dim, even embedding width
    Desc: Interleaved sin/cos at geometric frequencies 10000**(-k/(dim/2)).
          Entry 2k is sin(t f_k), entry 2k+1 is cos(t f_k).

    >>> timestepEmbed(0, 4).numpy()
    array([0., 1., 0., 1.])
    """
    if dim < 2 or dim % 2:
        raise ConfigException("Timestep embedding width must be even, got %s." % dim)
    t = np.asarray(t, dtype = np.float64)
    freqs = np.power(10000.0, -np.arange(dim // 2, dtype = np.float64) / (dim // 2))
    angles = t[..., None] * freqs
    out = np.empty(t.shape + (dim,), dtype = np.float64)
    out[..., 0::2] = np.sin(angles)
    out[..., 1::2] = np.cos(angles)
    return Tensor(out)


def _convInit(rng, cOut, cIn, scale = 1.0):
    std = scale * math.sqrt(2.0 / (cIn * 9))
    return rng.normal((cOut, cIn, 3, 3)) * std


class Denoiser(Component):
    """
    Denoiser(config = None, rng = None, debug = False)

    Parameters are kept in a name-ordered dict; names are stable and are the
    keys written to checkpoints.

    >>> net = Denoiser(DenoiserConfig(), RngStream(0))
    >>> eps, feats = net.forward(x, 500, 1)
    """
    def __init__(self, config = None, rng = None, debug = False):
        Component.__init__(self, debug)
        self.config = config if config is not None else DenoiserConfig()
        self.params = dict()
        if rng is not None:
            self._initParameters(rng)

    def __repr__(self):
        return "<denoiser.Denoiser( widths = %s, parameters = %s )>" % (self.config.widths, self.parameterCount())

    def _add(self, name, values):
        self.params[name] = Parameter(values, name)

    def _initParameters(self, rng):
        cfg = self.config
        E = cfg.ctxDim
        self._add("cond.table", rng.derive("cond.table").normal((cfg.vocab, cfg.nP)))
        self._add("ctx.time.w", rng.derive("ctx.time.w").normal((cfg.timeEmbedDim, E)) / math.sqrt(cfg.timeEmbedDim))
        self._add("ctx.cond.w", rng.derive("ctx.cond.w").normal((cfg.nP, E)) / math.sqrt(cfg.nP))
        self._add("ctx.b", np.zeros(E))

        blocks = []
        cIn = cfg.channels
        for i, w in enumerate(cfg.widths):
            blocks.append(("down%d" % i, cIn, w))
            cIn = w
        blocks.append(("mid", cIn, cfg.midWidth))
        cIn = cfg.midWidth
        for i in reversed(range(cfg.L)):
            w = cfg.widths[i]
            blocks.append(("up%d" % i, cIn + w, w))
            cIn = w
        for name, blockIn, blockOut in blocks:
            self._add(name + ".conv.w", _convInit(rng.derive(name + ".conv.w"), blockOut, blockIn))
            self._add(name + ".conv.b", np.zeros(blockOut))
            self._add(name + ".scale.w", rng.derive(name + ".scale.w").normal((E, blockOut)) * (0.5 / math.sqrt(E)))
            self._add(name + ".shift.w", rng.derive(name + ".shift.w").normal((E, blockOut)) * (0.5 / math.sqrt(E)))

        self._add("out.w", _convInit(rng.derive("out.w"), cfg.channels, cfg.widths[0], scale = 0.1))
        self._add("out.b", np.zeros(cfg.channels))

    def parameters(self):
        return list(self.params.values())

    def namedParameters(self):
        return list(self.params.items())

    def parameterCount(self):
        return sum(p.size for p in self.params.values())

    def loadNamedParameters(self, named):
        """Replaces parameter values from (name, array) pairs; names and shapes must match."""
        named = dict(named)
        if set(named) != set(self.params) and self.params:
            missing = sorted(set(self.params) - set(named))
            extra = sorted(set(named) - set(self.params))
            raise ShapeException("Parameter names differ (missing %s, unexpected %s)." % (missing, extra))
        if not self.params:
            for name, values in named.items():
                self._add(name, values)
            return
        for name, p in self.params.items():
            p.assign(named[name])

    def copy(self):
        """A new Denoiser with copied parameter values and zero gradients."""
        other = Denoiser(self.config, None, self.debug)
        for name, p in self.params.items():
            other._add(name, p.values)
        return other

    def condition(self, id):
        if not (0 <= id < self.config.vocab):
            raise ConfigException("Condition id %s outside [0, %s)." % (id, self.config.vocab))
        return Condition(id, gather(self.params["cond.table"], [id])[0])

    def conditionFeature(self, ids):
        """Rows of the condition table for ids (the text feature f_eos)."""
        ids = np.asarray(ids, dtype = np.int64)
        if np.any(ids < 0) or np.any(ids >= self.config.vocab):
            raise ConfigException("Condition id outside [0, %s)." % self.config.vocab)
        return gather(self.params["cond.table"], ids)

    def _block(self, name, h, ctx):
        P = self.params
        B, width = h.shape[0], P[name + ".conv.b"].shape[0]
        h = conv2d(h, P[name + ".conv.w"], P[name + ".conv.b"])
        scale = reshape(ctx @ P[name + ".scale.w"], (B, width, 1, 1))
        shift = reshape(ctx @ P[name + ".shift.w"], (B, width, 1, 1))
        return silu(h * (scale + 1.0) + shift)

    def forward(self, x, t, cond):
        """
        Name: Denoiser.forward(x, t, cond)
        Args: x, latent [C, H, W] or batch [B, C, H, W]
              t, timestep (int) or one per batch entry
              cond, Condition / id, or one per batch entry
        Desc: Returns (epsPred, FeatureBundle). Feature vectors are [width]
              for a single latent and [B, width] for a batch.
        """
        P = self.params
        cfg = self.config
        x = asTensor(x)
        single = x.ndim == 3
        if single:
            x = reshape(x, (1,) + x.shape)
        if x.ndim != 4 or x.shape[1:] != cfg.latentShape:
            raise ShapeException("Denoiser expects latents of shape %s, got %s." % (cfg.latentShape, x.shape))
        B = x.shape[0]
        tArr = np.broadcast_to(np.asarray(t, dtype = np.int64), (B,))
        ids = np.broadcast_to(conditionIds(cond), (B,))

        tEmb = timestepEmbed(tArr, cfg.timeEmbedDim)
        ctx = silu(tEmb @ P["ctx.time.w"] + self.conditionFeature(ids) @ P["ctx.cond.w"] + P["ctx.b"])

        h = x
        skips = []
        vDown = []
        for i in range(cfg.L):
            h = self._block("down%d" % i, h, ctx)
            vDown.append(avgPoolSpatial(h))
            skips.append(h)
            h = avgPool2x(h)
        h = self._block("mid", h, ctx)
        vMid = avgPoolSpatial(h)
        for i in reversed(range(cfg.L)):
            h = concat([upsample2x(h), skips[i]], axis = 1)
            h = self._block("up%d" % i, h, ctx)
        eps = conv2d(h, P["out.w"], P["out.b"])

        if single:
            eps = reshape(eps, cfg.latentShape)
            vDown = [v[0] for v in vDown]
            vMid = vMid[0]
        return eps, FeatureBundle(vDown, vMid)


def denoiseForward(xT, t, cond, net):
    """(epsPred, FeatureBundle) for latent xT at timestep t under cond."""
    return net.forward(xT, t, cond)


def cfgEval(xT, t, cond, net, guidance):
    """
    Name: cfgEval(xT, t, cond, net, guidance)
    Desc: Classifier-free guidance, eps_u + guidance * (eps_c - eps_u) with
          eps_u the null-condition prediction. guidance = 1 returns the
          conditional prediction itself.
    """
    if guidance < 1.0:
        raise ConfigException("Guidance scale must be >= 1, got %s." % guidance)
    epsCond = net.forward(xT, t, cond)[0]
    if guidance == 1.0:
        return epsCond
    nullIds = np.zeros_like(conditionIds(cond))
    epsUncond = net.forward(xT, t, nullIds)[0]
    return epsUncond + (epsCond - epsUncond) * guidance


def makeDenoiserEval(net, cond, guidance = 1.0):
    """Callback (x, t) -> eps for the samplers in diffusion.py."""
    def denoiserEval(x, t):
        return cfgEval(x, t, cond, net, guidance)
    return denoiserEval


# Synthetic task ---------------------------------------------------------------

def smoothPatterns(count, shape, rng, components = 2, maxFreq = 2):
    """
    count latents of the given [C, H, W] shape built from low-frequency
    sinusoids, each scaled to unit RMS.
    """
    C, H, W = shape
    hh = np.arange(H, dtype = np.float64)[:, None] / H
    ww = np.arange(W, dtype = np.float64)[None, :] / W
    out = np.zeros((count, C, H, W))
    u = rng.integers(0, maxFreq + 1, (count, C, components))
    v = rng.integers(0, maxFreq + 1, (count, C, components))
    v = np.where((u == 0) & (v == 0), 1, v)
    phase = rng.uniform(0.0, 2.0 * math.pi, (count, C, components))
    amp = rng.normal((count, C, components))
    for n in range(count):
        for c in range(C):
            for j in range(components):
                out[n, c] += amp[n, c, j] * np.sin(2.0 * math.pi * (u[n, c, j] * hh + v[n, c, j] * ww) + phase[n, c, j])
    rms = np.sqrt((out ** 2).reshape(count, -1).mean(axis = 1))
    return out / np.maximum(rms, 1e-6)[:, None, None, None]


class SyntheticTask(object):
    """
    SyntheticTask(config, rng, alignLow = 0.3, roughHigh = 0.5)

    One target pattern per prompt id (row 0, the null prompt, is zero).
    A latent for prompt k is

        align * target_k + sqrt(1 - align^2) * distractor + rough * noise

    with align ~ U(alignLow, 1), a fresh smooth distractor pattern and
    rough ~ U(0, roughHigh). Alignment and smoothness vary independently,
    which is what the reward oracles in mpcf.py measure.
    """
    def __init__(self, config, rng, alignLow = 0.3, roughHigh = 0.5):
        self.config = config
        self.alignLow = float(alignLow)
        self.roughHigh = float(roughHigh)
        self.targets = np.zeros((config.vocab,) + config.latentShape)
        self.targets[1:] = smoothPatterns(config.vocab - 1, config.latentShape, rng.derive("targets"))

    @property
    def promptIds(self):
        return list(range(1, self.config.vocab))

    def target(self, condId):
        return self.targets[int(condId)]

    def sampleLatents(self, condIds, rng, align = None, rough = None):
        """Latents for each id in condIds; align/rough override the random levels."""
        condIds = np.asarray(condIds, dtype = np.int64)
        n = condIds.size
        if align is None:
            align = rng.uniform(self.alignLow, 1.0, n)
        if rough is None:
            rough = rng.uniform(0.0, self.roughHigh, n)
        align = np.broadcast_to(np.asarray(align, dtype = np.float64), (n,))
        rough = np.broadcast_to(np.asarray(rough, dtype = np.float64), (n,))
        distractor = smoothPatterns(n, self.config.latentShape, rng)
        noise = rng.normal((n,) + self.config.latentShape)
        shape = (n, 1, 1, 1)
        return (align.reshape(shape) * self.targets[condIds]
                + np.sqrt(1.0 - align ** 2).reshape(shape) * distractor
                + rough.reshape(shape) * noise)

    def dataset(self, n, rng):
        """(latents [n, C, H, W], condIds [n]) with prompts drawn uniformly."""
        condIds = rng.integers(1, self.config.vocab, n)
        return self.sampleLatents(condIds, rng.derive("latents")), condIds


class DivergenceGuard(object):
    """
    Records a loss curve and raises DivergenceException once the loss has
    stayed above factor times its initial value for patience steps.
    """
    def __init__(self, factor = 10.0, patience = 100):
        self.factor = factor
        self.patience = patience
        self.initial = None
        self.streak = 0
        self.curve = []

    def update(self, loss):
        self.curve.append(loss)
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * self.initial:
            self.streak += 1
        else:
            self.streak = 0
        if self.streak >= self.patience:
            raise DivergenceException("Loss above %gx its initial value %.4g for %s steps (last %.4g)." % (self.factor, self.initial, self.streak, loss), lossCurve = list(self.curve))


def epsilonLoss(net, x0, t, eps, condIds, schedule):
    """mean((eps - eps_theta(forwardNoise(x0, t, eps), t, c))^2) over a batch."""
    ab = schedule.alphaBar[np.asarray(t, dtype = np.int64)].reshape(-1, 1, 1, 1)
    xT = np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps
    epsPred = net.forward(Tensor(xT), t, condIds)[0]
    diff = epsPred - eps
    return mean(diff * diff)


class Pretrainer(Component):
    """
    Pretrainer(schedule, lr = 0.01, batchSize = 32, condDropout = 0.1,
               momentum = 0.9, maxGradNorm = 5.0, debug = False)

    Epsilon-prediction training with SGD + momentum.
    """
    def __init__(self, schedule, lr = 0.01, batchSize = 32, condDropout = 0.1, momentum = 0.9, maxGradNorm = 5.0, logEvery = 100, debug = False):
        Component.__init__(self, debug)
        self.schedule = schedule
        self.lr = lr
        self.batchSize = batchSize
        self.condDropout = condDropout
        self.momentum = momentum
        self.maxGradNorm = maxGradNorm
        self.logEvery = logEvery

    def train(self, dataset, net, steps, rng):
        latents, condIds = dataset
        latents = np.asarray(latents, dtype = np.float64)
        condIds = np.asarray(condIds, dtype = np.int64)
        if latents.shape[0] == 0:
            raise ConfigException("Pre-training dataset is empty.")
        if latents.shape[0] != condIds.shape[0]:
            raise ShapeException("%s latents but %s condition ids." % (latents.shape[0], condIds.shape[0]))

        opt = SgdMomentum(net.parameters(), self.lr, self.momentum, maxGradNorm = self.maxGradNorm)
        guard = DivergenceGuard()
        for step in range(steps):
            stepRng = rng.child(step)
            idx = stepRng.integers(0, latents.shape[0], self.batchSize)
            t = stepRng.integers(0, self.schedule.T, self.batchSize)
            eps = stepRng.normal((self.batchSize,) + latents.shape[1:])
            ids = np.where(stepRng.uniform(0.0, 1.0, self.batchSize) < self.condDropout, NULL_CONDITION, condIds[idx])

            opt.zeroGrad()
            loss = epsilonLoss(net, latents[idx], t, eps, ids, self.schedule)
            grad(loss)
            opt.step()
            guard.update(loss.item())
            if self.logEvery and (step % self.logEvery == 0 or step == steps - 1):
                self._debugprint("pretrain step %s loss %.5f" % (step, loss.item()))
        return net, guard.curve


def pretrainDenoiser(dataset, net, steps, lr, rng, schedule = None, batchSize = 32, condDropout = 0.1, debug = False):
    """
    Name: pretrainDenoiser(dataset, net, steps, lr, rng, schedule = None, ...)
    Args: dataset, (latents, condIds)
          net, the Denoiser, trained in place
          steps, number of minibatch steps
          lr, learning rate
          rng, RngStream; step i draws from rng.child(i)
    Desc: Returns (net, lossCurve). Raises DivergenceException when the loss
          stays above 10x its initial value for 100 consecutive steps.
    """
    if schedule is None:
        schedule = diffusion.buildLinearSchedule()
    trainer = Pretrainer(schedule, lr = lr, batchSize = batchSize, condDropout = condDropout, debug = debug)
    return trainer.train(dataset, net, steps, rng)


def generate(net, condIds, rng, schedule, config, xT = None):
    """
    Name: generate(net, condIds, rng, schedule, config, xT = None)
    Desc: Batched sampling for one prompt per entry of condIds, starting from
          rng.derive("xT") noise unless xT is given. Returns the final
          clean-level latents as a numpy array.
    """
    condIds = np.asarray(condIds, dtype = np.int64)
    if xT is None:
        xT = rng.derive("xT").normal((condIds.size,) + net.config.latentShape)
    with noGrad():
        evaluator = makeDenoiserEval(net, condIds, config.guidanceScale)
        trajectory = diffusion.fullDenoise(Tensor(xT), evaluator, config, rng.derive("steps"), schedule)
    return trajectory.final.numpy()
