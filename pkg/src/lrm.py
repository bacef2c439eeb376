"""
Name: lrm.py
Desc: The Latent Reward Model. A denoiser backbone reads a noisy latent and
      its prompt; pooled down-block features and the enhanced mid-block
      feature are concatenated and projected, the prompt's text feature is
      projected, and the score is

          S(p, x_t) = tau * <l2(V), l2(T)>

      Visual Feature Enhancement extrapolates the conditional mid-block
      feature away from the null-prompt one by the guidance scale gs.
      Training uses the Bradley-Terry loss on pairs noised to a common
      uniformly drawn timestep.

      Feature order is [V_d1, ..., V_dL, V_enh]. Checkpoints rely on it.
"""
import math

import numpy as np

from LatentPrefPython import (
    Component,
    ConfigException,
    DegenerateInputException,
    ShapeException,
    )
from tensor import (
    Parameter,
    SgdMomentum,
    Tensor,
    asTensor,
    concat,
    exp,
    grad,
    l2Normalize,
    logSumExp,
    mean,
    noGrad,
    reshape,
    tsum,
    )
from denoiser import (
    NULL_CONDITION,
    Condition,
    DivergenceGuard,
    conditionIds,
    )
import diffusion


TAU_INIT_LOG = 2.6592
DEFAULT_GS = 7.5
DEFAULT_ND = 32
SCORE_CHUNK = 128
FEATURE_ORDER = "down1..downL,enh"


class FixedEncoder(object):
    """
    FixedEncoder(matrix = None)

    Frozen linear map from image space to latent space applied per spatial
    position across channels. None is the identity.
    """
    def __init__(self, matrix = None):
        self.matrix = None if matrix is None else np.array(matrix, dtype = np.float64)

    def __eq__(self, other):
        if not isinstance(other, FixedEncoder):
            return False
        if self.matrix is None or other.matrix is None:
            return self.matrix is None and other.matrix is None
        return self.matrix.shape == other.matrix.shape and bool(np.all(self.matrix == other.matrix))

    def __ne__(self, other):
        return not self.__eq__(other)

    def encode(self, images):
        images = np.asarray(images, dtype = np.float64)
        if self.matrix is None:
            return images
        return np.einsum("dc,...chw->...dhw", self.matrix, images)


class LrmHead(object):
    """
    LrmHead(nP, featureDim, nD = 32, rng = None, logTau = 2.6592)

    textProj maps the text feature (nP) and visualProj the concatenated
    visual features (featureDim) into the joint nD space. tau = exp(logTau).
    """
    def __init__(self, nP, featureDim, nD = DEFAULT_ND, rng = None, logTau = TAU_INIT_LOG):
        self.nP = int(nP)
        self.featureDim = int(featureDim)
        self.nD = int(nD)
        if rng is not None:
            textProj = rng.derive("head.text").normal((self.nP, self.nD)) / math.sqrt(self.nP)
            visualProj = rng.derive("head.visual").normal((self.featureDim, self.nD)) / math.sqrt(self.featureDim)
        else:
            textProj = np.zeros((self.nP, self.nD))
            visualProj = np.zeros((self.featureDim, self.nD))
        self.textProj = Parameter(textProj, "head.text_proj")
        self.visualProj = Parameter(visualProj, "head.visual_proj")
        self.logTau = Parameter(np.array(logTau, dtype = np.float64), "head.log_tau")

    @property
    def tau(self):
        return math.exp(float(self.logTau.values))

    def parameters(self):
        return [self.textProj, self.visualProj, self.logTau]

    def namedParameters(self):
        return [(p.name, p) for p in self.parameters()]


class Lrm(Component):
    """
    Lrm(backbone, head, gs = 7.5, encoder = None, debug = False)

    backbone is trainable; the encoder is frozen and must be the one that
    defines the optimized model's latent space.
    """
    def __init__(self, backbone, head, gs = DEFAULT_GS, encoder = None, debug = False):
        Component.__init__(self, debug)
        if gs < 1.0:
            raise ConfigException("VFE guidance scale gs must be >= 1, got %s." % gs)
        if head.featureDim != backbone.config.featureDim or head.nP != backbone.config.nP:
            raise ShapeException("Head dims (%s, %s) don't match the backbone (%s, %s)." % (head.nP, head.featureDim, backbone.config.nP, backbone.config.featureDim))
        self.backbone = backbone
        self.head = head
        self.gs = float(gs)
        self.encoder = encoder if encoder is not None else FixedEncoder()

    @classmethod
    def fromDenoiser(cls, dmo, rng, gs = DEFAULT_GS, nD = DEFAULT_ND, encoder = None, debug = False):
        """Backbone initialized as a copy of a pre-trained denoiser."""
        cfg = dmo.config
        return cls(dmo.copy(), LrmHead(cfg.nP, cfg.featureDim, nD, rng), gs, encoder, debug)

    def parameters(self):
        return self.backbone.parameters() + self.head.parameters()

    def namedParameters(self):
        named = [("backbone." + name, p) for name, p in self.backbone.namedParameters()]
        return named + self.head.namedParameters()

    def loadNamedParameters(self, named):
        named = dict(named)
        self.backbone.loadNamedParameters([(k[len("backbone."):], v) for k, v in named.items() if k.startswith("backbone.")])
        for name, p in self.head.namedParameters():
            if name not in named:
                raise ShapeException("Missing reward-head parameter %s." % name)
            p.assign(named[name])

    def scoreArray(self, xT, t, cond):
        """Scores of a batch of latents as a numpy array, without graph recording."""
        xT = np.asarray(xT.values if isinstance(xT, Tensor) else xT, dtype = np.float64)
        n = xT.shape[0]
        ids = np.broadcast_to(conditionIds(cond), (n,))
        ts = np.broadcast_to(np.asarray(t, dtype = np.int64), (n,))
        out = np.empty(n)
        with noGrad():
            for start in range(0, n, SCORE_CHUNK):
                stop = min(start + SCORE_CHUNK, n)
                out[start:stop] = lrmScoreBatch(xT[start:stop], ts[start:stop], ids[start:stop], self).values
        return out


def encodeText(cond, head, backbone = None):
    """
    Name: encodeText(cond, head, backbone = None)
    Desc: T = f_eos @ textProj. f_eos is cond.embedding when present,
          otherwise the backbone's condition-table rows for cond.
    """
    if isinstance(cond, Condition) and cond.embedding is not None:
        feature = asTensor(cond.embedding)
    elif backbone is not None:
        feature = backbone.conditionFeature(conditionIds(cond))
    else:
        raise ConfigException("encodeText needs a condition embedding or a backbone.")
    return feature @ head.textProj


def vfe(vMid, vMidUncond, gs):
    """
    Name: vfe(vMid, vMidUncond, gs)
    Desc: V_enh = V_mid + (gs - 1) * (V_mid - V_mid_uncond). gs = 1 returns
          vMid itself.

    >>> vfe(Tensor([1.0, 0.0]), Tensor([0.0, 1.0]), 7.5).numpy()
    array([ 7.5, -6.5])
    """
    if gs < 1.0:
        raise ConfigException("VFE guidance scale gs must be >= 1, got %s." % gs)
    vMid, vMidUncond = asTensor(vMid), asTensor(vMidUncond)
    if vMid.shape != vMidUncond.shape:
        raise ShapeException("vfe shapes %s and %s differ." % (vMid.shape, vMidUncond.shape))
    if gs == 1.0:
        return vMid
    return vMid + (vMid - vMidUncond) * (gs - 1.0)


def scoreFromFeatures(visual, text, logTau):
    """tau * cosine(visual, text) along the last axis."""
    return exp(logTau) * tsum(l2Normalize(visual) * l2Normalize(text), axis = -1)


def lrmScoreBatch(xT, t, cond, model):
    """
    Name: lrmScoreBatch(xT, t, cond, model)
    Args: xT, batch of noisy latents [B, C, H, W]
          t, timestep or one per entry
          cond, prompt or one per entry
    Desc: Scores [B] with the same semantics as lrmScore.
    """
    xT = asTensor(xT)
    if xT.ndim != 4:
        raise ShapeException("lrmScoreBatch expects [B, C, H, W], got %s." % (xT.shape,))
    B = xT.shape[0]
    ids = np.broadcast_to(conditionIds(cond), (B,))
    ts = np.broadcast_to(np.asarray(t, dtype = np.int64), (B,))
    backbone = model.backbone

    features = backbone.forward(xT, ts, ids)[1]
    if model.gs == 1.0:
        vEnh = features.vMid
    else:
        uncond = backbone.forward(xT, ts, np.full(B, NULL_CONDITION, dtype = np.int64))[1]
        vEnh = vfe(features.vMid, uncond.vMid, model.gs)
    visual = concat(features.vDown + [vEnh], axis = 1) @ model.head.visualProj
    text = encodeText(ids, model.head, backbone)
    return scoreFromFeatures(visual, text, model.head.logTau)


def lrmScore(xT, t, cond, model):
    """
    Name: lrmScore(xT, t, cond, model)
    Desc: Scalar score of one latent [C, H, W]. Bounded by tau in absolute
          value. Raises DegenerateInputException when a projected vector is
          below the numeric floor.
    """
    xT = asTensor(xT)
    if xT.ndim != 3:
        raise ShapeException("lrmScore expects one latent [C, H, W], got %s." % (xT.shape,))
    return lrmScoreBatch(reshape(xT, (1,) + xT.shape), t, cond, model)[0]


class PreferencePair(object):
    """
    PreferencePair(x0Win, x0Lose, cond, target = 1.0)

    target is the probability that x0Win is preferred: 1.0 for ordinary
    pairs, 0.5 for ties.
    """
    def __init__(self, x0Win, x0Lose, cond, target = 1.0):
        self.x0Win = np.asarray(x0Win, dtype = np.float64)
        self.x0Lose = np.asarray(x0Lose, dtype = np.float64)
        self.cond = cond if isinstance(cond, Condition) else Condition(cond)
        self.target = float(target)
        if self.x0Win.shape != self.x0Lose.shape:
            raise ShapeException("Pair latents differ in shape: %s vs %s." % (self.x0Win.shape, self.x0Lose.shape))
        if np.array_equal(self.x0Win, self.x0Lose):
            raise DegenerateInputException("Winner and loser latents are identical.")

    def __repr__(self):
        return "<lrm.PreferencePair( cond = %s, target = %s )>" % (self.cond.id, self.target)

    def swapped(self):
        return PreferencePair(self.x0Lose, self.x0Win, self.cond, 1.0 - self.target)


def pairsToArrays(pairs):
    """(x0Win [N, ...], x0Lose [N, ...], condIds [N], targets [N])"""
    if not pairs:
        raise ConfigException("No preference pairs.")
    x0W = np.stack([p.x0Win for p in pairs])
    x0L = np.stack([p.x0Lose for p in pairs])
    ids = np.array([p.cond.id for p in pairs], dtype = np.int64)
    targets = np.array([p.target for p in pairs], dtype = np.float64)
    return x0W, x0L, ids, targets


def btLossFromScores(sWin, sLose, target = 1.0):
    """
    Name: btLossFromScores(sWin, sLose, target = 1.0)
    Desc: Bradley-Terry negative log likelihood
          -[target * log P(win) + (1 - target) * log P(lose)] with
          P(win) = exp(sWin) / (exp(sWin) + exp(sLose)), evaluated through
          log-sum-exp. Scores may be batched; the result is their mean.

    >>> round(btLossFromScores(Tensor(1.0), Tensor(1.0)).item(), 5)
    0.69315
    """
    sWin, sLose = asTensor(sWin), asTensor(sLose)
    stacked = concat([reshape(sWin, (1, -1)), reshape(sLose, (1, -1))], axis = 0)
    target = np.broadcast_to(np.asarray(target, dtype = np.float64), (stacked.shape[1],))
    chosen = tsum(stacked * np.stack([target, 1.0 - target]), axis = 0)
    return mean(logSumExp(stacked, axis = 0) - chosen)


def _batchBtLoss(model, x0W, x0L, ids, t, epsW, epsL, targets, schedule):
    ab = schedule.alphaBar[np.asarray(t, dtype = np.int64)].reshape(-1, 1, 1, 1)
    xW = np.sqrt(ab) * model.encoder.encode(x0W) + np.sqrt(1.0 - ab) * epsW
    xL = np.sqrt(ab) * model.encoder.encode(x0L) + np.sqrt(1.0 - ab) * epsL
    B = xW.shape[0]
    scores = lrmScoreBatch(Tensor(np.concatenate([xW, xL])), np.concatenate([t, t]), np.concatenate([ids, ids]), model)
    return btLossFromScores(scores[:B], scores[B:], targets)


def btLoss(pair, t, epsW, epsL, model, schedule):
    """
    Name: btLoss(pair, t, epsW, epsL, model, schedule)
    Desc: Bradley-Terry loss of one pair after noising both latents to
          timestep t with their own noise draws.
    """
    epsW = np.asarray(epsW.values if isinstance(epsW, Tensor) else epsW, dtype = np.float64)
    epsL = np.asarray(epsL.values if isinstance(epsL, Tensor) else epsL, dtype = np.float64)
    return _batchBtLoss(model, pair.x0Win[None], pair.x0Lose[None], np.array([pair.cond.id]), np.array([t]), epsW[None], epsL[None], np.array([pair.target]), schedule)


class LrmTrainer(Component):
    """
    LrmTrainer(schedule, lr = 0.01, batchSize = 16, warmupSteps = 0,
               momentum = 0.9, maxGradNorm = 5.0, debug = False)

    Minibatch Bradley-Terry descent over backbone and head parameters. Each
    pair in a batch gets its own t ~ U{0, ..., T-1} and noise draws.
    """
    def __init__(self, schedule, lr = 0.01, batchSize = 16, warmupSteps = 0, momentum = 0.9, maxGradNorm = 5.0, logEvery = 100, debug = False):
        Component.__init__(self, debug)
        self.schedule = schedule
        self.lr = lr
        self.batchSize = batchSize
        self.warmupSteps = warmupSteps
        self.momentum = momentum
        self.maxGradNorm = maxGradNorm
        self.logEvery = logEvery

    def train(self, pairs, model, steps, rng):
        x0W, x0L, ids, targets = pairsToArrays(pairs)
        n = x0W.shape[0]
        opt = SgdMomentum(model.parameters(), self.lr, self.momentum, self.warmupSteps, self.maxGradNorm)
        guard = DivergenceGuard()
        for step in range(steps):
            stepRng = rng.child(step)
            idx = stepRng.integers(0, n, self.batchSize)
            t = stepRng.integers(0, self.schedule.T, self.batchSize)
            epsW = stepRng.normal((self.batchSize,) + x0W.shape[1:])
            epsL = stepRng.normal((self.batchSize,) + x0W.shape[1:])
            opt.zeroGrad()
            loss = _batchBtLoss(model, x0W[idx], x0L[idx], ids[idx], t, epsW, epsL, targets[idx], self.schedule)
            grad(loss)
            opt.step()
            guard.update(loss.item())
            if self.logEvery and (step % self.logEvery == 0 or step == steps - 1):
                self._debugprint("train-lrm step %s loss %.5f lr %.3g" % (step, loss.item(), opt.currentLr()))
        return model, guard.curve


def trainLrm(pairs, model, steps, lr, rng, schedule = None, batchSize = 16, warmupSteps = 0, debug = False):
    """
    Name: trainLrm(pairs, model, steps, lr, rng, schedule = None, ...)
    Desc: Trains model in place and returns (model, lossCurve). The encoder
          has no parameters and is never touched.
    """
    if schedule is None:
        schedule = diffusion.buildLinearSchedule()
    trainer = LrmTrainer(schedule, lr = lr, batchSize = batchSize, warmupSteps = warmupSteps, debug = debug)
    return trainer.train(pairs, model, steps, rng)


def pairwiseAccuracy(pairs, t, model, rng, schedule = None):
    """
    Name: pairwiseAccuracy(pairs, t, model, rng, schedule = None)
    Args: model, an Lrm or any callable (xT [B, ...], t, condIds) -> scores
    Desc: Share of pairs with S(win) > S(lose) after noising both latents to
          t with independent draws. Ties count one half.
    """
    if schedule is None:
        schedule = diffusion.buildLinearSchedule()
    x0W, x0L, ids, _ = pairsToArrays(pairs)
    encoder = model.encoder if isinstance(model, Lrm) else FixedEncoder()
    scoreFn = model.scoreArray if isinstance(model, Lrm) else model
    ab = schedule.alphaBarAt(t)
    xW = math.sqrt(ab) * encoder.encode(x0W) + math.sqrt(1.0 - ab) * rng.derive("win").normal(x0W.shape)
    xL = math.sqrt(ab) * encoder.encode(x0L) + math.sqrt(1.0 - ab) * rng.derive("lose").normal(x0L.shape)
    sW = np.asarray(scoreFn(xW, t, ids), dtype = np.float64)
    sL = np.asarray(scoreFn(xL, t, ids), dtype = np.float64)
    return float(np.mean(np.where(sW > sL, 1.0, np.where(sW == sL, 0.5, 0.0))))
