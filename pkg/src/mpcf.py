"""
Name: mpcf.py
Desc: Multi-preference consistent filtering of preference pairs.

      Every pair carries three per-dimension scores for winner and loser:
      aesthetics (S_A), prompt alignment (S_C) and question-answer alignment
      (S_V). The gaps G = S(win) - S(lose) decide which pairs are kept:

          strategy1   G_A >= 0     G_C >= 0   G_V >= 0
          strategy2   G_A >= -0.5  G_C >= 0   G_V >= 0
          strategy3   G_A >= -1    G_C >= 0   G_V >= 0
          tie         |G_A| <= 0.2 |G_C| <= 0.03 |G_V| <= 0.07

      All bounds are inclusive. The module also holds the analytic oracles
      that stand in for the three scoring models, the synthetic corpus
      generator and the Pearson correlation metrics.
"""
import hashlib
import struct

import numpy as np

from LatentPrefPython import (
    NUMERIC_FLOOR,
    UNDEFINED_CORRELATION,
    ConfigException,
    DegenerateInputException,
    ShapeException,
    )
from lrm import FixedEncoder, Lrm, PreferencePair
import diffusion


VQA_PERTURBATION = 0.1
HIDDEN_AES_WEIGHT = 0.5
HIDDEN_CLIP_WEIGHT = 0.5
DEFAULT_LABEL_NOISE = 0.1
MAX_SEPARABLE_ROUNDS = 200
DIMENSIONS = ("A", "C", "V")


class ScoredPair(object):
    """
    ScoredPair(pair, sAes, sClip, sVqa)

    Each score argument is a (win, lose) tuple.
    """
    def __init__(self, pair, sAes, sClip, sVqa):
        self.pair = pair
        self.sAes = (float(sAes[0]), float(sAes[1]))
        self.sClip = (float(sClip[0]), float(sClip[1]))
        self.sVqa = (float(sVqa[0]), float(sVqa[1]))
        if not np.all(np.isfinite(self.sAes + self.sClip + self.sVqa)):
            raise DegenerateInputException("ScoredPair scores must be finite.")

    def __repr__(self):
        return "<mpcf.ScoredPair( cond = %s, aes = %s, clip = %s, vqa = %s )>" % (self.pair.cond.id, self.sAes, self.sClip, self.sVqa)

    def swapped(self):
        return ScoredPair(self.pair.swapped(), self.sAes[::-1], self.sClip[::-1], self.sVqa[::-1])


class GapRecord(object):
    def __init__(self, gA, gC, gV):
        self.gA = gA
        self.gC = gC
        self.gV = gV

    def __repr__(self):
        return "<mpcf.GapRecord( %g, %g, %g )>" % (self.gA, self.gC, self.gV)

    def asTuple(self):
        return (self.gA, self.gC, self.gV)

    def get(self, dim):
        return {"A": self.gA, "C": self.gC, "V": self.gV}[dim]


class FilterStrategy(object):
    """
    FilterStrategy(name, lower = None, bound = None)

    Win-lose strategies keep a record when every gap is at least its lower
    threshold; the tie strategy keeps a record when every absolute gap is at
    most its bound.
    """
    def __init__(self, name, lower = None, bound = None):
        self.name = name
        self.lower = lower
        self.bound = bound

    def __repr__(self):
        return "<mpcf.FilterStrategy( %s )>" % self.name

    @property
    def isTie(self):
        return self.bound is not None

    def accepts(self, gap):
        g = gap.asTuple()
        if self.isTie:
            return all(abs(x) <= b for x, b in zip(g, self.bound))
        return all(x >= lo for x, lo in zip(g, self.lower))

    @staticmethod
    def byName(name):
        """Accepts 1, "2", "strategy3" or "tie"."""
        key = str(name).strip().lower()
        if key.isdigit():
            key = "strategy" + key
        try:
            return STRATEGIES[key]
        except KeyError:
            raise ConfigException("Unknown filter strategy %r (strategy1, strategy2, strategy3 or tie)." % (name,))


STRATEGY1 = FilterStrategy("strategy1", lower = (0.0, 0.0, 0.0))
STRATEGY2 = FilterStrategy("strategy2", lower = (-0.5, 0.0, 0.0))
STRATEGY3 = FilterStrategy("strategy3", lower = (-1.0, 0.0, 0.0))
TIE = FilterStrategy("tie", bound = (0.2, 0.03, 0.07))
STRATEGIES = dict((s.name, s) for s in (STRATEGY1, STRATEGY2, STRATEGY3, TIE))


def computeGaps(sp):
    """
    >>> computeGaps(sp).gA    # sp.sAes == (5.2, 5.5)
    -0.3...
    """
    return GapRecord(sp.sAes[0] - sp.sAes[1], sp.sClip[0] - sp.sClip[1], sp.sVqa[0] - sp.sVqa[1])


def scoreRecords(scoredPairs):
    """[(ScoredPair, GapRecord)] for a list of ScoredPairs."""
    return [(sp, computeGaps(sp)) for sp in scoredPairs]


def filterWinlose(records, strategy):
    """Records whose gaps satisfy a win-lose strategy, in input order."""
    if not isinstance(strategy, FilterStrategy):
        strategy = FilterStrategy.byName(strategy)
    if strategy.isTie:
        raise ConfigException("filterWinlose needs strategy1, strategy2 or strategy3.")
    return [r for r in records if strategy.accepts(r[1])]


def filterTies(records):
    return [r for r in records if TIE.accepts(r[1])]


def pearson(xs, ys):
    """
    Name: pearson(xs, ys)
    Desc: Sample Pearson correlation by the two-pass formula, clamped to
          [-1, 1]. Constant input raises DegenerateInputException with the
          UNDEFINED_CORRELATION code.

    >>> round(pearson([1, 2, 3], [1, 2, 4]), 5)
    0.98198
    """
    xs = np.asarray(xs, dtype = np.float64)
    ys = np.asarray(ys, dtype = np.float64)
    if xs.shape != ys.shape or xs.ndim != 1:
        raise ShapeException("pearson needs two vectors of equal length.")
    if xs.size < 2:
        raise DegenerateInputException("pearson needs at least 2 values.", ec = UNDEFINED_CORRELATION)
    dx = xs - xs.mean()
    dy = ys - ys.mean()
    sxx = float((dx * dx).sum())
    syy = float((dy * dy).sum())
    if np.all(xs == xs[0]) or np.all(ys == ys[0]) or sxx <= 0.0 or syy <= 0.0:
        raise DegenerateInputException("Pearson correlation of constant input.", ec = UNDEFINED_CORRELATION)
    r = float((dx * dy).sum()) / np.sqrt(sxx * syy)
    return float(min(1.0, max(-1.0, r)))


def _scoreFunction(lrm):
    if isinstance(lrm, Lrm):
        return lrm.scoreArray, lrm.encoder
    return lrm, FixedEncoder()


def corrMetrics(lrm, records, t = 0, rng = None, schedule = None):
    """
    Name: corrMetrics(lrm, records, t = 0, rng = None, schedule = None)
    Args: lrm, an Lrm or a callable (x [B, ...], t, condIds) -> scores
          records, [(ScoredPair, GapRecord)]
          t, timestep the reward model is evaluated at. At t = 0 the clean
             latents are scored without added noise; other timesteps noise
             both latents with draws from rng.
    Desc: Returns (aesCorr, clipCorr, vqaCorr), the Pearson correlation of the
          reward-model gap G_L = S(win) - S(lose) with each oracle gap.
    """
    if not records:
        raise ConfigException("corrMetrics needs at least one record.")
    scoreFn, encoder = _scoreFunction(lrm)
    x0W = encoder.encode(np.stack([sp.pair.x0Win for sp, _ in records]))
    x0L = encoder.encode(np.stack([sp.pair.x0Lose for sp, _ in records]))
    ids = np.array([sp.pair.cond.id for sp, _ in records], dtype = np.int64)
    if t != 0:
        if rng is None:
            raise ConfigException("corrMetrics at t > 0 needs an rng for the noise draws.")
        if schedule is None:
            schedule = diffusion.buildLinearSchedule()
        ab = schedule.alphaBarAt(t)
        x0W = np.sqrt(ab) * x0W + np.sqrt(1.0 - ab) * rng.derive("win").normal(x0W.shape)
        x0L = np.sqrt(ab) * x0L + np.sqrt(1.0 - ab) * rng.derive("lose").normal(x0L.shape)
    gL = np.asarray(scoreFn(x0W, t, ids), dtype = np.float64) - np.asarray(scoreFn(x0L, t, ids), dtype = np.float64)
    gaps = np.array([g.asTuple() for _, g in records], dtype = np.float64)
    return tuple(pearson(gL, gaps[:, k]) for k in range(3))


def gapHistogram(records, dim, edges):
    """
    Name: gapHistogram(records, dim, edges)
    Args: dim, "A", "C" or "V"
          edges, strictly increasing bin edges
    Desc: Returns (counts, fractionBelowZero). Values outside the edges are
          counted in the first or last bin so the counts partition the
          records.
    """
    if dim not in DIMENSIONS:
        raise ConfigException("Gap dimension must be one of %s, got %r." % (DIMENSIONS, dim))
    edges = np.asarray(edges, dtype = np.float64)
    if edges.ndim != 1 or edges.size < 2 or np.any(np.diff(edges) <= 0.0):
        raise ConfigException("Histogram edges must be strictly increasing with at least 2 entries.")
    values = np.array([g.get(dim) for _, g in records], dtype = np.float64)
    nBins = edges.size - 1
    bins = np.clip(np.searchsorted(edges, values, side = "right") - 1, 0, nBins - 1)
    counts = np.bincount(bins, minlength = nBins)
    below = float(np.mean(values < 0.0)) if values.size else 0.0
    return counts, below


def gapHistogramTable(records, edges):
    """Tab-separated histogram of all three gap dimensions, one row per bin."""
    lines = ["lo\thi\tcount_A\tcount_C\tcount_V"]
    columns = []
    fractions = []
    for dim in DIMENSIONS:
        counts, below = gapHistogram(records, dim, edges)
        columns.append(counts)
        fractions.append(below)
    for i in range(len(edges) - 1):
        lines.append("%g\t%g\t%d\t%d\t%d" % (edges[i], edges[i + 1], columns[0][i], columns[1][i], columns[2][i]))
    lines.append("# below_zero\t\t%.6f\t%.6f\t%.6f" % tuple(fractions))
    return "\n".join(lines) + "\n"


# Synthetic oracles ------------------------------------------------------------

def roughness(x0):
    """Mean absolute difference between vertical and horizontal neighbours."""
    x0 = np.asarray(x0, dtype = np.float64)
    dh = np.abs(np.diff(x0, axis = -2)).reshape(x0.shape[:-3] + (-1,))
    dw = np.abs(np.diff(x0, axis = -1)).reshape(x0.shape[:-3] + (-1,))
    return np.concatenate([dh, dw], axis = -1).mean(axis = -1)


def _cosine(a, b):
    na = np.sqrt((a * a).sum(axis = -1))
    nb = np.sqrt((b * b).sum(axis = -1))
    if np.any(nb <= NUMERIC_FLOOR):
        raise DegenerateInputException("Condition target pattern has zero norm (the null condition has no target).")
    return np.where(na <= NUMERIC_FLOOR, 0.0, (a * b).sum(axis = -1) / np.maximum(na * nb, NUMERIC_FLOOR))


def _hashUnit(x0, condId):
    h = hashlib.blake2b(digest_size = 8)
    h.update(struct.pack("<q", int(condId)))
    h.update(np.ascontiguousarray(x0, dtype = "<f8").tobytes())
    return struct.unpack("<Q", h.digest())[0] / 2.0 ** 64


def oracleScores(x0, condIds, targets):
    """
    Name: oracleScores(x0, condIds, targets)
    Args: x0, latents [N, C, H, W]
          condIds, prompt ids [N]
          targets, per-prompt target patterns [vocab, C, H, W]
    Desc: Vectorized syntheticOracles; returns (sAes, sClip, sVqa) arrays.
    """
    x0 = np.asarray(x0, dtype = np.float64)
    condIds = np.asarray(condIds, dtype = np.int64)
    n = x0.shape[0]
    flat = x0.reshape(n, -1)
    sAes = -roughness(x0)
    sClip = _cosine(flat, np.asarray(targets)[condIds].reshape(n, -1))
    sVqa = sClip + np.array([VQA_PERTURBATION * (2.0 * _hashUnit(x0[i], condIds[i]) - 1.0) for i in range(n)])
    return sAes, sClip, sVqa


def syntheticOracles(x0, cond, targets):
    """
    Name: syntheticOracles(x0, cond, targets)
    Desc: (sAes, sClip, sVqa) for one latent: negative roughness, cosine with
          the prompt's target pattern, and the cosine plus a hash-keyed
          perturbation bounded by 0.1.
    """
    condId = cond.id if hasattr(cond, "id") else int(cond)
    sAes, sClip, sVqa = oracleScores(np.asarray(x0)[None], [condId], targets)
    return float(sAes[0]), float(sClip[0]), float(sVqa[0])


def hiddenReward(x0, condIds, targets):
    """Ground-truth reward 0.5 * aes + 0.5 * clip used to label pairs and to evaluate."""
    sAes, sClip, _ = oracleScores(x0, condIds, targets)
    return HIDDEN_AES_WEIGHT * sAes + HIDDEN_CLIP_WEIGHT * sClip


def rewardScale(task, rng, n = 1024):
    """Standard deviation of the hidden reward over n latents drawn from task."""
    x0, condIds = task.dataset(n, rng)
    return float(np.std(hiddenReward(x0, condIds, task.targets)))


def _separablePairs(task, nPairs, rng, margin):
    # Rejection sampling: keep same-prompt pairs whose hidden rewards differ
    # by at least margin reward standard deviations.
    minGap = margin * rewardScale(task, rng.derive("scale"))
    batch = max(nPairs, 64)
    firsts, seconds, ids = [], [], []
    kept = 0
    for r in range(MAX_SEPARABLE_ROUNDS):
        roundRng = rng.derive("round%d" % r)
        condIds = roundRng.derive("prompts").integers(1, task.config.vocab, batch)
        first = task.sampleLatents(condIds, roundRng.derive("first"))
        second = task.sampleLatents(condIds, roundRng.derive("second"))
        gap = np.abs(hiddenReward(first, condIds, task.targets) - hiddenReward(second, condIds, task.targets))
        keep = gap >= minGap
        firsts.append(first[keep])
        seconds.append(second[keep])
        ids.append(condIds[keep])
        kept += int(keep.sum())
        if kept >= nPairs:
            return (np.concatenate(firsts)[:nPairs], np.concatenate(seconds)[:nPairs],
                    np.concatenate(ids)[:nPairs])
    raise DegenerateInputException("Found only %s of %s pairs with margin %s after %s rounds." % (kept, nPairs, margin, MAX_SEPARABLE_ROUNDS))


def generateCorpus(task, nPairs, rng, labelNoise = DEFAULT_LABEL_NOISE, margin = 0.0):
    """
    Name: generateCorpus(task, nPairs, rng, labelNoise = 0.1, margin = 0.0)
    Args: task, a denoiser.SyntheticTask
          margin, minimum hidden-reward gap of a pair, in units of the
                  hidden reward's standard deviation (see rewardScale)
    Desc: nPairs ScoredPairs. Both latents of a pair share a prompt; the one
          with the higher hidden reward wins, and the label is flipped with
          probability labelNoise. With margin > 0 pairs are drawn until
          nPairs of them clear the margin; margin = 1 and labelNoise = 0
          give a separable corpus.
    """
    if nPairs < 0:
        raise ConfigException("nPairs must be >= 0.")
    if not (0.0 <= labelNoise <= 1.0):
        raise ConfigException("labelNoise must lie in [0, 1].")
    if margin < 0:
        raise ConfigException("margin must be >= 0, got %s." % margin)
    if nPairs == 0:
        return []
    if margin > 0:
        first, second, condIds = _separablePairs(task, nPairs, rng, margin)
    else:
        condIds = rng.derive("prompts").integers(1, task.config.vocab, nPairs)
        first = task.sampleLatents(condIds, rng.derive("first"))
        second = task.sampleLatents(condIds, rng.derive("second"))
    flips = rng.derive("flips").uniform(0.0, 1.0, nPairs) < labelNoise
    a1, c1, v1 = oracleScores(first, condIds, task.targets)
    a2, c2, v2 = oracleScores(second, condIds, task.targets)
    h1 = HIDDEN_AES_WEIGHT * a1 + HIDDEN_CLIP_WEIGHT * c1
    h2 = HIDDEN_AES_WEIGHT * a2 + HIDDEN_CLIP_WEIGHT * c2

    corpus = []
    for i in range(nPairs):
        firstWins = (h1[i] >= h2[i]) != bool(flips[i])
        if firstWins:
            pair = PreferencePair(first[i], second[i], int(condIds[i]))
            corpus.append(ScoredPair(pair, (a1[i], a2[i]), (c1[i], c2[i]), (v1[i], v2[i])))
        else:
            pair = PreferencePair(second[i], first[i], int(condIds[i]))
            corpus.append(ScoredPair(pair, (a2[i], a1[i]), (c2[i], c1[i]), (v2[i], v1[i])))
    return corpus


def trainingPairs(records, ties = ()):
    """
    PreferencePairs for reward-model training. Records from ties are added
    with the soft target 0.5 unless they are already among records.
    """
    pairs = [sp.pair for sp, _ in records]
    kept = set(id(sp) for sp, _ in records)
    for sp, _ in ties:
        if id(sp) not in kept:
            pairs.append(PreferencePair(sp.pair.x0Win, sp.pair.x0Lose, sp.pair.cond, target = 0.5))
    return pairs
