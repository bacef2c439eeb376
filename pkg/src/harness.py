"""
Name: harness.py
Desc: Command line harness: synthetic data generation, configuration,
      persistence, metrics, evaluation and plot-data emission.

      latentpref gen-data  --out runs/a --seed 7
      latentpref pretrain  --out runs/a
      latentpref train-lrm --out runs/a --set mpcf.strategy=2
      latentpref lpo       --out runs/a
      latentpref eval      --out runs/a --model runs/a/denoiser_lpo.lprf --baseline runs/a/denoiser.lprf

      Every command reads the run configuration (defaults, then --config,
      then --seed and every --set), writes its echo as config.<command>.ini
      into the output directory and appends its metrics to metrics.jsonl.

      Exit status: 0 on success, 2 for usage and configuration errors, 3 for
      numeric faults, degenerate inputs and divergence, 1 for any other
      failure. The reason is printed as one line, error: <NAME>: <message>.
"""
import argparse
import configparser
import datetime
import io
import json
import math
import os
import sys
import threading

import numpy as np

from LatentPrefPython import (
    LATENTPREFPYTHON_VERSION,
    USAGE_ERROR,
    Component,
    ConfigException,
    DegenerateInputException,
    DivergenceException,
    LatentPrefException,
    NumericFaultException,
    PathCollisionException,
    errorName,
    makeLogger,
    )
from tensor import RngStream
import Checkpoint
import denoiser
import diffusion
import lpo
import lrm
import mpcf


# (section, key, default). The default's type is the value type.
DEFAULTS = [
    ("run", "seed", 0),
    ("run", "run_id", "run"),

    ("schedule", "T", 1000),
    ("schedule", "beta_start", 1e-4),
    ("schedule", "beta_end", 2e-2),
    ("schedule", "inference_steps", 20),

    ("sampler", "eta", 0.0),
    ("sampler", "guidance", 1.0),

    ("denoiser", "channels", 4),
    ("denoiser", "size", 8),
    ("denoiser", "L", 2),
    ("denoiser", "width", 16),
    ("denoiser", "n_p", 16),
    ("denoiser", "vocab", 5),
    ("denoiser", "time_embed_dim", 16),
    ("denoiser", "ctx_dim", 32),

    ("data", "n_latents", 4000),
    ("data", "n_pairs", 2000),
    ("data", "n_eval_pairs", 500),
    ("data", "label_noise", 0.1),
    ("data", "align_low", 0.3),
    ("data", "rough_high", 0.5),

    ("pretrain", "steps", 2000),
    ("pretrain", "lr", 0.01),
    ("pretrain", "batch_size", 32),
    ("pretrain", "cond_dropout", 0.1),

    ("lrm", "backbone", "dmo"),
    ("lrm", "L", 2),
    ("lrm", "width", 16),
    ("lrm", "gs", 7.5),
    ("lrm", "n_d", 32),
    ("lrm", "log_tau", 2.6592),
    ("lrm", "steps", 3000),
    ("lrm", "lr", 0.01),
    ("lrm", "batch_size", 16),
    ("lrm", "warmup_steps", 100),
    ("lrm", "include_ties", False),
    ("lrm", "eval_t", 0),

    ("mpcf", "strategy", "2"),
    ("mpcf", "hist_edges", "-1.5,-1,-0.5,-0.2,0,0.2,0.5,1,1.5"),

    ("lpo", "K", 4),
    ("lpo", "beta", 500.0),
    ("lpo", "timestep_lo", 0),
    ("lpo", "timestep_hi", 950),
    ("lpo", "epochs", 5),
    ("lpo", "eta", 1.0),
    ("lpo", "threshold", "stddev"),
    ("lpo", "th_min", 0.35),
    ("lpo", "th_max", 0.5),
    ("lpo", "th_value", 0.5),
    ("lpo", "prompts_per_epoch", 16),
    ("lpo", "lr", 0.002),
    ("lpo", "batch_size", 16),
    ("lpo", "max_grad_norm", 1.0),
    ("lpo", "guidance", 1.0),
    ("lpo", "lrm_timestep", "real"),
    ("lpo", "softmax_over", "extremes"),
    ("lpo", "workers", 1),

    ("grpo", "clip_eps", 0.1),
    ("grpo", "kl_beta", 0.1),

    ("dpo", "beta", 500.0),
    ("dpo", "epochs", 1),

    ("eval", "n_samples", 256),
    ("eval", "n_epoch_samples", 64),
    ]

DEFAULT_TYPES = dict(("%s.%s" % (s, k), type(v)) for s, k, v in DEFAULTS)

COMMANDS = ["gen-data", "pretrain", "train-lrm", "filter", "corr", "lpo", "grpo", "dpo", "eval", "plot-data"]

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def _parseBool(text):
    lowered = str(text).strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError("not a boolean: %r" % text)


class RunConfig(object):
    """
    RunConfig()

    Every tunable of the pipeline as dotted keys ("lpo.beta"). Values are
    typed after the defaults table; unknown keys raise ConfigException.

    >>> cfg = RunConfig()
    >>> cfg.set("lpo.beta", "250")
    >>> cfg["lpo.beta"]
    250.0
    """
    def __init__(self):
        self.values = dict(("%s.%s" % (s, k), v) for s, k, v in DEFAULTS)

    def __getitem__(self, key):
        try:
            return self.values[key]
        except KeyError:
            raise ConfigException("Unknown configuration key %r." % key)

    def keys(self):
        return ["%s.%s" % (s, k) for s, k, _ in DEFAULTS]

    def set(self, key, raw):
        if key not in DEFAULT_TYPES:
            raise ConfigException("Unknown configuration key %r." % key)
        kind = DEFAULT_TYPES[key]
        try:
            if kind is bool:
                value = raw if isinstance(raw, bool) else _parseBool(raw)
            else:
                value = kind(raw)
        except (TypeError, ValueError):
            raise ConfigException("Bad value %r for %s (expected %s)." % (raw, key, kind.__name__))
        if kind is float and not math.isfinite(value):
            raise ConfigException("Value of %s must be finite." % key)
        self.values[key] = value

    def setAssignment(self, assignment):
        """Applies one "section.key=value" string."""
        if "=" not in assignment:
            raise ConfigException("Expected key=value, got %r." % assignment)
        key, raw = assignment.split("=", 1)
        self.set(key.strip(), raw.strip())

    def loadConfig(self, parser):
        """
        Name: RunConfig.loadConfig(parser)
        Args: parser, a ConfigParser whose sections and options name keys
        Desc: Copies every option in; unknown sections or keys are errors.
        """
        for section in parser.sections():
            for option in parser.options(section):
                self.set("%s.%s" % (section, option), parser.get(section, option))

    def loadFile(self, path):
        """Reads an INI file, or a flat file of section.key=value lines."""
        with io.open(path, "r", encoding = "utf-8") as f:
            text = f.read()
        parser = configparser.ConfigParser(interpolation = None)
        parser.optionxform = str
        try:
            parser.read_string(text, source = path)
        except configparser.MissingSectionHeaderError:
            for lineNumber, line in enumerate(text.splitlines(), 1):
                line = line.strip()
                if not line or line.startswith("#") or line.startswith(";"):
                    continue
                self.setAssignment(line)
            return self
        except configparser.Error as e:
            raise ConfigException("Can't parse %s: %s" % (path, str(e).splitlines()[0]))
        self.loadConfig(parser)
        return self

    def exportConfig(self):
        """
        Name: RunConfig.exportConfig()
        Desc: The configuration as a ConfigParser object, one section per
              prefix. Useful for saving the setup of a run.
        """
        parser = configparser.ConfigParser(interpolation = None)
        parser.optionxform = str
        for section, key, _ in DEFAULTS:
            if not parser.has_section(section):
                parser.add_section(section)
            value = self.values["%s.%s" % (section, key)]
            parser.set(section, key, repr(value) if isinstance(value, float) else str(value))
        return parser

    def echoText(self):
        out = io.StringIO()
        self.exportConfig().write(out)
        return out.getvalue()

    # Typed views -----------------------------------------------------------

    def rng(self):
        return RngStream(self["run.seed"])

    def schedule(self):
        return diffusion.buildLinearSchedule(self["schedule.T"], self["schedule.beta_start"], self["schedule.beta_end"])

    def timesteps(self):
        return diffusion.inferenceTimesteps(self["schedule.T"], self["schedule.inference_steps"])

    def samplerConfig(self):
        return diffusion.SamplerConfig(self["sampler.eta"], self.timesteps(), self["sampler.guidance"])

    def denoiserConfig(self):
        return denoiser.DenoiserConfig(
            channels = self["denoiser.channels"], size = self["denoiser.size"], L = self["denoiser.L"],
            width = self["denoiser.width"], nP = self["denoiser.n_p"], vocab = self["denoiser.vocab"],
            timeEmbedDim = self["denoiser.time_embed_dim"], ctxDim = self["denoiser.ctx_dim"])

    def lrmBackboneConfig(self):
        """Backbone of a freshly built reward model; shares the latent space and vocabulary."""
        base = self.denoiserConfig().asDict()
        base.update({"L": self["lrm.L"], "width": self["lrm.width"]})
        return denoiser.DenoiserConfig(**base)

    def task(self):
        return denoiser.SyntheticTask(self.denoiserConfig(), self.rng().derive("task"), self["data.align_low"], self["data.rough_high"])

    def threshold(self):
        return lpo.ThresholdPolicy(self["lpo.threshold"], self["lpo.th_min"], self["lpo.th_max"], self["lpo.th_value"])

    def lpoConfig(self, command = "lpo"):
        beta = self["dpo.beta"] if command == "dpo" else self["lpo.beta"]
        epochs = self["dpo.epochs"] if command == "dpo" else self["lpo.epochs"]
        return lpo.LpoConfig(
            K = self["lpo.K"], beta = beta, timestepLo = self["lpo.timestep_lo"], timestepHi = self["lpo.timestep_hi"],
            epochs = epochs, eta = self["lpo.eta"], threshold = self.threshold(),
            promptsPerEpoch = self["lpo.prompts_per_epoch"], inferenceSteps = self["schedule.inference_steps"],
            guidance = self["lpo.guidance"], lr = self["lpo.lr"], batchSize = self["lpo.batch_size"],
            maxGradNorm = self["lpo.max_grad_norm"], lrmTimestep = self["lpo.lrm_timestep"],
            softmaxOver = self["lpo.softmax_over"], clipEps = self["grpo.clip_eps"], klBeta = self["grpo.kl_beta"],
            workers = self["lpo.workers"])

    def histEdges(self):
        try:
            return [float(x) for x in self["mpcf.hist_edges"].split(",")]
        except ValueError:
            raise ConfigException("mpcf.hist_edges must be comma separated numbers.")

    def validate(self):
        """Builds every module object once so their invariants are checked at load."""
        if self["run.seed"] < 0:
            raise ConfigException("run.seed must be >= 0.")
        schedule = self.schedule()
        self.samplerConfig().validate(schedule.T)
        self.denoiserConfig()
        self.lrmBackboneConfig()
        self.lpoConfig().validate(schedule.T)
        self.lpoConfig("dpo").validate(schedule.T)
        mpcf.FilterStrategy.byName(self["mpcf.strategy"])
        edges = self.histEdges()
        if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
            raise ConfigException("mpcf.hist_edges must be strictly increasing.")
        if self["lrm.gs"] < 1.0:
            raise ConfigException("lrm.gs must be >= 1.")
        if self["lrm.backbone"] not in ("dmo", "fresh"):
            raise ConfigException("lrm.backbone must be dmo or fresh.")
        if not (0 <= self["lrm.eval_t"] < schedule.T):
            raise ConfigException("lrm.eval_t must lie in [0, T).")
        if not (0.0 <= self["data.label_noise"] <= 1.0):
            raise ConfigException("data.label_noise must lie in [0, 1].")
        if not (0.0 < self["data.align_low"] <= 1.0) or self["data.rough_high"] < 0.0:
            raise ConfigException("data.align_low must lie in (0, 1] and data.rough_high must be >= 0.")
        if self["eval.n_samples"] < 2 or self["eval.n_epoch_samples"] < 2:
            raise ConfigException("Evaluation needs at least 2 samples per condition.")
        return self


class MetricsWriter(object):
    """
    MetricsWriter(path, runId)

    Appends one JSON object per line. Steps must not decrease within a
    phase. Appends are serialized by a lock.
    """
    def __init__(self, path, runId):
        self.path = path
        self.runId = runId
        self.lock = threading.Lock()
        self.lastStep = dict()

    def write(self, phase, step, metrics):
        with self.lock:
            if phase in self.lastStep and step < self.lastStep[phase]:
                raise ConfigException("Metrics step %s after %s in phase %s." % (step, self.lastStep[phase], phase))
            self.lastStep[phase] = step
            record = {
                "run": self.runId,
                "phase": phase,
                "step": step,
                "metrics": metrics,
                "time": datetime.datetime.now(datetime.timezone.utc).isoformat(),
                }
            with io.open(self.path, "a", encoding = "utf-8") as f:
                f.write(json.dumps(record, sort_keys = True) + "\n")


def readMetrics(path):
    """Records of a metrics file; a truncated last line is skipped."""
    records = []
    with io.open(path, "r", encoding = "utf-8") as f:
        lines = f.read().split("\n")
    for i, line in enumerate(lines):
        if not line.strip():
            continue
        try:
            records.append(json.loads(line))
        except ValueError:
            if i >= len(lines) - 2:
                break
            raise ConfigException("Corrupt metrics record on line %s of %s." % (i + 1, path))
    return records


class RewardSummary(object):
    """Per-condition (mean, ci, n) of the hidden oracle reward plus the pooled values."""
    def __init__(self, perCondition, mean, ci, n):
        self.perCondition = perCondition
        self.mean = mean
        self.ci = ci
        self.n = n

    def asDict(self):
        out = {"mean": self.mean, "ci": self.ci, "n": self.n}
        for c, (m, ci, n) in sorted(self.perCondition.items()):
            out["cond%d" % c] = {"mean": m, "ci": ci, "n": n}
        return out


def _meanCi(values):
    values = np.asarray(values, dtype = np.float64)
    return float(values.mean()), float(1.96 * values.std(ddof = 1) / math.sqrt(values.size))


def evalReward(model, nSamples, conds, rng, schedule, timesteps, targets, guidance = 1.0, eta = 0.0):
    """
    Name: evalReward(model, nSamples, conds, rng, schedule, timesteps, targets, guidance = 1.0, eta = 0.0)
    Desc: Generates nSamples latents per condition with the given eta (0,
          the default, is deterministic) and scores them by the hidden
          oracle. Returns a RewardSummary with normal approximation 95%
          intervals. Condition c always draws its starting noise from
          rng.derive("eval/c"), so two models evaluated with the same rng
          are compared on the same seeds.
    """
    if nSamples < 2:
        raise ConfigException("evalReward needs nSamples >= 2 for a confidence interval, got %s." % nSamples)
    if not conds:
        raise ConfigException("evalReward needs at least one condition.")
    sampler = diffusion.SamplerConfig(eta, timesteps, guidance)
    perCondition = dict()
    pooled = []
    for c in conds:
        ids = np.full(nSamples, int(c), dtype = np.int64)
        x0 = denoiser.generate(model, ids, rng.derive("eval/%d" % c), schedule, sampler)
        rewards = mpcf.hiddenReward(x0, ids, targets)
        m, ci = _meanCi(rewards)
        perCondition[int(c)] = (m, ci, nSamples)
        pooled.extend(rewards.tolist())
    m, ci = _meanCi(pooled)
    return RewardSummary(perCondition, m, ci, len(pooled))


class Harness(Component):
    """
    Harness(config, out, inputDir = None, debug = False, logger = None)

    Runs one command at a time against an output directory. Inputs default
    to the same directory so commands chain.
    """
    def __init__(self, config, out, inputDir = None, debug = False, logger = None):
        Component.__init__(self, debug)
        self.config = config
        self.out = out
        self.inputDir = inputDir if inputDir is not None else out
        self.logger = logger
        if not os.path.isdir(out):
            os.makedirs(out)
        self.metrics = MetricsWriter(os.path.join(out, "metrics.jsonl"), config["run.run_id"])

    def _info(self, msg):
        if self.logger is not None:
            self.logger.info(msg)
        else:
            self._debugprint(msg)

    def path(self, name):
        return os.path.join(self.out, name)

    def inputPath(self, name):
        return os.path.join(self.inputDir, name)

    def writeEcho(self, command):
        with io.open(self.path("config.%s.ini" % command), "w", encoding = "utf-8") as f:
            f.write(self.config.echoText())

    def run(self, command, args = None):
        method = getattr(self, COMMAND_METHODS[command])
        self.writeEcho(command)
        self._info("%s: output in %s" % (command, self.out))
        return method(args)

    # Commands --------------------------------------------------------------

    def genData(self, args = None):
        cfg = self.config
        rng = cfg.rng()
        task = cfg.task()
        shape = task.config.latentShape
        names = ["latents.lpds", "pairs.lpds", "eval_pairs.lpds", "targets.lpds"]
        for name in names:
            for p in (self.path(name), self.path(name) + ".schema"):
                if os.path.exists(p):
                    raise PathCollisionException(p)

        latents, condIds = task.dataset(cfg["data.n_latents"], rng.derive("latents"))
        corpus = mpcf.generateCorpus(task, cfg["data.n_pairs"], rng.derive("corpus"), cfg["data.label_noise"])
        evalCorpus = mpcf.generateCorpus(task, cfg["data.n_eval_pairs"], rng.derive("eval_corpus"), cfg["data.label_noise"])
        Checkpoint.writeDataset(self.path("latents.lpds"), Checkpoint.encodeLatents(latents, condIds), Checkpoint.RECORD_LATENT, shape)
        Checkpoint.writeDataset(self.path("pairs.lpds"), Checkpoint.encodeScoredPairs(corpus, shape), Checkpoint.RECORD_SCORED_PAIR, shape)
        Checkpoint.writeDataset(self.path("eval_pairs.lpds"), Checkpoint.encodeScoredPairs(evalCorpus, shape), Checkpoint.RECORD_SCORED_PAIR, shape)
        Checkpoint.writeDataset(self.path("targets.lpds"), Checkpoint.encodeLatents(task.targets, np.arange(task.config.vocab)), Checkpoint.RECORD_LATENT, shape)

        counts = {"latents": int(latents.shape[0]), "pairs": len(corpus), "eval_pairs": len(evalCorpus)}
        self.metrics.write("gen-data", 0, counts)
        self._info("gen-data: %(latents)s latents, %(pairs)s pairs, %(eval_pairs)s held-out pairs" % counts)
        return counts

    def _targets(self):
        return Checkpoint.readDataset(self.inputPath("targets.lpds"))[1][0]

    def _records(self, name):
        return mpcf.scoreRecords(Checkpoint.readDataset(self.inputPath(name))[1])

    def pretrain(self, args = None):
        cfg = self.config
        rng = cfg.rng()
        latents, condIds = Checkpoint.readDataset(self.inputPath("latents.lpds"))[1]
        net = denoiser.Denoiser(cfg.denoiserConfig(), rng.derive("denoiser.init"), debug = self.debug)
        trainer = denoiser.Pretrainer(cfg.schedule(), lr = cfg["pretrain.lr"], batchSize = cfg["pretrain.batch_size"], condDropout = cfg["pretrain.cond_dropout"], debug = self.debug)
        net, curve = trainer.train((latents, condIds), net, cfg["pretrain.steps"], rng.derive("pretrain"))
        for step, loss in enumerate(curve):
            self.metrics.write("pretrain", step, {"loss": loss})
        Checkpoint.saveDenoiser(self.path("denoiser.lprf"), net, cfg.echoText())
        summary = {"steps": len(curve), "final_loss": curve[-1] if curve else None}
        self._info("pretrain: %s" % summary)
        return summary

    def _buildLrm(self):
        cfg = self.config
        rng = cfg.rng().derive("lrm.init")
        if cfg["lrm.backbone"] == "dmo":
            backbone = Checkpoint.loadDenoiser(self.inputPath("denoiser.lprf"))
        else:
            backbone = denoiser.Denoiser(cfg.lrmBackboneConfig(), rng.derive("backbone"))
        bcfg = backbone.config
        head = lrm.LrmHead(bcfg.nP, bcfg.featureDim, cfg["lrm.n_d"], rng, cfg["lrm.log_tau"])
        return lrm.Lrm(backbone, head, cfg["lrm.gs"], debug = self.debug)

    def _filtered(self, records):
        strategy = mpcf.FilterStrategy.byName(self.config["mpcf.strategy"])
        if strategy.isTie:
            return mpcf.filterTies(records)
        return mpcf.filterWinlose(records, strategy)

    def trainLrm(self, args = None):
        cfg = self.config
        rng = cfg.rng()
        records = self._records("pairs.lpds")
        if mpcf.FilterStrategy.byName(cfg["mpcf.strategy"]).isTie:
            pairs = mpcf.trainingPairs([], mpcf.filterTies(records))
        else:
            ties = mpcf.filterTies(records) if cfg["lrm.include_ties"] else ()
            pairs = mpcf.trainingPairs(self._filtered(records), ties)
        model = self._buildLrm()
        trainer = lrm.LrmTrainer(cfg.schedule(), lr = cfg["lrm.lr"], batchSize = cfg["lrm.batch_size"], warmupSteps = cfg["lrm.warmup_steps"], debug = self.debug)
        model, curve = trainer.train(pairs, model, cfg["lrm.steps"], rng.derive("train-lrm"))
        for step, loss in enumerate(curve):
            self.metrics.write("train-lrm", step, {"loss": loss})
        Checkpoint.saveLrm(self.path("lrm.lprf"), model, cfg.echoText())

        evalRecords = self._records("eval_pairs.lpds")
        evalPairs = [sp.pair for sp, _ in evalRecords]
        t = cfg["lrm.eval_t"]
        summary = {
            "train_pairs": len(pairs),
            "accuracy": lrm.pairwiseAccuracy(evalPairs, t, model, rng.derive("accuracy"), cfg.schedule()),
            }
        summary.update(self._corr(model, evalRecords, t))
        self.metrics.write("train-lrm-eval", 0, summary)
        self._info("train-lrm: %s" % summary)
        return summary

    def _corr(self, model, records, t):
        aes, clip, vqa = mpcf.corrMetrics(model, records, t, self.config.rng().derive("corr"), self.config.schedule())
        return {"aes_corr": aes, "clip_corr": clip, "vqa_corr": vqa}

    def filter(self, args = None):
        cfg = self.config
        if args is not None and getattr(args, "strategy", None):
            cfg.set("mpcf.strategy", args.strategy)
        records = self._records("pairs.lpds")
        kept = self._filtered(records)
        strategy = mpcf.FilterStrategy.byName(cfg["mpcf.strategy"])
        shape = records[0][0].pair.x0Win.shape if records else cfg.denoiserConfig().latentShape
        Checkpoint.writeDataset(self.path("pairs.%s.lpds" % strategy.name), Checkpoint.encodeScoredPairs([sp for sp, _ in kept], shape), Checkpoint.RECORD_SCORED_PAIR, shape, overwrite = True)
        with io.open(self.path("gap_histogram.tsv"), "w", encoding = "utf-8") as f:
            f.write(mpcf.gapHistogramTable(records, cfg.histEdges()))
        summary = {"strategy": strategy.name, "kept": len(kept), "total": len(records), "ties": len(mpcf.filterTies(records))}
        for dim in mpcf.DIMENSIONS:
            summary["below_zero_%s" % dim] = mpcf.gapHistogram(records, dim, cfg.histEdges())[1]
        self.metrics.write("filter", 0, summary)
        self._info("filter: kept %(kept)s of %(total)s with %(strategy)s" % summary)
        print("kept %(kept)s of %(total)s" % summary)
        return summary

    def corr(self, args = None):
        model = Checkpoint.loadLrm(self.inputPath("lrm.lprf"))
        summary = self._corr(model, self._records("eval_pairs.lpds"), self.config["lrm.eval_t"])
        self.metrics.write("corr", 0, summary)
        self._info("corr: %s" % summary)
        return summary

    def _rewardFn(self, targets):
        cfg = self.config
        conds = list(range(1, cfg["denoiser.vocab"]))

        def rewardFn(net):
            return evalReward(net, cfg["eval.n_epoch_samples"], conds, cfg.rng().derive("epoch-eval"), cfg.schedule(), cfg.timesteps(), targets, cfg["sampler.guidance"], cfg["sampler.eta"]).mean
        return rewardFn

    def _finishTuning(self, command, net, history):
        for record in history:
            self.metrics.write(command, record["epoch"], record)
        Checkpoint.saveDenoiser(self.path("denoiser_%s.lprf" % command), net, self.config.echoText())
        summary = history[-1] if history else {}
        self._info("%s: %s" % (command, summary))
        return summary

    def lpo(self, args = None):
        return self._preference("lpo")

    def grpo(self, args = None):
        return self._preference("grpo")

    def _preference(self, command):
        cfg = self.config
        dmo = Checkpoint.loadDenoiser(self.inputPath("denoiser.lprf"))
        model = Checkpoint.loadLrm(self.inputPath("lrm.lprf"))
        if model.encoder != lrm.FixedEncoder():
            raise ConfigException("The reward model's encoder must match the optimized model's latent space.")
        prompts = list(range(1, cfg["denoiser.vocab"]))
        runner = lpo.runLpo if command == "lpo" else lpo.runGrpo
        net, history = runner(cfg.lpoConfig(command), dmo, model, prompts, cfg.rng().derive(command), cfg.schedule(), self._rewardFn(self._targets()), self.debug)
        return self._finishTuning(command, net, history)

    def dpo(self, args = None):
        cfg = self.config
        dmo = Checkpoint.loadDenoiser(self.inputPath("denoiser.lprf"))
        pairs = [sp.pair for sp, _ in self._filtered(self._records("pairs.lpds"))]
        net, history = lpo.runDpo(cfg.lpoConfig("dpo"), dmo, pairs, cfg.rng().derive("dpo"), cfg.schedule(), self._rewardFn(self._targets()), debug = self.debug)
        return self._finishTuning("dpo", net, history)

    def eval(self, args = None):
        cfg = self.config
        modelPath = getattr(args, "model", None) or self.inputPath("denoiser.lprf")
        baselinePath = getattr(args, "baseline", None)
        targets = self._targets()
        conds = list(range(1, cfg["denoiser.vocab"]))
        evaluate = lambda path: evalReward(Checkpoint.loadDenoiser(path), cfg["eval.n_samples"], conds, cfg.rng().derive("eval"), cfg.schedule(), cfg.timesteps(), targets, cfg["sampler.guidance"], cfg["sampler.eta"])
        result = evaluate(modelPath)
        summary = {"model": result.asDict()}
        if baselinePath:
            baseline = evaluate(baselinePath)
            summary["baseline"] = baseline.asDict()
            summary["difference"] = result.mean - baseline.mean
        self.metrics.write("eval", 0, summary)
        self._info("eval: mean reward %.5f +- %.5f" % (result.mean, result.ci))
        print(json.dumps(summary, sort_keys = True))
        return summary

    def plotData(self, args = None):
        records = readMetrics(self.inputPath("metrics.jsonl"))
        losses = ["phase\tstep\tloss"]
        counts = ["phase\tepoch\tt\tcount"]
        rewards = ["phase\tepoch\toracle_reward"]
        for r in records:
            m = r.get("metrics", {})
            if "loss" in m:
                losses.append("%s\t%s\t%r" % (r["phase"], r["step"], m["loss"]))
            if "mean_loss" in m and m["mean_loss"] is not None:
                losses.append("%s\t%s\t%r" % (r["phase"], r["step"], m["mean_loss"]))
            for t, c in sorted(m.get("counts_per_timestep", {}).items(), key = lambda kv: -int(kv[0])):
                counts.append("%s\t%s\t%s\t%s" % (r["phase"], r["step"], t, c))
            if "oracle_reward" in m:
                rewards.append("%s\t%s\t%r" % (r["phase"], r["step"], m["oracle_reward"]))
        written = {}
        for name, lines in (("plot_losses.tsv", losses), ("plot_counts.tsv", counts), ("plot_rewards.tsv", rewards)):
            with io.open(self.path(name), "w", encoding = "utf-8") as f:
                f.write("\n".join(lines) + "\n")
            written[name] = len(lines) - 1
        if os.path.exists(self.inputPath("pairs.lpds")):
            with io.open(self.path("plot_gap_histogram.tsv"), "w", encoding = "utf-8") as f:
                f.write(mpcf.gapHistogramTable(self._records("pairs.lpds"), self.config.histEdges()))
            written["plot_gap_histogram.tsv"] = len(self.config.histEdges()) - 1
        self._info("plot-data: %s" % written)
        return written


COMMAND_METHODS = {
    "gen-data": "genData",
    "pretrain": "pretrain",
    "train-lrm": "trainLrm",
    "filter": "filter",
    "corr": "corr",
    "lpo": "lpo",
    "grpo": "grpo",
    "dpo": "dpo",
    "eval": "eval",
    "plot-data": "plotData",
    }


class CommandParser(argparse.ArgumentParser):
    """Reports bad flags as a ConfigException instead of printing usage and exiting."""

    def error(self, message):
        raise ConfigException("%s (see %s --help)" % (message, self.prog))


def buildParser():
    parser = CommandParser(prog = "latentpref", description = "Latent-space step-level preference optimization on a desk-scale diffusion model.")
    parser.add_argument("--version", action = "version", version = "%(prog)s " + LATENTPREFPYTHON_VERSION)
    parser.add_argument("command", choices = COMMANDS)
    parser.add_argument("--config", help = "INI file or flat file of section.key=value lines")
    parser.add_argument("--seed", type = int, help = "master seed (overrides run.seed)")
    parser.add_argument("--out", default = "out", help = "output directory (created if missing)")
    parser.add_argument("--in", dest = "inputDir", help = "input directory (defaults to --out)")
    parser.add_argument("--set", action = "append", default = [], metavar = "KEY=VALUE", help = "override one configuration key")
    parser.add_argument("--strategy", help = "filter: strategy1, strategy2, strategy3 or tie (1, 2 and 3 work too)")
    parser.add_argument("--model", help = "eval: denoiser checkpoint to evaluate")
    parser.add_argument("--baseline", help = "eval: denoiser checkpoint to compare against")
    parser.add_argument("--verbose", action = "store_true", help = "debug logging")
    return parser


def loadRunConfig(args):
    config = RunConfig()
    if args.config:
        config.loadFile(args.config)
    if args.seed is not None:
        config.set("run.seed", args.seed)
    for assignment in args.set:
        config.setAssignment(assignment)
    return config.validate()


def exitCodeFor(exc):
    if isinstance(exc, ConfigException) or getattr(exc, "errorCode", None) == USAGE_ERROR:
        return EXIT_USAGE
    if isinstance(exc, (NumericFaultException, DegenerateInputException, DivergenceException)):
        return EXIT_NUMERIC
    return EXIT_FAILURE


def _reason(exc):
    return " ".join(str(exc).split())


def main(argv = None):
    """Entry point of the latentpref command. Returns the exit status."""
    try:
        args = buildParser().parse_args(argv)
        logger = makeLogger(args.verbose)
        config = loadRunConfig(args)
        harness = Harness(config, args.out, args.inputDir, debug = logger if args.verbose else False, logger = logger)
        harness.run(args.command, args)
    except LatentPrefException as e:
        sys.stderr.write("error: %s: %s\n" % (errorName(e.errorCode), _reason(e)))
        return exitCodeFor(e)
    except (IOError, OSError) as e:
        sys.stderr.write("error: IO_ERROR: %s\n" % _reason(e))
        return EXIT_FAILURE
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
