"""
Name: lpoToyRun.py
Desc: See DESC string.

Note: LatentPrefPython raises LatentPrefException subclasses when an input or
configuration can't be used. This example terminates on the first one. See
LatentPrefPython.py for the error codes and their advice strings.
"""
import warnings

import denoiser
import diffusion
import lpo
import lrm
import mpcf
from harness import evalReward
from LatentPrefPython import DegenerateSamplingWarning
from tensor import RngStream


DESC = """
End-to-end latent preference optimization on the synthetic task.

A denoiser is pre-trained, a latent reward model is trained on its latent
space, and the denoiser is then fine-tuned with LPO twice: once over the full
timestep range [0, 950] and once over the lowest quarter [0, 250]. The hidden
oracle reward of deterministic (eta = 0) generations is printed before and
after, together with the number of qualified samples per timestep.
"""

SEED = 11
N_EVAL = 64

print(DESC)
warnings.simplefilter("always", DegenerateSamplingWarning)

rng = RngStream(SEED)
schedule = diffusion.buildLinearSchedule()
config = denoiser.DenoiserConfig()
task = denoiser.SyntheticTask(config, rng.derive("task"))
conds = list(range(1, config.vocab))
timesteps = diffusion.inferenceTimesteps(schedule.T)

print("Pre-training the denoiser")
dmo = denoiser.Denoiser(config, rng.derive("denoiser.init"))
denoiser.pretrainDenoiser(task.dataset(2000, rng.derive("latents")), dmo, 2000, 0.01, rng.derive("pretrain"), schedule, batchSize = 32)

print("Training the latent reward model")
records = mpcf.scoreRecords(mpcf.generateCorpus(task, 1500, rng.derive("corpus")))
reward = lrm.Lrm.fromDenoiser(dmo, rng.derive("lrm.init"))
lrm.trainLrm(mpcf.trainingPairs(mpcf.filterWinlose(records, mpcf.STRATEGY2)), reward, 2000, 0.01, rng.derive("train-lrm"), schedule, warmupSteps = 100)


def oracleReward(net):
    return evalReward(net, N_EVAL, conds, rng.derive("eval"), schedule, timesteps, task.targets)


baseline = oracleReward(dmo)
print("baseline oracle reward %.5f +- %.5f" % (baseline.mean, baseline.ci))

for label, hi in (("full range", 950), ("low quarter", 250)):
    lpoConfig = lpo.LpoConfig(timestepHi = hi, epochs = 5)
    tuned, history = lpo.runLpo(lpoConfig, dmo.copy(), reward, conds, rng.derive("lpo"), schedule)
    after = oracleReward(tuned)
    print("")
    print("%s: oracle reward %.5f +- %.5f (gain %+.5f)" % (label, after.mean, after.ci, after.mean - baseline.mean))
    for record in history:
        counts = " ".join("%s:%s" % (t, c) for t, c in record["counts_per_timestep"].items())
        print("  epoch %s: %s samples, loss %s | %s" % (record["epoch"], record["samples"], record["mean_loss"], counts))
