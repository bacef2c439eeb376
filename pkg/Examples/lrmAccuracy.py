"""
Name: lrmAccuracy.py
Desc: See DESC string.

Note: LatentPrefPython raises LatentPrefException subclasses when an input or
configuration can't be used. This example terminates on the first one. See
LatentPrefPython.py for the error codes and their advice strings.
"""
import denoiser
import diffusion
import lrm
import mpcf
from tensor import RngStream


DESC = """
Trains a small latent reward model twice, with Visual Feature Enhancement
disabled (gs = 1) and enabled (gs = 7.5), and prints held-out pairwise accuracy
at several noise levels plus the correlation of the reward gap with every
oracle dimension.

Both models start from the same pre-trained denoiser and see the same pairs,
filtered with strategy2.
"""

SEED = 3
PRETRAIN_STEPS = 1500
LRM_STEPS = 1500
EVAL_TIMESTEPS = [0, 200, 500, 750]

print(DESC)

rng = RngStream(SEED)
schedule = diffusion.buildLinearSchedule()
config = denoiser.DenoiserConfig()
task = denoiser.SyntheticTask(config, rng.derive("task"))

print("Pre-training the denoiser for %s steps" % PRETRAIN_STEPS)
dmo = denoiser.Denoiser(config, rng.derive("denoiser.init"))
dmo, curve = denoiser.pretrainDenoiser(task.dataset(2000, rng.derive("latents")), dmo, PRETRAIN_STEPS, 0.01, rng.derive("pretrain"), schedule, batchSize = 32)
print("final loss %.5f" % curve[-1])

train = mpcf.filterWinlose(mpcf.scoreRecords(mpcf.generateCorpus(task, 1500, rng.derive("corpus"))), mpcf.STRATEGY2)
held = mpcf.scoreRecords(mpcf.generateCorpus(task, 400, rng.derive("held"), labelNoise = 0.0))
pairs = mpcf.trainingPairs(train)
heldPairs = [sp.pair for sp, _ in held]
print("%s training pairs after filtering, %s held-out pairs" % (len(pairs), len(heldPairs)))

for gs in (1.0, lrm.DEFAULT_GS):
    model = lrm.Lrm.fromDenoiser(dmo, rng.derive("lrm.init"), gs = gs)
    lrm.trainLrm(pairs, model, LRM_STEPS, 0.01, rng.derive("train-lrm"), schedule, batchSize = 16, warmupSteps = 100)
    print("")
    print("gs = %s, tau = %.3f" % (gs, model.head.tau))
    for t in EVAL_TIMESTEPS:
        acc = lrm.pairwiseAccuracy(heldPairs, t, model, rng.derive("accuracy"), schedule)
        print("  accuracy at t = %3s: %.3f" % (t, acc))
    aes, clip, vqa = mpcf.corrMetrics(model, held)
    print("  aes-corr %.3f  clip-corr %.3f  vqa-corr %.3f" % (aes, clip, vqa))
