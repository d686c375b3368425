"""
Train a small model and sample molecules
========================================

A few hundred steps on a handful of molecules is enough to watch the loss
fall and to see what the sampler produces. Expect rough samples; the
acceptance suite trains for 5000 steps.
"""

import collections
import logging

import numpy as np
import torch

from d3mes.config import DESK_PROFILE, RunConfig
from d3mes.diffusion import SizeSampler, generate
from d3mes.encoding import encode_molecule
from d3mes.metrics import evaluate
from d3mes.molgraph import bundled_corpus, strip_hydrogens
from d3mes.training import schedule_for, train

logging.basicConfig(level=logging.INFO, format="%(message)s")
torch.set_num_threads(1)

# Heavy-atom skeletons of eight small molecules, encoded on the 9 x 9 grid.
mols = [strip_hydrogens(m) for m in bundled_corpus()[::29]]
x = np.stack([encode_molecule(m).data for m in mols])
n_atoms = np.array([len(m) for m in mols])
print("training on", [m.formula for m in mols])

# The desk profile shortens the chain to 50 steps; a smaller network and a
# shorter run keep this demo to a few seconds of CPU.
config = RunConfig.from_dict(
    dict(DESK_PROFILE, hidden=64, depth=3, steps=400, batch_size=32, warmup_steps=40, ema_decay=0.99, log_interval=100)
)
model, history = train(config, x, n_atoms)
print(f"mse over the first 50 steps {np.mean(history.mse[:50]):.3f}, last 50 {np.mean(history.mse[-50:]):.3f}")

# Sizes are drawn from the training histogram; each chain has its own seed.
sizes = SizeSampler(dict(collections.Counter(n_atoms.tolist())))
samples = generate(20, model.eval(), schedule_for(config), sizes, seed=0)
print("sampled", [m.formula for m in samples[:6]], "...")
print(evaluate(samples).to_text())
