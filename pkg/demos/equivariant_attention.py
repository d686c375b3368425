"""
Rotating a molecule through equivariant attention
=================================================

Attention weights depend only on distances and element types, so a rigid
motion leaves them unchanged. The type-1 outputs are vectors and turn with
the molecule.
"""

import numpy as np
import torch
from scipy.spatial.transform import Rotation

from d3mes.equiattn import EquivariantAttention
from d3mes.molgraph import bundled_corpus, strip_hydrogens

torch.manual_seed(0)
m = strip_hydrogens(bundled_corpus()[205])
onehot = np.array([[s == e for e in "CNOF"] for s in m.symbols], dtype=float)

attn = EquivariantAttention({0: 4}, {0: 2, 1: 1}, heads=2, key_channels=8, value_channels=8).double()


def run(positions):
    f = {0: torch.from_numpy(onehot)[None, :, :, None]}
    out, alpha = attn(f, torch.tensor(positions)[None], return_attention=True)
    return alpha[0].detach().numpy(), out[1][0, :, 0].detach().numpy()


R = Rotation.random(random_state=1).as_matrix()
shift = np.array([2.0, -1.0, 0.5])
alpha, vec = run(m.positions)
alpha_moved, vec_moved = run(m.positions @ R.T + shift)

print(m.formula, f"{len(m)} atoms, attention weights of head 0 for atom 0:")
print(np.round(alpha[0, 0], 3))
print("max change in attention weights:", np.abs(alpha_moved - alpha).max())
print("max |v(Rx + s) - R v(x)|:", np.abs(vec_moved - vec @ R.T).max())
