"""
The three-channel grid and its patches
======================================

A heavy-atom molecule becomes a 3 x 9 x 9 array: coordinates, element
one-hots and the bond matrix. The transformer then reads it as nine
3 x 3 patches.
"""

import numpy as np

from d3mes.encoding import decode_tensor, encode_molecule, patchify, unpatchify
from d3mes.molgraph import bundled_corpus, canonical_hash, strip_hydrogens

np.set_printoptions(precision=2, suppress=True)

m = strip_hydrogens(bundled_corpus()[120])
t = encode_molecule(m)
print(m.formula, "with", t.n_atoms, "heavy atoms")

print("channel 0, centred coordinates (rows past n_atoms stay zero):")
print(t.data[0, :, :3])
print("channel 1, element one-hot over C, N, O, F:")
print(t.data[1, :, :4])
print("channel 2, bond orders:")
print(t.data[2])

# Patchify is a pure reshuffle, so the roundtrip is exact.
tokens = patchify(t, 3)
print("tokens:", tokens.tokens.shape, "on a", tokens.grid, "patch grid")
back = unpatchify(tokens)
print("exact roundtrip:", np.array_equal(back.data, t.data))

# Decoding gives the same graph back.
print("same graph after decoding:", canonical_hash(decode_tensor(t)) == canonical_hash(m))
