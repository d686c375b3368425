"""
Molecule graphs, hydrogens and canonical hashes
===============================================

Load the bundled corpus, strip the hydrogens, recover the bonds from
geometry alone and put the hydrogens back.
"""

import numpy as np

from d3mes.molgraph import (
    add_hydrogens,
    bundled_corpus,
    canonical_hash,
    detect_rings,
    infer_bonds,
    strip_hydrogens,
)

corpus = bundled_corpus()
print(f"{len(corpus)} molecules, formulas such as", [m.formula for m in corpus[:5]])

# The diffusion model only sees heavy atoms. Starting from bare coordinates,
# bonds come from interatomic distances and the hydrogens are re-grown to
# fill each atom's valence.
m = corpus[60]
heavy = strip_hydrogens(m)
rebuilt = add_hydrogens(infer_bonds(heavy.replace(bonds=())))
print(m.formula, "->", heavy.formula, "->", rebuilt.formula)

# Canonical hashes do not care about atom order or rigid motion.
perm = np.random.default_rng(0).permutation(len(m))
shuffled = m.replace(
    symbols=tuple(m.symbols[i] for i in perm),
    positions=m.positions[perm] + 3.0,
    bonds=(),
)
print("same hash after shuffling and moving:", canonical_hash(m) == canonical_hash(infer_bonds(shuffled)))

# Ring detection drives the cyclic / noncyclic class labels.
cyclic = sum(detect_rings(x) for x in corpus)
print(f"{cyclic} cyclic and {len(corpus) - cyclic} noncyclic molecules")
