"""Stability, validity, uniqueness and ring-class accuracy of generated molecules.

Validity is a graph proxy (no over-valent atom in the largest fragment)
and uniqueness counts distinct canonical graph hashes rather than SMILES.
Metrics on an empty input are ``None``, never 0.
"""
from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

from .molgraph import (
    ElementTable,
    Molecule,
    canonical_hash,
    default_table,
    detect_rings,
    largest_fragment,
    valences,
)

CYCLIC, NONCYCLIC = "cyclic", "noncyclic"


def _stable_flags(m: Molecule, table: ElementTable) -> list[bool]:
    v = valences(m)
    return [int(v[k]) == table[s].max_valence for k, s in enumerate(m.symbols)]


def atom_stability(mols: Sequence[Molecule], table: ElementTable | None = None) -> float | None:
    table = table or default_table()
    flags = [f for m in mols for f in _stable_flags(m, table)]
    return sum(flags) / len(flags) if flags else None


def mol_stability(mols: Sequence[Molecule], table: ElementTable | None = None) -> float | None:
    table = table or default_table()
    if not mols:
        return None
    return sum(len(m) > 0 and all(_stable_flags(m, table)) for m in mols) / len(mols)


def is_valid(m: Molecule, table: ElementTable | None = None) -> bool:
    table = table or default_table()
    if len(m) == 0:
        return False
    frag = largest_fragment(m)
    v = valences(frag)
    return all(int(v[k]) <= table[s].max_valence for k, s in enumerate(frag.symbols))


def validity(mols: Sequence[Molecule], table: ElementTable | None = None) -> float | None:
    if not mols:
        return None
    return sum(is_valid(m, table) for m in mols) / len(mols)


def uniqueness(mols: Sequence[Molecule], table: ElementTable | None = None) -> float | None:
    """Distinct largest-fragment hashes among valid molecules / number valid."""
    valid = [largest_fragment(m) for m in mols if is_valid(m, table)]
    if not valid:
        return None
    return len({canonical_hash(m) for m in valid}) / len(valid)


def class_accuracy(mols: Sequence[Molecule], target: str) -> float | None:
    if target not in (CYCLIC, NONCYCLIC):
        raise ValueError(f"target must be {CYCLIC!r} or {NONCYCLIC!r}")
    if not mols:
        return None
    want = target == CYCLIC
    return sum(detect_rings(m) == want for m in mols) / len(mols)


@dataclass
class MetricReport:
    n_samples: int
    atom_stable: float | None
    mol_stable: float | None
    valid: float | None
    val_uniq: float | None  # uniqueness among valid molecules
    valid_unique: float | None  # distinct valid molecules / all samples, never above valid
    class_accuracy: dict[str, float | None] = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = asdict(self)
        acc = d.pop("class_accuracy")
        for k, v in sorted(acc.items()):
            d[f"accuracy_{k}"] = v
        return d

    def to_text(self) -> str:
        return "".join(f"{k} = {_fmt(v)}\n" for k, v in self.as_dict().items())

    def to_csv(self, header: bool = True) -> str:
        d = self.as_dict()
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        if header:
            w.writerow(d.keys())
        w.writerow(_fmt(v) for v in d.values())
        return buf.getvalue()

    def write(self, path: str | Path) -> None:
        path = Path(path)
        path.write_text(self.to_text())
        path.with_suffix(".csv").write_text(self.to_csv())


def _fmt(v) -> str:
    if v is None:
        return "NA"
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate(mols: Sequence[Molecule], class_targets: Sequence[str] = (), table: ElementTable | None = None) -> MetricReport:
    """All metrics in one report. ``class_targets`` adds ring-class accuracies
    (e.g. ``("cyclic",)`` for a batch generated with the cyclic label)."""
    table = table or default_table()
    valid = validity(mols, table)
    uniq = uniqueness(mols, table)
    return MetricReport(
        n_samples=len(mols),
        atom_stable=atom_stability(mols, table),
        mol_stable=mol_stability(mols, table),
        valid=valid,
        val_uniq=uniq,
        valid_unique=None if uniq is None else uniq * valid,
        class_accuracy={t: class_accuracy(mols, t) for t in class_targets},
    )
