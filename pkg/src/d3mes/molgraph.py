"""Molecular graphs: data model, SDF/XYZ I/O, hydrogens, bond perception, rings and hashing.

A :class:`Molecule` is a value object (element symbols, an ``(n, 3)`` array of
positions in Angstrom, and a tuple of :class:`Bond` records). Every operation
here returns a new molecule and never mutates its argument.
"""
from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components

logger = logging.getLogger(__name__)

__all__ = [
    "Element",
    "ElementTable",
    "Atom",
    "Bond",
    "Molecule",
    "ParseError",
    "UnsupportedElementError",
    "default_table",
    "parse_structure",
    "parse_sdf",
    "parse_xyz",
    "write_sdf",
    "sdf_block",
    "strip_hydrogens",
    "infer_bonds",
    "add_hydrogens",
    "valences",
    "overvalent_atoms",
    "fragments",
    "largest_fragment",
    "detect_rings",
    "canonical_hash",
    "bundled_corpus",
]


class ParseError(ValueError):
    """Malformed structure file. ``lineno`` is 1-based (0 if unknown)."""

    def __init__(self, message: str, lineno: int = 0, path: str | None = None):
        where = f"{path or '<string>'}:{lineno}" if lineno else (path or "<string>")
        super().__init__(f"{where}: {message}")
        self.lineno = lineno
        self.path = path


class UnsupportedElementError(ValueError):
    pass


# ---------------------------------------------------------------------------
# element table
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Element:
    symbol: str
    max_valence: int
    covalent_radius: float

    def __post_init__(self):
        if self.covalent_radius <= 0:
            raise ValueError(f"covalent radius of {self.symbol} must be positive")
        if self.max_valence < 1:
            raise ValueError(f"max valence of {self.symbol} must be >= 1")


class ElementTable:
    """Element properties and reference bond lengths, loaded from a text table.

    See ``data/elements.txt`` for the file format.
    """

    def __init__(
        self,
        elements: dict[str, Element],
        bond_lengths: dict[tuple[str, str], dict[int, float]],
        margins: dict[int, float],
    ):
        self.elements = dict(elements)
        self.bond_lengths = {tuple(sorted(k)): dict(v) for k, v in bond_lengths.items()}
        self.margins = dict(margins)

    @classmethod
    def from_file(cls, path: str | Path | None = None) -> "ElementTable":
        if path is None:
            text = resources.files("d3mes.data").joinpath("elements.txt").read_text()
            path = "elements.txt"
        else:
            text = Path(path).read_text()
        elements: dict[str, Element] = {}
        bonds: dict[tuple[str, str], dict[int, float]] = {}
        margins: dict[int, float] = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].split()
            if not line:
                continue
            kind, args = line[0], line[1:]
            try:
                if kind == "element" and len(args) == 3:
                    elements[args[0]] = Element(args[0], int(args[1]), float(args[2]))
                elif kind == "bond" and len(args) == 4:
                    key = tuple(sorted((args[0], args[1])))
                    bonds.setdefault(key, {})[int(args[2])] = float(args[3])
                elif kind == "margin" and len(args) == 2:
                    margins[int(args[0])] = float(args[1])
                else:
                    raise ValueError(f"unrecognised record {raw.strip()!r}")
            except ValueError as exc:
                raise ParseError(str(exc), lineno, str(path)) from None
        return cls(elements, bonds, margins)

    def __getitem__(self, symbol: str) -> Element:
        try:
            return self.elements[symbol]
        except KeyError:
            raise UnsupportedElementError(f"unsupported element {symbol!r}") from None

    def __contains__(self, symbol: str) -> bool:
        return symbol in self.elements

    def reference_length(self, a: str, b: str, order: int) -> float | None:
        return self.bond_lengths.get(tuple(sorted((a, b))), {}).get(order)

    def bond_order(self, a: str, b: str, distance: float) -> int:
        """Highest order k with ``distance <= length_k + margin_k``; 0 if none."""
        table = self.bond_lengths.get(tuple(sorted((a, b))), {})
        best = 0
        for order, length in table.items():
            if distance <= length + self.margins.get(order, 0.0) and order > best:
                best = order
        return best

    def hydrogen_length(self, symbol: str) -> float:
        length = self.reference_length("H", symbol, 1)
        if length is None:
            return self[symbol].covalent_radius + self["H"].covalent_radius
        return length


@lru_cache(maxsize=1)
def default_table() -> ElementTable:
    return ElementTable.from_file()


# ---------------------------------------------------------------------------
# data model
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Atom:
    element: str
    position: np.ndarray


@dataclass(frozen=True, order=True)
class Bond:
    i: int
    j: int
    order: int = 1

    def __post_init__(self):
        if self.i == self.j:
            raise ValueError(f"self bond on atom {self.i}")
        if self.order < 1:
            raise ValueError(f"bond order must be >= 1, got {self.order}")
        if self.i > self.j:
            # canonical orientation keeps duplicate detection trivial
            i, j = self.j, self.i
            object.__setattr__(self, "i", i)
            object.__setattr__(self, "j", j)

    @property
    def pair(self) -> tuple[int, int]:
        return (self.i, self.j)


@dataclass(frozen=True, eq=False)
class Molecule:
    symbols: tuple[str, ...]
    positions: np.ndarray
    bonds: tuple[Bond, ...] = ()
    class_label: int | None = None
    name: str = field(default="", compare=False)

    def __post_init__(self):
        symbols = tuple(self.symbols)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if len(pos) != len(symbols):
            raise ValueError(f"{len(symbols)} symbols but {len(pos)} positions")
        if not np.all(np.isfinite(pos)):
            raise ValueError("non-finite atom position")
        pos.setflags(write=False)
        bonds = tuple(sorted(self.bonds))
        seen = set()
        for b in bonds:
            if not (0 <= b.i < len(symbols) and 0 <= b.j < len(symbols)):
                raise ValueError(f"bond {b} references a missing atom")
            if b.pair in seen:
                raise ValueError(f"duplicate bond between atoms {b.pair}")
            seen.add(b.pair)
        object.__setattr__(self, "symbols", symbols)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "bonds", bonds)

    def __len__(self) -> int:
        return len(self.symbols)

    def __repr__(self) -> str:
        return f"Molecule({self.formula!r}, n_bonds={len(self.bonds)})"

    @property
    def atoms(self) -> list[Atom]:
        return [Atom(s, p) for s, p in zip(self.symbols, self.positions)]

    @property
    def formula(self) -> str:
        counts: dict[str, int] = {}
        for s in self.symbols:
            counts[s] = counts.get(s, 0) + 1
        order = sorted(counts, key=lambda s: (s not in ("C", "H"), s != "C", s))
        return "".join(f"{s}{counts[s] if counts[s] > 1 else ''}" for s in order)

    def replace(self, **changes) -> "Molecule":
        kw = dict(
            symbols=self.symbols,
            positions=self.positions,
            bonds=self.bonds,
            class_label=self.class_label,
            name=self.name,
        )
        kw.update(changes)
        return Molecule(**kw)

    def adjacency(self) -> np.ndarray:
        """Dense ``(n, n)`` integer matrix of bond orders."""
        a = np.zeros((len(self), len(self)), dtype=np.int64)
        for b in self.bonds:
            a[b.i, b.j] = a[b.j, b.i] = b.order
        return a

    def neighbors(self, i: int) -> list[int]:
        return [b.j if b.i == i else b.i for b in self.bonds if i in b.pair]

    def n_hydrogens(self) -> int:
        return sum(s == "H" for s in self.symbols)


# ---------------------------------------------------------------------------
# file I/O
# ---------------------------------------------------------------------------


def _check_symbol(symbol: str, table: ElementTable, lineno: int, path):
    if symbol not in table:
        raise UnsupportedElementError(
            f"{path or '<string>'}:{lineno}: unsupported element {symbol!r}"
        )


def parse_sdf(text: str, table: ElementTable | None = None, path: str | None = None) -> list[Molecule]:
    """Parse V2000 SD records. Bond blocks become :class:`Bond` records."""
    table = table or default_table()
    lines = text.splitlines()
    mols = []
    start = 0
    while start < len(lines):
        # skip blank separators between records
        while start < len(lines) and not lines[start].strip() and not _is_counts(lines, start + 3):
            start += 1
        if start >= len(lines):
            break
        mol, start = _parse_sdf_record(lines, start, table, path)
        mols.append(mol)
    return mols


def _is_counts(lines, idx):
    return idx < len(lines) and "V2000" in lines[idx]


def _parse_sdf_record(lines, start, table, path):
    name = lines[start].strip()
    counts_at = start + 3
    if counts_at >= len(lines):
        raise ParseError("truncated header", len(lines), path)
    counts = lines[counts_at]
    if "V3000" in counts:
        raise ParseError("V3000 records are not supported", counts_at + 1, path)
    try:
        n_atoms = int(counts[0:3])
        n_bonds = int(counts[3:6])
    except ValueError:
        raise ParseError(f"bad counts line {counts!r}", counts_at + 1, path) from None
    symbols, positions, bonds = [], [], []
    row = counts_at + 1
    for _ in range(n_atoms):
        if row >= len(lines):
            raise ParseError("truncated atom block", row, path)
        line = lines[row]
        try:
            xyz = [float(line[0:10]), float(line[10:20]), float(line[20:30])]
        except ValueError:
            # tolerate whitespace-separated writers
            parts = line.split()
            try:
                xyz = [float(v) for v in parts[:3]]
            except (ValueError, IndexError):
                raise ParseError(f"bad atom line {line!r}", row + 1, path) from None
            sym = parts[3] if len(parts) > 3 else ""
        else:
            sym = line[31:34].strip()
        _check_symbol(sym, table, row + 1, path)
        symbols.append(sym)
        positions.append(xyz)
        row += 1
    for _ in range(n_bonds):
        if row >= len(lines):
            raise ParseError("truncated bond block", row, path)
        line = lines[row]
        try:
            i, j, order = int(line[0:3]), int(line[3:6]), int(line[6:9])
        except ValueError:
            parts = line.split()
            try:
                i, j, order = int(parts[0]), int(parts[1]), int(parts[2])
            except (ValueError, IndexError):
                raise ParseError(f"bad bond line {line!r}", row + 1, path) from None
        if not (1 <= i <= n_atoms and 1 <= j <= n_atoms) or order not in (1, 2, 3):
            raise ParseError(f"bad bond line {line!r}", row + 1, path)
        bonds.append(Bond(i - 1, j - 1, order))
        row += 1
    label = None
    while row < len(lines) and lines[row].strip() != "$$$$":
        if lines[row].startswith(">") and "<class_label>" in lines[row] and row + 1 < len(lines):
            label = int(lines[row + 1].strip())
        row += 1
    try:
        mol = Molecule(tuple(symbols), np.array(positions).reshape(-1, 3), tuple(bonds), label, name)
    except ValueError as exc:
        raise ParseError(str(exc), start + 1, path) from None
    return mol, row + 1


def parse_xyz(text: str, table: ElementTable | None = None, path: str | None = None) -> list[Molecule]:
    """Parse XYZ. Multi-frame files need the count/comment header per frame;
    a headerless file is read as a single molecule, one atom per line."""
    table = table or default_table()
    lines = text.splitlines()
    first = next((k for k, l in enumerate(lines) if l.strip()), None)
    if first is None:
        return []
    if lines[first].split()[0].lstrip("-").isdigit():
        mols = []
        row = first
        while row < len(lines):
            if not lines[row].strip():
                row += 1
                continue
            try:
                n = int(lines[row].split()[0])
            except ValueError:
                raise ParseError(f"expected atom count, got {lines[row]!r}", row + 1, path) from None
            name = lines[row + 1].strip() if row + 1 < len(lines) else ""
            body = lines[row + 2 : row + 2 + n]
            if len(body) < n:
                raise ParseError("truncated frame", len(lines), path)
            mols.append(_xyz_atoms(body, row + 3, table, path, name))
            row += 2 + n
        return mols
    body = [(k, l) for k, l in enumerate(lines) if l.strip()]
    symbols, pos = [], []
    for k, line in body:
        s, p = _xyz_line(line, k + 1, table, path)
        symbols.append(s)
        pos.append(p)
    return [Molecule(tuple(symbols), np.array(pos).reshape(-1, 3))]


def _xyz_line(line, lineno, table, path):
    parts = line.split()
    if len(parts) < 4:
        raise ParseError(f"expected 'symbol x y z', got {line!r}", lineno, path)
    try:
        xyz = [float(v) for v in parts[1:4]]
    except ValueError:
        raise ParseError(f"bad coordinates in {line!r}", lineno, path) from None
    _check_symbol(parts[0], table, lineno, path)
    return parts[0], xyz


def _xyz_atoms(body, first_lineno, table, path, name):
    symbols, pos = [], []
    for k, line in enumerate(body):
        s, p = _xyz_line(line, first_lineno + k, table, path)
        symbols.append(s)
        pos.append(p)
    return Molecule(tuple(symbols), np.array(pos).reshape(-1, 3), name=name)


def parse_structure(path: str | Path, format: str | None = None, table: ElementTable | None = None) -> list[Molecule]:
    """Read every molecule in an ``.xyz`` or ``.sdf``/``.mol`` file."""
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    text = path.read_text()
    if fmt in ("sdf", "mol", "sd"):
        return parse_sdf(text, table, str(path))
    if fmt == "xyz":
        return parse_xyz(text, table, str(path))
    raise ValueError(f"unknown structure format {fmt!r}")


def sdf_block(m: Molecule) -> str:
    out = [m.name or m.formula, "     d3mes          3D", ""]
    out.append(f"{len(m):3d}{len(m.bonds):3d}  0  0  0  0  0  0  0  0999 V2000")
    for s, (x, y, z) in zip(m.symbols, m.positions):
        out.append(f"{x:10.4f}{y:10.4f}{z:10.4f} {s:<3} 0  0  0  0  0  0  0  0  0  0  0  0")
    for b in m.bonds:
        out.append(f"{b.i + 1:3d}{b.j + 1:3d}{b.order:3d}  0")
    out.append("M  END")
    if m.class_label is not None:
        out += ["> <class_label>", str(m.class_label), ""]
    out.append("$$$$")
    return "\n".join(out) + "\n"


def write_sdf(mols: Iterable[Molecule], path: str | Path) -> None:
    Path(path).write_text("".join(sdf_block(m) for m in mols))


def bundled_corpus() -> list[Molecule]:
    """The ~200 small hydrogenated reference molecules shipped with the package."""
    text = resources.files("d3mes.data").joinpath("corpus.sdf").read_text()
    return parse_sdf(text, path="corpus.sdf")


# ---------------------------------------------------------------------------
# hydrogens and bonds
# ---------------------------------------------------------------------------


def _subset(m: Molecule, keep: Sequence[int]) -> Molecule:
    remap = {old: new for new, old in enumerate(keep)}
    bonds = tuple(
        Bond(remap[b.i], remap[b.j], b.order) for b in m.bonds if b.i in remap and b.j in remap
    )
    return m.replace(
        symbols=tuple(m.symbols[k] for k in keep),
        positions=m.positions[list(keep)] if keep else np.zeros((0, 3)),
        bonds=bonds,
    )


def strip_hydrogens(m: Molecule) -> Molecule:
    return _subset(m, [k for k, s in enumerate(m.symbols) if s != "H"])


def infer_bonds(m: Molecule, mode: str = "geometry", table: ElementTable | None = None) -> Molecule:
    """Assign bonds from interatomic distances (``"geometry"``) or keep the
    existing records with orders clamped to 1..3 (``"channel"``)."""
    table = table or default_table()
    if mode == "channel":
        bonds = tuple(Bond(b.i, b.j, min(b.order, 3)) for b in m.bonds)
        return m.replace(bonds=bonds)
    if mode != "geometry":
        raise ValueError(f"unknown bond mode {mode!r}")
    n = len(m)
    if n < 2:
        return m.replace(bonds=())
    d = np.linalg.norm(m.positions[:, None, :] - m.positions[None, :, :], axis=-1)
    bonds = []
    for i in range(n):
        for j in range(i + 1, n):
            order = table.bond_order(m.symbols[i], m.symbols[j], d[i, j])
            if order:
                bonds.append(Bond(i, j, order))
    return m.replace(bonds=tuple(bonds))


def valences(m: Molecule) -> np.ndarray:
    v = np.zeros(len(m), dtype=np.int64)
    for b in m.bonds:
        v[b.i] += b.order
        v[b.j] += b.order
    return v


def overvalent_atoms(m: Molecule, table: ElementTable | None = None) -> list[int]:
    table = table or default_table()
    v = valences(m)
    return [k for k, s in enumerate(m.symbols) if v[k] > table[s].max_valence]


def _unit(v):
    n = np.linalg.norm(v)
    return v / n if n > 1e-12 else None


def _spread_directions(existing: np.ndarray, n_new: int, iters: int = 300) -> np.ndarray:
    """Unit vectors for ``n_new`` substituents, pushed apart from each other and
    from the fixed ``existing`` directions by inverse-square repulsion."""
    if n_new == 0:
        return np.zeros((0, 3))
    if not len(existing) and n_new > 1:
        # a symmetric ring of starting points is a repulsion saddle; pin one first
        first = np.array([[0.0, 0.0, 1.0]])
        return np.concatenate([first, _spread_directions(first, n_new - 1, iters)])
    base = -existing.sum(axis=0) if len(existing) else np.array([0.0, 0.0, 1.0])
    base = _unit(base)
    if base is None:
        # existing directions cancel out (linear or planar-symmetric); go perpendicular
        base = _unit(np.cross(existing[0], [1.0, 0.0, 0.0]))
        if base is None:
            base = _unit(np.cross(existing[0], [0.0, 1.0, 0.0]))
    e1 = _unit(np.cross(base, [0.0, 0.0, 1.0]))
    if e1 is None:
        e1 = _unit(np.cross(base, [1.0, 0.0, 0.0]))
    e2 = np.cross(base, e1)
    if n_new == 1:
        new = base[None, :].copy()
    else:
        theta = 2 * np.pi * np.arange(n_new) / n_new
        new = base + 0.8 * (np.cos(theta)[:, None] * e1 + np.sin(theta)[:, None] * e2)
        new /= np.linalg.norm(new, axis=1, keepdims=True)
    if not len(existing) and n_new == 1:
        return new
    for _ in range(iters):
        pts = np.concatenate([existing, new]) if len(existing) else new
        diff = new[:, None, :] - pts[None, :, :]
        dist2 = (diff**2).sum(-1)
        k = len(existing)
        idx = np.arange(n_new)
        dist2[idx, k + idx] = np.inf
        force = (diff / dist2[..., None] ** 1.5).sum(1)
        # project onto the tangent plane and renormalise
        force -= (force * new).sum(1, keepdims=True) * new
        new = new + 0.05 * force
        new /= np.linalg.norm(new, axis=1, keepdims=True)
    return new


def add_hydrogens(m: Molecule, table: ElementTable | None = None) -> Molecule:
    """Saturate every heavy atom up to its maximum valence with hydrogens.

    Over-valent atoms are left alone (see :func:`overvalent_atoms`).
    """
    table = table or default_table()
    v = valences(m)
    symbols = list(m.symbols)
    positions = [p for p in m.positions]
    bonds = list(m.bonds)
    for i, s in enumerate(m.symbols):
        if s == "H":
            continue
        deficit = table[s].max_valence - int(v[i])
        if deficit <= 0:
            continue
        nbr = [m.positions[j] - m.positions[i] for j in m.neighbors(i)]
        nbr = np.array([u for u in (_unit(x) for x in nbr) if u is not None]).reshape(-1, 3)
        length = table.hydrogen_length(s)
        for direction in _spread_directions(nbr, deficit):
            symbols.append("H")
            positions.append(m.positions[i] + length * direction)
            bonds.append(Bond(i, len(symbols) - 1, 1))
    return m.replace(symbols=tuple(symbols), positions=np.array(positions).reshape(-1, 3), bonds=tuple(bonds))


# ---------------------------------------------------------------------------
# graph utilities
# ---------------------------------------------------------------------------


def _components(m: Molecule) -> tuple[int, np.ndarray]:
    n = len(m)
    if n == 0:
        return 0, np.zeros(0, dtype=np.int64)
    rows = [b.i for b in m.bonds]
    cols = [b.j for b in m.bonds]
    graph = coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    return connected_components(graph, directed=False)


def fragments(m: Molecule) -> list[Molecule]:
    n_comp, labels = _components(m)
    return [_subset(m, [k for k in range(len(m)) if labels[k] == c]) for c in range(n_comp)]


def largest_fragment(m: Molecule) -> Molecule:
    """Largest connected component; ties go to the lowest first-atom index."""
    parts = fragments(m)
    if not parts:
        return m
    return max(parts, key=len)


def detect_rings(m: Molecule) -> bool:
    """True iff the bond graph has a cycle (cyclomatic number > 0)."""
    n_comp, _ = _components(m)
    return len(m.bonds) - len(m) + n_comp > 0


def _hash_graph(m: Molecule) -> tuple[list[str], dict[int, list[tuple[int, int]]]]:
    # fold terminal hydrogens into their heavy atom's label; keeps graphs small
    h_count = [0] * len(m)
    folded = set()
    for b in m.bonds:
        for a, c in ((b.i, b.j), (b.j, b.i)):
            if m.symbols[a] == "H" and m.symbols[c] != "H" and len(m.neighbors(a)) == 1:
                h_count[c] += 1
                folded.add(a)
    keep = [k for k in range(len(m)) if k not in folded]
    remap = {old: new for new, old in enumerate(keep)}
    labels = [f"{m.symbols[k]}H{h_count[k]}" for k in keep]
    adj: dict[int, list[tuple[int, int]]] = {k: [] for k in range(len(keep))}
    for b in m.bonds:
        if b.i in remap and b.j in remap:
            adj[remap[b.i]].append((remap[b.j], b.order))
            adj[remap[b.j]].append((remap[b.i], b.order))
    return labels, adj


def _refine(colors: list[int], adj) -> list[int]:
    """Colour refinement to a stable partition; colours are dense ranks."""
    while True:
        sig = [(colors[v], tuple(sorted((colors[u], o) for u, o in adj[v]))) for v in range(len(colors))]
        ranks = {s: r for r, s in enumerate(sorted(set(sig)))}
        new = [ranks[s] for s in sig]
        if len(set(new)) == len(set(colors)):
            return new
        colors = new


def _serialise(order: list[int], labels, adj) -> str:
    pos = {v: k for k, v in enumerate(order)}
    atoms = ",".join(labels[v] for v in order)
    edges = sorted(
        (min(pos[v], pos[u]), max(pos[v], pos[u]), o) for v in adj for u, o in adj[v] if v < u
    )
    return atoms + "|" + ",".join(f"{a}-{b}:{o}" for a, b, o in edges)


def _canonical(colors: list[int], labels, adj) -> str:
    colors = _refine(colors, adj)
    n = len(colors)
    if len(set(colors)) == n:
        return _serialise(sorted(range(n), key=lambda v: colors[v]), labels, adj)
    # individualise each vertex of the first smallest non-trivial cell, keep the minimum
    cells: dict[int, list[int]] = {}
    for v, c in enumerate(colors):
        cells.setdefault(c, []).append(v)
    target = min((c for c in cells if len(cells[c]) > 1), key=lambda c: (len(cells[c]), c))
    best = None
    for v in cells[target]:
        split = [2 * c + (1 if c >= target else 0) for c in colors]
        split[v] = 2 * target
        cand = _canonical(split, labels, adj)
        if best is None or cand < best:
            best = cand
    return best


def canonical_form(m: Molecule) -> str:
    """Atom-order independent serialisation of the labelled bond graph."""
    labels, adj = _hash_graph(m)
    if not labels:
        return "|"
    ranks = {s: r for r, s in enumerate(sorted(set(labels)))}
    return _canonical([ranks[s] for s in labels], labels, adj)


def canonical_hash(m: Molecule) -> str:
    return hashlib.sha256(canonical_form(m).encode()).hexdigest()
