"""Three-channel grid encoding of heavy-atom molecules, and patchify.

Layout of an ``(3, H, W)`` tensor with ``H = W = n_max``:

* channel 0, row i: centred (x, y, z) of atom i in columns 0..2
* channel 1, row i: one-hot element of atom i over the vocabulary
* channel 2, (i, j): bond order between atoms i and j

Rows (and for channel 2, columns) at or beyond ``n_atoms`` are zero.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .molgraph import Bond, Molecule

DEFAULT_VOCAB = ("C", "N", "O", "F")
N_CHANNELS = 3


class CapacityError(ValueError):
    pass


class VocabularyError(ValueError):
    pass


class ShapeError(ValueError):
    pass


@dataclass
class ChannelTensor:
    data: np.ndarray  # (3, H, W)
    mask: np.ndarray  # (H,) bool, True for real atom rows

    @property
    def n_atoms(self) -> int:
        return int(self.mask.sum())

    @property
    def grid_side(self) -> int:
        return self.data.shape[-1]


@dataclass
class TokenSequence:
    tokens: np.ndarray  # (T, C*P*P)
    grid: tuple[int, int]
    patch_size: int
    mask: np.ndarray | None = None


def check_grid(n_max: int, vocab: Sequence[str]) -> None:
    if n_max < max(len(vocab), 3):
        raise CapacityError(f"grid side {n_max} cannot hold 3 coordinates and {len(vocab)} element columns")


def prefix_mask(n_atoms: int, n_max: int) -> np.ndarray:
    mask = np.zeros(n_max, dtype=bool)
    mask[:n_atoms] = True
    return mask


def entry_mask(n_atoms, n_max: int, n_vocab: int):
    """Boolean ``(..., 3, H, W)`` mask of entries that carry data.

    ``n_atoms`` may be an int or an integer array (batched). Channel 0 keeps
    columns 0..2 of real rows, channel 1 columns 0..n_vocab-1, channel 2 the
    off-diagonal block of real atoms.
    """
    n = np.asarray(n_atoms)
    idx = np.arange(n_max)
    rows = idx < n[..., None]  # (..., H)
    m0 = rows[..., :, None] & (idx < 3)[None, :]
    m1 = rows[..., :, None] & (idx < n_vocab)[None, :]
    m2 = rows[..., :, None] & rows[..., None, :] & ~np.eye(n_max, dtype=bool)
    return np.stack(np.broadcast_arrays(m0, m1, m2), axis=-3)


def encode_molecule(m: Molecule, n_max: int = 9, vocab: Sequence[str] = DEFAULT_VOCAB) -> ChannelTensor:
    check_grid(n_max, vocab)
    n = len(m)
    if n > n_max:
        raise CapacityError(f"{n} atoms exceed grid capacity {n_max}")
    index = {s: k for k, s in enumerate(vocab)}
    data = np.zeros((N_CHANNELS, n_max, n_max))
    if n:
        pos = m.positions - m.positions.mean(axis=0)
        data[0, :n, :3] = pos
    for i, s in enumerate(m.symbols):
        if s not in index:
            raise VocabularyError(f"element {s!r} not in vocabulary {tuple(vocab)}")
        data[1, i, index[s]] = 1.0
    for b in m.bonds:
        data[2, b.i, b.j] = data[2, b.j, b.i] = b.order
    return ChannelTensor(data, prefix_mask(n, n_max))


def decode_tensor(
    t: ChannelTensor | np.ndarray,
    vocab: Sequence[str] = DEFAULT_VOCAB,
    mask: np.ndarray | None = None,
    presence_threshold: float = 0.5,
) -> Molecule:
    """Read a (possibly noisy) tensor back into a :class:`Molecule`. Never fails.

    Without a mask, a row counts as an atom when its largest element-channel
    entry exceeds ``presence_threshold``.
    """
    if isinstance(t, ChannelTensor):
        data, mask = t.data, t.mask if mask is None else mask
    else:
        data = np.asarray(t)
    data = np.asarray(data, dtype=np.float64)
    nv = len(vocab)
    if mask is None:
        mask = data[1, :, :nv].max(axis=1) > presence_threshold
    rows = np.flatnonzero(mask)
    # argmax returns the first maximum, i.e. the lowest vocabulary index on ties
    symbols = tuple(vocab[k] for k in data[1, rows, :nv].argmax(axis=1))
    positions = data[0, rows, :3]
    sym = (data[2] + data[2].T) / 2
    bonds = []
    for a, i in enumerate(rows):
        for b in range(a + 1, len(rows)):
            order = int(np.clip(np.floor(sym[i, rows[b]] + 0.5), 0, 3))
            if order:
                bonds.append(Bond(a, b, order))
    return Molecule(symbols, positions, tuple(bonds))


def _permute(x, axes):
    return x.permute(*axes) if hasattr(x, "permute") else x.transpose(axes)


def patchify_array(x, p: int):
    """``(..., C, H, W)`` -> ``(..., T, C*p*p)``; works on numpy and torch.

    Tokens run row-major over the patch grid; each token is its patch's
    values channel-major, then row-major inside the patch.
    """
    *lead, c, h, w = x.shape
    if p < 1 or h % p or w % p:
        raise ShapeError(f"patch size {p} does not divide grid {h}x{w}")
    gh, gw = h // p, w // p
    nl = len(lead)
    x = x.reshape(*lead, c, gh, p, gw, p)
    axes = tuple(range(nl)) + tuple(nl + k for k in (1, 3, 0, 2, 4))
    return _permute(x, axes).reshape(*lead, gh * gw, c * p * p)


def unpatchify_array(tokens, p: int, grid: tuple[int, int], channels: int = N_CHANNELS):
    *lead, t, d = tokens.shape
    gh, gw = grid
    if t != gh * gw or d != channels * p * p:
        raise ShapeError(f"{t} tokens of dim {d} do not match grid {grid} with patch {p} and {channels} channels")
    nl = len(lead)
    x = tokens.reshape(*lead, gh, gw, channels, p, p)
    axes = tuple(range(nl)) + tuple(nl + k for k in (2, 0, 3, 1, 4))
    return _permute(x, axes).reshape(*lead, channels, gh * p, gw * p)


def patchify(t: ChannelTensor, p: int) -> TokenSequence:
    tokens = patchify_array(t.data, p)
    h, w = t.data.shape[-2:]
    return TokenSequence(tokens, (h // p, w // p), p, t.mask.copy())


def unpatchify(s: TokenSequence, p: int | None = None) -> ChannelTensor:
    p = s.patch_size if p is None else p
    if p != s.patch_size:
        raise ShapeError(f"patch size {p} differs from sequence patch size {s.patch_size}")
    data = unpatchify_array(np.asarray(s.tokens), p, s.grid)
    mask = s.mask if s.mask is not None else np.ones(data.shape[-2], dtype=bool)
    return ChannelTensor(data, np.asarray(mask, dtype=bool).copy())


# ---------------------------------------------------------------------------
# on-disk tensor cache
#
#   line 1   "D3MES-TENSORS 1"
#   line 2   one-line JSON header: shape [N, 3, H, W], n_atoms (prefix masks),
#            plus free-form metadata (vocab, labels, size histogram, ...)
#   body     N*3*H*W little-endian float32 values, C order
# ---------------------------------------------------------------------------

CACHE_MAGIC = "D3MES-TENSORS 1"


def write_tensor_cache(path: str | Path, tensors: Sequence[ChannelTensor], **meta) -> None:
    if tensors:
        data = np.stack([t.data for t in tensors]).astype("<f4")
    else:
        data = np.zeros((0, N_CHANNELS, 0, 0), dtype="<f4")
    header = dict(meta)
    header["shape"] = list(data.shape)
    header["n_atoms"] = [t.n_atoms for t in tensors]
    with open(path, "wb") as fh:
        fh.write((CACHE_MAGIC + "\n").encode())
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode())
        fh.write(data.tobytes(order="C"))


def read_tensor_cache(path: str | Path) -> tuple[np.ndarray, np.ndarray, dict]:
    """Returns ``(data (N,3,H,W) float32, n_atoms (N,), header)``."""
    with open(path, "rb") as fh:
        magic = fh.readline().decode().strip()
        if magic != CACHE_MAGIC:
            raise ValueError(f"{path}: not a tensor cache (magic {magic!r})")
        header = json.loads(fh.readline().decode())
        body = fh.read()
    shape = tuple(header["shape"])
    expected = int(np.prod(shape)) * 4
    if len(body) != expected:
        raise ValueError(f"{path}: body has {len(body)} bytes, header implies {expected}")
    data = np.frombuffer(body, dtype="<f4").reshape(shape).astype(np.float32)
    return data, np.asarray(header["n_atoms"], dtype=np.int64), header
