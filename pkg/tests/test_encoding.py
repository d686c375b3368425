import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from d3mes.encoding import (
    CapacityError,
    ChannelTensor,
    ShapeError,
    TokenSequence,
    VocabularyError,
    decode_tensor,
    encode_molecule,
    entry_mask,
    patchify,
    patchify_array,
    read_tensor_cache,
    unpatchify,
    unpatchify_array,
    write_tensor_cache,
)
from d3mes.molgraph import Bond, Molecule, canonical_hash

from helpers import chain


def test_encode_layout():
    m = Molecule(("C", "O", "N"), [[0, 0, 0], [1.2, 0, 0], [0, 1.5, 0]], (Bond(0, 1, 2), Bond(0, 2)))
    t = encode_molecule(m)
    assert t.data.shape == (3, 9, 9)
    assert t.n_atoms == 3
    np.testing.assert_allclose(t.data[0, :3, :3].mean(axis=0), 0, atol=1e-15)
    np.testing.assert_array_equal(t.data[1, :3, :4], [[1, 0, 0, 0], [0, 0, 1, 0], [0, 1, 0, 0]])
    assert t.data[2, 0, 1] == t.data[2, 1, 0] == 2
    assert t.data[2, 0, 2] == 1 and t.data[2, 1, 2] == 0
    # everything outside the entry mask is zero
    assert not t.data[~entry_mask(3, 9, 4)].any()


def test_encode_errors():
    with pytest.raises(CapacityError):
        encode_molecule(chain("C" * 10))
    with pytest.raises(VocabularyError):
        encode_molecule(Molecule(("C", "H"), np.zeros((2, 3))))
    with pytest.raises(CapacityError):
        encode_molecule(chain("CC"), n_max=3, vocab=("C", "N", "O", "F"))


def test_bond_rounding_rule():
    # symmetric average of (1.4, 0.8) is 1.1, which rounds half-up to 1
    data = np.zeros((3, 9, 9))
    data[1, 0, 0] = data[1, 1, 0] = 1
    data[2, 0, 1], data[2, 1, 0] = 1.4, 0.8
    m = decode_tensor(data)
    assert m.bonds == (Bond(0, 1, 1),)

    for raw, want in [(0.49, 0), (0.5, 1), (2.5, 3), (7.0, 3), (-2.0, 0)]:
        data[2, 0, 1] = data[2, 1, 0] = raw
        assert [b.order for b in decode_tensor(data).bonds] == ([want] if want else [])


def test_decode_presence_threshold_and_ties():
    data = np.zeros((3, 9, 9))
    data[1, 0, 1] = 0.9  # N
    data[1, 1, :4] = 0.4  # below threshold: not an atom
    data[1, 2, :4] = 0.7  # tie: lowest index wins
    m = decode_tensor(data)
    assert m.symbols == ("N", "C")


def test_decode_never_fails_on_noise():
    rng = np.random.default_rng(0)
    for _ in range(50):
        m = decode_tensor(rng.normal(size=(3, 9, 9)) * 3)
        assert len(m) <= 9


def test_encode_decode_roundtrip_corpus(heavy_corpus):
    for m in heavy_corpus:
        back = decode_tensor(encode_molecule(m))
        assert canonical_hash(back) == canonical_hash(m)
        assert back.symbols == m.symbols and back.bonds == m.bonds
        np.testing.assert_allclose(back.positions, m.positions - m.positions.mean(axis=0), atol=1e-12)


def test_translation_invariance(heavy_corpus):
    m = heavy_corpus[40]
    shifted = m.replace(positions=m.positions + [5.0, -3.0, 100.0])
    np.testing.assert_allclose(encode_molecule(m).data, encode_molecule(shifted).data, atol=1e-12)


# -- patchify ----------------------------------------------------------------


def _loop_patchify(x, p):
    """Reference: explicit loops over patches."""
    c, h, w = x.shape
    out = []
    for gi in range(h // p):
        for gj in range(w // p):
            out.append(x[:, gi * p : (gi + 1) * p, gj * p : (gj + 1) * p].reshape(-1))
    return np.array(out)


def test_patchify_matches_loop_reference():
    x = np.random.default_rng(1).normal(size=(3, 9, 9))
    np.testing.assert_array_equal(patchify_array(x, 3), _loop_patchify(x, 3))
    assert patchify_array(x, 3).shape == (9, 27)
    np.testing.assert_array_equal(patchify_array(x, 1), _loop_patchify(x, 1))


def test_patchify_torch_matches_numpy():
    x = np.random.default_rng(2).normal(size=(4, 3, 9, 9))
    got = patchify_array(torch.from_numpy(x), 3).numpy()
    np.testing.assert_array_equal(got, patchify_array(x, 3))
    back = unpatchify_array(torch.from_numpy(got), 3, (3, 3)).numpy()
    np.testing.assert_array_equal(back, x)


def test_patchify_bijection_1000_random():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        x = rng.normal(size=(3, 9, 9))
        np.testing.assert_array_equal(unpatchify_array(patchify_array(x, 3), 3, (3, 3)), x)


@settings(max_examples=100, deadline=None)
@given(
    p=st.sampled_from([1, 2, 3]),
    gh=st.integers(1, 4),
    gw=st.integers(1, 4),
    data=st.data(),
)
def test_patchify_bijection_property(p, gh, gw, data):
    x = data.draw(arrays(np.float64, (3, gh * p, gw * p), elements=st.floats(-1e6, 1e6)))
    tokens = patchify_array(x, p)
    assert tokens.shape == (gh * gw, 3 * p * p)
    np.testing.assert_array_equal(unpatchify_array(tokens, p, (gh, gw)), x)


def test_patchify_shape_errors():
    x = np.zeros((3, 9, 9))
    with pytest.raises(ShapeError):
        patchify_array(x, 2)
    with pytest.raises(ShapeError):
        unpatchify_array(np.zeros((8, 27)), 3, (3, 3))
    seq = patchify(ChannelTensor(x, np.ones(9, dtype=bool)), 3)
    with pytest.raises(ShapeError):
        unpatchify(seq, 1)


def test_token_sequence_roundtrip_keeps_mask():
    t = encode_molecule(chain("CNO"))
    seq = patchify(t, 3)
    assert isinstance(seq, TokenSequence) and seq.grid == (3, 3)
    back = unpatchify(seq)
    np.testing.assert_array_equal(back.data, t.data)
    np.testing.assert_array_equal(back.mask, t.mask)


# -- cache -------------------------------------------------------------------


def test_tensor_cache_roundtrip(tmp_path, heavy_corpus):
    tensors = [encode_molecule(m) for m in heavy_corpus[:30]]
    path = tmp_path / "c.d3t"
    write_tensor_cache(path, tensors, vocab=["C", "N", "O", "F"], labels=[0] * 30)
    data, n_atoms, header = read_tensor_cache(path)
    assert data.shape == (30, 3, 9, 9) and data.dtype == np.float32
    np.testing.assert_array_equal(n_atoms, [t.n_atoms for t in tensors])
    np.testing.assert_array_equal(data, np.stack([t.data for t in tensors]).astype(np.float32))
    assert header["vocab"] == ["C", "N", "O", "F"]


def test_tensor_cache_rejects_corruption(tmp_path):
    path = tmp_path / "c.d3t"
    write_tensor_cache(path, [encode_molecule(chain("CC"))])
    raw = path.read_bytes()
    path.write_bytes(raw[:-4])
    with pytest.raises(ValueError, match="bytes"):
        read_tensor_cache(path)
    path.write_bytes(b"nope\n" + raw)
    with pytest.raises(ValueError, match="magic"):
        read_tensor_cache(path)
