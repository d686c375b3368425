"""SE(3)-equivariant multihead self-attention over atoms (degrees 0 and 1).

Features are "fibers": ``dict[int, Tensor]`` mapping degree ``l`` to a tensor
of shape ``(..., channels, 2l+1)``. Degree-1 components use the Cartesian
order (x, y, z), so a rotation ``R`` acts on them as ``v -> R v``.

Pairwise maps are tensor-field-network kernels

    W^{lk}(x) = sum_{J=|l-k|}^{l+k} phi_J(|x|) sum_m Y_Jm(x/|x|) Q_Jm^{lk}

with learned radial profiles ``phi_J`` and a fixed real Clebsch-Gordan table ``Q``.
"""
from __future__ import annotations

import math
from typing import Mapping

import numpy as np
import torch
import torch.nn as nn

MAX_DEGREE = 1
MAX_J = 2


class DegenerateGeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# spherical harmonics
# ---------------------------------------------------------------------------

_C0 = 0.5 / math.sqrt(math.pi)
_C1 = math.sqrt(3.0 / (4.0 * math.pi))
_C2 = 0.5 * math.sqrt(15.0 / math.pi)
_C20 = 0.25 * math.sqrt(5.0 / math.pi)
_C22 = 0.25 * math.sqrt(15.0 / math.pi)


def real_sph_harm(J: int, u: torch.Tensor) -> torch.Tensor:
    """Orthonormal real spherical harmonics of degree ``J`` at unit vectors
    ``u`` (..., 3). Returns (..., 2J+1) ordered m = -J..J."""
    x, y, z = u[..., 0], u[..., 1], u[..., 2]
    if J == 0:
        return torch.full_like(x, _C0)[..., None]
    if J == 1:
        return _C1 * torch.stack([y, z, x], dim=-1)
    if J == 2:
        return torch.stack(
            [
                _C2 * x * y,
                _C2 * y * z,
                _C20 * (3 * z * z - 1),
                _C2 * x * z,
                _C22 * (x * x - y * y),
            ],
            dim=-1,
        )
    raise ValueError(f"degree {J} > {MAX_J} not supported")


def spherical_harmonic(J: int, m: int, u) -> float:
    """Scalar ``Y_Jm(u)`` for a unit 3-vector (checked to 1e-9)."""
    if not 0 <= J <= MAX_J or abs(m) > J:
        raise ValueError(f"invalid harmonic index J={J}, m={m}")
    u = np.asarray(u, dtype=np.float64)
    norm = np.linalg.norm(u)
    if abs(norm - 1.0) > 1e-9:
        raise ValueError(f"direction must be a unit vector, |u| = {norm}")
    return float(real_sph_harm(J, torch.from_numpy(u))[m + J])


# ---------------------------------------------------------------------------
# Clebsch-Gordan coupling table (Cartesian basis for degree 1)
# ---------------------------------------------------------------------------


def _build_cg() -> dict[tuple[int, int, int], np.ndarray]:
    """``Q[(l, k, J)]`` of shape (2J+1, 2l+1, 2k+1)."""
    e = np.eye(3)
    # Y_1m is proportional to (y, z, x)
    cart = [1, 2, 0]
    s2 = 1 / math.sqrt(2)

    def gen(a):
        # cross-product matrix: gen(a) @ v == e_a x v
        return np.cross(e[a], e).T

    def sym(a, b):
        return (np.outer(e[a], e[b]) + np.outer(e[b], e[a])) * s2

    q = {
        (0, 0, 0): np.ones((1, 1, 1)),
        (1, 0, 1): np.stack([e[c][:, None] for c in cart]),
        (0, 1, 1): np.stack([e[c][None, :] for c in cart]),
        (1, 1, 0): (np.eye(3) / math.sqrt(3))[None],
        (1, 1, 1): np.stack([gen(c) * s2 for c in cart]),
        (1, 1, 2): np.stack(
            [
                sym(0, 1),
                sym(1, 2),
                np.diag([-1.0, -1.0, 2.0]) / math.sqrt(6),
                sym(0, 2),
                np.diag([1.0, -1.0, 0.0]) * s2,
            ]
        ),
    }
    return q


def check_cg_orthogonality(table: Mapping[tuple[int, int, int], np.ndarray], atol: float = 1e-12) -> None:
    """For each (l, k) the Q_Jm^{lk}, J = |l-k|..l+k, must form an orthonormal
    basis of the (2l+1)x(2k+1) matrices (both CG orthogonality relations)."""
    for l in range(MAX_DEGREE + 1):
        for k in range(MAX_DEGREE + 1):
            rows = [table[(l, k, J)].reshape(2 * J + 1, -1) for J in range(abs(l - k), l + k + 1)]
            m = np.concatenate(rows)
            if m.shape[0] != m.shape[1]:
                raise AssertionError(f"CG block ({l},{k}) is not square: {m.shape}")
            if not (np.allclose(m @ m.T, np.eye(len(m)), atol=atol) and np.allclose(m.T @ m, np.eye(len(m)), atol=atol)):
                raise AssertionError(f"CG block ({l},{k}) is not orthonormal")


CG_TABLE = _build_cg()
check_cg_orthogonality(CG_TABLE)


def kernel_basis(l: int, k: int, u: torch.Tensor) -> torch.Tensor:
    """``sum_m Y_Jm(u) Q_Jm^{lk}`` for every allowed J: (..., nJ, 2l+1, 2k+1)."""
    out = []
    for J in range(abs(l - k), l + k + 1):
        q = torch.as_tensor(CG_TABLE[(l, k, J)], dtype=u.dtype, device=u.device)
        out.append(torch.einsum("...m,mab->...ab", real_sph_harm(J, u), q))
    return torch.stack(out, dim=-3)


def rotation_rep(l: int, R: torch.Tensor) -> torch.Tensor:
    if l == 0:
        return torch.ones((1, 1), dtype=R.dtype)
    if l == 1:
        return R
    raise ValueError(f"degree {l} not supported")


# ---------------------------------------------------------------------------
# radial profiles
# ---------------------------------------------------------------------------


class GaussianBasis(nn.Module):
    """Gaussian bumps with centres uniform on [0, r_cut], width = spacing,
    multiplied by a cosine envelope so activations vanish for r >= r_cut."""

    def __init__(self, n: int = 16, r_cut: float = 5.0):
        super().__init__()
        self.n = n
        self.r_cut = r_cut
        self.register_buffer("centres", torch.linspace(0.0, r_cut, n, dtype=torch.float64), persistent=False)
        self.width = r_cut / (n - 1)

    def forward(self, r: torch.Tensor) -> torch.Tensor:
        centres = self.centres.to(r.dtype)
        g = torch.exp(-0.5 * ((r[..., None] - centres) / self.width) ** 2)
        env = torch.where(r < self.r_cut, 0.5 * (torch.cos(math.pi * r / self.r_cut) + 1), torch.zeros_like(r))
        return g * env[..., None]


class RadialProfile(nn.Module):
    """phi_J(|x|) for all J of one (l, k) pair: radial basis (+ edge scalars)
    -> hidden -> (nJ, c_out, c_in)."""

    def __init__(self, n_j: int, c_in: int, c_out: int, n_basis: int = 16, n_edge: int = 0, hidden: int = 32):
        super().__init__()
        self.n_j, self.c_in, self.c_out = n_j, c_in, c_out
        self.net = nn.Sequential(
            nn.Linear(n_basis + n_edge, hidden),
            nn.SiLU(),
            nn.Linear(hidden, n_j * c_out * c_in),
        )
        # keep the initial kernel small; unit-variance messages summed over ~8 neighbours
        with torch.no_grad():
            self.net[2].weight.mul_(1.0 / math.sqrt(c_in * n_j))

    def forward(self, basis: torch.Tensor) -> torch.Tensor:
        return self.net(basis).unflatten(-1, (self.n_j, self.c_out, self.c_in))


def radial_profile(profile: RadialProfile, basis_fn: GaussianBasis, r, edge=None) -> torch.Tensor:
    """Evaluate a radial profile at distance(s) ``r``; returns (..., nJ, c_out, c_in)."""
    r = torch.as_tensor(r, dtype=next(profile.parameters()).dtype)
    if torch.any(r < 0):
        raise ValueError("distance must be non-negative")
    b = basis_fn(r)
    if edge is not None:
        b = torch.cat([b, torch.as_tensor(edge, dtype=b.dtype).expand(*b.shape[:-1], -1)], dim=-1)
    return profile(b)


# ---------------------------------------------------------------------------
# TFN kernels
# ---------------------------------------------------------------------------


class TFNKernel(nn.Module):
    """Rotation-equivariant pairwise linear map from degree-k to degree-l fibers."""

    def __init__(self, l: int, k: int, c_in: int, c_out: int, n_basis: int = 16, n_edge: int = 0, hidden: int = 32):
        super().__init__()
        self.l, self.k = l, k
        self.n_j = 2 * min(l, k) + 1
        self.radial = RadialProfile(self.n_j, c_in, c_out, n_basis, n_edge, hidden)

    def matrix(self, x: torch.Tensor, radial_in: torch.Tensor) -> torch.Tensor:
        """Dense kernel W(x) of shape (..., c_out*(2l+1), c_in*(2k+1)), with the
        (channel, component) axes flattened channel-major."""
        r = x.norm(dim=-1)
        if torch.any(r == 0):
            raise DegenerateGeometryError("kernel evaluated at zero displacement")
        basis = kernel_basis(self.l, self.k, x / r[..., None])
        phi = self.radial(radial_in)
        w = torch.einsum("...joc,...jab->...oacb", phi, basis)
        return w.reshape(*w.shape[:-4], w.shape[-4] * w.shape[-3], w.shape[-2] * w.shape[-1])

    def apply(self, unit: torch.Tensor, radial_in: torch.Tensor, f: torch.Tensor) -> torch.Tensor:
        """Apply W to neighbour features without forming the dense matrix.

        unit: (..., 3) directions, radial_in: (..., n_basis + n_edge),
        f: (..., c_in, 2k+1). Returns (..., c_out, 2l+1).
        """
        basis = kernel_basis(self.l, self.k, unit)  # (..., J, a, b)
        phi = self.radial(radial_in)  # (..., J, o, c)
        g = torch.einsum("...jab,...cb->...jca", basis, f)
        return torch.einsum("...joc,...jca->...oa", phi, g)


def tfn_kernel(kernel: TFNKernel, basis_fn: GaussianBasis, x, edge=None) -> torch.Tensor:
    """Dense W^{lk}(x) for a displacement ``x`` (3,) or batch (..., 3)."""
    x = torch.as_tensor(x, dtype=next(kernel.parameters()).dtype)
    r = x.norm(dim=-1)
    b = basis_fn(r)
    if edge is not None:
        b = torch.cat([b, torch.as_tensor(edge, dtype=b.dtype).expand(*b.shape[:-1], -1)], dim=-1)
    return kernel.matrix(x, b)


# ---------------------------------------------------------------------------
# attention
# ---------------------------------------------------------------------------


class SelfLinear(nn.Module):
    """Channel mixing within one degree (equivariant, bias-free)."""

    def __init__(self, c_in: int, c_out: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(c_out, c_in) / math.sqrt(max(c_in, 1)))

    def forward(self, f: torch.Tensor) -> torch.Tensor:
        return torch.einsum("oc,...ca->...oa", self.weight, f)


class EquivariantAttention(nn.Module):
    """Multihead TFN-style self-attention.

    ``fiber_in`` / ``fiber_out`` map degree -> channel count. Queries are
    self-interactions ``W_Q^{ll} f_i^l``; keys and values use TFN kernels of
    the displacement ``x_j - x_i``. Per head,

        alpha_ij = softmax_j(q_i . k_ij),
        out_i^l  = W_V^l f_i^l + sum_k sum_j alpha_ij W_V^{lk}(x_j - x_i) f_j^k,

    heads are concatenated on the channel axis and mixed per degree.
    """

    def __init__(
        self,
        fiber_in: Mapping[int, int],
        fiber_out: Mapping[int, int],
        heads: int = 4,
        key_channels: int = 16,
        value_channels: int = 16,
        n_basis: int = 16,
        n_edge: int = 0,
        r_cut: float = 5.0,
        hidden: int = 32,
    ):
        super().__init__()
        if key_channels % heads or value_channels % heads:
            raise ValueError("key/value channels must be divisible by heads")
        self.fiber_in = {l: c for l, c in fiber_in.items() if c > 0}
        self.fiber_out = {l: c for l, c in fiber_out.items() if c > 0}
        self.heads = heads
        self.key_channels = key_channels
        self.value_channels = value_channels
        self.n_edge = n_edge
        self.basis = GaussianBasis(n_basis, r_cut)
        # degrees carried by queries/keys: only those with a self term
        self.qk_degrees = sorted(self.fiber_in)
        self.v_degrees = sorted(self.fiber_out)
        kw = dict(n_basis=n_basis, n_edge=n_edge, hidden=hidden)
        self.w_q = nn.ModuleDict({str(l): SelfLinear(self.fiber_in[l], key_channels) for l in self.qk_degrees})
        self.w_k = nn.ModuleDict(
            {f"{l}{k}": TFNKernel(l, k, c, key_channels, **kw) for l in self.qk_degrees for k, c in self.fiber_in.items()}
        )
        self.w_v = nn.ModuleDict(
            {f"{l}{k}": TFNKernel(l, k, c, value_channels, **kw) for l in self.v_degrees for k, c in self.fiber_in.items()}
        )
        self.w_self = nn.ModuleDict({str(l): SelfLinear(self.fiber_in[l], value_channels) for l in self.v_degrees if l in self.fiber_in})
        self.w_out = nn.ModuleDict({str(l): SelfLinear(value_channels, self.fiber_out[l]) for l in self.v_degrees})

    def forward(
        self,
        f: Mapping[int, torch.Tensor],
        positions: torch.Tensor,
        node_mask: torch.Tensor | None = None,
        edge_feats: torch.Tensor | None = None,
        neighbors: torch.Tensor | None = None,
        return_attention: bool = False,
    ):
        """
        f: degree -> (B, N, c, 2l+1); positions: (B, N, 3); node_mask: (B, N);
        edge_feats: (B, N, N, n_edge); neighbors: optional (B, N, N) bool,
        default all real pairs j != i. Returns the output fiber (and alpha
        (B, heads, N, N) when ``return_attention``).
        """
        B, N, _ = positions.shape
        if node_mask is None:
            node_mask = torch.ones(B, N, dtype=torch.bool, device=positions.device)
        eye = torch.eye(N, dtype=torch.bool, device=positions.device)
        valid = node_mask[:, :, None] & node_mask[:, None, :] & ~eye
        if neighbors is not None:
            valid = valid & neighbors & ~eye

        rel = positions[:, None, :, :] - positions[:, :, None, :]  # x_j - x_i at [b, i, j]
        dist2 = (rel**2).sum(-1)
        if torch.any(valid & (dist2 == 0)):
            raise DegenerateGeometryError("coincident atom positions in a neighbourhood")
        safe = torch.where(valid[..., None], rel, torch.tensor([0.0, 0.0, 1.0], dtype=rel.dtype, device=rel.device))
        r = safe.norm(dim=-1)
        unit = safe / r[..., None]
        radial_in = self.basis(r)
        if self.n_edge:
            if edge_feats is None:
                edge_feats = torch.zeros(B, N, N, self.n_edge, dtype=rel.dtype, device=rel.device)
            radial_in = torch.cat([radial_in, edge_feats.to(rel.dtype)], dim=-1)

        f_j = {k: v[:, None, :, :, :].expand(B, N, N, *v.shape[2:]) for k, v in f.items() if k in self.fiber_in}

        H = self.heads
        logits = 0
        for l in self.qk_degrees:
            q = self.w_q[str(l)](f[l])  # (B, N, ck, 2l+1)
            key = sum(self.w_k[f"{l}{k}"].apply(unit, radial_in, f_j[k]) for k in self.fiber_in)  # (B,N,N,ck,2l+1)
            q = q.unflatten(2, (H, -1))
            key = key.unflatten(3, (H, -1))
            logits = logits + torch.einsum("bihca,bijhca->bhij", q, key)
        mask = valid[:, None, :, :]
        logits = logits.masked_fill(~mask, -1e30)
        alpha = torch.softmax(logits, dim=-1) * mask

        out = {}
        for l in self.v_degrees:
            val = sum(self.w_v[f"{l}{k}"].apply(unit, radial_in, f_j[k]) for k in self.fiber_in)  # (B,N,N,cv,2l+1)
            val = val.unflatten(3, (H, -1))
            agg = torch.einsum("bhij,bijhca->bihca", alpha, val).flatten(2, 3)
            if str(l) in self.w_self:
                agg = agg + self.w_self[str(l)](f[l])
            out[l] = self.w_out[str(l)](agg) * node_mask[:, :, None, None]
        if return_attention:
            return out, alpha
        return out


def equi_attention(module: EquivariantAttention, f, positions, node_mask=None, edge_feats=None, neighbors=None):
    """Functional wrapper returning ``(fiber_out, alpha)``."""
    return module(f, positions, node_mask, edge_feats, neighbors, return_attention=True)


class AttentionPreprocess(nn.Module):
    """Run equivariant attention on an encoded batch and write the degree-1
    outputs into the coordinate channel.

    Node features are the element channel rows, edge scalars the symmetrised
    bond channel, positions the coordinate channel. The ``vectors`` output
    vectors of atom i fill row i of channel 0, three columns each. With
    ``residual=True`` the first vector is added to the coordinates instead of
    replacing them.
    """

    def __init__(self, n_vocab: int, heads: int = 4, channels: int = 16, vectors: int = 1, residual: bool = False, r_cut: float = 5.0):
        super().__init__()
        if vectors < 1:
            raise ValueError("need at least one output vector")
        self.n_vocab = n_vocab
        self.residual = residual
        self.vectors = vectors
        self.attn = EquivariantAttention(
            {0: n_vocab},
            {1: vectors},
            heads=heads,
            key_channels=channels,
            value_channels=channels,
            n_edge=1,
            r_cut=r_cut,
        )

    def forward(self, x: torch.Tensor, n_atoms: torch.Tensor, return_attention: bool = False):
        """x: (B, 3, H, W); n_atoms: (B,). Returns a new (B, 3, H, W)."""
        B, _, N, W = x.shape
        if 3 * self.vectors > W:
            raise ValueError(f"{self.vectors} vectors do not fit in {W} columns")
        node_mask = torch.arange(N, device=x.device)[None, :] < n_atoms[:, None]
        pos = x[:, 0, :, :3]
        feats = {0: x[:, 1, :, : self.n_vocab, None]}
        bonds = 0.5 * (x[:, 2] + x[:, 2].transpose(1, 2))
        out, alpha = self.attn(feats, pos, node_mask, bonds[..., None], return_attention=True)
        vec = out[1].flatten(2)  # (B, N, 3 * vectors)
        if self.residual:
            vec = torch.cat([pos + vec[..., :3], vec[..., 3:]], dim=-1)
        rows = node_mask[:, :, None]
        new0 = torch.cat([vec, torch.zeros_like(x[:, 0, :, vec.shape[-1] :])], dim=-1)
        new0 = torch.where(rows, new0, x[:, 0])
        y = torch.cat([new0[:, None], x[:, 1:]], dim=1)
        if return_attention:
            return y, alpha
        return y


def attention_preprocess(module: AttentionPreprocess, t, n_atoms=None) -> torch.Tensor:
    """Single-tensor convenience: ``t`` is a ChannelTensor or (3, H, W) array."""
    data = getattr(t, "data", t)
    if n_atoms is None:
        n_atoms = int(t.mask.sum())
    dtype = next(module.parameters()).dtype
    x = torch.as_tensor(np.asarray(data), dtype=dtype)[None]
    return module(x, torch.tensor([n_atoms]))[0]
