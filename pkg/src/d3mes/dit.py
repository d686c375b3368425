"""Diffusion transformer backbone with an equivariant-attention front end.

Pipeline of :class:`D3MES`:

    x_t (B, 3, H, W)
      -> AttentionPreprocess          (channel 0 := equivariant attention output)
      -> patchify, linear embed, + sinusoidal position code
      -> depth x adaLN-Zero blocks conditioned on (timestep, class)
      -> final norm + linear decode to p*p*2c per token
      -> unpatchify -> (eps_hat, var_logit), entries outside the data mask zeroed
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn as nn

from .encoding import N_CHANNELS, entry_mask, patchify_array, unpatchify_array
from .equiattn import AttentionPreprocess


@dataclass
class DiTConfig:
    hidden: int = 128
    depth: int = 6
    heads: int = 4
    patch: int = 3
    grid: int = 9
    channels: int = N_CHANNELS
    num_classes: int = 0  # real classes; id == num_classes is the null class
    time_dim: int = 256
    mlp_ratio: float = 4.0
    n_vocab: int = 4
    use_attention: bool = True
    residual_attention: bool = False
    attn_heads: int = 4
    attn_channels: int = 16
    attn_vectors: int = 1

    def __post_init__(self):
        if self.hidden % self.heads:
            raise ValueError(f"hidden {self.hidden} not divisible by heads {self.heads}")
        if self.patch < 1 or self.grid % self.patch:
            raise ValueError(f"patch {self.patch} does not divide grid {self.grid}")
        if self.hidden % 2 or self.time_dim % 2:
            raise ValueError("hidden and time_dim must be even for sinusoidal codes")
        if self.grid < max(self.n_vocab, 3):
            raise ValueError(f"grid {self.grid} too small for {self.n_vocab} element columns")

    @property
    def n_tokens(self) -> int:
        return (self.grid // self.patch) ** 2

    @property
    def null_class(self) -> int:
        return self.num_classes

    def to_dict(self) -> dict:
        return asdict(self)


def sinusoidal_encoding(k, d: int, base: float = 10000.0):
    """Interleaved code: component 2i = sin(k / base^(2i/d)), 2i+1 = cos(...).

    ``k`` may be a scalar (returns a numpy vector) or a tensor of positions
    (returns a tensor with a trailing axis of size d).
    """
    if d % 2:
        raise ValueError(f"sinusoidal encoding needs an even dimension, got {d}")
    if isinstance(k, torch.Tensor):
        dtype = k.dtype if k.is_floating_point() else torch.get_default_dtype()
        freq = base ** (-torch.arange(0, d, 2, dtype=torch.float64) / d)
        ang = k.to(torch.float64)[..., None] * freq
        out = torch.stack([torch.sin(ang), torch.cos(ang)], dim=-1).flatten(-2)
        return out.to(dtype)
    if k < 0:
        raise ValueError("position index must be non-negative")
    freq = base ** (-np.arange(0, d, 2) / d)
    out = np.empty(d)
    out[0::2] = np.sin(k * freq)
    out[1::2] = np.cos(k * freq)
    return out


def scaled_dot_attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes."""
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    return torch.softmax(scores, dim=-1) @ v


def modulate(x, shift, scale):
    return x * (1 + scale.unsqueeze(1)) + shift.unsqueeze(1)


class Attention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.heads = heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        B, T, C = x.shape
        q, k, v = self.qkv(x).reshape(B, T, 3, self.heads, C // self.heads).permute(2, 0, 3, 1, 4)
        out = scaled_dot_attention(q, k, v)
        return self.proj(out.transpose(1, 2).reshape(B, T, C))


class Mlp(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.fc1 = nn.Linear(dim, hidden)
        self.act = nn.GELU(approximate="tanh")
        self.fc2 = nn.Linear(hidden, dim)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(x)))


class DiTBlock(nn.Module):
    """Pre-norm transformer block with adaLN-Zero conditioning."""

    def __init__(self, hidden: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.attn = Attention(hidden, heads)
        self.norm2 = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.mlp = Mlp(hidden, int(hidden * mlp_ratio))
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 6 * hidden))
        nn.init.zeros_(self.adaLN_modulation[-1].weight)
        nn.init.zeros_(self.adaLN_modulation[-1].bias)

    def forward(self, x, c):
        shift_msa, scale_msa, gate_msa, shift_mlp, scale_mlp, gate_mlp = self.adaLN_modulation(c).chunk(6, dim=1)
        x = x + gate_msa.unsqueeze(1) * self.attn(modulate(self.norm1(x), shift_msa, scale_msa))
        x = x + gate_mlp.unsqueeze(1) * self.mlp(modulate(self.norm2(x), shift_mlp, scale_mlp))
        return x


def adaln_zero_block(block: DiTBlock, tokens: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
    return block(tokens, cond)


class FinalLayer(nn.Module):
    def __init__(self, hidden: int, out_dim: int):
        super().__init__()
        self.norm = nn.LayerNorm(hidden, elementwise_affine=False, eps=1e-6)
        self.adaLN_modulation = nn.Sequential(nn.SiLU(), nn.Linear(hidden, 2 * hidden))
        self.linear = nn.Linear(hidden, out_dim)
        for layer in (self.adaLN_modulation[-1], self.linear):
            nn.init.zeros_(layer.weight)
            nn.init.zeros_(layer.bias)

    def forward(self, x, c):
        shift, scale = self.adaLN_modulation(c).chunk(2, dim=1)
        return self.linear(modulate(self.norm(x), shift, scale))


class TimestepEmbedder(nn.Module):
    def __init__(self, hidden: int, freq_dim: int = 256):
        super().__init__()
        self.freq_dim = freq_dim
        self.mlp = nn.Sequential(nn.Linear(freq_dim, hidden), nn.SiLU(), nn.Linear(hidden, hidden))

    def forward(self, t):
        dtype = self.mlp[0].weight.dtype
        return self.mlp(sinusoidal_encoding(t.to(dtype), self.freq_dim))


class D3MES(nn.Module):
    """Equivariant-attention preprocessing followed by a class-conditional DiT."""

    def __init__(self, config: DiTConfig):
        super().__init__()
        self.config = cfg = config
        self.preprocess = (
            AttentionPreprocess(
                cfg.n_vocab,
                heads=cfg.attn_heads,
                channels=cfg.attn_channels,
                vectors=cfg.attn_vectors,
                residual=cfg.residual_attention,
            )
            if cfg.use_attention
            else None
        )
        patch_dim = cfg.channels * cfg.patch**2
        self.x_embedder = nn.Linear(patch_dim, cfg.hidden)
        self.t_embedder = TimestepEmbedder(cfg.hidden, cfg.time_dim)
        self.y_embedder = nn.Embedding(cfg.num_classes + 1, cfg.hidden)
        self.register_buffer(
            "pos_embed",
            torch.from_numpy(np.stack([sinusoidal_encoding(k, cfg.hidden) for k in range(cfg.n_tokens)])).float(),
            persistent=False,
        )
        self.blocks = nn.ModuleList([DiTBlock(cfg.hidden, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.depth)])
        self.final_layer = FinalLayer(cfg.hidden, 2 * patch_dim)
        self._init_weights()

    def _init_weights(self):
        for m in self.modules():
            if isinstance(m, nn.Linear) and m not in self._custom_init_layers():
                nn.init.xavier_uniform_(m.weight)
                nn.init.zeros_(m.bias)
        nn.init.normal_(self.y_embedder.weight, std=0.02)
        for layer in self.t_embedder.mlp[0], self.t_embedder.mlp[2]:
            nn.init.normal_(layer.weight, std=0.02)

    def _custom_init_layers(self):
        out = [self.final_layer.linear, self.final_layer.adaLN_modulation[-1]]
        out += [b.adaLN_modulation[-1] for b in self.blocks]
        if self.preprocess is not None:
            out += [m for m in self.preprocess.modules() if isinstance(m, nn.Linear)]
        return out

    def condition(self, t: torch.Tensor, y: torch.Tensor | None) -> torch.Tensor:
        if y is None:
            y = torch.full_like(t, self.config.null_class)
        return self.t_embedder(t) + self.y_embedder(y.long())

    def embed(self, x: torch.Tensor, n_atoms: torch.Tensor) -> torch.Tensor:
        if self.preprocess is not None:
            x = self.preprocess(x, n_atoms)
        return self.x_embedder(patchify_array(x, self.config.patch)) + self.pos_embed.to(x.dtype)

    def data_mask(self, n_atoms: torch.Tensor, dtype) -> torch.Tensor:
        m = entry_mask(n_atoms.detach().cpu().numpy(), self.config.grid, self.config.n_vocab)
        return torch.from_numpy(m).to(dtype)

    def forward(self, x, t, y=None, n_atoms=None):
        """Returns ``(eps_hat, var_logit)``, each (B, 3, H, W)."""
        cfg = self.config
        if x.shape[1:] != (cfg.channels, cfg.grid, cfg.grid):
            raise ValueError(f"expected (B, {cfg.channels}, {cfg.grid}, {cfg.grid}), got {tuple(x.shape)}")
        if n_atoms is None:
            n_atoms = torch.full((x.shape[0],), cfg.grid, dtype=torch.long)
        c = self.condition(t, y)
        h = self.embed(x, n_atoms)
        for block in self.blocks:
            h = block(h, c)
        h = self.final_layer(h, c)
        out = unpatchify_array(h, cfg.patch, (cfg.grid // cfg.patch,) * 2, 2 * cfg.channels)
        mask = self.data_mask(n_atoms, out.dtype)
        eps, var = out[:, : cfg.channels] * mask, out[:, cfg.channels :] * mask
        return eps, var


def dit_forward(model: D3MES, x, step, label=None, n_atoms=None):
    """Single or batched evaluation. ``x`` (3, H, W) or (B, 3, H, W)."""
    single = x.dim() == 3
    if single:
        x = x[None]
    B = x.shape[0]
    step = torch.as_tensor(step).reshape(-1).expand(B)
    if label is not None:
        label = torch.as_tensor(label).reshape(-1).expand(B)
    if n_atoms is not None:
        n_atoms = torch.as_tensor(n_atoms).reshape(-1).expand(B)
    eps, var = model(x, step, label, n_atoms)
    return (eps[0], var[0]) if single else (eps, var)
