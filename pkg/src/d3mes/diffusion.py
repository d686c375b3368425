"""DDPM schedule, forward noising, hybrid (MSE + variational) loss and ancestral sampling.

Step indices are 0-based throughout: index ``t`` holds ``beta_t`` and
``alpha_bar_t = prod_{s <= t} (1 - beta_s)``, so index 0 is the first noising
step and index ``T - 1`` the last. The variational term at index 0 is the
decoder likelihood ``-log p(x_0 | x_1)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
import torch

from .encoding import DEFAULT_VOCAB, decode_tensor, entry_mask
from .molgraph import Molecule, add_hydrogens, infer_bonds


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty vector")
        if np.any(b <= 0) or np.any(b >= 1):
            raise ValueError("betas must lie in (0, 1)")
        object.__setattr__(self, "betas", b)

    @property
    def T(self) -> int:
        return len(self.betas)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alphas_cumprod(self) -> np.ndarray:
        return np.cumprod(self.alphas)

    @property
    def alphas_cumprod_prev(self) -> np.ndarray:
        return np.append(1.0, self.alphas_cumprod[:-1])

    @property
    def posterior_variance(self) -> np.ndarray:
        return self.betas * (1.0 - self.alphas_cumprod_prev) / (1.0 - self.alphas_cumprod)

    @property
    def posterior_log_variance_clipped(self) -> np.ndarray:
        # posterior variance is 0 at index 0; borrow index 1 so the log stays finite
        pv = self.posterior_variance
        if len(pv) == 1:
            return np.log(self.betas)
        return np.log(np.append(pv[1], pv[1:]))

    @property
    def posterior_mean_coef1(self) -> np.ndarray:
        return self.betas * np.sqrt(self.alphas_cumprod_prev) / (1.0 - self.alphas_cumprod)

    @property
    def posterior_mean_coef2(self) -> np.ndarray:
        return (1.0 - self.alphas_cumprod_prev) * np.sqrt(self.alphas) / (1.0 - self.alphas_cumprod)

    def check_step(self, t: torch.Tensor) -> None:
        if torch.any(t < 0) or torch.any(t >= self.T):
            raise IndexError(f"diffusion step out of range [0, {self.T})")

    def take(self, name: str, t: torch.Tensor, like: torch.Tensor) -> torch.Tensor:
        """Gather schedule vector ``name`` at steps ``t`` (B,), broadcast to ``like``."""
        self.check_step(t)
        arr = torch.as_tensor(getattr(self, name), dtype=like.dtype, device=like.device)[t.long()]
        return arr.reshape(-1, *([1] * (like.dim() - 1)))


def make_schedule(kind: str = "linear", T: int = 1000, beta_start: float = 1e-4, beta_end: float = 2e-2) -> DiffusionSchedule:
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if not (0 < beta_start <= beta_end < 1):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    return DiffusionSchedule(np.linspace(beta_start, beta_end, T, dtype=np.float64))


def q_sample(x0: torch.Tensor, t: torch.Tensor, eps: torch.Tensor, schedule: DiffusionSchedule, mask: torch.Tensor | None = None):
    """Closed-form forward marginal: sqrt(abar_t) x0 + sqrt(1 - abar_t) eps."""
    t = torch.as_tensor(t).reshape(-1)
    ab = schedule.take("alphas_cumprod", t, x0)
    xt = ab.sqrt() * x0 + (1 - ab).sqrt() * eps
    return xt * mask if mask is not None else xt


def center_positions(x: torch.Tensor, n_atoms: torch.Tensor) -> torch.Tensor:
    """Subtract the real-atom mean from the coordinate entries (channel 0,
    columns 0..2) of a (B, 3, H, W) batch. Other entries are untouched."""
    H = x.shape[-2]
    rows = (torch.arange(H, device=x.device)[None, :] < n_atoms[:, None]).to(x.dtype)  # (B, H)
    pos = x[:, 0, :, :3]
    mean = (pos * rows[..., None]).sum(1, keepdim=True) / rows.sum(1).clamp_min(1)[:, None, None]
    out = x.clone()
    out[:, 0, :, :3] = (pos - mean) * rows[..., None] + pos * (1 - rows[..., None])
    return out


def q_posterior(x0, xt, t, schedule):
    mean = schedule.take("posterior_mean_coef1", t, xt) * x0 + schedule.take("posterior_mean_coef2", t, xt) * xt
    return mean, schedule.take("posterior_log_variance_clipped", t, xt)


def model_log_variance(var_logit: torch.Tensor, t: torch.Tensor, schedule: DiffusionSchedule) -> torch.Tensor:
    """Interpolate log-variance between beta_t (v=1) and the posterior
    variance (v=0), with v = sigmoid(var_logit)."""
    v = torch.sigmoid(var_logit)
    max_log = schedule.take("betas", t, var_logit).log()
    min_log = schedule.take("posterior_log_variance_clipped", t, var_logit)
    return v * max_log + (1 - v) * min_log


def mean_from_eps(xt, t, eps_hat, schedule):
    a = schedule.take("alphas", t, xt)
    ab = schedule.take("alphas_cumprod", t, xt)
    return (xt - (1 - a) / (1 - ab).sqrt() * eps_hat) / a.sqrt()


def normal_kl(mean1, logvar1, mean2, logvar2):
    """KL(N(mean1, e^logvar1) || N(mean2, e^logvar2)), elementwise."""
    d = logvar1 - logvar2
    return 0.5 * (torch.expm1(d) - d) + 0.5 * (mean1 - mean2) ** 2 * torch.exp(-logvar2)


def discretized_gaussian_nll(x, mean, log_var, bin_width: float):
    """-log P(x) for a Gaussian integrated over a bin of width ``bin_width``
    centred on x. Always >= 0."""
    std = torch.exp(0.5 * log_var)
    upper = (x + bin_width / 2 - mean) / std
    lower = (x - bin_width / 2 - mean) / std
    # use the tail on the side of the bin farther from the mean for accuracy
    flip = (lower + upper) > 0
    lo = torch.where(flip, -upper, lower)
    hi = torch.where(flip, -lower, upper)
    # log(Phi(hi) - Phi(lo)) in log space so far tails do not underflow
    log_hi = torch.special.log_ndtr(hi)
    log_lo = torch.special.log_ndtr(lo)
    return -(log_hi + torch.log1p(-torch.exp(log_lo - log_hi)))


def _masked_mean(values, mask):
    dims = tuple(range(1, values.dim()))
    return (values * mask).sum(dims) / mask.sum(dims).clamp_min(1)


def hybrid_loss(
    x0: torch.Tensor,
    xt: torch.Tensor,
    t: torch.Tensor,
    eps: torch.Tensor,
    eps_hat: torch.Tensor,
    var_logit: torch.Tensor,
    mask: torch.Tensor,
    schedule: DiffusionSchedule,
    kl_weight: float = 1.0,
    bin_width: float = 0.02,
):
    """Noise MSE plus ``kl_weight`` times the variational bound term.

    Both are per-molecule means over masked-in entries, averaged over the
    batch. The variational term sees ``eps_hat`` through a stop-gradient, so
    it only trains the variance head.

    Returns ``(loss, {"mse": ..., "vb": ...})`` with per-sample components.
    """
    t = torch.as_tensor(t).reshape(-1)
    mse = _masked_mean((eps_hat - eps) ** 2, mask)

    true_mean, true_logvar = q_posterior(x0, xt, t, schedule)
    model_mean = mean_from_eps(xt, t, eps_hat.detach(), schedule)
    model_logvar = model_log_variance(var_logit, t, schedule)
    kl = _masked_mean(normal_kl(true_mean, true_logvar, model_mean, model_logvar), mask)
    nll = _masked_mean(discretized_gaussian_nll(x0, model_mean, model_logvar, bin_width), mask)
    vb = torch.where(t == 0, nll, kl)

    loss = (mse + kl_weight * vb).mean()
    return loss, {"mse": mse, "vb": vb}


ModelFn = Callable[[torch.Tensor, torch.Tensor, torch.Tensor | None, torch.Tensor], tuple[torch.Tensor, torch.Tensor]]


def p_sample_step(model: ModelFn, xt, t: int, schedule: DiffusionSchedule, n_atoms, label=None, generators: Sequence[torch.Generator] | None = None, mask=None):
    """One ancestral step x_t -> x_{t-1}. No noise is added at index 0.

    ``generators`` holds one RNG per chain so each chain's stream is independent
    of batching.
    """
    B = xt.shape[0]
    if not 0 <= t < schedule.T:
        raise IndexError(f"diffusion step {t} out of range [0, {schedule.T})")
    tt = torch.full((B,), t, dtype=torch.long)
    eps_hat, var_logit = model(xt, tt, label, n_atoms)
    mean = mean_from_eps(xt, tt, eps_hat, schedule)
    if t == 0:
        out = mean
    else:
        log_var = model_log_variance(var_logit, tt, schedule)
        noise = _randn_like(xt, generators)
        out = mean + torch.exp(0.5 * log_var) * noise
    return out * mask if mask is not None else out


def _randn_like(x, generators):
    if generators is None:
        return torch.randn_like(x)
    return torch.stack([torch.randn(x.shape[1:], generator=g, dtype=x.dtype) for g in generators])


class SizeSampler:
    """Draws atom counts from an empirical histogram ``{n_atoms: count}``."""

    def __init__(self, histogram: dict[int, int]):
        items = sorted((int(k), int(v)) for k, v in histogram.items() if int(v) > 0)
        if not items:
            raise ValueError("empty size histogram")
        self.sizes = np.array([k for k, _ in items])
        counts = np.array([v for _, v in items], dtype=np.float64)
        self.probs = counts / counts.sum()

    def __call__(self, rng: np.random.Generator, n: int) -> np.ndarray:
        return rng.choice(self.sizes, size=n, p=self.probs)


@torch.no_grad()
def sample_tensors(
    model: ModelFn,
    schedule: DiffusionSchedule,
    n_atoms: np.ndarray,
    grid: int,
    n_vocab: int,
    label=None,
    seeds: Sequence[int] | None = None,
    dtype=torch.float32,
    center: bool = True,
):
    """Run full reverse chains; returns (B, 3, H, W) clean-space tensors.

    With ``center`` the coordinate entries are kept at zero mean after every
    step, matching models trained on centred noise.
    """
    B = len(n_atoms)
    seeds = list(range(B)) if seeds is None else list(seeds)
    gens = [torch.Generator().manual_seed(int(s)) for s in seeds]
    mask = torch.from_numpy(entry_mask(np.asarray(n_atoms), grid, n_vocab)).to(dtype)
    n_at = torch.as_tensor(np.asarray(n_atoms), dtype=torch.long)
    y = None if label is None else torch.full((B,), int(label), dtype=torch.long)
    x = _randn_like(torch.zeros((B, 3, grid, grid), dtype=dtype), gens) * mask
    if center:
        x = center_positions(x, n_at)
    for t in reversed(range(schedule.T)):
        x = p_sample_step(model, x, t, schedule, n_at, y, gens, mask)
        if center:
            x = center_positions(x, n_at)
    return x


def generate(
    n: int,
    model: ModelFn,
    schedule: DiffusionSchedule,
    size_sampler: SizeSampler,
    grid: int = 9,
    vocab: Sequence[str] = DEFAULT_VOCAB,
    label: int | None = None,
    seed: int = 0,
    bond_mode: str = "geometry",
    batch_size: int = 256,
    center: bool = True,
) -> list[Molecule]:
    """Sample ``n`` molecules: size draw -> reverse chain -> decode -> bonds -> hydrogens."""
    if n <= 0:
        return []
    rng = np.random.default_rng(seed)
    sizes = size_sampler(rng, n)
    chain_seeds = rng.integers(0, 2**62, size=n)
    mols: list[Molecule] = []
    for start in range(0, n, batch_size):
        sl = slice(start, start + batch_size)
        x = sample_tensors(model, schedule, sizes[sl], grid, len(vocab), label, chain_seeds[sl], center=center)
        arr = x.double().numpy()
        for k, n_at in enumerate(sizes[sl]):
            m = decode_tensor(arr[k], vocab, mask=np.arange(grid) < n_at)
            m = infer_bonds(m, bond_mode)
            m = add_hydrogens(m).replace(class_label=label)
            mols.append(m)
    return mols
