"""Minibatch training of :class:`~d3mes.dit.D3MES` on an encoded dataset."""
from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .config import RunConfig
from .diffusion import center_positions, hybrid_loss, make_schedule, q_sample
from .dit import D3MES
from .encoding import entry_mask

logger = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class TrainHistory:
    step: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    mse: list[float] = field(default_factory=list)
    vb: list[float] = field(default_factory=list)

    def smoothed_mse(self, window: int = 100) -> np.ndarray:
        x = np.asarray(self.mse)
        if len(x) < window:
            return x.copy()
        return np.convolve(x, np.ones(window) / window, mode="valid")


def schedule_for(config: RunConfig):
    return make_schedule("linear", config.T, config.beta_start, config.beta_end)


def lr_factor(config: RunConfig, step: int) -> float:
    """Multiplier on ``config.lr`` for optimiser step ``step`` (0-based)."""
    if step < config.warmup_steps:
        return (step + 1) / config.warmup_steps
    if config.lr_schedule == "constant":
        return 1.0
    span = max(config.steps - config.warmup_steps, 1)
    return 0.5 * (1.0 + math.cos(math.pi * (step - config.warmup_steps) / span))


def build_model(config: RunConfig) -> D3MES:
    torch.manual_seed(config.seed)
    return D3MES(config.dit_config())


def train(
    config: RunConfig,
    data: np.ndarray,
    n_atoms: np.ndarray,
    labels: np.ndarray | None = None,
    model: D3MES | None = None,
    on_checkpoint: Callable[[D3MES, int], None] | None = None,
    dump_dir: str | Path | None = None,
) -> tuple[D3MES, TrainHistory]:
    """Train with Adam on the hybrid loss. Fully determined by ``config.seed``.

    Returns the model to sample from (the EMA copy when ``ema_decay > 0``)
    and the per-step loss history.
    """
    if len(data) == 0:
        raise ValueError("empty training set")
    model = model if model is not None else build_model(config)
    model.train()
    schedule = schedule_for(config)
    ema = copy.deepcopy(model).eval() if config.ema_decay > 0 else None
    opt = torch.optim.Adam(model.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda k: lr_factor(config, k))

    x_all = torch.as_tensor(np.asarray(data), dtype=torch.float32)
    n_all = torch.as_tensor(np.asarray(n_atoms), dtype=torch.long)
    mask_all = torch.from_numpy(entry_mask(np.asarray(n_atoms), config.n_max, len(config.vocab))).float()
    y_all = None
    if config.class_conditional:
        if labels is None:
            raise ValueError("class-conditional training needs labels")
        y_all = torch.as_tensor(np.asarray(labels), dtype=torch.long)

    rng = np.random.default_rng(config.seed)
    gen = torch.Generator().manual_seed(config.seed + 1)
    history = TrainHistory()
    for step in range(config.steps):
        idx = torch.from_numpy(rng.integers(0, len(x_all), size=config.batch_size))
        x0, m, n = x_all[idx], mask_all[idx], n_all[idx]
        y = y_all[idx] if y_all is not None else None
        t = torch.randint(0, schedule.T, (len(idx),), generator=gen)
        eps = torch.randn(x0.shape, generator=gen) * m
        if config.center_noise:
            eps = center_positions(eps, n)
        xt = q_sample(x0, t, eps, schedule, m)
        eps_hat, var_logit = model(xt, t, y, n)
        loss, parts = hybrid_loss(x0, xt, t, eps, eps_hat, var_logit, m, schedule, config.kl_weight, config.bin_width)
        if not torch.isfinite(loss):
            path = _dump_batch(dump_dir, step, x0=x0, n_atoms=n, t=t, eps=eps)
            raise NumericalError(f"non-finite loss at step {step}; batch dumped to {path}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        if ema is not None:
            with torch.no_grad():
                for pe, p in zip(ema.parameters(), model.parameters()):
                    pe.lerp_(p, 1.0 - config.ema_decay)

        history.step.append(step)
        history.loss.append(loss.item())
        history.mse.append(parts["mse"].mean().item())
        history.vb.append(parts["vb"].mean().item())
        if config.log_interval and (step + 1) % config.log_interval == 0:
            k = config.log_interval
            logger.info(
                "step %d loss %.4f mse %.4f vb %.4f",
                step + 1,
                np.mean(history.loss[-k:]),
                np.mean(history.mse[-k:]),
                np.mean(history.vb[-k:]),
            )
        if on_checkpoint and config.checkpoint_interval and (step + 1) % config.checkpoint_interval == 0:
            on_checkpoint(ema if ema is not None else model, step + 1)

    final = ema if ema is not None else model
    final.eval()
    return final, history


def _dump_batch(dump_dir, step, **arrays) -> Path:
    path = Path(dump_dir or ".") / f"nonfinite_step{step}.npz"
    path.parent.mkdir(parents=True, exist_ok=True)
    np.savez(path, **{k: v.detach().cpu().numpy() for k, v in arrays.items()})
    return path
