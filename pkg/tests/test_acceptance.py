"""Acceptance suite: twelve end-to-end criteria, each printing one PASS/FAIL line."""
import math
import time

import numpy as np
import pytest
import torch

from d3mes.cli import cmd_evaluate, cmd_prepare, cmd_sample, cmd_train
from d3mes.config import DESK_PROFILE, RunConfig
from d3mes.diffusion import SizeSampler, generate, hybrid_loss, make_schedule, q_sample
from d3mes.dit import D3MES, DiTBlock, DiTConfig, adaln_zero_block, dit_forward
from d3mes.encoding import decode_tensor, encode_molecule, entry_mask, patchify_array, unpatchify_array
from d3mes.equiattn import (
    EquivariantAttention,
    GaussianBasis,
    TFNKernel,
    equi_attention,
    real_sph_harm,
    rotation_rep,
    spherical_harmonic,
    tfn_kernel,
)
from d3mes.metrics import CYCLIC, NONCYCLIC, class_accuracy, evaluate, uniqueness
from d3mes.molgraph import add_hydrogens, canonical_hash, detect_rings, infer_bonds, strip_hydrogens, write_sdf
from d3mes.training import schedule_for, train

from helpers import permute, random_rotation, torch_rotation
from test_metrics import _oracle_distinct

DT = torch.float64

# desk defaults used by the two training criteria (5000 steps)
TRAIN_SETTINGS = dict(DESK_PROFILE, log_interval=0)


@pytest.fixture
def report(capsys):
    def emit(number, title, ok, detail=""):
        with capsys.disabled():
            print(f"\nACCEPTANCE {number:>2} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip())
        assert ok, f"criterion {number} failed: {detail}"

    return emit


def test_01_attention_equivariance(report):
    start = time.time()
    torch.manual_seed(0)
    att = EquivariantAttention({0: 4, 1: 2}, {0: 4, 1: 2}, heads=4, key_channels=8, value_channels=8, n_edge=1).double()
    g = torch.Generator().manual_seed(1)
    worst_alpha = worst_vec = 0.0
    for k in range(60):
        n = 4 + k % 6
        pos = torch.randn(1, n, 3, generator=g, dtype=DT) * 1.5
        f = {0: torch.randn(1, n, 4, 1, generator=g, dtype=DT), 1: torch.randn(1, n, 2, 3, generator=g, dtype=DT)}
        e = torch.randint(0, 3, (1, n, n, 1), generator=g).to(DT)
        e = torch.maximum(e, e.transpose(1, 2))
        R = torch_rotation(1000 + k)
        shift = torch.randn(3, generator=g, dtype=DT) * 5
        out, alpha = equi_attention(att, f, pos, edge_feats=e)
        f_rot = {0: f[0], 1: torch.einsum("ab,...b->...a", R, f[1])}
        out2, alpha2 = equi_attention(att, f_rot, pos @ R.T + shift, edge_feats=e)
        off = alpha > 0
        worst_alpha = max(worst_alpha, ((alpha2 - alpha).abs()[off] / alpha[off]).max().item())
        want = torch.einsum("ab,...b->...a", R, out[1])
        worst_vec = max(worst_vec, ((out2[1] - want).norm() / want.norm()).item())
    elapsed = time.time() - start
    ok = worst_alpha <= 1e-6 and worst_vec <= 1e-6 and elapsed < 60
    report(1, "equivariance suite", ok, f"alpha rel {worst_alpha:.1e}, type-1 rel {worst_vec:.1e}, {elapsed:.1f}s")


def test_02_spherical_harmonic_orthonormality(report):
    v = np.random.default_rng(2).normal(size=(1_000_000, 3))
    u = torch.from_numpy(v / np.linalg.norm(v, axis=1, keepdims=True))
    y = torch.cat([real_sph_harm(J, u) for J in range(3)], dim=-1).numpy()
    gram = 4 * np.pi * (y.T @ y) / len(y)
    dev = np.abs(gram - np.eye(9)).max()
    y00 = abs(spherical_harmonic(0, 0, [0, 0, 1]) - 1 / (2 * math.sqrt(math.pi)))
    y10 = abs(spherical_harmonic(1, 0, [0, 0, 1]) - math.sqrt(3 / (4 * math.pi)))
    ok = dev <= 1e-2 and y00 <= 1e-12 and y10 <= 1e-12
    report(2, "spherical harmonic orthonormality", ok, f"max |<Y,Y'> - delta| {dev:.1e}, Y00 err {y00:.0e}, Y10 err {y10:.0e}")


def test_03_tfn_kernel_equivariance(report):
    basis = GaussianBasis().double()
    worst = 0.0
    g = torch.Generator().manual_seed(3)
    for l in (0, 1):
        for k in (0, 1):
            torch.manual_seed(10 * l + k)
            kern = TFNKernel(l, k, 3, 2, n_edge=1).double()
            for s in range(100):
                x = torch.randn(3, generator=g, dtype=DT) * 2
                R = torch_rotation(s)
                Dl = torch.kron(torch.eye(2, dtype=DT), rotation_rep(l, R))
                Dk = torch.kron(torch.eye(3, dtype=DT), rotation_rep(k, R))
                w = tfn_kernel(kern, basis, x, edge=[1.0])
                err = (tfn_kernel(kern, basis, R @ x, edge=[1.0]) - Dl @ w @ Dk.T).norm().item()
                worst = max(worst, err)
    report(3, "TFN kernel equivariance", worst <= 1e-6, f"max norm error {worst:.1e} over (l,k) in {{0,1}}^2")


def test_04_forward_process_statistics(report):
    sched = make_schedule("linear", **{k: DESK_PROFILE[k] for k in ("T", "beta_start", "beta_end")})
    T = sched.T
    n = 100_000
    x0 = torch.linspace(-2.0, 2.0, 8, dtype=DT)
    g = torch.Generator().manual_seed(4)
    worst_mean = worst_var = 0.0
    # steps 1, T/2, T in 1-based counting are indices 0, T/2 - 1, T - 1
    for idx in (0, T // 2 - 1, T - 1):
        eps = torch.randn(n, 8, generator=g, dtype=DT)
        xt = q_sample(x0.expand(n, 8), torch.full((n,), idx), eps, sched)
        ab = sched.alphas_cumprod[idx]
        mu, var = math.sqrt(ab) * x0.numpy(), 1 - ab
        scale = np.maximum(np.abs(mu), math.sqrt(var))
        worst_mean = max(worst_mean, (np.abs(xt.mean(0).numpy() - mu) / scale).max())
        worst_var = max(worst_var, (np.abs(xt.var(0).numpy() - var) / var).max())
    ok = worst_mean <= 0.02 and worst_var <= 0.02
    report(4, "forward-process statistics", ok, f"mean rel {worst_mean:.2%}, variance rel {worst_var:.2%}")


def _fd_check(loss_fn, params, n_entries, seed, h=5e-3):
    """Worst relative error between autograd and a fourth-order central
    difference (truncation O(h^4), rounding about eps * |loss| / h), so exactly
    zero gradients are resolved well below the 1e-8 floor."""
    grads = torch.autograd.grad(loss_fn(), params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    with torch.no_grad():
        for p, gr in zip(params, grads):
            flat = p.view(-1)
            for idx in rng.choice(flat.numel(), size=min(n_entries, flat.numel()), replace=False):
                old = flat[idx].item()
                f = {}
                for k in (-2, -1, 1, 2):
                    flat[idx] = old + k * h
                    f[k] = loss_fn().item()
                flat[idx] = old
                fd = (f[-2] - 8 * f[-1] + 8 * f[1] - f[2]) / (12 * h)
                an = gr.reshape(-1)[idx].item()
                worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-8))
    return worst


def test_05_gradient_checks(report):
    start = time.time()
    g = torch.Generator().manual_seed(5)

    # (a) equivariant attention, inputs and positions
    torch.manual_seed(0)
    att = EquivariantAttention({0: 3, 1: 1}, {0: 2, 1: 1}, heads=2, key_channels=4, value_channels=4, n_edge=1).double()
    pos = (torch.randn(1, 5, 3, generator=g, dtype=DT) * 1.5).requires_grad_()
    f0 = torch.randn(1, 5, 3, 1, generator=g, dtype=DT).requires_grad_()
    f1 = torch.randn(1, 5, 1, 3, generator=g, dtype=DT).requires_grad_()
    e = torch.ones(1, 5, 5, 1, dtype=DT)

    def attn_loss():
        out, alpha = equi_attention(att, {0: f0, 1: f1}, pos, edge_feats=e)
        return (out[0] ** 2).sum() + (out[1] * torch.tensor([1.0, -2.0, 0.5], dtype=DT)).sum() + (alpha**2).sum()

    err_a = _fd_check(attn_loss, [pos, f0, f1] + list(att.parameters())[:6], 10, 0)

    # (b) one adaLN-Zero block, with its gates moved off zero
    torch.manual_seed(1)
    block = DiTBlock(16, 2, mlp_ratio=2).double()
    with torch.no_grad():
        block.adaLN_modulation[-1].weight.normal_(0, 0.3)
        block.adaLN_modulation[-1].bias.normal_(0, 0.3)
    x = torch.randn(2, 9, 16, generator=g, dtype=DT).requires_grad_()
    c = torch.randn(2, 16, generator=g, dtype=DT).requires_grad_()
    w = torch.randn(2, 9, 16, generator=g, dtype=DT)

    def block_loss():
        return (adaln_zero_block(block, x, c) * w).sum()

    err_b = _fd_check(block_loss, [x, c] + list(block.parameters()), 10, 1)

    # (c) micro model end to end through the hybrid loss
    torch.manual_seed(2)
    cfg = DiTConfig(hidden=8, depth=1, heads=2, time_dim=4, num_classes=2, attn_heads=2, attn_channels=4)
    model = D3MES(cfg).double()
    with torch.no_grad():
        for p in model.parameters():
            if p.abs().sum() == 0:
                p.normal_(0, 0.2)
    sched = make_schedule("linear", **{k: DESK_PROFILE[k] for k in ("T", "beta_start", "beta_end")})
    n_at = torch.tensor([3, 6, 9])
    mask = torch.from_numpy(entry_mask(n_at.numpy(), 9, 4)).to(DT)
    x0 = torch.randn(3, 3, 9, 9, generator=g, dtype=DT) * mask
    eps = torch.randn(3, 3, 9, 9, generator=g, dtype=DT) * mask
    t = torch.tensor([0, 17, 49])
    y = torch.tensor([0, 1, 2])
    xt = q_sample(x0, t, eps, sched, mask)
    with torch.no_grad():
        frozen, _ = dit_forward(model, xt, t, y, n_at)

    def e2e_loss():
        e_hat, v = dit_forward(model, xt, t, y, n_at)
        if torch.is_grad_enabled():
            return hybrid_loss(x0, xt, t, eps, e_hat, v, mask, sched)[0]
        # finite differences see eps_hat through the same stop-gradient as the loss
        mse = hybrid_loss(x0, xt, t, eps, e_hat, v, mask, sched)[1]["mse"]
        vb = hybrid_loss(x0, xt, t, eps, frozen, v, mask, sched)[1]["vb"]
        return (mse + vb).mean()

    err_c = _fd_check(e2e_loss, [p for p in model.parameters()], 3, 2)
    elapsed = time.time() - start
    worst = max(err_a, err_b, err_c)
    ok = worst <= 1e-3 and elapsed < 120
    report(5, "gradient checks", ok, f"rel err attention {err_a:.1e}, block {err_b:.1e}, end-to-end {err_c:.1e}, {elapsed:.1f}s")


def test_06_adaln_zero_identity(report):
    torch.manual_seed(6)
    model = D3MES(DiTConfig(num_classes=2))
    g = torch.Generator().manual_seed(6)
    n = torch.tensor([3, 7, 9, 5])
    x = torch.randn(4, 3, 9, 9, generator=g) * torch.from_numpy(entry_mask(n.numpy(), 9, 4)).float()
    t = torch.tensor([0, 10, 500, 999])
    h = model.embed(x, n)
    c = model.condition(t, torch.tensor([0, 1, 2, 1]))
    identical = True
    tokens = h
    for block in model.blocks:
        out = block(tokens, c)
        identical &= torch.equal(out, tokens)
        tokens = out
    report(6, "adaLN-Zero identity", bool(identical), f"{len(model.blocks)} fresh blocks, tokens bit-identical")


def test_07_patchify_and_encode_roundtrips(report, heavy_corpus):
    rng = np.random.default_rng(7)
    bijective = all(
        np.array_equal(unpatchify_array(patchify_array(x, 3), 3, (3, 3)), x)
        for x in (rng.normal(size=(3, 9, 9)) for _ in range(1000))
    )
    graph_ok = pos_ok = 0
    for m in heavy_corpus:
        back = decode_tensor(encode_molecule(m))
        graph_ok += canonical_hash(back) == canonical_hash(m)
        pos_ok += np.array_equal(back.positions, m.positions - m.positions.mean(axis=0))
    n = len(heavy_corpus)
    ok = bijective and graph_ok == n and pos_ok == n
    report(7, "patchify/encode roundtrips", ok, f"1000/1000 bijective={bijective}, graphs {graph_ok}/{n}, positions {pos_ok}/{n}")


def _overfit_set(heavy_corpus):
    return heavy_corpus[::14][:16]


def _size_hist(mols):
    hist = {}
    for m in mols:
        hist[len(m)] = hist.get(len(m), 0) + 1
    return hist


def test_08_overfit_integration(report, heavy_corpus):
    torch.set_num_threads(1)
    start = time.time()
    mols = _overfit_set(heavy_corpus)
    cfg = RunConfig.from_dict(TRAIN_SETTINGS)
    x = np.stack([encode_molecule(m).data for m in mols])
    n = np.array([len(m) for m in mols])
    model, _ = train(cfg, x, n)
    samples = generate(200, model, schedule_for(cfg), SizeSampler(_size_hist(mols)), seed=8, bond_mode="geometry", center=cfg.center_noise)
    r = evaluate(samples)
    elapsed = time.time() - start
    ok = r.atom_stable >= 0.90 and r.valid >= 0.90 and elapsed <= 15 * 60
    report(8, "overfit integration", ok, f"atom_stable {r.atom_stable:.3f}, valid {r.valid:.3f}, val_uniq {r.val_uniq:.3f}, {elapsed / 60:.1f} min")


def _two_class_set(heavy_corpus):
    cyclic = [m for m in heavy_corpus if detect_rings(m)]
    acyclic = [m for m in heavy_corpus if not detect_rings(m) and len(m) >= 3]
    pick = lambda seq: [seq[int(k)] for k in np.linspace(0, len(seq) - 1, 8)]
    return pick(cyclic), pick(acyclic)


def test_09_conditional_generation(report, heavy_corpus):
    torch.set_num_threads(1)
    start = time.time()
    cyclic, acyclic = _two_class_set(heavy_corpus)
    mols = acyclic + cyclic
    labels = np.array([0] * 8 + [1] * 8)
    cfg = RunConfig.from_dict(dict(TRAIN_SETTINGS, class_conditional=True))
    x = np.stack([encode_molecule(m).data for m in mols])
    n = np.array([len(m) for m in mols])
    model, _ = train(cfg, x, n, labels)
    sched = schedule_for(cfg)
    acc = {}
    for label, target, group in ((0, NONCYCLIC, acyclic), (1, CYCLIC, cyclic)):
        out = generate(100, model, sched, SizeSampler(_size_hist(group)), label=label, seed=90 + label, center=cfg.center_noise)
        acc[target] = class_accuracy(out, target)
    elapsed = time.time() - start
    ok = acc[NONCYCLIC] >= 0.90 and acc[CYCLIC] >= 0.90
    report(9, "conditional generation", ok, f"noncyclic {acc[NONCYCLIC]:.2f}, cyclic {acc[CYCLIC]:.2f}, {elapsed / 60:.1f} min")


def test_10_metrics_oracle(report, corpus):
    r = evaluate(corpus)
    truth_ok = r.atom_stable == 1.0 and r.valid == 1.0 and r.val_uniq == 1.0
    rng = np.random.default_rng(10)
    batch = []
    for k, m in enumerate(corpus[::4]):
        batch.append(m)
        if k % 2 == 0:
            batch.append(permute(m, rng.permutation(len(m))))
        if k % 5 == 0:
            batch.append(m.replace(positions=m.positions @ random_rotation(k).T))
    got = uniqueness(batch)
    want = _oracle_distinct(batch) / len(batch)
    ok = truth_ok and got == want
    report(10, "metrics oracle", ok, f"corpus stable/valid/unique = {r.atom_stable}/{r.valid}/{r.val_uniq}, duplicated batch {got:.4f} vs oracle {want:.4f}")


def test_11_hydrogen_pipeline(report, corpus):
    misses = []
    for m in corpus:
        rebuilt = add_hydrogens(infer_bonds(strip_hydrogens(m), "geometry"))
        if rebuilt.n_hydrogens() != m.n_hydrogens():
            misses.append(f"{m.name} ({m.n_hydrogens()} -> {rebuilt.n_hydrogens()} H)")
    rate = 1 - len(misses) / len(corpus)
    report(11, "hydrogen pipeline", rate >= 0.95, f"{rate:.1%} recovered; disagreements: {', '.join(misses) or 'none'}")


def test_12_determinism(report, tmp_path, corpus):
    data = tmp_path / "data.sdf"
    write_sdf(corpus[::8], data)
    texts = []
    for run in range(2):
        cfg = RunConfig.from_dict(
            dict(DESK_PROFILE, data=[str(data)], cache_dir=str(tmp_path / f"run{run}"), steps=30, hidden=32, depth=2,
                 heads=2, batch_size=8, seed=12, log_interval=0)
        )
        ckpt, _ = cmd_train(cfg, cmd_prepare(cfg))
        paths = cmd_sample(ckpt, 12, tmp_path / f"samples{run}", seed=12)
        texts.append(cmd_evaluate(paths, bond_mode="geometry").to_text())
    report(12, "determinism", texts[0] == texts[1], "identical metric reports across two seeded runs")
