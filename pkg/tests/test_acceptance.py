"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is repeated in the terminal summary.
"""
import json
import time
from contextlib import contextmanager
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import ACCEPTANCE_LINES, relative_error
from mmsr.checkpoint import load_checkpoint
from mmsr.cli import Workspace, load_config, main, train_config
from mmsr.data import PatchPair, make_synthetic_dataset, normalize, sample_patches, segment_lung
from mmsr.data.patches import patch_pair_from_cache, stack
from mmsr.data.synthetic import SyntheticConfig
from mmsr.losses import (
    LossBreakdown,
    LossWeights,
    SSIMParams,
    avg_downsample_f,
    downsample_loss_D,
    mmsr_total,
    mse,
    nn_upsample_g,
    patch_stats,
    ssim_loss,
    upsample_loss_U,
)
from mmsr.metrics import consistency_metrics
from mmsr.networks import (
    DiscriminatorSpec,
    DownGeneratorSpec,
    SRGeneratorSpec,
    build_bundle,
    build_discriminator,
    build_down_generator,
    build_sr_generator,
    build_unit_pair,
)
from mmsr.stitch import plan_tiles, super_resolve_slice, super_resolve_volume, weight_map
from mmsr.trainer import CSV_COLUMNS, TrainConfig, Trainer

ROOT = Path(__file__).resolve().parents[1]
P = SSIMParams()


@contextmanager
def criterion(request, number: int, title: str, budget: float = None):
    start = time.perf_counter()
    ok = False
    try:
        yield
        elapsed = time.perf_counter() - start
        if budget is not None:
            assert elapsed < budget, f"took {elapsed:.1f} s, budget {budget:.0f} s"
        ok = True
    finally:
        elapsed = time.perf_counter() - start
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'} {title} ({elapsed:.1f} s)"
        request.config.stash.setdefault(ACCEPTANCE_LINES, []).append(line)
        print(line)


def close(value, expected, tol=1e-6):
    assert np.allclose(np.asarray(value, dtype=np.float64), expected, atol=tol, rtol=0), (value, expected)


def synthetic_patches(cfg: SyntheticConfig, lr_size: int, per_volume: int) -> PatchPair:
    ds = make_synthetic_dataset(cfg)

    def take(vols, size):
        out = []
        for i, v in enumerate(vols):
            m = segment_lung(v)
            out += sample_patches(normalize(v, m), m, size, per_volume, seed=i)
        return stack(out)

    return PatchPair(take(ds.clinical, lr_size), take(ds.micro, 8 * lr_size))


# --- 1 --------------------------------------------------------------------


def test_loss_kernel_examples(request):
    rng = np.random.default_rng(0)
    with criterion(request, 1, "loss-kernel examples at 1e-6", budget=1.0):
        half = np.full((4, 4), 0.5)
        close([float(v) for v in patch_stats(half, half)], [0.5, 0.5, 0, 0, 0])
        p = rng.uniform(-1, 1, (8, 8))
        _, _, vx, vy, c = patch_stats(p, p)
        close([float(vy), float(c)], [float(vx)] * 2)
        close([float(v) for v in patch_stats([[0, 1], [0, 1]], [[0, 0], [1, 1]])], [0.5, 0.5, 0.25, 0.25, 0])

        z = p - p.mean()
        close(float(ssim_loss(z, z, P)), 0.0)
        ones = np.ones((8, 8))
        close(float(ssim_loss(ones, ones, P)), 1 - 1.02 / 2.02)
        close(float(ssim_loss(ones, ones, P)), 0.49505, tol=1e-5)
        q = rng.uniform(-1, 1, (8, 8))
        close(float(ssim_loss(p, q, P)), float(ssim_loss(q, p, P)))

        close(nn_upsample_g([[0.7]], 8), np.full((8, 8), 0.7))
        a, b, c_, d = 0.1, 0.2, 0.3, 0.4
        block = np.kron([[a, b], [c_, d]], np.ones((2, 2)))
        close(nn_upsample_g([[a, b], [c_, d]], 2), block)
        close(nn_upsample_g(p, 1), p)

        close(avg_downsample_f(np.full((8, 8), 0.3), 8), [[0.3]])
        close(avg_downsample_f([[0, 2], [4, 6]], 2), [[3.0]])
        close(avg_downsample_f(nn_upsample_g(p, 8), 8), p)

        close(float(mse(p, p)), 0.0)
        close(float(mse(np.zeros((4, 4)), np.ones((4, 4)))), 1.0)
        close(float(mse([[0, 0], [0, 0]], [[1, 2], [3, 4]])), 7.5)

        close(float(upsample_loss_U(np.full((16, 16), 0.4), np.full((2, 2), 0.4))), 0.0)
        close(float(upsample_loss_U(nn_upsample_g(p), p)), 0.0)
        close(float(upsample_loss_U(np.ones((16, 16)), np.zeros((2, 2)))), 1.0)

        close(float(downsample_loss_D(p, nn_upsample_g(p))), 0.0)
        close(float(downsample_loss_D(np.zeros((2, 2)), np.ones((16, 16)))), 1.0)
        wiggle = 1 + np.where(np.indices((8, 8)).sum(0) % 2, 0.5, -0.5)
        close(float(downsample_loss_D([[1.0]], wiggle)), 0.0)

        zx = rng.uniform(-1, 1, (4, 4))
        zx -= zx.mean()
        zy = rng.uniform(-1, 1, (4, 4))
        zy -= zy.mean()
        # all four generated images are the g/f images of zero-mean counterparts
        bd = mmsr_total(1.5, zx, nn_upsample_g(zx), nn_upsample_g(zy), zy)
        close(float(bd.total), 1.5)

        w = LossWeights()
        assert (w.lambda1, w.lambda2, w.lambda3, w.lambda4) == (2.0, 1.0, 1.0, 1.0)
        hand = LossBreakdown(total=0.0, orig=1.0, s_x=0.1, s_y=0.2, d_term=0.3, u_term=0.4)
        close(hand.weighted_sum(w), 2.1)
        zero = LossWeights(lambda1=0, lambda2=0, lambda3=0, lambda4=0)
        x, x_sr, y, y_lr = rng.uniform(-1, 1, (4, 4)), rng.uniform(-1, 1, (32, 32)), rng.uniform(-1, 1, (32, 32)), rng.uniform(-1, 1, (4, 4))
        bd = mmsr_total(0.75, x, x_sr, y, y_lr, zero)
        assert float(bd.total) == 0.75


# --- 2 --------------------------------------------------------------------


def _ssim_fn(x, y):
    return ssim_loss(x, y, P, reduction="none")


def _u_fn(y, y_lr):
    return upsample_loss_U(y, y_lr, reduction="none")


def _d_fn(x, x_sr):
    return downsample_loss_D(x, x_sr, reduction="none")


def _total_fn(x, x_sr, y, y_lr):
    return mmsr_total(0.0, x, x_sr, y, y_lr, reduction="none").total


def sampled_central_difference(fn, inputs, index, coords, step=1e-3):
    """Central differences of ``fn`` w.r.t. the flat entries ``coords`` of ``inputs[index]``."""
    k = len(coords)
    rows = torch.arange(k)

    def shifted(sign):
        batch = [t.expand(k, *t.shape).clone() for t in inputs]
        batch[index].view(k, -1)[rows, coords] += sign * step
        return batch

    with torch.no_grad():
        return (fn(*shifted(1)) - fn(*shifted(-1))) / (2 * step)


def _analytic(fn, inputs):
    leaves = [t.clone().requires_grad_() for t in inputs]
    fn(*[t.unsqueeze(0) for t in leaves]).sum().backward()
    return [t.grad for t in leaves]


def test_gradient_check(request):
    gen = torch.Generator().manual_seed(2024)

    def rand(*shape):
        return torch.rand(*shape, generator=gen, dtype=torch.float64) * 2 - 1

    worst = 0.0
    with criterion(request, 2, "analytic vs central-difference gradients, 20 trials", budget=30.0):
        for trial in range(20):
            size = 8 if trial % 2 == 0 else 64
            cases = [
                (_ssim_fn, [rand(size, size), rand(size, size)]),
                (_u_fn, [rand(64, 64), rand(8, 8)]),
                (_d_fn, [rand(8, 8), rand(64, 64)]),
                (_total_fn, [rand(8, 8), rand(64, 64), rand(64, 64), rand(8, 8)]),
            ]
            for fn, inputs in cases:
                grads = _analytic(fn, inputs)
                for i, g in enumerate(grads):
                    n = g.numel()
                    # every entry of 8x8 inputs, 256 random entries of 64x64 ones
                    coords = torch.arange(n) if n <= 64 else torch.randperm(n, generator=gen)[:256]
                    numeric = sampled_central_difference(fn, inputs, i, coords)
                    err = relative_error(g.reshape(-1)[coords], numeric)
                    worst = max(worst, err)
                    assert err < 1e-4, (fn.__name__, trial, i, err)
        print(f"worst relative error {worst:.2e}")


# --- 3 --------------------------------------------------------------------


def test_rescale_identity(request):
    rng = np.random.default_rng(3)
    with criterion(request, 3, "f(g(p)) == p on 100 patches"):
        for _ in range(100):
            h, w = rng.integers(1, 33, 2)
            p = rng.uniform(-1, 1, (h, w))
            back = avg_downsample_f(nn_upsample_g(p, 8), 8).numpy()
            assert np.abs(back - p).max() <= 1e-6


# --- 4 --------------------------------------------------------------------


def test_shape_law(request):
    with criterion(request, 4, "generator and latent shape laws", budget=60.0):
        g1 = build_sr_generator(SRGeneratorSpec(), seed=0).eval()
        g2 = build_down_generator(DownGeneratorSpec(), seed=1).eval()
        pair = build_unit_pair(seed=0).eval()
        with torch.no_grad():
            assert g1(torch.zeros(1, 1, 32, 32)).shape == (1, 1, 256, 256)
            for h in (8, 16, 32, 64):
                for w in (8, 16, 32, 64):
                    x = torch.rand(1, 1, h, w) * 2 - 1
                    y = g1(x)
                    assert y.shape == (1, 1, 8 * h, 8 * w)
                    assert g2(y).shape == (1, 1, h, w)
            for h in (8, 16, 32, 64):
                z_lr = pair.encode_lr(torch.zeros(1, 1, h, h))
                z_hr = pair.encode_hr(torch.zeros(1, 1, 8 * h, 8 * h))
                assert z_lr.shape == z_hr.shape
                assert pair.decode_lr(z_lr).shape == (1, 1, h, h)
                assert pair.decode_hr(z_hr).shape == (1, 1, 8 * h, 8 * h)
            d = build_discriminator(DiscriminatorSpec(), seed=2).eval()
            assert min(d(torch.zeros(1, 1, 256, 256)).shape[-2:]) >= 1
            assert min(d(torch.zeros(1, 1, 32, 32)).shape[-2:]) >= 1


# --- 5 --------------------------------------------------------------------


@pytest.mark.slow
def test_downsample_term_alone_converges(request):
    data = synthetic_patches(SyntheticConfig(seed=11, n_cases=1, clinical_shape=(64, 64),
                                             micro_shape=(256, 256), depth=2), 32, 1)
    weights = LossWeights(lambda1=0, lambda2=0, lambda3=1, lambda4=0, w_adv=0, w_cyc=0, w_idt=0)
    cfg = TrainConfig(
        epochs=500, seed=0, weights=weights,
        # width 8 stalls near 4e-3 and width 16 near 8e-4 on this patch
        sr_spec=SRGeneratorSpec(base_width=32, n_res_blocks=2),
        down_spec=DownGeneratorSpec(base_width=8, n_res_blocks=1),
        dx_spec=DiscriminatorSpec(base_width=8, n_layers=3),
        dy_spec=DiscriminatorSpec(base_width=8, n_layers=3),
    )
    with criterion(request, 5, "downsample term alone: 500 steps reach MSE < 1e-3"):
        tr = Trainer(cfg, data)
        tr.run()
        assert tr.state.iteration == 500
        with torch.no_grad():
            x = torch.from_numpy(data.x).unsqueeze(1)
            final = float(((avg_downsample_f(tr.bundle.g1.eval()(x)) - x) ** 2).mean())
        print(f"final consistency MSE {final:.2e}")
        assert final < 1e-3


# --- 6 --------------------------------------------------------------------


@pytest.mark.slow
def test_training_descent(request):
    data = synthetic_patches(SyntheticConfig(seed=3, n_cases=2, clinical_shape=(64, 64),
                                             micro_shape=(320, 320), depth=4), 32, 32)
    assert len(data.x) == len(data.y) == 64
    cfg = TrainConfig(
        epochs=200, seed=0, max_iterations=200,
        sr_spec=SRGeneratorSpec(base_width=32), down_spec=DownGeneratorSpec(base_width=32),
        dx_spec=DiscriminatorSpec(base_width=32), dy_spec=DiscriminatorSpec(base_width=32),
    )
    with criterion(request, 6, "200 SR-CycleGAN iterations halve d_term", budget=600.0):
        tr = Trainer(cfg, data)
        tr.run()
        hist = tr.state.loss_history
        assert len(hist) == 200
        assert all(np.isfinite(row[k]) for row in hist for k in CSV_COLUMNS)
        d = np.array([row["d_term"] for row in hist])
        ratio = d[-10:].mean() / d[:10].mean()
        print(f"d_term first-10 {d[:10].mean():.4f} last-10 {d[-10:].mean():.4f} ratio {ratio:.3f}")
        assert ratio < 0.5


# --- 7 --------------------------------------------------------------------


def test_stitcher_equivalence(request):
    rng = np.random.default_rng(7)

    def stub(x):
        return nn_upsample_g(x, 8)

    with criterion(request, 7, "tiled stub equals whole slice; weights sum to 1"):
        for shape in [(64, 64), (100, 100), (37, 90), (5, 130)]:
            x = rng.uniform(-1, 1, shape).astype(np.float32)
            whole = np.repeat(np.repeat(x, 8, 0), 8, 1)
            for tile, overlap in [(64, 0), (64, 8), (32, 8), (16, 4), (24, 12)]:
                plan = plan_tiles(shape, tile, overlap)
                np.testing.assert_array_equal(super_resolve_slice(stub, x, plan), whole)
                assert np.abs(weight_map(plan) - 1).max() <= 1e-6


# --- 8 --------------------------------------------------------------------


def _mean_consistency(g1, ws: Workspace) -> float:
    inf = ws.cfg["inference"]
    values = []
    for _, norm in ws.clinical_volumes():
        sr = super_resolve_volume(g1, norm, inf["tile_size"], inf["overlap"])
        for k in range(norm.shape[2]):
            values.append(consistency_metrics(norm.axial(k), sr.axial(k)).mse)
    return float(np.mean(values))


@pytest.mark.slow
def test_end_to_end_pipeline(request, tmp_path):
    config = ROOT / "configs" / "tiny.json"
    out = tmp_path / "run"
    with criterion(request, 8, "CLI pipeline beats the untrained generator", budget=1200.0):
        for step in ["make-synthetic", "extract-patches", "train", "super-resolve", "evaluate"]:
            assert main([step, "--config", str(config), "--out", str(out)]) == 0, step
        report = json.loads((out / "metrics.json").read_text())
        trained = [m["consistency_mse"] for m in report["per_volume"].values()]
        assert trained and all(np.isfinite(trained))

        ws = Workspace(str(out), load_config(str(config), None))
        tc = train_config(ws.cfg)
        _, state = load_checkpoint(out / "checkpoint.pt")
        assert state.iteration == tc.epochs * len(patch_pair_from_cache(out / "patches").x)
        untrained = build_bundle(tc.variant, tc.sr_spec, tc.down_spec, tc.dx_spec, tc.dy_spec, tc.seed).g1.eval()
        baseline = _mean_consistency(untrained, ws)
        ours = float(np.mean(trained))
        print(f"consistency MSE trained {ours:.5f} untrained {baseline:.5f}")
        assert ours < baseline


# --- 9 --------------------------------------------------------------------


@pytest.mark.parametrize("variant", ["sr-cyclegan", "sr-unit"])
def test_checkpoint_fidelity(request, tmp_path, variant):
    data = synthetic_patches(SyntheticConfig(seed=5, n_cases=1, clinical_shape=(32, 32),
                                             micro_shape=(256, 256), depth=2), 16, 8)
    cfg = TrainConfig(
        epochs=4, seed=1, variant=variant, iterations_per_epoch=4, pool_size=3,
        sr_spec=SRGeneratorSpec(base_width=8, n_res_blocks=2),
        down_spec=DownGeneratorSpec(base_width=8, n_res_blocks=1),
        dx_spec=DiscriminatorSpec(base_width=8, n_layers=3),
        dy_spec=DiscriminatorSpec(base_width=8, n_layers=3),
    )
    with criterion(request, 9, f"checkpoint bit-exact and resume matches ({variant})"):
        full = Trainer(cfg, data)
        full.run(n_steps=12)
        part = Trainer(cfg, data)
        part.run(n_steps=5)
        path = tmp_path / "mid.pt"
        part.save(path)
        bundle, state = load_checkpoint(path)
        ref, got = part.bundle.param_groups(), bundle.param_groups()
        for group in ref:
            for name in ref[group]:
                assert torch.equal(ref[group][name], got[group][name]), (group, name)
        assert state.loss_history == part.state.loss_history
        resumed = Trainer.resume(path, data)
        resumed.run(n_steps=7)
        assert resumed.state.loss_history == full.state.loss_history
        for a, b in zip(full.g_params, resumed.g_params):
            assert torch.equal(a, b)
