"""Acceptance suite: one test per shipped criterion, each printing a
[PASS]/[FAIL] line (visible with -s or in the captured output of a
failure). Budgeted criteria also assert their wall-clock limit."""

import hashlib
import random
import time

import numpy as np
import pytest
import torch

from gpmseg import (
    GeometricPriorChain,
    GeometricPriorModule,
    StagePlan,
    SyntheticPolypDataset,
    TrainConfig,
    build_model,
    build_seeded_model,
    count_params,
    depth_metrics,
    dice_iou,
    lr_at_epoch,
    seg_loss,
    train_run,
)
from gpmseg.attention import SCAUnit
from gpmseg.complexity import (
    REFERENCE_CHAIN_DELTA_PARAMS_M,
    REFERENCE_UNET_PARAMS_M,
    chain_overhead_note,
)
from gpmseg.train import moving_average

torch.set_num_threads(1)


def report(num: int, label: str, failures: list, detail: str = "") -> None:
    ok = not failures
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {num}: {label}"
    if detail:
        line += f" [{detail}]"
    if failures:
        line += " :: " + "; ".join(failures)
    print(line)
    assert ok, line


# -- 1: shape contracts -----------------------------------------------------

def test_criterion_01_shape_contracts():
    rng = random.Random(101)
    failures = []
    t0 = time.monotonic()
    for trial in range(20):
        ch = rng.choice([4, 8, 16])
        res = rng.choice([8, 16, 32])
        batch = rng.choice([1, 2])
        ordering = rng.choice(["bottom_to_top", "top_to_bottom"])
        torch.manual_seed(trial)

        gpm = GeometricPriorModule(ch)
        f = torch.randn(batch, ch, res, res)
        d = torch.randn(batch, gpm.depth_channels, res // 2, res // 2)
        f_e, d_e = gpm(f, d)
        if f_e.shape != f.shape or d_e.shape != d.shape:
            failures.append(
                f"trial {trial}: module ch={ch} res={res} "
                f"-> {tuple(f_e.shape)}/{tuple(d_e.shape)}"
            )

        chain = GeometricPriorChain(StagePlan.from_base_channels(ch, ordering))
        skips = [torch.randn(batch, ch * 2**k, res, res) for k in range(4)]
        d0 = torch.rand(batch, 1, res, res)
        enhanced = chain(skips, d0)
        bad = [
            k for k in range(4) if enhanced[k].shape != skips[k].shape
        ]
        if bad:
            failures.append(f"trial {trial}: chain ch={ch} res={res} levels {bad}")
    elapsed = time.monotonic() - t0
    if elapsed >= 60:
        failures.append(f"took {elapsed:.1f}s (budget 60s)")
    report(1, "20 random configs preserve module and chain shapes", failures,
           f"{elapsed:.1f}s")


# -- 2: similarity-map stochasticity ----------------------------------------

def test_criterion_02_similarity_rows_stochastic():
    rng = random.Random(202)
    torch.manual_seed(202)
    failures = []
    worst_sum = 0.0
    min_entry = float("inf")
    seen = 0
    while seen < 1000:
        ch = rng.choice([2, 4, 8])
        res = rng.choice([2, 4, 8])
        batch = min(8, 1000 - seen)
        gpm = GeometricPriorModule(ch, similarity_scale=rng.choice(["channels", "tokens"]))
        f = torch.randn(batch, ch, res, res) * rng.uniform(0.2, 3.0)
        g = torch.randn(batch, ch, res, res) * rng.uniform(0.2, 3.0)
        c_map = gpm.similarity_map(f, g)
        worst_sum = max(worst_sum, float((c_map.sum(-1) - 1.0).abs().max()))
        min_entry = min(min_entry, float(c_map.min()))
        seen += batch
    if worst_sum > 1e-5:
        failures.append(f"row sums off by {worst_sum:.2e} (tol 1e-5)")
    if min_entry < 0.0:
        failures.append(f"negative entry {min_entry:.2e}")

    gpm = GeometricPriorModule(4)
    f = torch.randn(2, 4, 6, 6)
    g = torch.full_like(f, 0.37)  # every token identical -> uniform rows
    c_map = gpm.similarity_map(f, g)
    uni_err = float((c_map - 1.0 / 36).abs().max())
    if uni_err > 1e-6:
        failures.append(f"uniform embedding rows off by {uni_err:.2e} (tol 1e-6)")
    report(2, "1000 similarity maps are row-stochastic", failures,
           f"max row-sum err {worst_sum:.1e}, uniform err {uni_err:.1e}")


# -- 3: residual identities -------------------------------------------------

def test_criterion_03_residual_identities():
    failures = []
    torch.manual_seed(3)
    gpm = GeometricPriorModule(8)
    for p in gpm.parameters():
        p.data.uniform_(-0.5, 0.5)
    torch.nn.init.zeros_(gpm.geo_proj.weight)  # force the geometry stream out
    f = torch.randn(2, 8, 12, 12)
    d = torch.randn(2, 4, 6, 6)
    f_e, _ = gpm(f, d)
    if not torch.equal(f_e, gpm.refine_features(f)):
        failures.append("zeroed geometry embedding does not reduce to refined features")

    fused = build_model(base_channels=8, with_gpm=True)
    plain = build_model(base_channels=8, with_gpm=False)
    plain.load_state_dict(
        {k: v for k, v in fused.state_dict().items() if not k.startswith("gpm.")}
    )
    fused.bypass_gpm = True
    fused.eval()
    plain.eval()
    x = torch.randn(2, 3, 64, 64)
    with torch.no_grad():
        if not torch.equal(fused(x), plain(x)):
            failures.append("bypassed model differs from plain backbone")
    report(3, "residual and bypass identities hold bitwise", failures)


# -- 4: gradient checks -----------------------------------------------------

def _central_diff_check(fn, inputs: list, h: float = 1e-6, rel: float = 1e-3):
    """Analytic grads of scalar fn vs central differences; returns failures."""
    leaves = [x.detach().double().requires_grad_(True) for x in inputs]
    fn(*leaves).backward()
    failures = []
    for xi, x in enumerate(leaves):
        analytic = x.grad
        flat = x.detach().clone().reshape(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            for sign, store in ((1.0, "hi"), (-1.0, "lo")):
                flat[j] = orig + sign * h
                val = fn(*[
                    flat.reshape(x.shape) if k == xi else leaves[k].detach()
                    for k in range(len(leaves))
                ]).item()
                if store == "hi":
                    hi = val
                else:
                    lo = val
            flat[j] = orig
            num = (hi - lo) / (2 * h)
            ana = analytic.reshape(-1)[j].item()
            denom = max(abs(num), abs(ana))
            if denom < 1e-8:
                continue
            if abs(num - ana) / denom > rel:
                failures.append(
                    f"input {xi} elem {j}: analytic {ana:.6g} vs numeric {num:.6g}"
                )
    return failures


def test_criterion_04_gradient_checks():
    failures = []
    t0 = time.monotonic()

    torch.manual_seed(40)
    sca = SCAUnit(4).double()
    for p in sca.parameters():
        p.data.uniform_(-0.5, 0.5)
    w = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    bad = _central_diff_check(lambda x: (sca(x) * w).sum(),
                              [torch.randn(1, 4, 6, 6)])
    if bad:
        failures.append(f"attention unit: {len(bad)} bad grads ({bad[0]})")

    torch.manual_seed(41)
    gpm = GeometricPriorModule(4).double()
    for p in gpm.parameters():
        p.data.uniform_(-0.5, 0.5)  # activate both cross-stream paths
    wf = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    wd = torch.randn(1, 2, 3, 3, dtype=torch.float64)

    def stage_scalar(f, d):
        f_e, d_e = gpm(f, d)
        return (f_e * wf).sum() + (d_e * wd).sum()

    bad = _central_diff_check(stage_scalar,
                              [torch.randn(1, 4, 6, 6), torch.randn(1, 2, 3, 3)])
    if bad:
        failures.append(f"fusion stage: {len(bad)} bad grads ({bad[0]})")

    torch.manual_seed(42)
    target = (torch.rand(1, 1, 6, 6) > 0.5).double()
    bad = _central_diff_check(lambda z: seg_loss(z, target),
                              [torch.randn(1, 1, 6, 6)])
    if bad:
        failures.append(f"seg loss: {len(bad)} bad grads ({bad[0]})")

    elapsed = time.monotonic() - t0
    if elapsed >= 120:
        failures.append(f"took {elapsed:.1f}s (budget 120s)")
    report(4, "analytic grads match central differences at 1e-3", failures,
           f"{elapsed:.1f}s")


# -- 5: metric oracles -------------------------------------------------------

def _loop_dice_iou(pred, gt):
    inter = total = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            p, g = bool(pred[i, j]), bool(gt[i, j])
            inter += p and g
            total += p + g
    if total == 0:
        return 1.0, 1.0
    return 2.0 * inter / total, inter / (total - inter)


def _loop_depth_metrics(pred, gt):
    ratios, relerrs, sqerrs, logerrs = [], [], [], []
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            g = float(gt[i, j])
            if g <= 0:
                continue
            p = float(pred[i, j])
            ratios.append(max(p / g, g / p))
            relerrs.append(abs(p - g) / g)
            sqerrs.append((p - g) ** 2)
            if p > 0:
                logerrs.append(abs(np.log10(p) - np.log10(g)))
    ratios = np.array(ratios)
    return (
        float(np.mean(ratios < 1.25)),
        float(np.mean(ratios < 1.25**2)),
        float(np.mean(ratios < 1.25**3)),
        float(np.mean(np.array(relerrs))),
        float(np.sqrt(np.mean(np.array(sqerrs)))),
        float(np.mean(np.array(logerrs))),
    )


def test_criterion_05_metric_oracles():
    rng = np.random.default_rng(505)
    failures = []
    for trial in range(50):
        pred = rng.random((8, 8)) > 0.5
        gt = rng.random((8, 8)) > 0.5
        got = dice_iou(pred, gt)
        want = _loop_dice_iou(pred, gt)
        if got != want:
            failures.append(f"dice_iou trial {trial}: {got} != {want}")

        dp = rng.uniform(0.05, 2.0, (8, 8))
        dg = rng.uniform(0.05, 2.0, (8, 8))
        m = depth_metrics(dp, dg)
        want_m = _loop_depth_metrics(dp, dg)
        got_m = (m.delta1, m.delta2, m.delta3, m.abs_rel, m.rmse, m.log10)
        if got_m != want_m:
            failures.append(f"depth_metrics trial {trial}: {got_m} != {want_m}")

    for trial in range(200):
        pred = rng.random((8, 8)) > rng.uniform(0.2, 0.8)
        gt = rng.random((8, 8)) > rng.uniform(0.2, 0.8)
        d, i = dice_iou(pred, gt)
        if abs(d - 2 * i / (1 + i)) > 1e-9:
            failures.append(f"dsc/iou identity off at trial {trial}")
        dp = rng.uniform(0.05, 2.0, (8, 8))
        dg = rng.uniform(0.05, 2.0, (8, 8))
        m = depth_metrics(dp, dg)
        if not (m.delta1 <= m.delta2 <= m.delta3):
            failures.append(f"threshold accuracies not nested at trial {trial}")

    gt = rng.uniform(0.1, 1.0, (8, 8))
    m = depth_metrics(1.3 * gt, gt)
    if m.delta1 != 0.0:
        failures.append(f"1.3x case delta1 {m.delta1} != 0")
    if m.delta2 != 1.0:
        failures.append(f"1.3x case delta2 {m.delta2} != 1")
    if abs(m.abs_rel - 0.3) > 1e-9:
        failures.append(f"1.3x case abs_rel {m.abs_rel} != 0.3")
    report(5, "metrics match per-pixel loop oracles", failures)


# -- 6: overfit smoke test ---------------------------------------------------

def test_criterion_06_overfit_smoke():
    failures = []
    t0 = time.monotonic()
    dataset = SyntheticPolypDataset(8, image_size=64, seed=99)
    config = TrainConfig(
        image_size=64, base_channels=8, with_gpm=True, ordering="bottom_to_top",
        seeds=(0,), epochs=200, t_max=200, batch_size=4, lr=2e-3,
        val_fraction=0.0, augment=False, synthetic_samples=8,
    )
    model = build_seeded_model(config, 0)
    state = train_run(config, model, dataset, 0)
    elapsed = time.monotonic() - t0

    best = max(h[3] for h in state.history)
    if best <= 0.95:
        failures.append(f"train DSC peaked at {best:.4f} (need > 0.95)")
    losses = [h[2] for h in state.history[:20]]
    ma = moving_average(losses, 5)
    if not all(b < a for a, b in zip(ma, ma[1:])):
        failures.append("5-epoch moving-average loss not strictly decreasing over epochs 1-20")
    if elapsed >= 600:
        failures.append(f"took {elapsed:.1f}s (budget 600s)")
    report(6, "tiny fused model overfits 8 samples", failures,
           f"best DSC {best:.4f}, {elapsed:.0f}s")


# -- 7: ablation direction ----------------------------------------------------

def test_criterion_07_ablation_direction():
    failures = []
    t0 = time.monotonic()
    dataset = SyntheticPolypDataset(200, image_size=64, seed=4242)
    arms = {
        "baseline": dict(with_gpm=False),
        "bottom_to_top": dict(with_gpm=True, ordering="bottom_to_top"),
        "top_to_bottom": dict(with_gpm=True, ordering="top_to_bottom"),
    }
    means = {}
    for name, overrides in arms.items():
        scores = []
        for seed in (0, 1, 2):
            config = TrainConfig(
                image_size=64, base_channels=8, seeds=(seed,), epochs=60,
                t_max=60, batch_size=10, lr=1e-3, val_fraction=0.1,
                augment=True, synthetic_samples=200, **overrides,
            )
            model = build_seeded_model(config, seed)
            state = train_run(config, model, dataset, seed)
            scores.append(state.best_val_dsc)
        means[name] = sum(scores) / len(scores)
    elapsed = time.monotonic() - t0

    if means["bottom_to_top"] < means["baseline"]:
        failures.append(
            f"bottom-to-top mean {means['bottom_to_top']:.4f} "
            f"< baseline {means['baseline']:.4f}"
        )
    if means["top_to_bottom"] < means["baseline"]:
        failures.append(
            f"top-to-bottom mean {means['top_to_bottom']:.4f} "
            f"< baseline {means['baseline']:.4f}"
        )
    if elapsed >= 3600:
        failures.append(f"took {elapsed:.0f}s (budget 3600s)")
    report(
        7, "both fused arms beat or match the baseline over 3 seeds", failures,
        f"base {means['baseline']:.4f}, b->t {means['bottom_to_top']:.4f}, "
        f"t->b {means['top_to_bottom']:.4f}, {elapsed:.0f}s",
    )


# -- 8: complexity accounting --------------------------------------------------

def test_criterion_08_complexity_accounting():
    failures = []
    plain = count_params(build_model(base_channels=64, with_gpm=False)).params
    fused = count_params(build_model(base_channels=64, with_gpm=True)).params
    rel = abs(plain / 1e6 - REFERENCE_UNET_PARAMS_M) / REFERENCE_UNET_PARAMS_M
    if rel >= 0.05:
        failures.append(f"backbone {plain / 1e6:.3f}M strays {rel:.1%} from reference")

    delta = fused - plain
    chain = count_params(
        GeometricPriorChain(StagePlan.from_base_channels(64))
    ).params
    if fused != plain + chain:
        failures.append(f"additivity broken: {fused} != {plain} + {chain}")

    note = chain_overhead_note(delta)
    gap = abs(delta / 1e6 / REFERENCE_CHAIN_DELTA_PARAMS_M - 1.0)
    if f"{REFERENCE_CHAIN_DELTA_PARAMS_M:.2f}M" not in note:
        failures.append("overhead note omits the reference comparison")
    if gap > 0.25 and "depth-stream sizing" not in note:
        failures.append(f"gap {gap:.1%} > 25% but note has no design explanation")
    report(8, "parameter accounting matches references and is additive", failures,
           f"backbone {plain / 1e6:.3f}M, chain +{delta / 1e6:.3f}M")


# -- 9: schedule correctness -----------------------------------------------------

def test_criterion_09_schedule():
    failures = []
    if abs(lr_at_epoch(0) - 1e-3) > 1e-9:
        failures.append(f"lr(0) = {lr_at_epoch(0)!r}")
    if abs(lr_at_epoch(50) - 1e-5) > 1e-9:
        failures.append(f"lr(50) = {lr_at_epoch(50)!r}")
    report(9, "cosine schedule hits its endpoints", failures)


# -- 10: determinism ---------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    def one_run(out):
        config = TrainConfig(
            image_size=32, base_channels=4, with_gpm=True, seeds=(0,),
            epochs=2, t_max=2, batch_size=4, val_fraction=0.25,
            augment=True, synthetic_samples=16, num_threads=1,
        )
        dataset = SyntheticPolypDataset(16, image_size=32, seed=7)
        model = build_seeded_model(config, 0)
        state = train_run(config, model, dataset, 0, out_dir=str(out))
        digest = hashlib.sha256((out / "best.npz").read_bytes()).hexdigest()
        return state.history[0][2], digest

    loss_a, hash_a = one_run(tmp_path / "a")
    loss_b, hash_b = one_run(tmp_path / "b")
    failures = []
    if loss_a != loss_b:
        failures.append(f"epoch-0 loss differs: {loss_a!r} vs {loss_b!r}")
    if hash_a != hash_b:
        failures.append(f"checkpoint hashes differ: {hash_a[:12]} vs {hash_b[:12]}")
    report(10, "same seed reproduces loss and checkpoint bit-for-bit", failures,
           f"sha256 {hash_a[:12]}")
