"""End-to-end acceptance suite.

Each test checks one numbered criterion and records a pass/fail line that is
printed in the terminal summary.  The desk-scale runs are shared through
module fixtures, so the whole file takes roughly an hour on one CPU core.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from rectiplane.autodiff import (
    batch_norm,
    conv2d,
    dropout,
    fully_connected,
    global_reduce,
    l2_loss,
    maxpool2,
    softmax_cross_entropy,
)
from rectiplane.cli import main
from rectiplane.geometry import (
    AngleBins,
    Homography,
    PerspectiveEncoding,
    PlanarParams,
    compose,
    decompose_stagewise,
    homography_from_params,
    invert,
    rescale,
    stagewise_homography,
)
from rectiplane.imaging import (
    ParamRanges,
    SceneSpec,
    load_split,
    make_splits,
    psnr,
    render_scene,
    sample_params,
    warp,
)
from rectiplane.models import DESK_CONFIG, band_bank, bank_responses, estimate_rotation, rectify_images
from rectiplane.stn import bilinear_sample, grid_from_perspective, grid_from_rotation
from rectiplane.training import (
    LossConfig,
    TrainConfig,
    evaluate,
    format_angle_table,
    format_regression_table,
    mean_predictor_report,
    train_stage,
)

pytestmark = pytest.mark.acceptance

COUNTS = {"train": 2000, "val": 200, "test": 200}
SIZE = 64
PERSPECTIVE = dict(learning_rate=1e-3, batch_size=16, epochs=20, patience=20, schedule="cosine")
ANGLE = dict(learning_rate=1e-3, batch_size=32, epochs=8, patience=8)
# half-range in degrees -> bins covering it
RANGES = {30: AngleBins(-30.0, 30.0, 4.0), 45: AngleBins(-45.0, 45.0, 2.0), 60: AngleBins(-60.0, 60.0, 4.0)}


def desk_dataset(root, half_deg, seed):
    bins = RANGES[half_deg]
    make_splits(root, COUNTS, seed=seed, size=SIZE, bins=bins,
                ranges=ParamRanges.for_theta_span(math.radians(2 * half_deg)))
    return {s: load_split(root / s) for s in COUNTS}


def perspective_run(data, bins):
    cfg = TrainConfig(net=replace(DESK_CONFIG, bins=bins), **PERSPECTIVE)
    start = time.perf_counter()
    with threadpool_limits(1):
        res = train_stage(data["train"], data["val"], cfg)
    elapsed = time.perf_counter() - start
    train_rep = evaluate(data["train"], res.model, "train")
    val_rep = evaluate(data["val"], res.model, "val")
    base = mean_predictor_report(data["val"], "val", data["train"].encoded.mean(axis=0))
    return {"result": res, "train": train_rep, "val": val_rep, "baseline": base, "seconds": elapsed}


@pytest.fixture(scope="module")
def data30(tmp_path_factory):
    return desk_dataset(tmp_path_factory.mktemp("desk30"), 30, seed=2024)


@pytest.fixture(scope="module")
def persp30(data30):
    return perspective_run(data30, RANGES[30])


@pytest.fixture(scope="module")
def angle_runs(data30, persp30):
    init = persp30["result"].checkpoint
    runs = {}
    for name, variant, mu in [("Shared", "shared", 0.0), ("Independent", "independent", 0.0), ("l2 Reg.", "shared", 0.01)]:
        cfg = TrainConfig(stage="angle", variant=variant, loss=LossConfig(mu=mu), **ANGLE)
        with threadpool_limits(1):
            res = train_stage(data30["train"], data30["val"], cfg, init=init)
        runs[name] = {
            "result": res,
            "val": evaluate(data30["val"], res.model, "val"),
            "test": evaluate(data30["test"], res.model, "test"),
        }
    return runs


# ---------------------------------------------------------------- 1-3: unit-level oracles


def test_criterion_1_gradient_suite(gradcheck, criterion):
    rng = np.random.default_rng(1)
    start = time.perf_counter()
    grid = rng.uniform(-2.3, 2.3, size=(2, 3, 3, 2))
    grid = np.where(np.abs(grid - np.round(grid)) < 0.05, grid + 0.1, grid)
    pool_in = rng.permutation(2 * 4 * 4 * 2).reshape(2, 4, 4, 2) * 0.1  # distinct values: no pooling ties
    checks = {
        "conv2d": (lambda x, w, b: conv2d(x, w, b), [rng.normal(size=(2, 5, 5, 2)), rng.normal(size=(3, 3, 2, 3)), rng.normal(size=3)]),
        "maxpool2": (maxpool2, [pool_in]),
        "batch_norm": (
            lambda x, g, b: batch_norm(x, g, b, np.zeros(2), np.ones(2), True),
            [rng.normal(size=(3, 2, 2, 2)), rng.normal(size=2), rng.normal(size=2)],
        ),
        "fully_connected": (fully_connected, [rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=2)]),
        "softmax_cross_entropy": (lambda z: softmax_cross_entropy(z, np.array([0, 3, 1])), [rng.normal(size=(3, 5))]),
        "l2_loss": (lambda p: l2_loss(p, np.ones((3, 2))), [rng.normal(size=(3, 2))]),
        "dropout (off)": (lambda x: dropout(x, 0.5, False), [rng.normal(size=(3, 4))]),
        "global max": (lambda x: global_reduce(x, "max"), [pool_in]),
        "global avg": (lambda x: global_reduce(x, "avg"), [rng.normal(size=(2, 3, 3, 2))]),
        "perspective grid": (lambda e: grid_from_perspective(e, (4, 5), PerspectiveEncoding(), 256 / 5), [rng.uniform(3, 17, (2, 2))]),
        "rotation grid": (lambda t: grid_from_rotation(t, (4, 5)), [rng.uniform(-1, 1, 2)]),
        "bilinear sample": (lambda f, g: bilinear_sample(f, g, fill=0.2), [rng.normal(size=(2, 5, 5, 2)), grid]),
    }
    worst = {name: max(gradcheck(fn, arrays)) for name, (fn, arrays) in checks.items()}
    elapsed = time.perf_counter() - start
    name, err = max(worst.items(), key=lambda kv: kv[1])
    ok = err < 1e-4 and elapsed < 120
    assert criterion(1, ok, f"{len(checks)} ops, worst relative error {err:.2e} ({name}), {elapsed:.1f}s")


def test_criterion_2_geometry_suite(criterion):
    rng = np.random.default_rng(2)
    ident = Homography.identity()
    group = 0.0
    hs = [
        homography_from_params(PlanarParams(rng.uniform(-0.8, 0.8), rng.uniform(0.5, 1.5), *rng.uniform(-9e-4, 9e-4, 2), *rng.uniform(-20, 20, 2)))
        for _ in range(300)
    ]
    for a, b, c in zip(hs, hs[1:], hs[2:]):
        group = max(group,
                    np.abs(compose(compose(a, b), c).m - compose(a, compose(b, c)).m).max(),
                    np.abs(compose(a, invert(a)).m - ident.m).max())
    eq3 = 0.0
    for _ in range(1000):
        t = rng.uniform(-math.pi / 4, math.pi / 4)
        px, py = rng.uniform(-9e-4, 9e-4, 2)
        persp, sim = decompose_stagewise(PlanarParams(theta=t, px=px, py=py))
        c, s = math.cos(t), math.sin(t)
        one = homography_from_params(PlanarParams(theta=t, px=px * c - py * s, py=px * s + py * c))
        eq3 = max(eq3, np.abs(compose(persp, sim).m - one.m).max())
    enc = PerspectiveEncoding()
    ps = np.linspace(-9e-4, 9e-4, 1001)
    codes = [enc.encode(p) for p in ps]
    bijective = np.allclose([enc.decode(u) for u in codes], ps, rtol=0, atol=1e-18) and np.all(np.diff(codes) > 0)
    worst_psnr = np.inf
    for i in range(100):
        spec = SceneSpec(line_count=4, line_thickness=8, line_spacing=9.6, blur_sigma=2.4)
        img = render_scene(spec, 96, i)
        h = rescale(stagewise_homography(sample_params(ParamRanges(), seed=rng)), 256 / 96)
        back = warp(warp(img, h), invert(h))
        gx, gy = np.meshgrid(np.arange(96) - 47.5, np.arange(96) - 47.5)
        # interior: pixels whose forward image stays a pixel inside the frame
        fx, fy, fz = h.m @ np.stack([gx.ravel(), gy.ravel(), np.ones(gx.size)])
        inside = ((np.abs(fx / fz) <= 46.5) & (np.abs(fy / fz) <= 46.5)).reshape(96, 96)
        inside &= (np.abs(gx) <= 46.5) & (np.abs(gy) <= 46.5)
        worst_psnr = min(worst_psnr, psnr(back[inside], img[inside]))
    ok = group < 1e-10 and eq3 < 1e-12 and bijective and worst_psnr >= 30.0
    assert criterion(2, ok, f"group laws {group:.1e}, stage-wise identity {eq3:.1e}, bijective={bijective}, "
                            f"worst round-trip PSNR {worst_psnr:.1f} dB")


def test_criterion_3_band_kernel_oracle(criterion):
    bins = AngleBins(-45.0, 45.0, 2.0)
    bank = band_bank(9, bins)
    c = np.arange(33) - 16.0
    gx, gy = np.meshgrid(c, c)
    angles = np.linspace(-45, 45, 180, endpoint=False) + 0.25
    hits = 0
    for a in angles:
        t = math.radians(a)
        img = np.clip(1.0 - np.abs(gx * math.sin(t) + gy * math.cos(t)), 0, 1)
        hits += int(np.argmax(bank_responses(img, bank)) == bins.index(t))
    frac = hits / len(angles)
    assert criterion(3, frac >= 0.9, f"argmax picks the nearest bin for {hits}/{len(angles)} = {frac:.1%} of line images")


# ---------------------------------------------------------------- 4-8: desk-scale training


def test_criterion_4_perspective_training(persp30, criterion):
    tr, va, base = persp30["train"], persp30["val"], persp30["baseline"]
    ratio = va.l1 / base.l1
    minutes = persp30["seconds"] / 60
    table = format_regression_table([("+-30 deg", tr, va), ("mean baseline", base, base)])
    ok = ratio <= 0.40 and tr.l1 < va.l1 and minutes < 30
    assert criterion(4, ok, f"val l1 {va.l1:.3f} = {ratio:.1%} of baseline {base.l1:.3f}, train l1 {tr.l1:.3f}, "
                            f"{minutes:.1f} min", table)


def test_criterion_5_angle_training(angle_runs, criterion):
    shared, indep = angle_runs["Shared"], angle_runs["Independent"]
    chance = 1.0 / DESK_CONFIG.bins.count
    top1, top5 = shared["test"].top1, shared["test"].top5
    table = format_angle_table([(n, angle_runs[n]["val"], angle_runs[n]["test"]) for n in ("Shared", "Independent")])
    direction = "shared top-1 >= independent" if top1 >= indep["test"].top1 else "shared top-1 < independent"
    ok = top1 >= 5 * chance and top5 >= 0.8
    assert criterion(5, ok, f"shared test top-1 {top1:.1%} ({top1 / chance:.1f}x chance), top-5 {top5:.1%}; "
                            f"independent top-1 {indep['test'].top1:.1%} ({direction}); "
                            f"test var {shared['test'].var:.3f} vs {indep['test'].var:.3f}", table)


def test_criterion_6_mu_ablation(angle_runs, criterion):
    plain, reg = angle_runs["Shared"], angle_runs["l2 Reg."]
    budget = lambda r: {k: r["result"].checkpoint.metadata["train"][k] for k in ("epochs", "batch_size", "learning_rate")}
    same_budget = budget(plain) == budget(reg)
    schema = all(r[s].top1 is not None and r[s].var is not None for r in (plain, reg) for s in ("val", "test"))
    flagged = reg["result"].checkpoint.metadata["l2_angle_penalty"] and not plain["result"].checkpoint.metadata["l2_angle_penalty"]
    table = format_angle_table([(n, angle_runs[n]["val"], angle_runs[n]["test"]) for n in ("Shared", "l2 Reg.")])
    ok = same_budget and schema and flagged
    assert criterion(6, ok, f"mu=0 top-1 {plain['test'].top1:.1%} var {plain['test'].var:.2f}; "
                            f"mu=0.01 top-1 {reg['test'].top1:.1%} var {reg['test'].var:.2f}", table)


def test_criterion_7_angle_range_robustness(tmp_path_factory, persp30, criterion):
    runs = {30: persp30}
    for half in (45, 60):
        data = desk_dataset(tmp_path_factory.mktemp(f"desk{half}"), half, seed=2024 + half)
        runs[half] = perspective_run(data, RANGES[half])
    l1 = {h: r["val"].l1 for h, r in runs.items()}
    spread = max(l1.values()) / min(l1.values())
    table = format_regression_table([(f"+-{h} deg", r["train"], r["val"]) for h, r in runs.items()])
    detail = ", ".join(f"+-{h}: {v:.3f}" for h, v in l1.items())
    assert criterion(7, spread <= 2.0, f"val l1 {detail}; max/min {spread:.2f}", table)


def test_criterion_8_end_to_end_rectify(data30, angle_runs, criterion):
    model = angle_runs["Shared"]["result"].model
    test = data30["test"]
    bins = DESK_CONFIG.bins
    zero = bins.index(0.0)
    out = rectify_images(model, test.images[:50])
    residual = np.array([estimate_rotation(img, bins, k=5) - zero for img in out["rectified"]])
    frac = float(np.mean(np.abs(residual) <= 2))
    # undistorted scenes should come back with a near-zero predicted angle
    flat = np.stack([render_scene(SceneSpec(line_count=5, line_thickness=3, line_spacing=4, blur_sigma=0.6), SIZE, i)
                     for i in range(20)])[..., None]
    near = float(np.mean(np.abs(rectify_images(model, flat)["bin"] - zero) <= 1))
    assert criterion(8, frac >= 0.7, f"residual rotation within 2 bins for {frac:.0%} of 50 test samples; "
                                     f"undistorted inputs within 1 bin of 0 deg: {near:.0%}")


# ---------------------------------------------------------------- 9: reproducibility


def test_criterion_9_reproducibility(tmp_path, criterion):
    def once(tag):
        root = tmp_path / tag
        assert main(["gen-data", "--count", "200", "--seed", "5", "--threads", "1", "--out-dir", str(root / "data")]) == 0
        common = ["--data", str(root / "data"), "--seed", "9", "--threads", "1", "--epochs", "2", "--out-dir", str(root / "runs")]
        assert main(["train", *common]) == 0
        assert main(["train", *common, "--stage", "angle", "--init-from", str(root / "runs" / "perspective.rpln")]) == 0
        files = [f"data/{s}/manifest.jsonl" for s in COUNTS] + ["runs/perspective.rpln", "runs/angle-shared.rpln"]
        return {f: (root / f).read_bytes() for f in files}

    a, b = once("a"), once("b")
    same = [f for f in a if a[f] == b[f]]
    assert criterion(9, len(same) == len(a), f"{len(same)}/{len(a)} manifests and checkpoints bit-identical across two runs")
