"""Acceptance suite: one test per shipping criterion, with a pass line each.

Run with ``pytest -s tests/test_acceptance.py`` to see the per-criterion
lines; without ``-s`` they appear only for failing tests. The training-based
criteria (7 and 8) dominate the runtime; the whole module finishes well under
the stated budgets on an ordinary CPU.
"""

import math
import time
from pathlib import Path

import numpy as np
import pytest

from excount.checkpoint import save_checkpoint
from excount.cli import main as cli_main
from excount.config import mixed_scale_config, tiny_config
from excount.counter import RedundantCountMap, WindowGeometry
from excount.data import build_synthetic_dataset, load_sample, make_splits
from excount.density import density_from_dots, redundant_gt
from excount.encoder import decouple_attention
from excount.geometry import build_exemplar_set, magnitude_embedding, scale_prior, ExemplarBox
from excount.metrics import compute_metrics, stratify_by_exemplar_scale, throughput
from excount.model import CountingModel
from excount.normalizer import NormalizedCountMap, image_count, normalize, normalize_naive
from excount.optim import AdamW
from excount.presets import mixed_scale_categories, tiny_categories
from excount.training import (
    TrainConfig,
    fit,
    gated_l1_loss,
    predict_counts,
    tiny_train_config,
)
from excount.visualizer import render, visualize


def report(n: int, ok: bool, text: str) -> None:
    print(f"\nACCEPTANCE {n}: {'PASS' if ok else 'FAIL'} - {text}")
    assert ok, f"criterion {n}: {text}"


# -- shared datasets ---------------------------------------------------------------


@pytest.fixture(scope="module")
def tiny_dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("tiny_ds")
    records = build_synthetic_dataset(out, tiny_categories(), 250, seed=11)
    splits = make_splits(records, (0.8, 0.2), seed=11)
    ids = {n: set(v) for n, v in splits.items()}
    train = [load_sample(out, a) for a in records if a.image_path in ids["train"]]
    val = [load_sample(out, a) for a in records if a.image_path in ids["val"]]
    assert len(train) == 200 and len(val) == 50
    return out, train, val


def test_criterion_1_gradient_fidelity(capsys):
    t0 = time.perf_counter()
    code = cli_main(["gradcheck", "--seeds", "5", "--tol", "1e-4", "--eps", "1e-5"])
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        report(1, code == 0 and elapsed < 120,
               f"all ops + tiny-model gated loss vs central differences, 5 seeds, "
               f"rel tol 1e-4, {elapsed:.0f}s (< 120s)")


def test_criterion_2_normalizer_bit_exact(capsys):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    checked = 0
    for case in range(50):
        k_p = int(rng.integers(1, 9))
        if case % 5 == 0:
            z_p = k_p  # tiling
        else:
            z_p = int(rng.integers(1, k_p + 1))
        if case % 7 == 0:
            gh = gw = k_p  # single-window grid
        else:
            gh = int(rng.integers(k_p, 3 * k_p + 6))
            gw = int(rng.integers(k_p, 3 * k_p + 6))
        geo = WindowGeometry(k=k_p, z=z_p, patch=1, grid=(gh, gw))
        r = RedundantCountMap(values=rng.normal(size=geo.grid_out) * 5, geometry=geo, branch=0)
        a, b = normalize(r), normalize_naive(r)
        assert np.array_equal(a.values, b.values), f"config {case}: mismatch"
        checked += 1
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        report(2, checked == 50 and elapsed < 30,
               f"efficient == naive triple-loop bit-exactly on {checked} configs, "
               f"{elapsed:.1f}s (< 30s)")


def test_criterion_3_count_conservation(capsys):
    worst = 0.0
    for k in (32, 64, 128):
        z, p = 16, 16
        side = 6 * k
        geo = WindowGeometry(k=k, z=z, patch=p, grid=(side // p, side // p))
        for trial in range(100):
            rng = np.random.default_rng(1000 * k + trial)
            n = int(rng.integers(5, 16))
            dots = rng.uniform(2 * k, side - 2 * k, size=(n, 2))
            assert (dots >= k).all() and (dots <= side - k).all()  # stated precondition
            d = density_from_dots(dots, (side, side), s=16.0)
            total = image_count(normalize(redundant_gt(d, geo)))
            rel = abs(total - n) / n
            worst = max(worst, rel)
            assert rel < 0.01, f"k={k} trial={trial}: rel err {rel:.4f}"
    with capsys.disabled():
        report(3, True,
               f"100 layouts x geometries (32,16),(64,16),(128,16): worst "
               f"|count err| {worst:.2e} (< 1%)")


def test_criterion_4_decoupled_attention_equivalence(capsys):
    worst = 0.0
    for seed in range(5):
        cfg = tiny_config()
        model = CountingModel(cfg, seed=seed)
        rng = np.random.default_rng(seed + 100)
        img = rng.uniform(size=(cfg.image_size, cfg.image_size, 3))
        es = build_exemplar_set(img, [(6, 8, 30, 28), (60, 50, 92, 88)], cfg.exemplar_size)
        seq = model.encoder.tokenize_joint(img, es)
        _, attn = model.encoder.encode(seq, es.magnitude)
        q, k = model.encoder.last_q, model.encoder.last_k
        nq = seq.n_q
        pairs = [
            (attn.a_query, q[:, :nq], k[:, :nq]),
            (attn.a_class, q[:, :nq], k[:, nq:]),
            (attn.a_match, q[:, nq:], k[:, :nq]),
            (attn.a_exp, q[:, nq:], k[:, nq:]),
        ]
        for quad, qs, ks in pairs:
            recomputed = np.mean(qs @ ks.transpose(0, 2, 1), axis=0)
            worst = max(worst, float(np.abs(recomputed - quad).max()))
        assert np.array_equal(attn.reassemble(), model.encoder.last_scores_mean)
    with capsys.disabled():
        report(4, worst < 1e-10,
               f"every quadrant == independent sub-matrix product "
               f"(worst abs err {worst:.2e} < 1e-10); reassembly bit-exact")


def test_criterion_5_branch_gating(capsys):
    cfg = tiny_config()
    model = CountingModel(cfg, seed=0)
    samples_dir_rng = np.random.default_rng(77)
    from excount.data import SynthConfig, synth_scene

    samples = []
    for i in range(25):
        s, _ = synth_scene(SynthConfig(category="d", seed=900 + i, count_range=(3, 10)))
        samples.append(s)
    opt = AdamW(model.parameters(), weight_decay=1e-4)
    steps = 0
    for step in range(50):
        sample = samples[step % len(samples)]
        es = build_exemplar_set(sample.exemplar_image, sample.boxes, cfg.exemplar_size)
        density = density_from_dots(sample.points, sample.image.shape[:2], es.scale_prior)
        maps, _, grid = model.forward_branches(sample.image, es, mode="train")
        gts = {i: redundant_gt(density, g) for i, g in enumerate(model.geometries(grid))}
        loss = gated_l1_loss(maps, gts, es.scale_prior, cfg.branch_thresholds)
        model.zero_grad()
        loss.backward()
        sel = model.selected_branch(es) - 1
        for bi in range(3):
            for name, p in model.branch_parameters(bi).items():
                if bi == sel:
                    assert p.grad is not None, f"step {step}: selected branch has no grad"
                else:
                    assert p.grad is None or not p.grad.any(), \
                        f"step {step}: non-selected {name} has nonzero grad"
        if step % 10 == 0:  # bit-identical loss under non-selected perturbation
            saved = {bi: {n: t.data.copy() for n, t in model.branch_parameters(bi).items()}
                     for bi in range(3) if bi != sel}
            for bi, params in saved.items():
                for n, t in model.branch_parameters(bi).items():
                    t.data = t.data + 7.5
            maps2, _, _ = model.forward_branches(sample.image, es, mode="train")
            loss2 = gated_l1_loss(maps2, gts, es.scale_prior, cfg.branch_thresholds)
            assert float(loss2.data) == float(loss.data), f"step {step}: loss changed"
            for bi, params in saved.items():
                for n, t in model.branch_parameters(bi).items():
                    t.data = params[n]
        opt.step(lr=5e-4)
        steps += 1
    with capsys.disabled():
        report(5, steps == 50,
               "50 training steps: non-selected branch grads exactly zero; "
               "perturbing them leaves the loss bit-identical")


def test_criterion_6_closed_form_instances(capsys):
    def box(w, h):
        return ExemplarBox.from_coords(0, 0, w, h)

    ok = (
        magnitude_embedding([box(64, 64)], 64, 64) == 1.0
        and magnitude_embedding([box(32, 32)], 64, 64) == 4.0
        and magnitude_embedding([box(32, 32), box(64, 64), box(128, 128)], 64, 64) == 1.75
        and scale_prior([box(64, 64)]) == 64.0
        and scale_prior([box(32, 32)] * 3) == 32.0
        and scale_prior([box(16, 16), box(32, 32), box(48, 48)]) == 32.0
    )
    c = NormalizedCountMap(values=np.full((5, 8), 0.25), total=10.0)
    vis = visualize(c, np.random.default_rng(0).uniform(size=(5, 8)), magnitude=4.0)
    ok = ok and vis.n_top == 40
    with capsys.disabled():
        report(6, ok, "magnitude, scale prior, and hint-budget arithmetic exact "
                      "on all tabulated instances")


_trained_tiny: dict = {}


def test_criterion_7_training_sanity(tiny_dataset, capsys):
    _, train, val = tiny_dataset
    mean_count = float(np.mean([len(s.points) for s in val]))
    mae_target = 0.3 * mean_count
    t0 = time.perf_counter()
    successes = 0
    details = []
    for seed in range(3):
        model = CountingModel(tiny_config(), seed=seed)
        tcfg = tiny_train_config(epochs=30, seed=seed)

        def hit(rec):
            return rec.val_mae <= mae_target and (rec.val_r2 or -1) >= 0.6

        res = fit(train, val, model, tcfg, stop_fn=hit)
        reached = [r for r in res.history if hit(r)]
        if reached:
            successes += 1
            details.append(f"seed {seed}: MAE {reached[0].val_mae:.2f} "
                           f"R2 {reached[0].val_r2:.2f} @ epoch {reached[0].epoch}")
            # the first-epoch baseline must improve by >= 50% as well
            assert res.best_val_mae <= 0.5 * res.history[0].val_mae
            if not _trained_tiny:
                _trained_tiny["state"] = res.best_state
                _trained_tiny["config"] = tiny_config()
        else:
            details.append(f"seed {seed}: not reached in 30 epochs")
    elapsed = time.perf_counter() - t0
    with capsys.disabled():
        report(7, successes >= 2 and elapsed < 1200,
               f"tiny preset, target MAE <= {mae_target:.2f} & R2 >= 0.6: "
               f"{successes}/3 seeds in {elapsed / 60:.1f} min (< 20); " + "; ".join(details))


def test_criterion_7b_blank_image_counts_near_zero(tmp_path, capsys):
    # empirical zero-signal check on the model trained in criterion 7
    if not _trained_tiny:
        pytest.skip("no trained tiny model available")
    from PIL import Image

    from excount.imageops import to_uint8

    cfg = _trained_tiny["config"]
    model = CountingModel(cfg, seed=0)
    model.load_state_arrays(_trained_tiny["state"])
    ckpt = tmp_path / "trained.ckpt"
    save_checkpoint(ckpt, cfg, model.state_arrays())

    rng = np.random.default_rng(0)
    blank = np.clip(np.full((128, 128, 3), (0.12, 0.14, 0.1))
                    + rng.uniform(-0.03, 0.03, (128, 128, 1)), 0, 1)
    blank_path = tmp_path / "blank.png"
    Image.fromarray(to_uint8(blank), mode="RGB").save(blank_path, format="PNG")
    out = tmp_path / "count_out"
    code = cli_main(["count", "--checkpoint", str(ckpt), "--image", str(blank_path),
                     "--boxes", "40,40,72,72", "--out", str(out)])
    assert code == 0
    from excount.normalizer import load_count_map

    count = float(load_count_map(out / "count_map.txt").sum())
    with Image.open(out / "detection.png") as im:
        det = np.asarray(im)
    hint_empty = np.array_equal(det, to_uint8(blank))
    with capsys.disabled():
        report(7, count < 0.5 and hint_empty,
               f"blank image through the trained model counts {count:.3f} (~0) "
               f"with an empty hint overlay")


def test_criterion_8_multibranch_directional(tmp_path_factory, capsys):
    # Mixed-scale scenes: small discs/ellipses (exemplar scale ~10-25) plus
    # large multi-glob clusters (scale ~45-75) surrounded by same-coloured
    # half-size decoy clusters that are not counted. A 32 px window sees only
    # interchangeable globs and cannot attribute them to counted or decoy
    # instances, while the bigger branches see whole instances.
    out = tmp_path_factory.mktemp("mixed_ds")
    records = build_synthetic_dataset(out, mixed_scale_categories(256), 240, seed=21)
    splits = make_splits(records, (0.75, 0.25), seed=21)
    ids = {n: set(v) for n, v in splits.items()}
    train = [load_sample(out, a) for a in records if a.image_path in ids["train"]]
    val = [load_sample(out, a) for a in records if a.image_path in ids["val"]]
    scale_priors = [
        build_exemplar_set(s.exemplar_image, s.boxes, 32).scale_prior for s in val
    ]

    results = {}
    for name, ks in (("multi", [32, 64, 128]), ("single32", [32])):
        cfg = mixed_scale_config(256)
        cfg.branch_ks = ks
        cfg.branch_thresholds = [float(k) for k in ks[:-1]]
        model = CountingModel(cfg, seed=0)
        tcfg = TrainConfig(base_lr=1e-3, epochs=14, weight_decay=1e-4,
                           mosaic_prob=0.3, sigma_divisor=8.0, seed=0)
        res = fit(train, val, model, tcfg)
        model.load_state_arrays(res.best_state)
        preds, gts = predict_counts(model, val)
        small, large = stratify_by_exemplar_scale(scale_priors, preds, gts,
                                                  small_max=32.0, large_min=40.0)
        results[name] = (small, large)

    m_small, m_large = results["multi"]
    s_small, s_large = results["single32"]
    under = np.mean([0 < r <= 0.8 for r in s_large.ratios])
    large_ok = m_large.mae <= s_large.mae
    # "within 15%" guards the multi model against losing the small stratum;
    # being better than the single branch satisfies the claim a fortiori
    small_ok = m_small.mae <= 1.15 * s_small.mae
    under_ok = s_large.mpe < 0  # the single small-block counter underestimates
    with capsys.disabled():
        report(8, large_ok and small_ok and under_ok,
               f"large stratum MAE: multi {m_large.mae:.2f} <= single32 {s_large.mae:.2f} "
               f"(single32 MPE {s_large.mpe:+.2f}, {100 * under:.0f}% of its ratios in (0,0.8]); "
               f"small stratum: multi {m_small.mae:.2f} <= 1.15 x single32 {s_small.mae:.2f}")


def test_criterion_9_metrics_oracle(capsys):
    rng = np.random.default_rng(123)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(2, 40))
        gts = rng.uniform(0, 80, n)
        preds = gts + rng.normal(0, 8, n)
        rep = compute_metrics(preds, gts)
        # independent brute force
        mae = sum(abs(p - c) for p, c in zip(preds, gts)) / n
        rmse = math.sqrt(sum((p - c) ** 2 for p, c in zip(preds, gts)) / n)
        total = sum(gts)
        wca = 1 - sum(abs(c - p) for p, c in zip(preds, gts)) / total
        cbar = total / n
        var = sum((cbar - c) ** 2 for c in gts)
        r2 = 1 - sum((p - c) ** 2 for p, c in zip(preds, gts)) / var
        mpe = sum((p - c) / (c + 1e-6) for p, c in zip(preds, gts)) / n
        for got, want in ((rep.mae, mae), (rep.rmse, rmse), (rep.wca, wca),
                          (rep.r2, r2), (rep.mpe, mpe)):
            worst = max(worst, abs(got - want))
        assert worst < 1e-9
    degenerate_ok = (
        compute_metrics([1.0, 2.0], [0.0, 0.0]).wca is None
        and compute_metrics([1.0, 2.0], [5.0, 5.0]).r2 is None
    )
    with capsys.disabled():
        report(9, worst < 1e-9 and degenerate_ok,
               f"1000 random pairs vs brute force (worst dev {worst:.1e} < 1e-9); "
               f"degenerate WCA/R2 reported absent")


def test_criterion_10_visualizer_contract(tmp_path, capsys):
    rng = np.random.default_rng(5)
    for trial in range(100):
        gh, gw = int(rng.integers(3, 12)), int(rng.integers(3, 12))
        vals = rng.uniform(0, 0.6, size=(gh, gw))
        c = NormalizedCountMap(values=vals, total=float(vals.sum()))
        m = rng.uniform(size=(gh, gw))
        mag = float(rng.uniform(0.2, 5.0))
        det = visualize(c, m, mag, "detection")
        den = visualize(c, m, mag, "density")
        expect = min(max(int(math.floor(c.total * mag + 0.5)), 0), gh * gw)
        assert det.n_top == expect == int(det.hint.sum())
        assert np.array_equal(det.hint, den.hint)
    base = np.random.default_rng(6).integers(0, 255, size=(64, 64, 3)).astype(np.uint8)
    c = NormalizedCountMap(values=np.full((8, 8), 0.1), total=6.4)
    m = np.random.default_rng(7).uniform(size=(8, 8))
    p1, p2 = tmp_path / "r1.png", tmp_path / "r2.png"
    render(visualize(c, m, 2.0, "density"), base, str(p1))
    render(visualize(c, m, 2.0, "density"), base, str(p2))
    deterministic = p1.read_bytes() == p2.read_bytes()
    with capsys.disabled():
        report(10, deterministic,
               "hint cardinality == clamped round(sum(C)*M_e) on 100 inputs; "
               "modes share hints; renders byte-identical")


def test_criterion_11_throughput_report(tiny_dataset, tmp_path, capsys):
    data_dir, train, _ = tiny_dataset
    cfg = tiny_config()
    model = CountingModel(cfg, seed=0)
    ckpt = tmp_path / "tiny.ckpt"
    save_checkpoint(ckpt, cfg, model.state_arrays())
    out = tmp_path / "eval_out"
    code = cli_main(["eval", "--checkpoint", str(ckpt), "--data", str(data_dir),
                     "--split", "val.txt", "--out", str(out), "--fps-iters", "15"])
    emitted = code == 0 and "fps" in (out / "report.json").read_text()

    probe = train[0]
    es = build_exemplar_set(probe.exemplar_image, probe.boxes, cfg.exemplar_size)
    medians = [throughput(lambda: model.infer(probe.image, es), warmup=3, iters=15).ms_per_frame
               for _ in range(3)]
    spread = (max(medians) - min(medians)) / float(np.median(medians))
    with capsys.disabled():
        report(11, emitted and spread < 0.2,
               f"eval emits FPS; repeated medians {['%.1f' % m for m in medians]} ms, "
               f"spread {100 * spread:.1f}% (< 20%)")
