"""Acceptance criteria 1-10, each at its stated tolerance.

Every test records a one-line verdict that the session summary prints under
"acceptance criteria", then asserts it.
"""

import math
import time

import numpy as np
import pytest

import oracles
from conftest import ACCEPTANCE
from mixnet_pad import datamodel, synthdata
from mixnet_pad.cli import main as cli_main
from mixnet_pad.datamodel import Attack, AttackClass, MaskSubtype, label_for
from mixnet_pad.diagnostics import cam
from mixnet_pad.evalmetrics import ScoredSample, acer, apcer, bpcer, roc_and_eer
from mixnet_pad.features import extract, hog_features, lbp_histogram, multiscale_lbp
from mixnet_pad.imaging import load_batch
from mixnet_pad.mixnet import (DENSENET_ALPHAS, RESNET_ALPHAS, MixNetConfig, build,
                               gradient_routing_check, total_loss, weighted_total)
from mixnet_pad.protocols import mixnet_factory, run_ablation, run_cross_unseen, run_intra
from mixnet_pad.trainer import TrainConfig

BRANCHES = ["print", "replay", "mask"]


def record(n: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[n] = (bool(ok), detail)
    print(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
    assert ok, detail


# -- shared toy-scale run -------------------------------------------------------

@pytest.fixture(scope="module")
def toy_run(tmp_path_factory):
    """30 videos/class x 8 frames, 3 folds, small_cnn MixNet, 10 epochs."""
    root = tmp_path_factory.mktemp("acceptance")
    m = synthdata.generate(synthdata.SynthSpec(seed=3, videos_per_class=30, frames_per_video=8),
                           root / "train")
    m = datamodel.assign_folds(m, 3, 0)
    cfg = TrainConfig(epochs=10, seed=0)
    t0 = time.perf_counter()
    intra = run_intra(m, mixnet_factory(), cfg, out_dir=root)
    elapsed = time.perf_counter() - t0
    unseen = synthdata.generate_unseen_masks(
        synthdata.SynthSpec(seed=100, videos_per_class=10, frames_per_video=8), root / "unseen",
        include_silicone=True)
    return {"manifest": m, "config": cfg, "intra": intra, "seconds": elapsed, "unseen": unseen,
            "root": root}


# -- 1 ------------------------------------------------------------------------------

def test_criterion_1_labeling():
    table = {"genuine": (0, 0, 0, 0), "print": (1, 0, 0, 1), "replay": (0, 1, 0, 1),
             "mask": (0, 0, 1, 1)}
    got = {c: tuple(label_for(c)) for c in table}
    for st in MaskSubtype:
        got[f"mask:{st.value}"] = tuple(label_for(AttackClass(Attack.MASK, st)))
    bad = [c for c, v in got.items() if v != table[c.split(":")[0]]]
    record(1, not bad, f"{len(got)} classes checked, mismatches: {bad or 'none'}")


# -- 2 ------------------------------------------------------------------------------

def test_criterion_2_loss_arithmetic():
    rng = np.random.default_rng(2)
    worst = 0.0
    draws = [tuple(rng.uniform(0, 1, 3)) + (rng.uniform(0, 10),) for _ in range(98)]
    draws += [RESNET_ALPHAS, DENSENET_ALPHAS]
    for alphas in draws:
        losses = dict(zip(BRANCHES, rng.uniform(0, 5, 3)))
        final = float(rng.uniform(0, 5))
        got = weighted_total(losses, final, alphas, BRANCHES)
        direct = sum(a * losses[b] for a, b in zip(alphas, BRANCHES)) + alphas[3] * final
        worst = max(worst, abs(got - direct) / max(abs(direct), 1e-300))
    # the same arithmetic through real model outputs, both published coefficient sets
    model = build(MixNetConfig(), seed=0)
    x = rng.random((8, 3, 64, 64), dtype=np.float32)
    y = [label_for(c) for c in ("genuine", "print", "replay", "mask") * 2]
    out = model(x)
    for alphas in (RESNET_ALPHAS, DENSENET_ALPHAS):
        lb = total_loss(out, y, alphas)
        direct = (alphas[0] * lb.print_loss + alphas[1] * lb.replay_loss
                  + alphas[2] * lb.mask_loss + alphas[3] * lb.final_loss)
        worst = max(worst, abs(lb.total_loss - direct) / direct)
    record(2, worst < 1e-6, f"102 draws, max relative error {worst:.2e} (< 1e-6)")


# -- 3 ------------------------------------------------------------------------------

def test_criterion_3_gradient_routing():
    model = build(MixNetConfig(), seed=0)
    x = np.random.default_rng(3).random((8, 3, 64, 64), dtype=np.float32)
    y = [label_for(c) for c in ("genuine", "print", "replay", "mask") * 2]
    rep = gradient_routing_check(model, x, y, fd_per_branch=5, step=1e-4, tol=1e-3)
    cross = max(rep.cross_branch_max.values())
    per_branch = {b: sum(c.branch == b for c in rep.fd_checks) for b in BRANCHES}
    worst = max(c.rel_error for c in rep.fd_checks)
    ok = rep.ok and cross == 0.0 and min(per_branch.values()) >= 5 and worst < 1e-3
    record(3, ok, f"max cross-branch |grad| {cross}, FD probes/branch {per_branch}, "
                  f"max rel error {worst:.2e} (< 1e-3), kink-crossing probes skipped "
                  f"{sum(rep.fd_skipped.values())}")


# -- 4 ------------------------------------------------------------------------------

def _samples(att, gen):
    out = [ScoredSample(f"a{i}", float(s), 1, AttackClass(Attack.PRINT)) for i, s in enumerate(att)]
    return out + [ScoredSample(f"g{i}", float(s), 0, AttackClass(Attack.GENUINE))
                  for i, s in enumerate(gen)]


def test_criterion_4_metric_oracle(toy_run):
    rng = np.random.default_rng(4)
    mismatches = 0
    for k in range(100):
        na, ng = rng.integers(1, 51, 2)
        if k % 2:   # coarse grid: plenty of ties
            att, gen = list(rng.integers(0, 21, na) / 20), list(rng.integers(0, 21, ng) / 20)
        else:
            att, gen = list(rng.random(na)), list(rng.random(ng))
        s = _samples(att, gen)
        r = roc_and_eer(s)
        e, t, curve = oracles.eer(att, gen)
        ours = [(float(x), float(a), float(b)) for x, a, b in zip(r.thresholds, r.apcer, r.bpcer)]
        same = ours == curve and r.eer == e and r.eer_threshold == t
        for thr, a, b in curve:
            if math.isfinite(thr):
                same &= apcer(s, thr) == a and bpcer(s, thr) == b and acer(a, b) == (a + b) / 2
        mismatches += not same
    # provenance: every threshold of the toy run came from training scores only
    intra = toy_run["intra"]
    violations = 0
    for thr, test in zip(intra.thresholds, intra.test_manifests):
        violations += thr.source not in ("train", "dev")
        violations += bool(thr.fitted_on & {r.sample_id for r in test.records})
    violations += sum(f.threshold_source not in ("train", "dev") for f in intra.report.folds)
    record(4, mismatches == 0 and violations == 0,
           f"100 score sets, {mismatches} oracle mismatches; {violations} provenance violations")


# -- 5 ------------------------------------------------------------------------------

def test_criterion_5_features():
    rng = np.random.default_rng(5)
    problems = []
    for k in range(10):
        img = rng.integers(0, 256, (64, 64)).astype(np.float64)
        small = rng.integers(0, 256, tuple(rng.integers(3, 40, 2))).astype(np.float64)
        dims = (lbp_histogram(small).size, hog_features(img).size, multiscale_lbp(img).size,
                extract(img, "lbp59+hog324").values.size, extract(img, "mslbp").values.size)
        if dims != (59, 324, 833, 383, 833):
            problems.append(f"dims {dims}")
        off = float(rng.integers(1, 500))
        if not (np.array_equal(lbp_histogram(img), lbp_histogram(img + off))
                and np.array_equal(multiscale_lbp(img), multiscale_lbp(img + off))):
            problems.append("offset")
    for v in (0.0, 77.0, 255.0):
        if hog_features(np.full((64, 64), v)).any():
            problems.append(f"constant {v} HOG nonzero")
    oracle_bad = 0
    for k in range(20):
        img = rng.integers(0, 256, (16, 16)).astype(np.float64)
        oracle_bad += not np.array_equal(lbp_histogram(img), oracles.lbp_histogram(img))
    record(5, not problems and oracle_bad == 0,
           f"dims/invariance problems: {problems or 'none'}; LBP oracle mismatches {oracle_bad}/20")


# -- 6 ------------------------------------------------------------------------------

def test_criterion_6_intra_acer(toy_run):
    rep = toy_run["intra"].report
    secs = toy_run["seconds"]
    m = toy_run["manifest"]
    n_videos = len(m.videos()) // 4
    record(6, rep.acer.mean < 0.05 and secs < 600,
           f"{n_videos} videos/class x 8 frames, 3 folds: ACER {100 * rep.acer.mean:.2f}% "
           f"+/- {100 * rep.acer.std:.2f} (< 5%), training+scoring {secs:.0f} s (< 600 s)")


# -- 7 ------------------------------------------------------------------------------

def test_criterion_7_ablation(toy_run):
    res, _, _ = run_ablation(toy_run["manifest"], toy_run["config"], out_dir=toy_run["root"],
                             mixnet_result=toy_run["intra"])
    mix = res.reports["mixnet"].attack_wise_apcer
    ind = res.reports["independent-max"].attack_wise_apcer
    pairs = ", ".join(f"{a} {mix[a]:.3f} vs {ind[a]:.3f}" for a in res.attacks)
    flag = " FLAGGED (fewer than 2 wins)" if res.flagged else ""
    print(res.table)
    record(7, res.mixnet_wins > 0,
           f"MixNet APCER <= independent-max on {res.mixnet_wins}/3 attacks ({pairs}){flag}")


# -- 8 ------------------------------------------------------------------------------

def test_criterion_8_unseen(toy_run):
    rep = run_cross_unseen(toy_run["intra"], toy_run["unseen"], out_dir=toy_run["root"])
    rows = {k: rep.attack_wise_apcer.get(k) for k in ("paper", "half", "transparent", "mannequin")}
    present = all(v is not None for v in rows.values())
    worst = present and rows["transparent"] >= max(rows.values())
    detail = ", ".join(f"{k} {v:.3f}" for k, v in rows.items() if v is not None)
    record(8, present and worst, f"unseen APCER: {detail}; silicone (cross) "
                                 f"{rep.attack_wise_apcer.get('silicone', float('nan')):.3f}")


# -- 9 ------------------------------------------------------------------------------

def test_criterion_9_determinism(tmp_path):
    assert cli_main(["synth", "--seed", "9", "--out", str(tmp_path / "d")]) == 0
    assert cli_main(["folds", "--manifest", str(tmp_path / "d" / "manifest.jsonl"), "--k", "3",
                     "--out", str(tmp_path / "d")]) == 0
    argv = ["evaluate", "--protocol", "intra", "--manifest", str(tmp_path / "d" / "manifest.jsonl"),
            "--epochs", "2", "--seed", "4", "--out", str(tmp_path / "run")]
    snapshots = []
    for _ in range(2):
        assert cli_main(argv) == 0
        files = sorted((tmp_path / "run").glob("runs/intra/*/scores.jsonl"))
        snapshots.append({str(p): p.read_bytes() for p in files}
                         | {"run.json": (tmp_path / "run" / "run.json").read_bytes()})
    # a second command: the generator, run twice into separate directories
    synth = []
    for name in ("s1", "s2"):
        assert cli_main(["synth", "--seed", "9", "--out", str(tmp_path / name)]) == 0
        d = tmp_path / name
        synth.append({str(p.relative_to(d)): p.read_bytes()
                      for p in sorted(d.rglob("*")) if p.suffix in (".png", ".jsonl")})
    same_synth = len(synth[0]) == 49 and synth[0] == synth[1]
    ok = len(snapshots[0]) == 4 and snapshots[0] == snapshots[1] and same_synth
    record(9, ok, f"evaluate run twice: {len(snapshots[0]) - 1} scores.jsonl files + run.json "
                  f"{'byte-identical' if snapshots[0] == snapshots[1] else 'DIFFER'}; synth twice: "
                  f"{len(synth[0])} files {'byte-identical' if same_synth else 'DIFFER'}")


# -- 10 -----------------------------------------------------------------------------

def test_criterion_10_cam(toy_run):
    intra = toy_run["intra"]
    region = synthdata.signature_region((64, 64))
    area = (region[0].stop - region[0].start) * (region[1].stop - region[1].start) / (64 * 64)
    hits = total = 0
    ratios = []
    for model, test in zip(intra.models, intra.test_manifests):
        idx = [i for i, r in enumerate(test.records) if r.attack_class.value is Attack.PRINT]
        x = load_batch(test, idx)
        for img in x:
            frac = cam(model, img, "print").mass_fraction(region)
            ratios.append(frac / area)
            hits += frac >= 2 * area
            total += 1
    share = hits / total
    record(10, share >= 0.8, f"{hits}/{total} print test frames ({100 * share:.1f}%) put >= 2x "
                             f"uniform mass in the signature region (median {np.median(ratios):.2f}x)")
