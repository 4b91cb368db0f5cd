"""Acceptance checks, one test per criterion; each records a PASS/FAIL line."""
import time

import numpy as np
import pytest

from hypotrack import metrics, oracles
from hypotrack.cli import main
from hypotrack.engine import EngineConfig, generate, init_pool, track_sequence
from hypotrack.features import BatchContext, FeatureConfig
from hypotrack.io import (read_detections, read_results, read_trajectories, write_detections, write_ground_truth,
                          write_results)
from hypotrack.scorer import OptimizerState, ScorerModel, load_checkpoint, save_checkpoint
from hypotrack.scoring import IoUScorer, ModelScorer, OracleScorer, idf_rows
from hypotrack.synth import SceneSpec, synth_scene, synth_suite
from hypotrack.training import TrainConfig, train


def test_1_gradient_correctness(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    checks = [oracles.gradient_check(int(rng.integers(2 ** 31)), n_frames=int(rng.integers(2, 13)), step=1e-4)
              for _ in range(10)]
    secs = time.perf_counter() - t0
    worst = max(c.worst for c in checks)
    ok = all(c.passed for c in checks) and secs < 60
    verdict("1 gradient correctness", ok, f"10 instances, worst relative error {worst:.2e} (<= 1e-3), {secs:.1f}s")
    assert ok


def test_2_score_metric_consistency(verdict):
    c = oracles.score_metric_consistency(1000, seed=7)
    verdict("2 score/metric consistency", c.passed, f"{c.count} pairs, max |score - idf| = {c.max_abs_diff:.1e}")
    assert c.passed


def test_3_hypothesis_count_linearity(verdict):
    rng = np.random.default_rng(3)
    dets, sizes, count_sizes, lost = [], [], [], 0
    while len(dets) < 14:
        spec = SceneSpec(n_people=int(rng.integers(1, 56)), n_frames=9, image_width=1920, image_height=1080,
                         seed=int(rng.integers(2 ** 31)))
        scene = synth_scene(spec)
        fc = FeatureConfig(image_width=spec.image_width, image_height=spec.image_height)
        ctx = BatchContext(scene.detections, 0, spec.n_frames, fc)
        if not 10 <= len(ctx) <= 500:
            continue
        scorer = OracleScorer(ctx, scene.gts)
        pool = generate(init_pool(ctx), scorer, EngineConfig())
        by_count = generate(init_pool(ctx), scorer, EngineConfig(pruning="count"))
        # a trajectory counts as recovered when some hypothesis reaches IDF 0.9 on it
        found = idf_rows(ctx, pool.rows, scorer.gt_boxes).max(axis=0) >= 0.9
        found_count = idf_rows(ctx, by_count.rows, scorer.gt_boxes).max(axis=0) >= 0.9
        lost += int(np.sum(found & ~found_count))
        dets.append(len(ctx))
        sizes.append(len(pool))
        count_sizes.append(len(by_count))
    d, p = np.array(dets, float), np.array(sizes, float)
    c = float(d @ p / (d @ d))
    r2 = 1 - np.sum((p - c * d) ** 2) / np.sum((p - p.mean()) ** 2)
    blowup = max(np.array(count_sizes) / d)
    linear = r2 > 0.95 and np.all(p <= c * d * 1.5)
    ablation = blowup > 50 or lost > 0
    ok = linear and ablation
    verdict("3 hypothesis-count linearity", ok,
            f"{len(d)} scenes, {int(d.min())}-{int(d.max())} detections, pool ~ {c:.2f} x detections, "
            f"R2 {r2:.3f}; count pruning: max pool/detections {blowup:.1f}, trajectories lost {lost}")
    assert ok


def test_4_selection_optimality_gap(verdict):
    s = oracles.selection_check(50, seed=0, max_size=15)
    verdict("4 selection optimality gap", s.passed,
            f"worst greedy gap {s.worst_gap:.1%} (<= 5%), exact vs enumeration mismatches {s.exact_mismatches}")
    assert s.passed


def test_6_determinism(verdict, tmp_path):
    seq = tmp_path / "seq"
    assert main(["synth", "--out", str(seq), "--people", "4", "--frames", "18", "--seed", "6"]) == 0
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("embed = 8\nhidden = 8\nmax_build_iterations = 2\nfinal_epochs = 2\nminibatch = 16\n"
                   "c_score = 0.4\n")
    outputs = []
    for run in ("a", "b"):
        d = tmp_path / run
        det, gt = str(seq / "det" / "det.txt"), str(seq / "gt" / "gt.txt")
        assert main(["train", "--config", str(cfg), "--detections", det, "--gt", gt, "--out", str(d / "m"),
                     "--seed", "3"]) == 0
        assert main(["track", "--config", str(cfg), "--detections", det, "--model", str(d / "m" / "model.ckpt"),
                     "--out", str(d / "res.txt")]) == 0
        assert main(["eval", "--results", str(d / "res.txt"), "--gt", gt, "--out", str(d / "eval.csv")]) == 0
        outputs.append([(d / p).read_bytes() for p in ("m/train_log.csv", "m/model.ckpt", "m/best.ckpt",
                                                        "res.txt", "res.plot.csv", "eval.csv")])
    same = outputs[0] == outputs[1]
    verdict("6 determinism", same, "train + track + eval twice with one seed: logs, checkpoints, results, "
            "plot data and metrics " + ("byte-identical" if same else "differ"))
    assert same


@pytest.mark.parametrize("name", ["perfect", "swap", "half_coverage"])
def test_7_metrics_golden(verdict, name):
    import json
    from pathlib import Path

    from hypotrack.metrics import report
    case = json.loads((Path(__file__).parent / "golden" / f"{name}.json").read_text())
    rep = report(case["out"], case["gt"], case["n_frames"])
    bad = {k: (getattr(rep, k), v) for k, v in case["expected"].items() if abs(getattr(rep, k) - v) > 1e-12}
    verdict(f"7 metrics golden ({name})", not bad, "all values match" if not bad else f"mismatches {bad}")
    assert not bad


def fuzz_number(rng):
    v = float(rng.uniform(0, 2000))
    style = rng.integers(4)
    if style == 0:
        return f"{v:.2f}"
    if style == 1:
        return str(int(v))
    if style == 2:
        return f"{v:.4e}"
    return repr(v)


def test_8_format_fidelity(verdict, tmp_path):
    rng = np.random.default_rng(8)
    mismatches = 0
    for k in range(40):
        n = int(rng.integers(0, 40))
        lines = [f"{int(rng.integers(1, 30))},-1,{','.join(fuzz_number(rng) for _ in range(4))},"
                 f"{rng.uniform(0, 1):.3f}" for _ in range(n)]
        if rng.random() < 0.5:
            lines.insert(0, "# fuzzed")
        src = tmp_path / f"det{k}.txt"
        src.write_text("\n".join(lines) + "\n")
        first = read_detections(src)
        write_detections(first, tmp_path / "out.txt")
        second = read_detections(tmp_path / "out.txt")
        key = [(d.frame, d.detection_id, d.confidence, d.box.as_array().tobytes()) for d in first]
        mismatches += key != [(d.frame, d.detection_id, d.confidence, d.box.as_array().tobytes()) for d in second]

        ids = rng.choice(100, size=int(rng.integers(1, 6)), replace=False)
        gt_lines = []
        for i in ids:
            for f in sorted(rng.choice(30, size=int(rng.integers(1, 10)), replace=False)):
                gt_lines.append(f"{f + 1},{i},{','.join(fuzz_number(rng) for _ in range(4))},1,1,1")
        gsrc = tmp_path / f"gt{k}.txt"
        gsrc.write_text("\n".join(gt_lines) + "\n")
        g1 = read_trajectories(gsrc)
        write_ground_truth(g1, tmp_path / "gt_out.txt")
        g2 = read_trajectories(tmp_path / "gt_out.txt", n_frames=len(g1[0].boxes))
        mismatches += [(g.person_id, g.boxes.tobytes()) for g in g1] != [(g.person_id, g.boxes.tobytes()) for g in g2]
        write_results({g.person_id: g.boxes for g in g1}, tmp_path / "res.txt", header="fuzz")
        r = read_results(tmp_path / "res.txt", n_frames=len(g1[0].boxes))
        mismatches += any(r[g.person_id].tobytes() != g.boxes.tobytes() for g in g1)

    model = ScorerModel(25, embed=6, hidden=5, seed=8)
    state = OptimizerState.for_model(model)
    state.step = 3
    save_checkpoint(tmp_path / "a.ckpt", model, state)
    back, st2 = load_checkpoint(tmp_path / "a.ckpt")
    save_checkpoint(tmp_path / "b.ckpt", back, st2)
    exact = all(back.params[k].tobytes() == model.params[k].tobytes() for k in model.params)
    exact &= (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()
    ok = mismatches == 0 and exact
    verdict("8 format fidelity", ok, f"40 fuzzed detection/ground-truth/result files, {mismatches} round-trip "
            f"mismatches; checkpoint round-trip {'bit-exact' if exact else 'differs'}")
    assert ok


# tracker comparison on synthetic crossings
TRAIN_SEED, TEST_SEED = 100, 2025
BATCH = 9


def _evaluate(scenes, make_scorer, c_score, fc, cutoff=None):
    """Mean IDF1, total identity switches and CPU seconds over ``scenes``."""
    cfg = EngineConfig(batch_frames=BATCH, c_score=c_score, fast_cutoff=cutoff)
    idf1, ids, cpu = [], 0, 0.0
    for b in scenes:
        t = time.process_time()
        tracks, _ = track_sequence(b.detections, b.n_frames, make_scorer, cfg, fc)
        cpu += time.process_time() - t
        rep = metrics.report(metrics.tracks_to_mapping(tracks, b.n_frames), b.gt_mapping(), b.n_frames)
        idf1.append(rep.IDF1)
        ids += rep.IDs
    return float(np.mean(idf1)), ids, cpu


def _tune(scenes, make_scorer, grid, fc):
    """Threshold with the best mean IDF1 on training scenes (ties go to the lower one), and that IDF1."""
    scored = [(_evaluate(scenes, make_scorer, c, fc)[0], -c) for c in grid]
    best, neg_c = max(scored)
    return -neg_c, best


@pytest.fixture(scope="module")
def comparison():
    """Train the full and near-ground-truth scorers once and evaluate three trackers on the test suite."""
    t0 = time.perf_counter()
    train_scenes = synth_suite(8, seed=TRAIN_SEED)
    test_scenes = synth_suite(20, seed=TEST_SEED)
    fc = FeatureConfig(image_width=test_scenes[0].image_width, image_height=test_scenes[0].image_height)
    common = dict(min_bin_samples=1000, hard_mining=1, engine=EngineConfig(batch_frames=BATCH), seed=0)
    full = train(ScorerModel(fc.dim, embed=32, hidden=32, seed=0), train_scenes,
                 TrainConfig(dataset="seeded", max_build_iterations=15, final_epochs=35, **common)).model
    ablation = train(ScorerModel(fc.dim, embed=32, hidden=32, seed=0), train_scenes,
                     TrainConfig(dataset="near_gt", final_epochs=50, **common)).model
    trackers = {
        "iou": (IoUScorer, (0.1, 0.2, 0.3, 0.4, 0.5)),
        "full": (lambda ctx: ModelScorer(full, ctx), (0.4, 0.5, 0.6, 0.7, 0.8)),
        "near_gt": (lambda ctx: ModelScorer(ablation, ctx), (0.2, 0.3, 0.4, 0.5, 0.6)),
    }
    res, tuned = {}, {}
    for name, (make, grid) in trackers.items():
        c, tuned[name] = _tune(train_scenes[:4], make, grid, fc)
        res[name] = (c, *_evaluate(test_scenes, make, c, fc))
    return dict(res=res, tuned=tuned, secs=time.perf_counter() - t0, make_full=trackers["full"][0],
                train_scenes=train_scenes, test_scenes=test_scenes, fc=fc)


@pytest.mark.slow
def test_5_exposure_bias_benefit(verdict, comparison):
    res, secs = comparison["res"], comparison["secs"]
    (_, f_idf, f_ids, _), (_, i_idf, i_ids, _), (_, n_idf, n_ids, _) = res["full"], res["iou"], res["near_gt"]
    cut = 1 - f_ids / i_ids if i_ids else 0.0
    ok = f_ids < i_ids and f_idf > i_idf and f_ids < n_ids and f_idf > n_idf and cut >= 0.3 and secs < 1800
    detail = ", ".join(f"{k} IDF1 {v[1]:.3f} IDs {v[2]} (c_score {v[0]})" for k, v in res.items())
    verdict("5 exposure-bias benefit", ok, f"{detail}; {cut:.0%} fewer IDs than iou (>= 30%), {secs:.0f}s")
    assert ok


@pytest.mark.slow
def test_fast_cutoff_trades_little_accuracy_for_speed(verdict, comparison):
    # largest cutoff costing at most 5 IDF1 points on training scenes, then
    # checked on the test suite for speed and a drop of at most 10 points
    make, fc, tune = comparison["make_full"], comparison["fc"], comparison["train_scenes"][:4]
    c_score, f_idf, _, f_cpu = comparison["res"]["full"]
    ref = comparison["tuned"]["full"]
    cutoff = max((c for c in (0.1, 0.2, 0.3) if ref - _evaluate(tune, make, c_score, fc, c)[0] <= 0.05), default=0.1)
    c_idf, _, c_cpu = _evaluate(comparison["test_scenes"], make, c_score, fc, cutoff)
    ok = c_cpu < f_cpu and f_idf - c_idf <= 0.10
    verdict("fast-mode cutoff (example)", ok,
            f"cutoff {cutoff}: {c_cpu:.0f}s vs {f_cpu:.0f}s CPU, IDF1 {c_idf:.3f} vs {f_idf:.3f}")
    assert ok
