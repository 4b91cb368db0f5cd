import numpy as np
import pytest

from hypotrack.config import RunConfig
from hypotrack.synth import SceneSpec, synth_scene, synth_suite


def test_scene_is_deterministic():
    a = synth_scene(SceneSpec(seed=5))
    b = synth_scene(SceneSpec(seed=5))
    assert [d.box.as_array().tobytes() for d in a.detections] == [d.box.as_array().tobytes() for d in b.detections]
    assert synth_scene(seed=5, n_people=3).gts[0].boxes.shape == (36, 4)


def test_detector_rates():
    spec = SceneSpec(n_people=6, n_frames=200, miss_rate=0.2, fp_rate=0.1, noise=0.0, seed=1)
    scene = synth_scene(spec)
    visible = sum(int(np.any(g.boxes != 0, axis=1).sum()) for g in scene.gts)
    true_dets = sum(1 for d in scene.detections if d.confidence >= 0.5 and any(
        np.allclose(d.box.as_array(), g.boxes[d.frame]) for g in scene.gts))
    assert abs(true_dets / visible - 0.8) < 0.05
    fps = len(scene.detections) - true_dets
    assert abs(fps / (spec.n_frames * spec.n_people) - 0.1) < 0.03


def test_clean_detections_equal_ground_truth():
    scene = synth_scene(SceneSpec(n_people=3, noise=0.0, miss_rate=0.0, fp_rate=0.0, seed=2))
    boxes = sorted(d.box.as_array().tolist() + [d.frame] for d in scene.detections)
    truth = sorted(g.boxes[f].tolist() + [f] for g in scene.gts for f in range(scene.n_frames)
                   if np.any(g.boxes[f] != 0))
    assert boxes == truth


def test_crossing_paths_cross():
    scene = synth_scene(SceneSpec(n_people=2, n_frames=60, seed=3))
    a, b = (g.boxes for g in scene.gts)
    both = np.any(a != 0, axis=1) & np.any(b != 0, axis=1)
    gap = a[both, 0] - b[both, 0]
    assert gap.min() < 0 < gap.max()


def test_spec_validation_and_suite():
    for bad in (dict(miss_rate=1.5), dict(fp_rate=1.0), dict(pattern="zigzag"), dict(noise=-1)):
        with pytest.raises(ValueError):
            SceneSpec(**bad)
    assert not synth_scene(SceneSpec(miss_rate=1.0, fp_rate=0.0)).detections
    suite = synth_suite(5, seed=0)
    assert len(suite) == 5 and all(4 <= len(s.gts) <= 8 for s in suite)


def test_config_text_round_trip(tmp_path):
    cfg = RunConfig(c_score=0.45, fast_cutoff=0.3, use_appearance=True, image_width=640.0, seed=9)
    back = RunConfig.loads(cfg.dumps())
    assert back == cfg
    p = tmp_path / "c.txt"
    p.write_text("# tuned\nc_score = 0.5  # comment\nfast_cutoff = none\n")
    assert RunConfig.load(p).c_score == 0.5 and RunConfig.load(p).fast_cutoff is None


def test_config_errors_and_derived_values():
    with pytest.raises(ValueError, match="unknown"):
        RunConfig().with_strings({"c_scor": "1"})
    with pytest.raises(ValueError, match="cannot parse"):
        RunConfig().with_strings({"use_appearance": "maybe"})
    with pytest.raises(ValueError):
        RunConfig(c_score=1.5)
    cfg = RunConfig(fps=3.0)
    assert (cfg.train_frames, cfg.infer_frames) == (9, 18)
    assert cfg.engine().batch_frames == 18 and cfg.engine(9).batch_frames == 9
    assert cfg.features(640, 360).image_width == 640


def test_miss_fraction_within_binomial_bounds():
    spec = SceneSpec(n_people=10, pattern="linear", n_frames=1000, miss_rate=0.1, fp_rate=0.0, noise=0.0,
                     image_width=100000.0, seed=4)
    scene = synth_scene(spec)
    slots = sum(int(np.any(g.boxes != 0, axis=1).sum()) for g in scene.gts)
    missed = 1 - len(scene.detections) / slots
    sigma = np.sqrt(0.1 * 0.9 / slots)
    assert slots >= 10 ** 4 * 0.5
    assert abs(missed - 0.1) < 3 * sigma
