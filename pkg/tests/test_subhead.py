import math

import numpy as np
import pytest

from helpers import box
from rvcdet.cloudio import DetectionSimConfig, Detection, SceneConfig, synth_scene
from rvcdet.errors import ConfigError, DataError, FormatError
from rvcdet.evaluation import match
from rvcdet.fdv import compute_grid
from rvcdet.rvbackbone import FeatureMap
from rvcdet.subhead import (
    KINDS,
    LABEL_NAMES,
    ClassifierSpec,
    CropDataset,
    CropDatasetConfig,
    GaussianHeatmapConfig,
    HeatmapSimConfig,
    SubheadModel,
    TrainConfig,
    build_crop_dataset,
    build_network,
    crop_window,
    crop_windows,
    label_of,
    load_crops,
    param_count,
    refine,
    render_heatmap,
    save_crops,
    scene_detections,
    simulate_heatmap,
    train_subhead,
)

GRID = compute_grid(((0, 20), (0, 20), (-3, 3)), (0.5, 0.5))


def mlp2_params(n_in, out):
    h = 2 * n_in
    return n_in * h + h + h * out + out


# -- zoo ---------------------------------------------------------------------

def test_mlp2_k8_param_count():
    # in=192, hidden=384, out=6
    assert param_count(ClassifierSpec("MLP-2", 8, 6)) == 192 * 384 + 384 + 384 * 6 + 6 == 76422


def test_label_names_order():
    assert LABEL_NAMES == ("True Vehicle", "False Vehicle", "True Pedestrian", "False Pedestrian",
                           "True Cyclist", "False Cyclist")
    assert label_of(1, True) == 2 and label_of(2, False) == 5
    assert label_of(2, False, out_dim=2) == 1


@pytest.mark.parametrize("kw", [dict(kind="MLP-5"), dict(k=0), dict(k=11), dict(out_dim=3),
                                dict(kind="1Conv+MLP-2", k=2), dict(kind="2Conv+MLP-2", k=1)])
def test_spec_rejects(kw):
    with pytest.raises(ConfigError):
        ClassifierSpec(**kw)


@pytest.mark.parametrize("kind", KINDS)
def test_network_output_shape(kind, rng):
    spec = ClassifierSpec(kind, 4, 6)
    net = build_network(spec)
    out = net.predict(net.init(rng), rng.normal(size=(5, 3, 4, 4)))
    assert out.shape == (5, 6)


def test_conv_layer_plan():
    layers = build_network(ClassifierSpec("2Conv+MLP-2", 5, 2)).layers
    assert repr(layers[0]) == "Conv2d(3, 6, kernel=(2, 2), stride=1)"
    assert repr(layers[2]) == "Conv2d(6, 12, kernel=(2, 2), stride=1)"
    assert repr(layers[5]) == "Linear(108, 216)"


# -- heatmaps ----------------------------------------------------------------

def test_render_single_peak():
    b = box(5.2, 7.9, cls=1)
    hm = render_heatmap([b], GRID, GaussianHeatmapConfig(sigma=1.5)).data
    r, c = GRID.cell_of(b.cx, b.cy)
    assert hm[1, r, c] == 1.0
    assert hm[1].max() == 1.0 and not hm[0].any() and not hm[2].any()
    row = hm[1, r, c:]
    assert (np.diff(row) <= 0).all() and row[-1] < row[0]
    assert 0.0 <= hm.min() and hm.max() <= 1.0


def test_render_no_boxes():
    assert not render_heatmap([], GRID).data.any()


def test_render_overlap_is_max():
    a, b = box(5, 5), box(6, 5.5, yaw=0.3)
    both = render_heatmap([a, b], GRID).data
    np.testing.assert_array_equal(both, np.maximum(render_heatmap([a], GRID).data, render_heatmap([b], GRID).data))


def test_render_rejects_bad_sigma():
    with pytest.raises(ConfigError):
        GaussianHeatmapConfig(sigma=0)


def test_simulated_heatmap_bounds_and_determinism():
    s = synth_scene(SceneConfig(n_objects=5, seed=3, range=((0, 20), (0, 20), (-3, 3))))
    dets = scene_detections(s, DetectionSimConfig(seed=1))
    res = match(dets, s.gt)
    a = simulate_heatmap(s.gt, dets, res, GRID, HeatmapSimConfig(), seed=5).data
    b = simulate_heatmap(s.gt, dets, res, GRID, HeatmapSimConfig(), seed=5).data
    assert a.tobytes() == b.tobytes()
    assert a.shape == (3, 40, 40) and a.min() >= 0 and a.max() <= 1


# -- crops -------------------------------------------------------------------

def test_crop_k1_on_peak():
    b = box(3.3, 12.1, cls=2)
    hm = render_heatmap([b], GRID)
    crop = crop_window(hm, Detection(b, 0.9), GRID, 1)
    np.testing.assert_array_equal(crop.window[:, 0, 0], [0, 0, 1.0])


def test_crop_corner_padding():
    hm = FeatureMap(np.ones((3, 40, 40)))
    crop = crop_window(hm, Detection(box(0.1, 0.1), 0.5), GRID, 3)
    expected = np.ones((3, 3))
    expected[0, :] = 0
    expected[:, 0] = 0
    np.testing.assert_array_equal(crop.window[0], expected)


@pytest.mark.parametrize("k", [1, 2, 3, 4, 9, 10])
def test_crop_centering_rule(k):
    data = np.arange(3 * 40 * 40, dtype=np.float64).reshape(3, 40, 40)
    b = box(10.2, 10.2)  # cell (20, 20)
    win = crop_window(FeatureMap(data), Detection(b, 0.5), GRID, k).window
    off = math.ceil(k / 2) - 1
    assert win[0, off, off] == data[0, 20, 20]
    assert win[0, 0, 0] == data[0, 20 - off, 20 - off]


def test_crop_identical_for_same_center():
    hm = render_heatmap([box(4, 4), box(5, 6, cls=1)], GRID)
    a = crop_window(hm, Detection(box(4.6, 5.1), 0.5), GRID, 5).window
    b = crop_window(hm, Detection(box(4.6, 5.1, l=3, cls=2), 0.1), GRID, 5).window
    np.testing.assert_array_equal(a, b)


def test_crop_outside_range():
    hm = render_heatmap([], GRID)
    assert crop_window(hm, Detection(box(-1, 5), 0.5), GRID, 3) is None


def test_crop_translation_by_one_voxel():
    hm = render_heatmap([box(7.25, 9.25, yaw=0.0)], GRID, GaussianHeatmapConfig(sigma=2.0))
    d0 = Detection(box(10.25, 9.25), 0.5)
    d1 = Detection(box(10.75, 9.25), 0.5)
    w0 = crop_window(hm, d0, GRID, 7).window
    w1 = crop_window(hm, d1, GRID, 7).window
    np.testing.assert_array_equal(w1[:, :, :-1], w0[:, :, 1:])


def test_subcrop_matches_direct_crop(rng):
    hm = FeatureMap(rng.random((3, 40, 40)))
    dets = [Detection(box(*rng.uniform(0, 20, 2)), 0.5) for _ in range(20)]
    big, _ = crop_windows(hm, dets, GRID, 10)
    ds = CropDataset(big, np.zeros(20, dtype=np.int64))
    for k in (1, 4, 7, 9):
        small, _ = crop_windows(hm, dets, GRID, k)
        np.testing.assert_array_equal(ds.subcrop(k).windows, small)


# -- dataset -----------------------------------------------------------------

SCENE_RANGE = ((-20, 20), (-20, 20), (-3, 3))
DS_GRID = compute_grid(SCENE_RANGE, (0.5, 0.5))


@pytest.fixture(scope="module")
def scenes():
    return [synth_scene(SceneConfig(n_objects=8, ground_points=200, seed=100 + i, range=SCENE_RANGE,
                                    clutter_objects=4)) for i in range(40)]


def test_dataset_no_false_positives(scenes):
    ds, counts = build_crop_dataset(scenes[:5], DetectionSimConfig(fp_rate=0.0), DS_GRID, CropDatasetConfig(k=3))
    assert len(ds) == 40
    assert (ds.labels % 2 == 0).all()


def test_dataset_per_class_exact(scenes):
    ds, counts = build_crop_dataset(scenes, DetectionSimConfig(fp_rate=0.5), DS_GRID,
                                    CropDatasetConfig(k=5, per_class=30))
    np.testing.assert_array_equal(counts, [30] * 6)
    np.testing.assert_array_equal(ds.counts(), [30] * 6)


def test_dataset_shortfall_warns(scenes):
    with pytest.warns(RuntimeWarning, match="fewer than"):
        _, counts = build_crop_dataset(scenes[:2], DetectionSimConfig(), DS_GRID, CropDatasetConfig(k=3, per_class=500))
    assert (counts < 500).all()


def test_dataset_labels_agree_with_match(scenes):
    sim = DetectionSimConfig(fp_rate=0.5, seed=3)
    ds, _ = build_crop_dataset(scenes[:6], sim, DS_GRID, CropDatasetConfig(k=3))
    expected = []
    for s in scenes[:6]:
        dets = scene_detections(s, sim)
        res = match(dets, s.gt)
        expected += [label_of(d.class_id, bool(t)) for d, t in zip(dets, res.det_tp)]
        assert [d.tp for d in dets] == res.det_tp.tolist()
    np.testing.assert_array_equal(ds.labels, expected)


def test_dataset_deterministic(scenes):
    args = (scenes[:8], DetectionSimConfig(), DS_GRID, CropDatasetConfig(k=4, per_class=10, seed=2))
    a, _ = build_crop_dataset(*args)
    b, _ = build_crop_dataset(*args)
    assert a.windows.tobytes() == b.windows.tobytes()
    np.testing.assert_array_equal(a.labels, b.labels)


def test_crops_file_round_trip(tmp_path, rng):
    ds = CropDataset(rng.random((7, 3, 4, 4)).astype(np.float32).astype(np.float64), rng.integers(0, 6, 7))
    save_crops(ds, tmp_path / "c.bin")
    raw = (tmp_path / "c.bin").read_bytes()
    assert raw.startswith(b"rvc-crops v1\n")
    assert len(raw) == 13 + 4 + 7 * (8 + 3 * 16 * 4)
    back = load_crops(tmp_path / "c.bin")
    np.testing.assert_array_equal(back.windows, ds.windows)
    np.testing.assert_array_equal(back.labels, ds.labels)


@pytest.mark.parametrize("mutate", [lambda r: b"rvc-crops v0\n" + r[13:], lambda r: r[:-1], lambda r: r + b"x"])
def test_crops_file_corrupt(tmp_path, mutate, rng):
    save_crops(CropDataset(rng.random((2, 3, 2, 2)), np.array([0, 1])), tmp_path / "c.bin")
    (tmp_path / "c.bin").write_bytes(mutate((tmp_path / "c.bin").read_bytes()))
    with pytest.raises(FormatError):
        load_crops(tmp_path / "c.bin")


# -- training ----------------------------------------------------------------

def separable_crops(n, k, rng):
    """Label picks the channel; true crops peak in the center, false in a corner."""
    labels = rng.integers(0, 6, size=n)
    w = rng.normal(0, 0.05, size=(n, 3, k, k))
    c = (k + 1) // 2 - 1
    for i, lab in enumerate(labels):
        ch = lab // 2
        if lab % 2 == 0:
            w[i, ch, c, c] += 1.0
        else:
            w[i, ch, 0, 0] += 1.0
    return CropDataset(w, labels)


def test_separable_data_learned(rng):
    ds = separable_crops(900, 3, rng)
    res = train_subhead(ds, ClassifierSpec("MLP-2", 3), TrainConfig(epochs=50, lr=3e-3, seed=1))
    assert res.best_val_accuracy >= 0.99
    assert len(res.history) == 50
    assert all(r is not None for r in res.final.recall)


def test_shuffled_labels_near_chance(rng):
    ds = separable_crops(3000, 3, rng)
    shuffled = CropDataset(ds.windows, rng.permutation(ds.labels))
    res = train_subhead(shuffled, ClassifierSpec("MLP-1", 3), TrainConfig(epochs=5, seed=2))
    assert abs(res.final.val_accuracy - 1 / 6) <= 0.05


@pytest.mark.filterwarnings("ignore:unbalanced training labels")
def test_training_deterministic(rng):
    ds = separable_crops(200, 4, rng)
    spec = ClassifierSpec("1Conv+MLP-2", 4)
    cfg = TrainConfig(epochs=3, seed=5)
    a = train_subhead(ds, spec, cfg)
    b = train_subhead(ds, spec, cfg)
    for p, q in zip(a.model.params, b.model.params):
        assert p.tobytes() == q.tobytes()
    assert a.history == b.history


@pytest.mark.filterwarnings("ignore:unbalanced training labels")
def test_training_uses_subcrop(rng):
    ds = separable_crops(120, 6, rng)
    res = train_subhead(ds, ClassifierSpec("MLP-1", 2), TrainConfig(epochs=1))
    assert res.model.spec.k == 2


def test_training_rejects_empty():
    with pytest.raises(DataError):
        train_subhead(CropDataset(np.zeros((0, 3, 3, 3)), np.zeros(0, dtype=np.int64)), ClassifierSpec("MLP-1", 3))


def test_training_rejects_label_range(rng):
    ds = separable_crops(60, 3, rng)
    with pytest.raises(DataError):
        train_subhead(ds, ClassifierSpec("MLP-1", 3, out_dim=2))
    res = train_subhead(ds.relabel_binary(), ClassifierSpec("MLP-1", 3, out_dim=2), TrainConfig(epochs=1))
    assert len(res.final.recall) == 2


def test_training_warns_unbalanced(rng):
    ds = separable_crops(200, 3, rng)
    keep = ds.labels != 3
    with pytest.warns(RuntimeWarning, match="unbalanced"):
        train_subhead(CropDataset(ds.windows[keep], ds.labels[keep]), ClassifierSpec("MLP-1", 3), TrainConfig(epochs=1))


@pytest.mark.filterwarnings("ignore:unbalanced training labels")
def test_model_save_load(tmp_path, rng):
    ds = separable_crops(100, 3, rng)
    res = train_subhead(ds, ClassifierSpec("2Conv+MLP-2", 3), TrainConfig(epochs=1))
    res.model.save(tmp_path / "m.ckpt")
    back = SubheadModel.load(tmp_path / "m.ckpt")
    assert back.spec == res.model.spec
    np.testing.assert_allclose(back.logits(ds.windows), res.model.logits(ds.windows), rtol=1e-4, atol=1e-5)


def test_model_rejects_wrong_crop_shape(rng):
    spec = ClassifierSpec("MLP-1", 3)
    m = SubheadModel(spec, build_network(spec).init(rng))
    with pytest.raises(DataError):
        m.logits(np.zeros((1, 3, 4, 4)))


# -- refinement --------------------------------------------------------------

def constant_model(label, k=3, out_dim=6):
    spec = ClassifierSpec("MLP-1", k, out_dim)
    b = np.zeros(out_dim)
    b[label] = 1.0
    return SubheadModel(spec, [np.zeros((out_dim, 3 * k * k)), b])


def test_refine_always_true_vehicle():
    hm = render_heatmap([], GRID)
    dets = [Detection(box(3, 3, cls=0), 0.5), Detection(box(8, 3, cls=1), 0.5), Detection(box(5, 9, cls=0), 0.2)]
    out = refine(dets, hm, constant_model(0), GRID)
    assert out.kept == [dets[0], dets[2]]
    assert out.dropped == [dets[1]]


def test_refine_empty():
    assert refine([], render_heatmap([], GRID), constant_model(0), GRID) == ([], [], [])


def test_refine_partitions_and_passes_outside(rng):
    hm = FeatureMap(rng.random((3, 40, 40)))
    spec = ClassifierSpec("MLP-2", 3)
    model = SubheadModel(spec, build_network(spec).init(rng))
    dets = [Detection(box(*rng.uniform(-2, 22, 2), cls=int(rng.integers(3))), 0.5) for _ in range(60)]
    out = refine(dets, hm, model, GRID)
    assert len(out.kept) + len(out.dropped) == len(dets)
    assert {id(d) for d in out.kept}.isdisjoint(id(d) for d in out.dropped)
    outside = [d for d in dets if GRID.cell_of(d.box.cx, d.box.cy) is None]
    assert out.unclassified == outside
    assert all(any(d is k for k in out.kept) for d in outside)


def test_refine_binary_head():
    dets = [Detection(box(3, 3, cls=2), 0.5)]
    hm = render_heatmap([], GRID)
    assert refine(dets, hm, constant_model(0, out_dim=2), GRID).kept == dets
    assert refine(dets, hm, constant_model(1, out_dim=2), GRID).dropped == dets
