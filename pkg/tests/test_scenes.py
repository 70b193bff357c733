import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from ptx.scenes import (
    PROMPT_MODES,
    SHAPES,
    DatasetError,
    SceneError,
    SceneSpec,
    benchmark_spec,
    color_threshold_best_iou,
    generate_dataset,
    generate_scene,
    prompt_predicate,
    read_dataset,
    sample_prompts,
    scene_seeds,
    write_dataset,
)

TWO_BY_TWO = SceneSpec(classes=("disk", "square"), instances_per_class=(2, 2), palette_mode="ambiguous",
                       radius=(6.0, 8.0))


def _dir_bytes(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_scene_is_pure_in_spec_and_seed():
    a, b = generate_scene(benchmark_spec(), 5), generate_scene(benchmark_spec(), 5)
    assert a.image.tobytes() == b.image.tobytes()
    assert [i.mask.tobytes() for i in a.instances] == [i.mask.tobytes() for i in b.instances]
    assert generate_scene(benchmark_spec(), 6).image.tobytes() != a.image.tobytes()


def test_serialization_is_byte_identical(tmp_path):
    ds = generate_dataset(benchmark_spec(), 4, seed=0, mode="partial_instances")
    write_dataset(ds, tmp_path / "a")
    write_dataset(generate_dataset(benchmark_spec(), 4, seed=0, mode="partial_instances"), tmp_path / "b")
    assert _dir_bytes(tmp_path / "a") == _dir_bytes(tmp_path / "b")


def test_two_classes_two_instances_give_four_disjoint_masks():
    sc = generate_scene(TWO_BY_TWO, 0)
    assert len(sc.instances) == 4
    stack = np.stack([i.mask for i in sc.instances]).astype(int)
    assert stack.sum(0).max() == 1


def test_ambiguous_palette_histograms_match():
    sc = generate_scene(TWO_BY_TWO, 3)

    def hist(cls):
        px = sc.image[sc.class_mask(cls)]
        vals, counts = np.unique(px, axis=0, return_counts=True)
        return {tuple(v): c / counts.sum() for v, c in zip(vals, counts)}

    assert hist("disk") == hist("square")
    distinct = generate_scene(SceneSpec(("disk", "square"), (2, 2), palette_mode="distinct"), 3)
    assert not np.array_equal(distinct.image[distinct.class_mask("disk")][0],
                              distinct.image[distinct.class_mask("square")][0])


def test_colour_oracle_cannot_separate_classes():
    # every object pixel has the same colour, so a threshold mask covering one
    # class covers the other too: per-scene oracle IoUs sum to at most 1
    for s in range(30):
        sc = generate_scene(benchmark_spec(), s)
        scores = [color_threshold_best_iou(sc, c) for c in sc.classes_present()]
        assert len(scores) == 2
        assert sum(scores) <= 1.0 + 1e-9
        assert np.mean(scores) <= 0.5 + 1e-9


@pytest.mark.parametrize("mode", ["interior", "edge", "mixed"])
def test_prompt_modes_obey_predicate_exhaustively(mode):
    ds = generate_dataset(benchmark_spec(), 25, seed=4, mode=mode)
    for smp in ds.samples:
        gt = smp.scene.class_mask(smp.target_class)
        assert np.array_equal(smp.gt_mask, gt)
        assert all(gt[p.y, p.x] for p in smp.prompts)
        if mode == "mixed":
            k = len(smp.prompts)
            preds = [prompt_predicate(gt, p, "interior") for p in smp.prompts[: k - k // 2]]
            preds += [prompt_predicate(gt, p, "edge") for p in smp.prompts[k - k // 2:]]
        else:
            preds = [prompt_predicate(gt, p, smp.prompt_mode) for p in smp.prompts]
        assert all(preds)


def test_partial_instances_leave_an_instance_unprompted():
    spec = SceneSpec(("disk", "square"), (3, 3), palette_mode="ambiguous", radius=(5.0, 6.0))
    ds = generate_dataset(spec, 10, seed=2, mode="partial_instances")
    for smp in ds.samples:
        n = sum(i.class_name == smp.target_class for i in smp.scene.instances)
        assert n == 3 and smp.prompt_mode == "partial_instances"
        assert 1 <= len(smp.prompted_instances()) < n
        assert all(prompt_predicate(smp.gt_mask, p, "partial_instances") for p in smp.prompts)


def test_same_seed_same_points():
    sc = generate_scene(benchmark_spec(), 0)
    cls = sc.classes_present()[0]
    assert sample_prompts(sc, cls, 5, "mixed", seed=9) == sample_prompts(sc, cls, 5, "mixed", seed=9)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(PROMPT_MODES), st.integers(1, 5))
def test_prompts_inside_target_property(seed, mode, k):
    sc = generate_scene(benchmark_spec(), seed)
    for cls in sc.classes_present():
        pts = sample_prompts(sc, cls, k, mode, seed=seed)
        assert len(pts) == k and len(set(pts)) == k
        m = sc.class_mask(cls)
        if mode == "mixed":
            assert all(m[p.y, p.x] for p in pts)
        else:
            assert all(prompt_predicate(m, p, mode) for p in pts)


def test_round_trip_is_bitwise(tmp_path):
    ds = generate_dataset(benchmark_spec(), 10, seed=0, mode="partial_instances")
    back = read_dataset(write_dataset(ds, tmp_path / "d"))
    assert len(back.samples) == len(ds.samples)
    for a, b in zip(ds.scenes, back.scenes):
        assert a.seed == b.seed and a.image.tobytes() == b.image.tobytes()
        assert [i.mask.tobytes() for i in a.instances] == [i.mask.tobytes() for i in b.instances]
    for a, b in zip(ds.samples, back.samples):
        assert (a.target_class, a.prompts, a.prompt_mode) == (b.target_class, b.prompts, b.prompt_mode)
        assert np.array_equal(a.gt_mask, b.gt_mask)


def test_truncated_image_error_names_file(tmp_path):
    d = write_dataset(generate_dataset(benchmark_spec(), 2, seed=0), tmp_path / "d")
    f = d / "images" / "scene_00001.ptx"
    f.write_bytes(f.read_bytes()[:100])
    with pytest.raises(Exception, match="scene_00001.ptx"):
        read_dataset(d)


def test_malformed_line_reports_line_number(tmp_path):
    d = write_dataset(generate_dataset(benchmark_spec(), 2, seed=0), tmp_path / "d")
    lines = (d / "scenes.jsonl").read_text().splitlines()
    (d / "scenes.jsonl").write_text(lines[0] + "\n{not json\n")
    with pytest.raises(DatasetError, match=r"scenes.jsonl:2"):
        read_dataset(d)


def test_200_scenes_fit_in_40_mb(tmp_path):
    d = write_dataset(generate_dataset(benchmark_spec(), 200, seed=0), tmp_path / "d")
    total = sum(len(b) for b in _dir_bytes(d).values())
    assert total < 40 * 2**20


def test_split_seeds_disjoint():
    assert not set(scene_seeds(1, 200)) & set(scene_seeds(2, 50))


def test_spec_validation():
    with pytest.raises(SceneError):
        SceneSpec(classes=("disk",))
    with pytest.raises(SceneError, match="unknown"):
        SceneSpec.from_dict({"classes": ["disk", "ring"], "colour": 1})
    with pytest.raises(SceneError, match="could not place"):
        generate_scene(SceneSpec(("disk", "ring"), (9, 9), radius=(12.0, 14.0)), 0)
    assert set(SHAPES) == {"disk", "square", "triangle", "cross", "ring"}
