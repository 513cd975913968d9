import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from drfuzzy.dataset import (
    ClassMergeMap,
    DatasetError,
    DatasetIndex,
    LabeledSample,
    LeakageError,
    SyntheticSpec,
    class_distribution,
    largest_remainder,
    load_csv_index,
    merge_classes,
    oversample,
    stratified_split,
    synthesize_fundus,
)
from drfuzzy.imaging import FundusImage, write_image


def make_index(counts, merge=None):
    samples = [LabeledSample(f"s{g}_{i}", g) for g, n in enumerate(counts) for i in range(n)]
    return DatasetIndex(samples, merge or ClassMergeMap.identity())


@pytest.fixture
def image_dir(tmp_path):
    px = np.zeros((4, 4, 3), dtype=np.uint8)
    for name in ("a", "b", "c"):
        write_image(FundusImage(px), tmp_path / f"{name}.ppm")
    return tmp_path


def test_csv_keeps_file_order(image_dir):
    (image_dir / "labels.csv").write_text("id_code,diagnosis\nc,2\na,0\nb,4\n")
    index = load_csv_index(image_dir / "labels.csv", image_dir)
    assert [s.id_code for s in index] == ["c", "a", "b"]
    assert index.grades.tolist() == [2, 0, 4]
    assert index[0].load().pixels.shape == (4, 4, 3)


def test_csv_bad_grade_names_the_row(image_dir):
    (image_dir / "labels.csv").write_text("id_code,diagnosis\na,0\nb,5\n")
    with pytest.raises(DatasetError, match="row 3"):
        load_csv_index(image_dir / "labels.csv", image_dir)


def test_csv_reports_every_missing_image(image_dir):
    (image_dir / "labels.csv").write_text("id_code,diagnosis\na,0\nx,1\ny,1\n")
    with pytest.raises(DatasetError, match=r"2 image file\(s\) missing.*x.*y"):
        load_csv_index(image_dir / "labels.csv", image_dir)


@pytest.mark.parametrize("text", ["", "id,label\na,0\n", "id_code,diagnosis\na,zero\n", "id_code,diagnosis\na\n"])
def test_csv_malformed(image_dir, text):
    (image_dir / "labels.csv").write_text(text)
    with pytest.raises(DatasetError):
        load_csv_index(image_dir / "labels.csv", image_dir)


def test_single_class_splits_exactly():
    split = stratified_split(make_index((100, 0, 0, 0, 0)))
    sizes = [len(split.subset(s)) for s in ("train", "val", "test")]
    assert sizes == [70, 15, 15]


def test_uneven_classes_split_per_class():
    split = stratified_split(make_index((60, 30, 10, 0, 0)), seed=3)
    for g, n in enumerate((60, 30, 10)):
        expected = largest_remainder(n, (0.7, 0.15, 0.15))
        got = [int((split.subset(s).grades == g).sum()) for s in ("train", "val", "test")]
        assert got == expected


def test_split_is_deterministic_and_seed_dependent():
    index = make_index((40, 40, 0, 0, 0))
    a = [s.split for s in stratified_split(index, seed=1)]
    b = [s.split for s in stratified_split(index, seed=1)]
    c = [s.split for s in stratified_split(index, seed=2)]
    assert a == b and a != c


def test_tiny_class_goes_to_train_with_warning():
    with pytest.warns(UserWarning, match="only 2"):
        split = stratified_split(make_index((2, 10, 0, 0, 0)))
    assert {s.split for s in split if s.grade == 0} == {"train"}


def test_split_fraction_validation():
    with pytest.raises(ValueError):
        stratified_split(make_index((10,) * 5), fractions=(0.8, 0.2, 0.0))
    with pytest.raises(ValueError):
        stratified_split(make_index((10,) * 5), fractions=(0.5, 0.2, 0.2))


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 500), st.lists(st.integers(1, 20), min_size=2, max_size=5))
def test_largest_remainder_sums_and_is_close(n, weights):
    fr = [w / sum(weights) for w in weights]
    counts = largest_remainder(n, fr)
    assert sum(counts) == n
    assert all(abs(c - n * f) < 1 for c, f in zip(counts, fr))


def test_distribution_examples():
    empty = class_distribution(DatasetIndex())
    assert empty.counts.tolist() == [0] * 5 and empty.fractions.tolist() == [0.0] * 5
    dist = class_distribution(make_index((20,) * 5))
    assert np.array_equal(dist.fractions, [0.2] * 5)
    assert dist.to_text().splitlines()[-1].split()[-1] == "100"
    assert dist.to_csv().splitlines()[0] == "class,name,count,fraction"


def test_table1_merge():
    m = ClassMergeMap.table1()
    assert [m(g) for g in range(5)] == [0, 1, 1, 2, 2]
    merged = merge_classes(make_index((1, 1, 1, 1, 1)), m)
    assert merged.labels.tolist() == [0, 1, 1, 2, 2]
    assert class_distribution(merged).counts.tolist() == [1, 2, 2]
    assert class_distribution(merged, merged=False).counts.tolist() == [1] * 5


@pytest.mark.parametrize("mapping,names", [((0, 1, 1, 2), ("a", "b", "c")), ((0, 2, 2, 2, 2), ("a", "b")), ((0, 1, 1, 1, 1), ("a",))])
def test_bad_merge_maps(mapping, names):
    with pytest.raises(ValueError):
        ClassMergeMap(mapping, names)


def test_oversample_balanced():
    index = make_index((100, 10, 0, 0, 0), ClassMergeMap((0, 1, 1, 1, 1), ("a", "b")))
    out = oversample(index, "balanced", seed=0)
    assert class_distribution(out).counts.tolist() == [100, 100]
    replicas = [s.replica for s in out if s.grade == 1]
    assert max(replicas) == 9
    assert out.samples[:110] == index.samples


def test_oversample_only_touches_train_records():
    index = stratified_split(make_index((50, 10, 0, 0, 0), ClassMergeMap((0, 1, 1, 1, 1), ("a", "b"))))
    out = oversample(index)
    assert len(out.subset("val")) == len(index.subset("val"))
    assert len(out.subset("test")) == len(index.subset("test"))
    train = class_distribution(out.subset("train")).counts
    assert train[0] == train[1] == 35


def test_oversample_evaluation_split_is_leakage():
    with pytest.raises(LeakageError):
        oversample(make_index((10, 2, 0, 0, 0)), split="val")
    with pytest.raises(LeakageError):
        oversample(make_index((10, 2, 0, 0, 0)), split="test")


def test_oversample_explicit_targets():
    out = oversample(make_index((5, 3, 0, 0, 0), ClassMergeMap((0, 1, 1, 1, 1), ("a", "b"))), [6, 4])
    assert class_distribution(out).counts.tolist() == [6, 4]
    with pytest.raises(ValueError):
        oversample(make_index((5, 3, 0, 0, 0), ClassMergeMap((0, 1, 1, 1, 1), ("a", "b"))), [4, 4])


def test_fingerprint_changes_with_content():
    a = make_index((2, 0, 0, 0, 0))
    b = make_index((2, 0, 0, 0, 0))
    assert a.fingerprint() == b.fingerprint()
    b.samples[0].grade = 1
    assert a.fingerprint() != b.fingerprint()


def test_manifest_csv_lists_merged_labels():
    index = merge_classes(make_index((1, 0, 0, 0, 1)), ClassMergeMap.table1())
    assert index.manifest_csv().splitlines() == ["id_code,diagnosis,merged_label,split", "s0_0,0,0,", "s4_0,4,2,"]


# -- synthetic generator -----------------------------------------------------------

def test_synthetic_lesion_counts_by_grade():
    index = synthesize_fundus(SyntheticSpec(size=48, counts=(2, 2, 0, 0, 2), seed=1))
    by_grade = {g: [len(s.lesion_boxes) for s in index if s.grade == g] for g in (0, 1, 4)}
    assert by_grade[0] == [0, 0]
    assert min(by_grade[4]) > max(by_grade[1])


def test_synthetic_is_deterministic():
    spec = SyntheticSpec(size=40, counts=(1, 1, 1, 1, 1), seed=7)
    a, b = synthesize_fundus(spec), synthesize_fundus(spec)
    assert all(np.array_equal(x.load().pixels, y.load().pixels) for x, y in zip(a, b))
    c = synthesize_fundus(SyntheticSpec(size=40, counts=(1, 1, 1, 1, 1), seed=8))
    assert not np.array_equal(a[4].load().pixels, c[4].load().pixels)


def test_synthetic_lesion_boxes_lie_in_the_image_and_disc():
    index, geometry = synthesize_fundus(SyntheticSpec(size=64, counts=(0, 0, 0, 0, 3)), return_geometry=True)
    for s, (cy, cx, r) in zip(index, geometry):
        for y0, x0, y1, x1 in s.lesion_boxes:
            assert 0 <= y0 < y1 <= 64 and 0 <= x0 < x1 <= 64
            assert np.hypot((y0 + y1) / 2 - cy, (x0 + x1) / 2 - cx) < r


def test_synthetic_background_is_dark():
    img = synthesize_fundus(SyntheticSpec(size=64, counts=(1, 0, 0, 0, 0)))[0].load().pixels
    assert img[0, 0].max() < 20 and img[32, 32].max() > 60


def test_synthetic_spec_validation():
    with pytest.raises(ValueError):
        SyntheticSpec(counts=(1, 2))
    with pytest.raises(ValueError):
        SyntheticSpec(size=16)


def test_sample_rejects_bad_grade_and_split():
    with pytest.raises(DatasetError):
        LabeledSample("x", 7)
    with pytest.raises(DatasetError):
        LabeledSample("x", 1, split="holdout")
