import gzip

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fiplab.data import (
    LabeledDataset,
    PoisonPlan,
    TriggerSpec,
    apply_trigger,
    default_blend_pattern,
    gen_synthetic,
    ground_truth_view,
    load_idx,
    poison,
    poisoned_test_set,
    save_idx,
    split,
)
from fiplab.errors import CountMismatchError, SplitError, TriggerBoundsError, TruncatedPayloadError, WrongMagicError

# two 2x3 images and their labels, written out byte by byte
IMAGES_BYTES = bytes(
    [0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 3]
    + [0, 51, 102, 153, 204, 255]
    + [255, 0, 255, 0, 255, 0]
)
LABELS_BYTES = bytes([0, 0, 8, 1, 0, 0, 0, 2, 1, 0])


@pytest.fixture
def idx_pair(tmp_path):
    (tmp_path / "img").write_bytes(IMAGES_BYTES)
    (tmp_path / "lab").write_bytes(LABELS_BYTES)
    return tmp_path / "img", tmp_path / "lab"


def test_idx_hand_built_bytes(idx_pair):
    ds = load_idx(*idx_pair)
    assert ds.images.shape == (2, 2, 3)
    np.testing.assert_allclose(ds.images[0].ravel(), [0, 0.2, 0.4, 0.6, 0.8, 1.0])
    assert list(ds.labels) == [1, 0]
    assert ds.class_count == 2


def test_idx_gzip(tmp_path):
    (tmp_path / "img.gz").write_bytes(gzip.compress(IMAGES_BYTES))
    (tmp_path / "lab.gz").write_bytes(gzip.compress(LABELS_BYTES))
    assert len(load_idx(tmp_path / "img.gz", tmp_path / "lab.gz")) == 2


def test_idx_errors(tmp_path, idx_pair):
    img, lab = idx_pair
    (tmp_path / "bad").write_bytes(b"\x00\x00\x08\x04" + IMAGES_BYTES[4:])
    with pytest.raises(WrongMagicError):
        load_idx(tmp_path / "bad", lab)
    (tmp_path / "short").write_bytes(IMAGES_BYTES[:-1])
    with pytest.raises(TruncatedPayloadError):
        load_idx(tmp_path / "short", lab)
    (tmp_path / "three").write_bytes(bytes([0, 0, 8, 1, 0, 0, 0, 3, 1, 0, 1]))
    with pytest.raises(CountMismatchError):
        load_idx(img, tmp_path / "three")


def test_idx_round_trip(tmp_path):
    ds = gen_synthetic(3, 4, 8, seed=2)
    save_idx(ds, tmp_path / "i", tmp_path / "l")
    back = load_idx(tmp_path / "i", tmp_path / "l", 3)
    assert np.array_equal(back.labels, ds.labels)
    assert np.max(np.abs(back.images - ds.images)) <= 0.5 / 255 + 1e-12


def test_synthetic_is_balanced_deterministic_and_in_range():
    a = gen_synthetic(3, 50, 16, 0.25, seed=1)
    b = gen_synthetic(3, 50, 16, 0.25, seed=1)
    assert np.array_equal(a.images, b.images)
    assert np.bincount(a.labels).tolist() == [50, 50, 50]
    assert a.images.min() >= 0 and a.images.max() <= 1
    assert not np.array_equal(a.images, gen_synthetic(3, 50, 16, 0.25, seed=2).images)


def test_patch_trigger_sets_only_its_block():
    x = np.full((16, 16), 0.5)
    t = TriggerSpec.corner_patch((16, 16), 3, 0.75)
    y = apply_trigger(x, t)
    assert np.all(y[13:, 13:] == 0.75)
    y[13:, 13:] = 0.5
    assert np.array_equal(x, y)


def test_trigger_bounds():
    with pytest.raises(TriggerBoundsError):
        apply_trigger(np.zeros((16, 16)), TriggerSpec("patch", row=14, col=0, size=3))
    assert np.array_equal(apply_trigger(np.ones((4, 4)), TriggerSpec("patch", row=0, col=0, size=0)), np.ones((4, 4)))


def test_blend_trigger_mixes_and_zero_alpha_is_identity():
    x = np.zeros((8, 8))
    p = default_blend_pattern((8, 8), seed=0)
    np.testing.assert_allclose(apply_trigger(x, TriggerSpec.blend(p, 0.2)), 0.2 * p)
    assert np.array_equal(apply_trigger(x, TriggerSpec.blend(p, 0.0)), x)


def test_poison_count_labels_and_bookkeeping():
    ds = gen_synthetic(3, 100, 16, seed=0)
    plan = PoisonPlan(TriggerSpec.corner_patch((16, 16), 3, 1.0), 0.1, "all2one", 0, seed=4)
    pds, book = poison(ds, plan)
    assert len(book) == 30
    assert np.all(pds.labels[book.indices] == 0)
    assert np.array_equal(book.original, ds.labels[book.indices])
    clean = np.setdiff1d(np.arange(len(ds)), book.indices)
    assert np.array_equal(pds.images[clean], ds.images[clean])
    gt = ground_truth_view(pds, book)
    assert np.array_equal(gt.labels, ds.labels)
    assert np.array_equal(gt.images, pds.images)
    assert book.epsilon == pytest.approx(np.abs(pds.images - ds.images).max())


def test_poison_rates_zero_and_one():
    ds = gen_synthetic(3, 10, 8, seed=0)
    plan = TriggerSpec.corner_patch((8, 8), 2, 1.0)
    assert len(poison(ds, PoisonPlan(plan, 0.0))[1]) == 0
    assert len(poison(ds, PoisonPlan(plan, 1.0))[1]) == 30


def test_all2all_and_poisoned_test_set():
    ds = gen_synthetic(3, 20, 8, seed=0)
    trig = TriggerSpec.corner_patch((8, 8), 2, 1.0)
    _, book = poison(ds, PoisonPlan(trig, 0.5, "all2all", seed=1))
    assert np.array_equal(book.assigned, (book.original + 1) % 3)
    pte, pbook = poisoned_test_set(ds, PoisonPlan(trig, 0.1, "all2one", target=2))
    assert len(pte) == 40 and np.all(pte.labels != 2)
    assert np.all(pbook.assigned == 2)


def test_split_is_stratified_and_disjoint():
    ds = gen_synthetic(3, 500, 8, seed=0)
    tr, va = split(ds, 0.01, seed=3)
    assert np.bincount(va.labels).tolist() == [5, 5, 5]
    assert len(tr) + len(va) == len(ds)
    tr1, va1 = split(ds, per_class=1, seed=3)
    assert np.bincount(va1.labels).tolist() == [1, 1, 1]


def test_split_errors():
    ds = gen_synthetic(2, 2, 8, seed=0)
    with pytest.raises(SplitError):
        split(ds, per_class=2)
    with pytest.raises(ValueError):
        split(ds)


def test_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.full((1, 2, 2), 1.5), [0], 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((1, 2, 2)), [3], 2)


@settings(max_examples=30, deadline=None)
@given(rate=st.floats(0, 1), seed=st.integers(0, 1000), n=st.integers(1, 40))
def test_poison_count_is_rounded_rate(rate, seed, n):
    ds = gen_synthetic(2, n, 8, seed=seed)
    _, book = poison(ds, PoisonPlan(TriggerSpec.corner_patch((8, 8), 2, 1.0), rate, seed=seed))
    assert len(book) == int(np.floor(rate * 2 * n + 0.5))
    assert len(np.unique(book.indices)) == len(book)
