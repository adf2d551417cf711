import hashlib
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from gridvit.data import (GridSample, ScanRecord, SyntheticSpec, Volume, augment, central_window,
                          extract_windows, flip_rotate, fuse_early, gen_synthetic, load_volume,
                          make_sample, normalize_volume, pack_grid, parse_manifest, unpack_grid,
                          write_manifest, write_volume)
from gridvit.errors import (BadMagicError, FormatError, InsufficientDepthError, NonFiniteDataError,
                            TruncatedError, ValidationError)


def tree_digest(root):
    h = hashlib.sha256()
    for dirpath, dirnames, filenames in os.walk(root):
        dirnames.sort()
        for name in sorted(filenames):
            p = os.path.join(dirpath, name)
            h.update(os.path.relpath(p, root).encode())
            with open(p, "rb") as fh:
                h.update(fh.read())
    return h.hexdigest()


def grid_oracle(slices):
    """Place slice i at cell (i // s, i % s) pixel by pixel."""
    k, h, w = slices.shape
    s = int(round(k ** 0.5))
    out = np.full((s * h, s * w), np.nan, dtype=slices.dtype)
    for i in range(k):
        for y in range(h):
            for x in range(w):
                out[(i // s) * h + y, (i % s) * w + x] = slices[i, y, x]
    return out


# ---------------------------------------------------------------- volume files

def test_volume_round_trip_bit_exact(tmp_path, rng):
    v = Volume(rng.normal(size=(2, 2, 2)).astype(np.float32), "T1", "c0")
    write_volume(v, tmp_path / "v.rvf")
    back = load_volume(tmp_path / "v.rvf")
    assert back.voxels.tobytes() == v.voxels.tobytes()
    assert (back.modality, back.case_id) == ("T1", "c0")


def test_volume_file_layout(tmp_path):
    v = Volume(np.arange(6, dtype=np.float32).reshape(1, 2, 3), "T2", "x")
    write_volume(v, tmp_path / "v.rvf")
    raw = (tmp_path / "v.rvf").read_bytes()
    assert raw.startswith(b"RVF1\n")
    head, payload = raw[5:].split(b"\n", 1)
    assert json.loads(head) == {"dz": 1, "h": 2, "w": 3, "dtype": "f32le", "modality": "T2", "case_id": "x"}
    assert payload == np.arange(6, dtype="<f4").tobytes()


def test_volume_truncated_payload(tmp_path):
    v = Volume(np.zeros((3, 64, 64), np.float32), "T1", "c")
    write_volume(v, tmp_path / "v.rvf")
    raw = (tmp_path / "v.rvf").read_bytes()
    header = b'RVF1\n{"dz": 4, "h": 64, "w": 64, "dtype": "f32le", "modality": "T1", "case_id": "c"}\n'
    (tmp_path / "bad.rvf").write_bytes(header + raw[raw.index(b"\n", 5) + 1:])
    with pytest.raises(TruncatedError):
        load_volume(tmp_path / "bad.rvf")


def test_volume_bad_magic(tmp_path):
    (tmp_path / "v.rvf").write_bytes(b"NOPE\n{}\n")
    with pytest.raises(BadMagicError):
        load_volume(tmp_path / "v.rvf")


def test_volume_non_finite(tmp_path):
    v = Volume(np.array([[[1.0, np.nan]]], np.float32), "T1", "c")
    write_volume(v, tmp_path / "v.rvf")
    with pytest.raises(NonFiniteDataError):
        load_volume(tmp_path / "v.rvf")


def test_volume_errors_are_distinct():
    kinds = {BadMagicError, TruncatedError, NonFiniteDataError}
    assert len(kinds) == 3 and all(issubclass(k, FormatError) for k in kinds)


def test_generated_volumes_reload_exactly(tmp_path):
    spec = SyntheticSpec(cases_per_class=1, depth=4, height=8, width=8, seed=3)
    _, entries = gen_synthetic(spec, tmp_path)
    from gridvit.data import _synthetic_case
    rng = np.random.default_rng(3)
    for e in entries:
        t1, t2 = _synthetic_case(spec, e.label, rng)
        np.testing.assert_array_equal(load_volume(e.t1).voxels, t1)
        np.testing.assert_array_equal(load_volume(e.t2).voxels, t2)


# ---------------------------------------------------------------- manifests

def test_manifest_empty(tmp_path):
    (tmp_path / "m.jsonl").write_text("")
    assert parse_manifest(tmp_path / "m.jsonl") == []


def test_manifest_bad_label_names_line(tmp_path):
    lines = [{"id": "a", "t1": "a1", "t2": "a2", "label": 0}, {"id": "b", "t1": "b1", "t2": "b2", "label": 3}]
    write_manifest(lines, tmp_path / "m.jsonl")
    with pytest.raises(ValidationError, match=r"m\.jsonl:2"):
        parse_manifest(tmp_path / "m.jsonl")


@pytest.mark.parametrize("bad,needle", [
    ({"id": "b", "t1": "x", "label": 1}, "missing key 't2'"),
    ({"id": "a", "t1": "x", "t2": "y", "label": 1}, "duplicate"),
])
def test_manifest_validation(tmp_path, bad, needle):
    write_manifest([{"id": "a", "t1": "x", "t2": "y", "label": 0}, bad], tmp_path / "m.jsonl")
    with pytest.raises(ValidationError, match=needle):
        parse_manifest(tmp_path / "m.jsonl")


def test_manifest_139_lines_keep_order(tmp_path):
    lines = [{"id": f"p{i:03d}", "t1": f"{i}_1", "t2": f"{i}_2", "label": i % 3} for i in range(139)]
    write_manifest(lines, tmp_path / "m.jsonl")
    entries = parse_manifest(tmp_path / "m.jsonl")
    assert len(entries) == 139
    assert [e.case_id for e in entries] == [d["id"] for d in lines]
    assert entries[5].t1 == tmp_path / "5_1"


def test_record_requires_matching_extents():
    with pytest.raises(ValidationError):
        ScanRecord("c", Volume(np.zeros((2, 3, 3)), "T1", "c"), Volume(np.zeros((2, 3, 4)), "T2", "c"), 0)


# ---------------------------------------------------------------- normalization

def test_normalize_affine_and_constant():
    v = Volume(np.array([[[2.0, 4.0, 6.0]]], np.float32), "T1", "c")
    np.testing.assert_array_equal(normalize_volume(v).voxels, [[[0.0, 0.5, 1.0]]])
    c = Volume(np.full((2, 2, 2), 7.0, np.float32), "T1", "c")
    np.testing.assert_array_equal(normalize_volume(c).voxels, 0.0)


def test_normalize_random_preserves_rank(rng):
    x = rng.normal(size=(3, 5, 5)).astype(np.float32)
    y = normalize_volume(Volume(x, "T2", "c")).voxels
    assert y.min() == 0.0 and y.max() == 1.0
    np.testing.assert_array_equal(np.argsort(x, axis=None, kind="stable"), np.argsort(y, axis=None, kind="stable"))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float32, (2, 3, 3), elements=st.floats(-1e3, 1e3, width=32)))
def test_normalize_idempotent(x):
    once = normalize_volume(Volume(x, "T1", "c"))
    twice = normalize_volume(once)
    np.testing.assert_allclose(twice.voxels, once.voxels, atol=1e-6)
    assert once.voxels.min() >= 0.0 and once.voxels.max() <= 1.0


# ---------------------------------------------------------------- windows

@pytest.mark.parametrize("depth,k,stride,expected", [
    (12, 9, 1, [0, 1, 2, 3]),
    (9, 9, 1, [0]),
    (20, 9, 2, [0, 2, 4, 6, 8, 10]),
])
def test_extract_windows_examples(depth, k, stride, expected):
    assert extract_windows(depth, k, stride) == expected


def test_extract_windows_insufficient_depth_names_values():
    with pytest.raises(InsufficientDepthError, match=r"k=9.*8"):
        extract_windows(8, 9)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 40), st.integers(1, 40), st.integers(1, 6))
def test_extract_windows_properties(depth, k, stride):
    if k > depth:
        return
    starts = extract_windows(depth, k, stride)
    assert starts[0] == 0
    assert all(b - a == stride for a, b in zip(starts, starts[1:]))
    assert starts[-1] + k <= depth < starts[-1] + k + stride
    if (depth - k) % stride == 0:
        assert starts[-1] == depth - k


@pytest.mark.parametrize("depth,k,expected", [(9, 9, 0), (12, 9, 1), (100, 9, 45)])
def test_central_window(depth, k, expected):
    assert central_window(depth, k) == expected


# ---------------------------------------------------------------- grids

def test_pack_grid_k1_identity(rng):
    s = rng.random((5, 7))
    np.testing.assert_array_equal(pack_grid([s]), s)


def test_pack_grid_cell_1_2_is_slice_5():
    slices = [np.full((4, 4), float(i)) for i in range(9)]
    g = pack_grid(slices)
    np.testing.assert_array_equal(g[4:8, 8:12], 5.0)


def test_pack_grid_coordinate_oracle(rng):
    slices = rng.random((9, 64, 64)).astype(np.float32)
    np.testing.assert_array_equal(pack_grid(slices), grid_oracle(slices))


@pytest.mark.parametrize("k", [1, 4, 9, 16])
def test_pack_then_extract_cells_is_identity(k, rng):
    slices = rng.random((k, 6, 5)).astype(np.float32)
    g = pack_grid(slices)
    s = int(k ** 0.5)
    for i in range(k):
        r, c = divmod(i, s)
        np.testing.assert_array_equal(g[r * 6:(r + 1) * 6, c * 5:(c + 1) * 5], slices[i])
    np.testing.assert_array_equal(unpack_grid(g, k), slices)


def test_pack_grid_rejects_bad_input():
    with pytest.raises(ValidationError):
        pack_grid([np.zeros((2, 2))] * 3)
    with pytest.raises(ValidationError):
        pack_grid([np.zeros((2, 2)), np.zeros((2, 3)), np.zeros((2, 2)), np.zeros((2, 2))])


def test_fuse_early_channels(rng):
    g1, g2 = np.zeros((6, 6), np.float32), np.ones((6, 6), np.float32)
    f = fuse_early(g1, g2)
    assert f.shape == (6, 6, 2)
    np.testing.assert_array_equal(f.mean(axis=(0, 1)), [0.0, 1.0])
    g = rng.random((6, 6))
    f = fuse_early(g, g)
    np.testing.assert_array_equal(f[..., 0], f[..., 1])
    a, b = rng.random((6, 6)), rng.random((6, 6))
    f = fuse_early(a, b)
    assert f[..., 0].tobytes() == a.tobytes() and f[..., 1].tobytes() == b.tobytes()
    with pytest.raises(ValidationError):
        fuse_early(np.zeros((6, 6)), np.zeros((6, 5)))


def test_make_sample_layout(small_records):
    rec = small_records[0]
    s = make_sample(rec, 1, 4)
    assert s.image.shape == (32, 32, 2) and s.image.dtype == np.float32
    np.testing.assert_array_equal(s.image[16:32, 0:16, 0], rec.t1.voxels[3])
    np.testing.assert_array_equal(s.image[0:16, 16:32, 1], rec.t2.voxels[2])
    t2_only = make_sample(rec, 1, 4, ("T2",))
    np.testing.assert_array_equal(t2_only.image[..., 0], s.image[..., 1])


# ---------------------------------------------------------------- augmentation

def _sample(rng, k=4, h=5, c=2):
    return GridSample(rng.random((int(k ** 0.5) * h, int(k ** 0.5) * h, c)).astype(np.float32), 1, "c", 0, k)


def test_flip_rotate_identity(rng):
    s = _sample(rng)
    np.testing.assert_array_equal(flip_rotate(s, False, 0).image, s.image)


def test_rotate_180_twice_is_identity(rng):
    s = _sample(rng)
    np.testing.assert_array_equal(flip_rotate(flip_rotate(s, False, 2), False, 2).image, s.image)


def test_flip_rotate_acts_per_slice_not_on_grid(rng):
    s = _sample(rng, k=9, h=4)
    out = flip_rotate(s, True, 1)
    before, after = unpack_grid(s.image, 9), unpack_grid(out.image, 9)
    for i in range(9):
        for c in range(2):
            np.testing.assert_array_equal(after[i, :, :, c], np.rot90(before[i, :, ::-1, c], 1))


class _FixedRng:
    def __init__(self, u, r):
        self.u, self.r = u, r

    def random(self):
        return self.u

    def integers(self, n):
        return self.r


def test_augment_forced_identity(rng):
    s = _sample(rng)
    np.testing.assert_array_equal(augment(s, _FixedRng(0.9, 0)).image, s.image)


def test_augment_covers_all_eight_transforms(rng):
    s = _sample(rng, k=1, h=3, c=1)
    seen = {augment(s, rng).image.tobytes() for _ in range(400)}
    assert len(seen) == 8


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.sampled_from([1, 4, 9]))
def test_augment_preserves_slice_histograms(seed, k):
    r = np.random.default_rng(seed)
    s = _sample(r, k=k, h=4)
    out = augment(augment(s, r), r)
    assert out.image.shape == s.image.shape
    a, b = unpack_grid(s.image, k), unpack_grid(out.image, k)
    for i in range(k):
        for c in range(2):
            np.testing.assert_array_equal(np.sort(a[i, ..., c], axis=None), np.sort(b[i, ..., c], axis=None))
    assert out.image.min() >= 0.0 and out.image.max() <= 1.0


# ---------------------------------------------------------------- synthetic data

def test_synthetic_zero_cases(tmp_path):
    manifest, entries = gen_synthetic(SyntheticSpec(cases_per_class=0), tmp_path)
    assert entries == [] and manifest.read_text() == ""


def test_synthetic_is_byte_deterministic(tmp_path):
    spec = SyntheticSpec(cases_per_class=2, depth=5, height=8, width=8, seed=9)
    gen_synthetic(spec, tmp_path / "a")
    gen_synthetic(spec, tmp_path / "b")
    assert tree_digest(tmp_path / "a") == tree_digest(tmp_path / "b")
    gen_synthetic(SyntheticSpec(cases_per_class=2, depth=5, height=8, width=8, seed=10), tmp_path / "c")
    assert tree_digest(tmp_path / "a") != tree_digest(tmp_path / "c")


def test_synthetic_labels_and_geometry(tmp_path):
    spec = SyntheticSpec(cases_per_class=3, depth=7, height=12, width=10, seed=0)
    _, entries = gen_synthetic(spec, tmp_path)
    assert [e.label for e in entries] == [0, 1, 2] * 3
    v1, v2 = load_volume(entries[0].t1), load_volume(entries[0].t2)
    assert v1.extents == v2.extents == (7, 12, 10)


def test_synthetic_class_margin_exceeds_three_sigma(tmp_path):
    spec = SyntheticSpec(cases_per_class=20, seed=7)
    _, entries = gen_synthetic(spec, tmp_path)
    means = {0: [], 1: [], 2: []}
    for e in entries:
        for path, sign in ((e.t1, 1.0), (e.t2, -1.0)):
            v = load_volume(path).voxels
            means[e.label].append(sign * v[central_window(spec.depth, 1)].mean())
    t1_means = {c: np.mean(m[0::2]) for c, m in means.items()}
    t2_means = {c: -np.mean(m[1::2]) for c, m in means.items()}
    margin = 3 * spec.noise
    assert t1_means[1] - t1_means[0] > margin and t1_means[2] - t1_means[1] > margin
    assert t2_means[0] - t2_means[1] > margin and t2_means[1] - t2_means[2] > margin


def test_synthetic_spec_validation_names_field():
    with pytest.raises(ValidationError, match="lesion_radius"):
        SyntheticSpec(lesion_radius=(0.0, -1.0, 2.0))
    with pytest.raises(ValidationError, match="bogus"):
        SyntheticSpec.from_dict({"bogus": 1})
