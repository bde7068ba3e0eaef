import numpy as np
import pytest

from flexctrl.control import build_union_mask
from flexctrl.errors import FormatError
from flexctrl.synthdata import (
    EDGE_THRESHOLD,
    LUMA,
    SIZE,
    Scene,
    SceneObject,
    decode_tokens,
    extract_depth,
    extract_edge,
    extract_seg,
    make_corpus,
    make_record,
    read_dataset,
    record_seed,
    records_equal,
    render,
    sample_scene,
    tokens_and_segments,
    write_dataset,
)


def brute_sobel_edges(image):
    """Per-pixel 3×3 Sobel on Rec.601 luminance with zero padding, masked to foreground."""
    gray = sum(LUMA[c] * image[c].astype(np.float64) for c in range(3))
    kx = [[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]]
    out = np.zeros((SIZE, SIZE), dtype=np.float32)
    for y in range(SIZE):
        for x in range(SIZE):
            gx = gy = 0.0
            for dy in (-1, 0, 1):
                for dx in (-1, 0, 1):
                    yy, xx = y + dy, x + dx
                    v = gray[yy, xx] if 0 <= yy < SIZE and 0 <= xx < SIZE else 0.0
                    gx += kx[dy + 1][dx + 1] * v
                    gy += kx[dx + 1][dy + 1] * v
            if (gx * gx + gy * gy) ** 0.5 > EDGE_THRESHOLD and image[:, y, x].max() > 0:
                out[y, x] = 1
    return out


def square(color="red", center=(8, 8), h=3, z=0):
    return SceneObject("square", color, center, h, z)


def test_scene_is_deterministic():
    assert sample_scene(123) == sample_scene(123)
    assert np.array_equal(render(sample_scene(123)), render(sample_scene(123)))


def test_scene_invariants_over_10k_seeds():
    counts = {1: 0, 2: 0, 3: 0}
    for seed in range(10_000):
        scene = sample_scene(seed)
        counts[len(scene.objects)] += 1
        for obj in scene.objects:
            support = obj.support()
            cy, cx = obj.center
            assert 2 <= obj.half_size <= 4
            assert support.sum() > 0
            assert cy - obj.half_size >= 0 and cy + obj.half_size <= SIZE
            assert cx - obj.half_size >= 0 and cx + obj.half_size <= SIZE
        for a in range(len(scene.objects)):
            for b in range(a + 1, len(scene.objects)):
                ca, cb = scene.objects[a].center, scene.objects[b].center
                assert (ca[0] - cb[0]) ** 2 + (ca[1] - cb[1]) ** 2 >= 25
    assert all(c > 0 for c in counts.values())


def test_render_cases():
    assert not render(Scene(())).any()
    img = render(Scene((square(h=3),)))
    red = (img[0] == 1) & (img[1] == 0) & (img[2] == 0)
    assert red.sum() == 36


def test_render_z_order_on_overlap():
    low = square("red", (6, 6), 4, z=0)
    high = SceneObject("circle", "blue", (10, 9), 3, 1)
    img = render(Scene((low, high)))
    overlap = (low.support() & high.support()).astype(bool)
    assert overlap.any()
    assert (img[2][overlap] == 1).all() and (img[0][overlap] == 0).all()
    # flipping z-order flips the winner
    img2 = render(Scene((SceneObject("square", "red", (6, 6), 4, 1), SceneObject("circle", "blue", (10, 9), 3, 0))))
    assert (img2[0][overlap] == 1).all()


def test_extract_edge_matches_brute_force_and_is_perimeter():
    assert not extract_edge(np.zeros((3, SIZE, SIZE), np.float32)).any()
    for color in ("red", "green", "blue"):
        img = render(Scene((square(color, (8, 8), 3),)))
        edges = extract_edge(img)[0]
        assert np.array_equal(edges, brute_sobel_edges(img))
        support = square(h=3).support().astype(bool)
        interior = np.zeros_like(support)
        interior[6:10, 6:10] = True
        assert np.array_equal(edges.astype(bool), support & ~interior)
        assert np.array_equal(extract_edge(img), extract_edge(img))
    for seed in range(50):
        img = render(sample_scene(seed))
        assert np.array_equal(extract_edge(img)[0], brute_sobel_edges(img))


def test_extract_seg_properties():
    for seed in range(200):
        scene = sample_scene(seed)
        seg, masks = extract_seg(scene)
        img = render(scene)
        background = img.max(axis=0) == 0
        assert (seg[0][background] == 0).all()
        stacked = np.stack(masks).astype(int)
        assert stacked.sum(axis=0).max() <= 1
        assert np.array_equal(stacked.sum(axis=0) > 0, seg[0] > 0)


def test_extract_depth_properties():
    depth = extract_depth(Scene((square(z=0),)))
    support = square().support().astype(bool)
    assert (depth[0][support] == 1).all() and (depth[0][~support] == 0).all()
    near, far = square("red", (4, 4), 2, z=0), square("blue", (12, 12), 2, z=2)
    d = extract_depth(Scene((near, far)))[0]
    assert d[near.support() == 1].min() > d[far.support() == 1].max()
    for seed in range(100):
        vals = np.unique(extract_depth(sample_scene(seed)))
        assert ((vals == 0) | ((vals > 0) & (vals <= 1))).all()


def test_tokens_and_segments():
    ids, segs = tokens_and_segments(Scene((square(),)))
    assert decode_tokens(ids) == "red square"
    assert len(ids) == 2 and len(segs) == 1
    assert segs[0].token_segment == {0, 1}
    assert np.array_equal(segs[0].mask, square().support())
    three = Scene((square("red", (3, 3), 2, 0), square("green", (3, 12), 2, 1), square("blue", (12, 8), 2, 2)))
    ids, segs = tokens_and_segments(three)
    assert len(ids) == 8
    assert [s.token_segment for s in segs] == [{0, 1}, {3, 4}, {6, 7}]
    assert decode_tokens(ids) == "red square and green square and blue square"


def test_record_invariants():
    for rec in make_corpus(5, 100):
        seg_support = rec.bundle.fused_input[1] > 0
        foreground = rec.image.max(axis=0) > 0
        for seg in rec.segments:
            assert (seg.mask.astype(bool) <= seg_support).all()
        for ch in range(3):
            assert (rec.bundle.fused_input[ch][~foreground] == 0).all()
        assert np.array_equal(build_union_mask(rec.bundle).astype(bool), foreground)
        assert decode_tokens(rec.tokens) == rec.prompt


def test_corpus_reproducible():
    a, b = make_corpus(3, 20), make_corpus(3, 20)
    assert all(records_equal(x, y) for x, y in zip(a, b))
    assert record_seed(3, 0) != record_seed(4, 0)


def test_dataset_roundtrip(tmp_path):
    recs = make_corpus(0, 100)
    path = tmp_path / "d.fxds"
    write_dataset(recs, path)
    back = read_dataset(path)
    assert len(back) == 100
    assert all(records_equal(x, y) for x, y in zip(recs, back))


def test_dataset_truncated_and_bad_magic(tmp_path):
    path = tmp_path / "d.fxds"
    write_dataset(make_corpus(0, 5), path)
    data = path.read_bytes()
    (tmp_path / "t.fxds").write_bytes(data[:-10])
    with pytest.raises(FormatError, match="truncated"):
        read_dataset(tmp_path / "t.fxds")
    (tmp_path / "m.fxds").write_bytes(b"NOPE" + data[4:])
    with pytest.raises(FormatError, match="FXDS"):
        read_dataset(tmp_path / "m.fxds")


def test_make_record_single():
    rec = make_record(42)
    assert rec.image.shape == (3, SIZE, SIZE)
    assert len(rec.bundle.instances) == 3 * len(rec.segments)
