import hashlib
import struct
from dataclasses import replace

import numpy as np
import pytest

from bridgenet.data import (
    MAGIC,
    DuplicateNameError,
    FormatError,
    SceneConfig,
    TruncatedError,
    build_dataset,
    collate,
    decode_archive,
    decode_tensor,
    derive_edges,
    derive_normals,
    encode_archive,
    encode_tensor,
    generate_scene,
    load_split,
    read_archive,
    read_manifest,
    read_tensor,
    write_archive,
    write_tensor,
)

CFG = SceneConfig(image_size=32, min_extent=6, max_extent=14)


def test_scene_config_validation():
    with pytest.raises(ValueError):
        SceneConfig(depth_near=2.0, depth_far=1.0)
    with pytest.raises(ValueError):
        SceneConfig(num_classes=1)


def test_generation_is_deterministic():
    a, b = generate_scene(CFG, 7).arrays(), generate_scene(CFG, 7).arrays()
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)
    c = generate_scene(CFG, 8).arrays()
    assert a["image"].tobytes() != c["image"].tobytes()


def test_sample_invariants():
    for seed in range(10):
        s = generate_scene(CFG, seed)
        assert s.image.shape == (3, 32, 32) and s.image.dtype == np.float32
        assert s.seg.min() >= 0 and s.seg.max() < CFG.num_classes
        assert np.abs(np.linalg.norm(s.normals, axis=0) - 1).max() < 1e-6
        assert np.array_equal(s.edges, derive_edges(s.seg))
        # normals come from the float64 depth before it is stored as float32
        np.testing.assert_allclose(s.normals, derive_normals(s.depth), atol=1e-4)
        assert set(s.masks) == {"seg", "depth", "normals", "edges"}


def test_zero_shapes_scene():
    s = generate_scene(replace(CFG, min_shapes=0, max_shapes=0), 3)
    assert not s.seg.any() and not s.edges.any()
    # background plane: depth is linear in the row index and constant along rows
    assert np.abs(np.diff(s.depth, axis=1)).max() == 0
    assert np.abs(np.diff(s.depth, 2, axis=0)).max() < 1e-6


def test_occlusion_consistency_brute_force():
    for seed in range(10):
        s = generate_scene(CFG, seed)
        for y in range(32):
            for x in range(32):
                covering = [sh for sh in s.shapes if sh["cover"][y, x]]
                if not covering:
                    assert s.seg[y, x] == 0
                    continue
                front = min(covering, key=lambda sh: sh["depth"][y, x])
                assert s.seg[y, x] == front["cls"]
                assert s.depth[y, x] == pytest.approx(front["depth"][y, x], abs=1e-6)


def test_normals_examples():
    assert np.array_equal(derive_normals(np.full((5, 5), 2.0)), np.tile([[[0.0]], [[0.0]], [[1.0]]], (1, 5, 5)))
    plane = np.tile(np.arange(6.0), (6, 1))
    n = derive_normals(plane)
    np.testing.assert_allclose(n[:, 2, 2], [-1 / np.sqrt(2), 0, 1 / np.sqrt(2)], atol=1e-6)


def test_edges_examples():
    assert not derive_edges(np.ones((4, 4), int)).any()
    seg = np.zeros((4, 6), int)
    seg[:, 3:] = 1
    e = derive_edges(seg)
    assert np.array_equal(np.nonzero(e.any(0))[0], [2, 3]) and e[:, 2:4].all()
    rng = np.random.default_rng(0)
    seg = rng.integers(0, 4, (8, 8))
    perm = np.array([2, 0, 3, 1])
    assert derive_edges(seg).sum() == derive_edges(perm[seg]).sum()


def test_collate_shapes():
    samples = [generate_scene(CFG, i) for i in range(3)]
    images, targets, masks = collate(samples, ("seg", "depth", "normals", "edges"))
    assert images.shape == (3, 3, 32, 32)
    assert targets["seg"].shape == (3, 32, 32)
    assert targets["depth"].shape == (3, 1, 32, 32)
    assert targets["normals"].shape == (3, 3, 32, 32)
    assert masks["depth"].shape == (3, 32, 32)


# ---------------------------------------------------------------------------
# tensor files


def test_tensor_layout_is_bit_exact():
    buf = encode_tensor(np.array([[1, 2, 3]], dtype=np.int32))
    assert buf[:4] == MAGIC and buf[4:7] == bytes([1, 2, 2])
    assert struct.unpack_from("<2I", buf, 7) == (1, 3)
    assert buf[15:] == struct.pack("<3i", 1, 2, 3)
    f = encode_tensor(np.float32(1.5))
    assert f[4:7] == bytes([1, 1, 0]) and f[7:] == struct.pack("<f", 1.5)


def test_random_archives_round_trip_bitwise(tmp_path):
    rng = np.random.default_rng(0)
    for i in range(1000):
        named = []
        for j in range(int(rng.integers(1, 4))):
            shape = tuple(int(d) for d in rng.integers(0, 5, size=int(rng.integers(0, 4))))
            if rng.random() < 0.5:
                arr = rng.normal(size=shape).astype(np.float32)
            else:
                arr = rng.integers(-2**31, 2**31 - 1, size=shape, dtype=np.int64).astype(np.int32)
            named.append((f"t{j}", arr))
        back = decode_archive(encode_archive(named))
        assert list(back) == [n for n, _ in named]
        for (_, a), b in zip(named, back.values()):
            assert a.dtype == b.dtype and a.shape == b.shape and a.tobytes() == b.tobytes()
    path = tmp_path / "a.btnr"
    write_archive(path, named)
    assert list(read_archive(path)) == [n for n, _ in named]


def test_archive_order_and_names(tmp_path):
    named = [("zeta", np.zeros(2, np.float32)), ("alpha", np.ones(3, np.int32)), ("mid", np.eye(2, dtype=np.float32))]
    write_archive(tmp_path / "x.btnr", named)
    back = read_archive(tmp_path / "x.btnr")
    assert list(back) == ["zeta", "alpha", "mid"]
    with pytest.raises(DuplicateNameError):
        encode_archive([("a", np.zeros(1)), ("a", np.zeros(1))])


def test_single_tensor_file(tmp_path):
    x = np.random.default_rng(1).normal(size=(2, 3)).astype(np.float32)
    write_tensor(tmp_path / "t", x)
    assert read_tensor(tmp_path / "t").tobytes() == x.tobytes()
    (tmp_path / "t").write_bytes(encode_tensor(x) + b"\0")
    with pytest.raises(FormatError):
        read_tensor(tmp_path / "t")


def test_corruption_errors():
    good = encode_tensor(np.arange(6, dtype=np.float32).reshape(2, 3))
    with pytest.raises(FormatError, match="magic"):
        decode_tensor(b"XXXX" + good[4:])
    with pytest.raises(FormatError, match="version"):
        decode_tensor(good[:4] + b"\x02" + good[5:])
    with pytest.raises(FormatError, match="dtype"):
        decode_tensor(good[:5] + b"\x09" + good[6:])
    for cut in (3, 6, 10, len(good) - 1):
        with pytest.raises(TruncatedError):
            decode_tensor(good[:cut])
    arch = encode_archive({"a": np.zeros(3, np.float32)})
    with pytest.raises(TruncatedError):
        decode_archive(arch[:-2])
    with pytest.raises(FormatError):
        encode_tensor(np.array(["s"]))


def test_build_dataset(tmp_path):
    m = build_dataset(CFG, 8, 2, tmp_path / "d")
    rows = read_manifest(m)
    assert len(rows) == 10 and len(list((tmp_path / "d").rglob("*.btnr"))) == 10
    assert m.read_text().splitlines()[0] == "train\ttrain/00000.btnr\t0"
    train = load_split(tmp_path / "d", "train")
    assert len(train) == 8 and train[0].image.shape == (3, 32, 32)
    assert len(load_split(tmp_path / "d", "val")) == 2
    build_dataset(CFG, 8, 2, tmp_path / "e")

    def digest(root):
        h = hashlib.sha256()
        for p in sorted(root.rglob("*")):
            if p.is_file():
                h.update(str(p.relative_to(root)).encode() + p.read_bytes())
        return h.hexdigest()

    assert digest(tmp_path / "d") == digest(tmp_path / "e")
    with pytest.raises(ValueError):
        build_dataset(CFG, 0, 1, tmp_path / "f")
