import json

import numpy as np
import pytest
from PIL import Image

from suesr import (
    ConfigError,
    DataError,
    Manifest,
    ShapeError,
    SizeError,
    bicubic_downsample,
    bicubic_resize,
    build_manifest,
    load_image,
    prepare_dataset,
    save_image,
    stratified_counts,
    synthesize_toy_dataset,
)
from suesr.datapipe import IMAGE_EXTENSIONS, SPLITS, TOY_CLASSES


# --- independent bicubic oracle -------------------------------------------

def _kernel(t: float) -> float:
    a = -0.5
    t = abs(t)
    if t <= 1.0:
        return (a + 2.0) * t**3 - (a + 3.0) * t**2 + 1.0
    if t < 2.0:
        return a * t**3 - 5.0 * a * t**2 + 8.0 * a * t - 4.0 * a
    return 0.0


def oracle_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Direct per-output-pixel loop, separable, clamped edges, renormalized."""

    def resample_line(line, out_n):
        in_n = len(line)
        scale = in_n / out_n
        support = max(scale, 1.0)
        out = np.zeros(out_n)
        for i in range(out_n):
            center = (i + 0.5) * scale - 0.5
            lo = int(np.floor(center - 2.0 * support))
            hi = int(np.ceil(center + 2.0 * support))
            wsum = 0.0
            acc = 0.0
            weights = []
            for j in range(lo, hi + 1):
                w = _kernel((j - center) / support)
                if w != 0.0:
                    weights.append((j, w))
                    wsum += w
            for j, w in weights:
                acc += line[min(max(j, 0), in_n - 1)] * (w / wsum)
            out[i] = acc
        return out

    img = np.asarray(img, dtype=np.float64)
    c, h, w = img.shape
    tmp = np.zeros((c, out_h, w))
    for ci in range(c):
        for col in range(w):
            tmp[ci, :, col] = resample_line(img[ci, :, col], out_h)
    out = np.zeros((c, out_h, out_w))
    for ci in range(c):
        for row in range(out_h):
            out[ci, row, :] = resample_line(tmp[ci, row, :], out_w)
    return np.clip(out, 0.0, 1.0)


class TestBicubic:
    def test_downsample_matches_loop_oracle(self):
        rng = np.random.default_rng(0)
        img = rng.uniform(0.0, 1.0, size=(3, 32, 32))
        mine = bicubic_downsample(img, 4)
        ref = oracle_resize(img, 8, 8)
        assert mine.shape == (3, 8, 8)
        assert np.max(np.abs(mine.astype(np.float64) - ref)) < 1e-5

    def test_upsample_matches_loop_oracle(self):
        rng = np.random.default_rng(1)
        img = rng.uniform(0.0, 1.0, size=(3, 8, 8))
        mine = bicubic_resize(img, 32, 32)
        ref = oracle_resize(img, 32, 32)
        assert np.max(np.abs(mine.astype(np.float64) - ref)) < 1e-5

    def test_constant_preserved(self):
        img = np.full((3, 16, 16), 0.37)
        down = bicubic_downsample(img, 4)
        up = bicubic_resize(img, 48, 48)
        assert np.allclose(down, 0.37, atol=1e-6)
        assert np.allclose(up, 0.37, atol=1e-6)

    def test_output_in_range(self):
        rng = np.random.default_rng(2)
        img = (rng.uniform(0, 1, size=(3, 20, 20)) > 0.5).astype(np.float64)
        out = bicubic_resize(img, 80, 80)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_indivisible_size_rejected(self):
        with pytest.raises(SizeError):
            bicubic_downsample(np.zeros((3, 30, 32)), 4)

    def test_bad_shape(self):
        with pytest.raises(ShapeError):
            bicubic_resize(np.zeros((16, 16)), 8, 8)


class TestStratifiedCounts:
    def test_spec_fractions_examples(self):
        assert stratified_counts(10, (0.64, 0.16, 0.20)) == (6, 2, 2)
        assert stratified_counts(2100, (0.64, 0.16, 0.20)) == (1344, 336, 420)
        assert stratified_counts(10000, (0.64, 0.16, 0.20)) == (6400, 1600, 2000)

    def test_counts_sum_and_deviate_less_than_one(self):
        rng = np.random.default_rng(3)
        fractions = (0.64, 0.16, 0.20)
        for _ in range(200):
            n = int(rng.integers(1, 5000))
            counts = stratified_counts(n, fractions)
            assert sum(counts) == n
            for c, f in zip(counts, fractions):
                assert abs(c - n * f) < 1.0


@pytest.fixture()
def toy_root(tmp_path):
    root = tmp_path / "raw"
    synthesize_toy_dataset(root, count=16, hr_size=32, seed=5)
    return root


class TestToyData:
    def test_deterministic_bytes(self, tmp_path):
        a = tmp_path / "a"
        b = tmp_path / "b"
        synthesize_toy_dataset(a, count=6, hr_size=24, seed=9)
        synthesize_toy_dataset(b, count=6, hr_size=24, seed=9)
        for pa, pb in zip(sorted(a.rglob("*.png")), sorted(b.rglob("*.png"))):
            assert pa.read_bytes() == pb.read_bytes()

    def test_round_robin_classes_and_texture(self, toy_root):
        counts = {c: len(list((toy_root / c).glob("*.png"))) for c in TOY_CLASSES}
        assert counts == {c: 8 for c in TOY_CLASSES}
        img = load_image(next((toy_root / "blocks").glob("*.png")))
        assert all(img[c].std() > 0.0 for c in range(3))

    def test_count_lower_bound(self, tmp_path):
        with pytest.raises(ConfigError):
            synthesize_toy_dataset(tmp_path / "x", count=1)


class TestManifest:
    def test_deterministic_and_disjoint(self, toy_root):
        m1 = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=4)
        m2 = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=4)
        assert m1.to_json() == m2.to_json()
        m3 = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=5)
        assert m1.to_json() != m3.to_json()
        all_paths = [e.hr for entries in m1.splits.values() for e in entries]
        assert len(all_paths) == len(set(all_paths)) == 16

    def test_unreadable_file_excluded_with_reason(self, toy_root):
        bad = toy_root / "blocks" / "broken.png"
        bad.write_bytes(b"this is not a png")
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=0)
        assert len(m.excluded) == 1
        assert m.excluded[0]["path"] == str(bad)
        assert m.excluded[0]["reason"]
        total = sum(len(v) for v in m.splits.values())
        assert total == 16

    def test_no_verify_keeps_undecodable(self, toy_root):
        (toy_root / "blocks" / "broken.png").write_bytes(b"junk")
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=0, verify_images=False)
        assert not m.excluded
        assert sum(len(v) for v in m.splits.values()) == 17

    def test_empty_class_dir_rejected(self, toy_root):
        (toy_root / "empty_class").mkdir()
        with pytest.raises(DataError):
            build_manifest(toy_root, (0.5, 0.25, 0.25), seed=0)

    def test_missing_root_rejected(self, tmp_path):
        with pytest.raises(DataError):
            build_manifest(tmp_path / "nope", (0.5, 0.25, 0.25), seed=0)

    @pytest.mark.parametrize("fractions", [
        (0.5, 0.5, 0.5),
        (0.8, 0.2, 0.0),
        (1.0, -0.5, 0.5),
    ])
    def test_bad_fractions(self, toy_root, fractions):
        with pytest.raises(ConfigError):
            build_manifest(toy_root, fractions, seed=0)

    def test_json_round_trip_exact_fields(self, toy_root, tmp_path):
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=1)
        path = tmp_path / "manifest.json"
        m.save(path)
        obj = json.loads(path.read_text())
        assert set(obj) == {"seed", "fractions", "splits", "excluded"}
        assert set(obj["splits"]) == set(SPLITS)
        assert all(set(e) == {"hr", "lr", "class"}
                   for entries in obj["splits"].values() for e in entries)
        back = Manifest.load(path)
        assert back.to_json() == m.to_json()

    def test_extra_field_rejected(self, tmp_path):
        path = tmp_path / "m.json"
        path.write_text(json.dumps({
            "seed": 0, "fractions": [0.5, 0.25, 0.25],
            "splits": {s: [] for s in SPLITS}, "excluded": [], "bonus": 1,
        }))
        with pytest.raises(DataError):
            Manifest.load(path)


class TestPrepare:
    def test_layout_and_degradation_consistency(self, toy_root, tmp_path):
        out = tmp_path / "prep"
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=2)
        mat = prepare_dataset(m, out, hr_size=32, factor=4)
        assert (out / "manifest.json").is_file()
        for split, entries in mat.splits.items():
            for e in entries:
                assert e.hr.startswith(f"{split}/hr/")
                assert e.lr.startswith(f"{split}/lr/")
                hr = load_image(out / e.hr)
                lr = load_image(out / e.lr)
                assert hr.shape == (3, 32, 32) and lr.shape == (3, 8, 8)
                # stored LR is byte-reproducible from the stored HR
                redone = bicubic_downsample(hr, 4)
                requant = np.round(np.clip(redone, 0, 1) * 255).astype(np.uint8)
                stored = np.round(lr * 255).astype(np.uint8)
                assert np.array_equal(requant, stored)

    def test_idempotent_rerun(self, toy_root, tmp_path):
        out = tmp_path / "prep"
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=2)
        prepare_dataset(m, out, hr_size=32, factor=4)
        stats = {p: p.stat().st_mtime_ns for p in sorted(out.rglob("*.png"))}
        prepare_dataset(m, out, hr_size=32, factor=4)
        after = {p: p.stat().st_mtime_ns for p in sorted(out.rglob("*.png"))}
        assert stats == after

    def test_small_source_excluded(self, toy_root, tmp_path):
        small = toy_root / "blocks" / "small.png"
        Image.new("RGB", (8, 8)).save(small)
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=2)
        mat = prepare_dataset(m, tmp_path / "prep", hr_size=32, factor=4)
        reasons = [x["reason"] for x in mat.excluded]
        assert any("smaller than hr_size" in r for r in reasons)
        total = sum(len(v) for v in mat.splits.values())
        assert total == 16

    def test_bad_factor(self, toy_root, tmp_path):
        m = build_manifest(toy_root, (0.5, 0.25, 0.25), seed=2)
        with pytest.raises(ConfigError):
            prepare_dataset(m, tmp_path / "p", hr_size=32, factor=5)


class TestImageIO:
    def test_save_load_quantized_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        img = np.round(rng.uniform(0, 1, size=(3, 9, 11)) * 255) / 255.0
        path = tmp_path / "x.png"
        save_image(img.astype(np.float32), path)
        back = load_image(path)
        assert np.allclose(back, img, atol=1e-7)

    def test_unreadable_raises(self, tmp_path):
        path = tmp_path / "junk.png"
        path.write_bytes(b"nope")
        with pytest.raises(DataError):
            load_image(path)

    def test_extension_list_is_lowercase(self):
        assert all(ext == ext.lower() for ext in IMAGE_EXTENSIONS)
