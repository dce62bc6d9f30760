import math

import numpy as np
import pytest

from patchpose import dataset as D
from patchpose.histogram import ORIENTATION_BINS, SCALE_BINS
from patchpose.synth import corner_image, textured_image
from patchpose.transform import warp_extract


@pytest.fixture(scope="module")
def textured():
    return [D.SourceImage(f"img{i:02d}.png", textured_image(np.random.default_rng(100 + i), 512, 512))
            for i in range(2)]


@pytest.fixture(scope="module")
def grid_one(textured):
    cfg = D.GenConfig(keypoints_per_image=1)
    return D.generate_grid(textured[:1], cfg), cfg


def fake_dataset(n_keypoints, pairs_per_kp=2, scores=None):
    records, patches = [], []
    for k in range(n_keypoints):
        kp = (float(k), 0.0)
        for j in range(pairs_per_kp):
            patches.append(np.full((3, 32, 32), k + j / 10, dtype=np.float32))
            records.append(D.PatchPairRecord(len(records), "x.png", kp, 0.0, 0.0,
                                             len(patches) - 1, len(patches) - 1))
    ds = D.PatchPairDataset(records, np.stack(patches))
    if scores is not None:
        ds.scores = {("x.png", (float(k), 0.0)): s for k, s in enumerate(scores)}
    return ds


class TestKeypoints:
    def test_constant_image_has_none(self):
        assert D.sample_keypoints(np.full((400, 400, 3), 0.3), 3, 100) == []

    def test_known_corners(self):
        truth = [(200, 200), (300, 215), (250, 300)]
        img = corner_image(500, 500, truth)
        got = D.sample_keypoints(img, 3, 182)
        assert len(got) == 3
        for x, y in truth:
            assert (float(x), float(y)) in got

    def test_margin_and_spacing(self, textured):
        m = 182
        for src in textured:
            pts = D.sample_keypoints(src.pixels, 10, m)
            assert pts
            H, W = src.pixels.shape[:2]
            for x, y in pts:
                assert not ((x < m) or (y < m) or (x > W - m) or (y > H - m))
            for i in range(len(pts)):
                for j in range(i):
                    assert math.dist(pts[i], pts[j]) >= 32

    def test_insufficient_area(self):
        with pytest.raises(D.InsufficientAreaError):
            D.sample_keypoints(np.zeros((300, 300, 3)), 3, 182)

    def test_deterministic(self, textured):
        a = D.sample_keypoints(textured[0].pixels, 3, 182)
        assert a == D.sample_keypoints(textured[0].pixels, 3, 182)


class TestGrid:
    def test_pair_count_matches_enumeration(self, grid_one):
        ds, _ = grid_one
        enumerated = {(s, o) for s in SCALE_BINS.centers for o in ORIENTATION_BINS.centers
                      if s == 0.0 or o == 0.0}
        assert len(enumerated) == 48
        assert len(ds) == 48
        assert {(r.ds, r.do) for r in ds.records} == enumerated

    def test_labels_are_bin_centers(self, grid_one):
        ds, _ = grid_one
        for r in ds.records:
            assert r.ds in SCALE_BINS.centers.tolist()
            assert r.do in ORIENTATION_BINS.centers.tolist()
            assert r.ds == 0.0 or r.do == 0.0

    def test_identity_pair_bit_identical(self, grid_one):
        ds, _ = grid_one
        ident = [r for r in ds.records if r.ds == 0.0 and r.do == 0.0]
        assert len(ident) == 1
        assert np.array_equal(ds.patches[ident[0].patch_a], ds.patches[ident[0].patch_b])

    def test_labels_reproduce_synthesis(self, textured, grid_one):
        ds, cfg = grid_one
        img = textured[0].pixels
        for r in ds.records:
            a = warp_extract(img, r.kp, 1.0, 0.0).astype(np.float32)
            b = warp_extract(img, r.kp, 2.0 ** r.ds, r.do).astype(np.float32)
            assert np.array_equal(ds.patches[r.patch_a], a)
            assert np.array_equal(ds.patches[r.patch_b], b)

    def test_skips_out_of_bounds_keypoints(self, textured):
        cfg = D.GenConfig()
        bad = [D.Keypoint(textured[0].name, 20.0, 20.0)]
        assert len(D.generate_grid(textured[:1], cfg, keypoints=bad)) == 0


class TestContinuous:
    def test_ranges_and_count(self, textured):
        cfg = D.GenConfig(mode=D.GenMode.CONTINUOUS, pairs=25, seed=3)
        ds = D.generate_continuous(textured, cfg)
        assert len(ds) == 25
        for r in ds.records:
            assert -2 <= r.ds <= 2 and 0 <= r.do < 2 * math.pi

    def test_seeded_manifest_identical(self, textured, tmp_path):
        cfg = D.GenConfig(mode=D.GenMode.CONTINUOUS, pairs=12, seed=5)
        D.save(D.generate_continuous(textured, cfg), tmp_path / "a")
        D.save(D.generate_continuous(textured, cfg), tmp_path / "b")
        for name in (D.MANIFEST, D.PACK):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_labels_reproduce_synthesis(self, textured):
        cfg = D.GenConfig(mode=D.GenMode.CONTINUOUS, pairs=6, seed=1)
        ds = D.generate_continuous(textured[:1], cfg)
        img = textured[0].pixels
        for r in ds.records:
            b = warp_extract(img, r.kp, 2.0 ** r.ds, r.do).astype(np.float32)
            assert np.array_equal(ds.patches[r.patch_b], b)

    def test_log_scale_mean(self):
        ds, do = D.sample_continuous_poses(np.random.default_rng(0), 10_000)
        assert abs(ds.mean()) < 0.05
        assert ds.min() >= -2 and ds.max() <= 2
        assert do.min() >= 0 and do.max() < 2 * math.pi


def two_pass_sigma(feats):
    n, dim = feats.shape
    mean = [0.0] * dim
    for row in feats:
        for i in range(dim):
            mean[i] += row[i]
    mean = [m / n for m in mean]
    total = 0.0
    for row in feats:
        for i in range(dim):
            total += (row[i] - mean[i]) ** 2
    return math.sqrt(total)


class TestDiscriminability:
    def test_transform_set(self):
        cfg = D.DiscriminabilityConfig()
        assert len(cfg.transforms) == 468
        assert len(set(cfg.transforms)) == 468

    def test_descriptor_shape(self):
        f = D.gradient_descriptor(np.random.default_rng(0).random((2, 3, 32, 32)))
        assert f.shape == (2, 128) and np.all(f >= 0)

    def test_constant_is_zero(self):
        assert D.discriminability(np.full((370, 370, 3), 0.4)) == 0.0

    def test_edge_beats_constant(self):
        yy, xx = np.mgrid[0:370, 0:370]
        edge = ((xx - 185) * 0.8 + (yy - 185) * 0.3 > 0) & (xx - 185 > -40)
        img = np.repeat(edge[..., None].astype(float), 3, axis=2)
        assert D.discriminability(img) > D.discriminability(np.full((370, 370, 3), 0.9))

    def test_matches_two_pass_oracle(self, textured):
        img = textured[0].pixels
        cfg = D.DiscriminabilityConfig()
        kp = D.sample_keypoints(img, 1, 182)[0]
        feats = D.transformed_features(img, cfg, center=kp)
        assert feats.shape == (468, 128)
        assert D.discriminability(img, cfg, center=kp) == pytest.approx(two_pass_sigma(feats), abs=1e-9)


class TestPrune:
    def test_zero_is_identity(self):
        ds = fake_dataset(5, scores=[1, 2, 3, 4, 5])
        assert D.prune(ds, 0.0) == ds

    def test_bottom_two_of_ten(self):
        scores = [5.0, 1.0, 9.0, 0.5, 7.0, 3.0, 8.0, 6.0, 4.0, 2.0]
        ds = D.prune(fake_dataset(10, scores=scores), 0.2)
        remaining = {r.kp[0] for r in ds.records}
        assert remaining == set(range(10)) - {1.0, 3.0}
        assert len(ds) == 16

    def test_ties_by_record_id(self):
        ds = D.prune(fake_dataset(5, scores=[1, 1, 1, 1, 1]), 0.4)
        assert {r.kp[0] for r in ds.records} == {2.0, 3.0, 4.0}

    def test_never_more_than_ceiling(self):
        for n in range(1, 30):
            for frac in (0.1, 0.2, 0.33, 0.5):
                kept = D.keep_top(list(range(n)), list(range(n)), frac)
                assert n - len(kept) <= math.ceil(frac * n)

    def test_constant_patches_pruned_first(self, textured):
        flat = D.SourceImage("flat.png", np.full((512, 512, 3), 0.5))
        sources = [flat, textured[0]]
        kps = [D.Keypoint("flat.png", 256.0, 256.0), D.Keypoint("flat.png", 200.0, 300.0)]
        kps += D.detect_keypoints(textured[:1], D.GenConfig())
        cfg = D.GenConfig()
        scores = D.score_keypoints(sources, kps, cfg)
        assert scores[0] == scores[1] == 0.0
        assert min(scores[2:]) > 0
        keep = D.keep_top(scores, list(range(len(kps))), 0.4)
        assert 0 not in keep and 1 not in keep
        ds = D.generate_grid(sources, cfg, kps, {k.key: s for k, s in zip(kps, scores)})
        pruned = D.prune(ds, 0.4)
        assert all(r.img != "flat.png" for r in pruned.records)


class TestSplit:
    def test_ratios(self):
        train, val, test = D.split(fake_dataset(100), (0.98, 0.01, 0.01), seed=0)
        assert [len(p.keypoints()) for p in (train, val, test)] == [98, 1, 1]

    def test_partition(self):
        ds = fake_dataset(40, pairs_per_kp=3)
        parts = D.split(ds, (0.8, 0.1, 0.1), seed=2)
        ids = [sorted(r.id for r in p.records) for p in parts]
        assert sorted(sum(ids, [])) == list(range(len(ds)))
        kps = [set(p.keypoints()) for p in parts]
        assert not (kps[0] & kps[1]) and not (kps[0] & kps[2]) and not (kps[1] & kps[2])
        # patches follow their records
        for p in parts:
            for r in p.records:
                assert p.patches[r.patch_a][0, 0, 0] == pytest.approx(r.kp[0], abs=0.5)

    def test_seeded(self):
        ds = fake_dataset(50)
        a = D.split(ds, (0.8, 0.1, 0.1), seed=9)
        b = D.split(ds, (0.8, 0.1, 0.1), seed=9)
        assert all(x == y for x, y in zip(a, b))

    def test_empty_split(self):
        with pytest.raises(D.EmptySplitError):
            D.split(fake_dataset(10), (0.98, 0.01, 0.01))


class TestPersistence:
    def test_empty(self, tmp_path):
        D.save(D.PatchPairDataset.empty(), tmp_path)
        lines = (tmp_path / D.MANIFEST).read_text().splitlines()
        assert len(lines) == 1
        assert '"format": "patchpose-pack"' in lines[0]
        assert len(D.load(tmp_path)) == 0

    def test_single_record(self, tmp_path):
        ds = fake_dataset(1, pairs_per_kp=1)
        D.save(ds, tmp_path)
        assert D.load(tmp_path) == ds

    def test_grid_round_trip(self, grid_one, tmp_path):
        ds, _ = grid_one
        D.save(ds, tmp_path)
        back = D.load(tmp_path)
        assert back == ds
        assert back.patches.dtype == np.float32

    def test_manifest_fields(self, grid_one, tmp_path):
        import json
        D.save(grid_one[0], tmp_path)
        lines = (tmp_path / D.MANIFEST).read_text().splitlines()
        assert json.loads(lines[0]) == {"format": "patchpose-pack", "version": 1, "patch": [3, 32, 32]}
        rec = json.loads(lines[1])
        assert list(rec) == ["id", "img", "kp", "ds", "do", "off_a", "off_b", "crc_a", "crc_b"]
        assert rec["off_a"] % (3 * 32 * 32 * 4) == 0

    def test_corrupt_byte(self, tmp_path):
        D.save(fake_dataset(3), tmp_path)
        pack = bytearray((tmp_path / D.PACK).read_bytes())
        pack[100] ^= 0xFF
        (tmp_path / D.PACK).write_bytes(bytes(pack))
        with pytest.raises(D.ChecksumError):
            D.load(tmp_path)

    def test_truncated(self, tmp_path):
        D.save(fake_dataset(3), tmp_path)
        pack = (tmp_path / D.PACK).read_bytes()
        (tmp_path / D.PACK).write_bytes(pack[:-3 * 32 * 32 * 4])
        with pytest.raises(D.TruncatedPackError):
            D.load(tmp_path)

    def test_version_mismatch(self, tmp_path):
        D.save(fake_dataset(1), tmp_path)
        text = (tmp_path / D.MANIFEST).read_text().replace('"version": 1', '"version": 2')
        (tmp_path / D.MANIFEST).write_text(text)
        with pytest.raises(D.FormatError):
            D.load(tmp_path)


def test_build_dataset_prunes_then_generates(textured):
    cfg = D.GenConfig(keypoints_per_image=3, prune_fraction=0.2)
    ds = D.build_dataset(textured, cfg)
    n_kp = len(D.detect_keypoints(textured, cfg))
    assert len(ds.keypoints()) == n_kp - math.floor(0.2 * n_kp)
    assert len(ds) == 48 * len(ds.keypoints())
    assert set(ds.scores) == set(ds.keypoints())
