from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from lvseg.dataio import (DatasetManifest, Entry, PhantomSpec, decode_pgm, encode_pgm,
                          encode_ppm, format_contour, format_manifest, generate_phantoms,
                          load_slice, make_targets, parse_contour, parse_manifest, read_manifest,
                          roi_grid, split, synth_dataset, write_contour, write_pgm)
from lvseg.errors import (ExtentMismatch, MalformedContour, MalformedFile, MalformedImage,
                          TooFewStacks)
from lvseg.geometry import ellipse_points
from lvseg.metrics import dice, rasterize


def brute_roi_grid(r0, c0, side=100):
    g = np.zeros((32, 32), bool)
    for i in range(32):
        for j in range(32):
            rows = set(range(8 * i, 8 * i + 8)) & set(range(r0, r0 + side))
            cols = set(range(8 * j, 8 * j + 8)) & set(range(c0, c0 + side))
            g[i, j] = bool(rows) and bool(cols)
    return g


def stacked_manifest(n_stacks, per_stack=3):
    entries = [Entry(f"s{k}_{i}", f"i{k}_{i}.pgm", f"c{k}_{i}.txt", f"s{k}", i)
               for k in range(n_stacks) for i in range(per_stack)]
    return DatasetManifest(entries)


class TestPgm:
    def test_sixteen_bit_roundtrip_bit_exact(self, rng):
        q = rng.integers(0, 65536, size=(256, 256))
        img = q / 65535.0
        data = encode_pgm(img)
        back = decode_pgm(data)
        assert back.tobytes() == img.tobytes()
        assert encode_pgm(back) == data

    def test_eight_bit(self):
        img = np.array([[0, 128, 255]]) / 255.0
        data = encode_pgm(img, 255)
        assert data.startswith(b"P5\n3 1\n255\n")
        np.testing.assert_array_equal(decode_pgm(data), img)

    def test_max_value_is_one(self):
        assert decode_pgm(b"P5 1 1 255\n\xff")[0, 0] == 1.0

    def test_header_comments(self):
        assert decode_pgm(b"P5\n# made by hand\n2 1\n255\n\x00\xff").shape == (1, 2)

    @pytest.mark.parametrize("data,where", [(b"P5 2 2 255\n\x00\x00\x00", "truncated"),
                                            (b"P5 1 1 255\n\x00\x00", "trailing"),
                                            (b"P2 1 1 255\n0", "magic"),
                                            (b"P5 1 x 255\n\x00", "integer")])
    def test_malformed(self, data, where):
        with pytest.raises(MalformedImage, match=where):
            decode_pgm(data)

    def test_ppm(self):
        data = encode_ppm(np.zeros((2, 3, 3), np.uint8))
        assert data == b"P6\n3 2\n255\n" + bytes(18)


class TestContours:
    def test_two_points_rejected(self):
        with pytest.raises(MalformedContour, match=">= 3"):
            parse_contour("1 2\n3 4\n")

    def test_line_number_reported(self):
        with pytest.raises(MalformedContour) as err:
            parse_contour("1 2\n3 4\n5 six\n")
        assert err.value.line == 3

    def test_comments_and_blank_lines(self):
        assert parse_contour("# c\n1 2\n\n3 4\n5 6\n").shape == (3, 2)

    @given(seed=st.integers(0, 10_000))
    def test_text_roundtrip(self, seed):
        pts = np.random.default_rng(seed).uniform(0, 255, size=(20, 2)).round(6)
        np.testing.assert_array_equal(parse_contour(format_contour(pts)), pts)


class TestLoadSlice:
    def test_load(self, tmp_path, rng):
        img = rng.integers(0, 65536, size=(256, 256)) / 65535.0
        write_pgm(tmp_path / "a.pgm", img)
        write_contour(tmp_path / "a.txt", ellipse_points(128, 128, 20, 15))
        im, c = load_slice(tmp_path / "a.pgm", tmp_path / "a.txt")
        np.testing.assert_array_equal(im, img)
        assert c.shape == (128, 2)

    def test_extent_mismatch(self, tmp_path):
        write_pgm(tmp_path / "a.pgm", np.zeros((64, 64)))
        write_contour(tmp_path / "a.txt", ellipse_points(30, 30, 5, 5))
        with pytest.raises(ExtentMismatch):
            load_slice(tmp_path / "a.pgm", tmp_path / "a.txt")


class TestMakeTargets:
    def test_centred_block(self):
        grid, shape = make_targets(ellipse_points(128, 128, 20, 15))
        np.testing.assert_array_equal(grid, brute_roi_grid(78, 78))
        rows = np.nonzero(grid.any(axis=1))[0]
        assert 13 <= len(rows) <= 14
        assert rows[0] + rows[-1] == 31

    def test_corner_clamped(self):
        grid, _ = make_targets(ellipse_points(20, 25, 8, 8))
        np.testing.assert_array_equal(grid, brute_roi_grid(0, 0))
        assert grid[0, 0] and grid.shape == (32, 32)

    @given(r=st.integers(0, 255), c=st.integers(0, 255))
    def test_grid_matches_brute_force(self, r, c):
        r0 = min(max(r - 50, 0), 156)
        c0 = min(max(c - 50, 0), 156)
        np.testing.assert_array_equal(roi_grid((r, c)), brute_roi_grid(r0, c0))

    def test_shape_mask_is_rasterize(self):
        c = ellipse_points(100, 140, 22, 17, 0.4)
        np.testing.assert_array_equal(make_targets(c)[1], rasterize(c, (256, 256)))


class TestSplit:
    def test_stack_counts(self):
        train, val = split(stacked_manifest(10), 0.8, seed=0)
        assert len({e.stack_id for e in train}) == 8
        assert len({e.stack_id for e in val}) == 2

    def test_deterministic(self):
        m = stacked_manifest(7)
        assert split(m, 0.6, 4) == split(m, 0.6, 4)

    @given(n=st.integers(2, 15), f=st.floats(0.05, 0.95), seed=st.integers(0, 1000))
    def test_partition(self, n, f, seed):
        m = stacked_manifest(n)
        train, val = split(m, f, seed)
        ids = [e.slice_id for e in train] + [e.slice_id for e in val]
        assert sorted(ids) == sorted(e.slice_id for e in m)
        assert not {e.stack_id for e in train} & {e.stack_id for e in val}
        assert train.entries and val.entries

    def test_too_few_stacks(self):
        with pytest.raises(TooFewStacks):
            split(stacked_manifest(1), 0.5)


class TestManifest:
    def test_roundtrip(self, tmp_path):
        m = stacked_manifest(2, 2)
        m.entries[1] = replace(m.entries[1], split="validation")
        again = parse_manifest(format_manifest(m), check_files=False)
        assert again.entries == m.entries

    def test_duplicate_ids(self):
        text = "a\ti\tc\ts\t0\ttrain\na\ti\tc\ts\t1\ttrain\n"
        with pytest.raises(MalformedFile, match="line 2"):
            parse_manifest(text, check_files=False)

    def test_missing_file(self, tmp_path):
        (tmp_path / "m.tsv").write_text("a\tnope.pgm\tnope.txt\ts\t0\ttrain\n")
        with pytest.raises(MalformedFile, match="nope.pgm"):
            read_manifest(tmp_path / "m.tsv")

    @pytest.mark.parametrize("line", ["a\ti\tc\ts\t0\n", "a\ti\tc\ts\tx\ttrain\n",
                                      "a\ti\tc\ts\t0\ttest\n"])
    def test_malformed_rows(self, line):
        with pytest.raises(MalformedFile, match="line 1"):
            parse_manifest(line, check_files=False)


class TestPhantoms:
    def test_noise_free_levels(self):
        for ph in generate_phantoms(PhantomSpec(noise_std=0.0, seed=2), 6):
            assert len(np.unique(ph.image)) == 3

    def test_contour_matches_blood_pool(self):
        for ph in generate_phantoms(PhantomSpec(noise_std=0.0, seed=5), 20):
            pool = ph.image == ph.image.max()
            assert dice(rasterize(ph.contour, (256, 256)), pool) >= 0.99

    def test_margin(self):
        for ph in generate_phantoms(PhantomSpec(noise_std=0.0, seed=9), 30):
            border = np.concatenate([ph.image[:10].ravel(), ph.image[-10:].ravel(),
                                     ph.image[:, :10].ravel(), ph.image[:, -10:].ravel()])
            assert len(np.unique(border)) == 1
            assert ph.contour.min() >= 10 and ph.contour.max() <= 245

    def test_invalid_spec(self):
        with pytest.raises(ValueError):
            PhantomSpec(center_range=(30.0, 226.0))

    def test_stacks(self):
        ph = generate_phantoms(PhantomSpec(slices_per_stack=4), 10)
        assert [p.stack_id for p in ph] == ["s000"] * 4 + ["s001"] * 4 + ["s002"] * 2
        assert [p.slice_index for p in ph[:5]] == [0, 1, 2, 3, 0]


class TestSynthDataset:
    def test_byte_identical(self, tmp_path):
        spec = PhantomSpec(seed=11)
        synth_dataset(spec, 12, tmp_path / "a", val_fraction=0.5)
        synth_dataset(spec, 12, tmp_path / "b", val_fraction=0.5)
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*")
                       if p.is_file())
        assert len(files) == 2 * 12 + 2
        for f in files:
            assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()

    def test_manifest_loads(self, tmp_path):
        synth_dataset(PhantomSpec(seed=1, slices_per_stack=2), 8, tmp_path, val_fraction=0.25)
        m = read_manifest(tmp_path / "manifest.tsv")
        assert len(m) == 8
        assert len(m.subset("validation")) == 2
        image, contour = m.load(m.entries[0])
        assert image.shape == (256, 256) and contour.shape[1] == 2

    def test_count_must_be_positive(self, tmp_path):
        with pytest.raises(ValueError):
            synth_dataset(PhantomSpec(), 0, tmp_path)
