import numpy as np
import pytest

from hpnet.data import (
    MovementClass,
    Sequence,
    SequenceSpec,
    bounce_track,
    extract_blocks,
    generate_sequence,
    make_dataset,
    read_dataset,
    render_track,
    shape_mask,
    write_dataset,
)
from hpnet.errors import ContractError, FormatError


class TestShapes:
    def test_square(self):
        assert np.array_equal(shape_mask("square", 3), np.ones((3, 3)))

    def test_cross_frozen(self):
        want = np.array(
            [
                [0, 1, 0],
                [1, 1, 1],
                [0, 1, 0],
            ],
            dtype=np.float64,
        )
        assert np.array_equal(shape_mask("cross", 3), want)

    def test_disk_frozen(self):
        # size 5, center (2,2), radius 2
        want = np.array(
            [
                [0, 0, 1, 0, 0],
                [0, 1, 1, 1, 0],
                [1, 1, 1, 1, 1],
                [0, 1, 1, 1, 0],
                [0, 0, 1, 0, 0],
            ],
            dtype=np.float64,
        )
        assert np.array_equal(shape_mask("disk", 5), want)


class TestTrajectories:
    def test_uniform_translation(self):
        # no wall contact: the mask moves exactly one pixel per frame
        track = bounce_track((2, 1), (0, 1), 5, (10, 10), 3)
        frames = render_track("square", track, (10, 10))
        for t in range(5):
            want = np.zeros((10, 10))
            want[2:5, 1 + t : 4 + t] = 1.0
            assert np.array_equal(frames[t], want)

    def test_elastic_reflection(self):
        # one-dimensional object hits the wall and comes back
        track = bounce_track((0, 6), (0, 2), 5, (1, 10), 1)
        cols = [c for _, c, _ in track]
        assert cols == [6, 8, 8, 6, 4]  # 6→8→10 reflects to 8

    def test_never_leaves_frame(self):
        track = bounce_track((0, 0), (3, 2), 50, (12, 9), 4)
        for r, c, s in track:
            assert 0 <= r <= 12 - s and 0 <= c <= 9 - s

    def test_start_outside_rejected(self):
        with pytest.raises(ContractError):
            bounce_track((9, 0), (1, 1), 3, (10, 10), 3)


class TestGenerate:
    def test_no_objects_black(self):
        seq = generate_sequence(SequenceSpec(n_objects=0, seed=1))
        assert not seq.frames.any()

    def test_seed_determinism(self):
        spec = SequenceSpec(seed=42)
        a = generate_sequence(spec)
        b = generate_sequence(spec)
        assert np.array_equal(a.frames, b.frames) and a.label == b.label

    @pytest.mark.parametrize("movement", list(MovementClass))
    def test_every_class_renders(self, movement):
        seq = generate_sequence(SequenceSpec(seed=7), movement)
        assert seq.label == int(movement)
        assert seq.frames.shape == (40, 32, 32)
        assert seq.frames.min() >= 0.0 and seq.frames.max() <= 1.0
        assert all(seq.frames[t].any() for t in range(40))

    def test_overlap_clips_to_one(self):
        seq = generate_sequence(SequenceSpec(n_objects=6, seed=3), MovementClass.STATIC_JITTER)
        assert seq.frames.max() <= 1.0

    def test_oversized_object_rejected(self):
        with pytest.raises(ContractError):
            SequenceSpec(frame_hw=(8, 8), size_range=(7, 7))

    def test_make_dataset_balanced_and_distinct(self):
        ds = make_dataset(12, SequenceSpec(), master_seed=5)
        assert [s.label for s in ds] == [i % 6 for i in range(12)]
        assert not np.array_equal(ds[0].frames, ds[6].frames)
        again = make_dataset(12, SequenceSpec(), master_seed=5)
        for a, b in zip(ds, again):
            assert np.array_equal(a.frames, b.frames)


class TestExtractBlocks:
    def test_counts(self):
        frames = np.zeros((40, 8, 8))
        assert len(extract_blocks(frames, 5, 5)) == 8
        assert len(extract_blocks(np.zeros((7, 8, 8)), 5, 1)) == 3
        assert len(extract_blocks(frames, 1, 1)) == 40

    def test_window_contents(self):
        frames = np.arange(12, dtype=np.float64)[:, None, None] * np.ones((12, 2, 2))
        blocks = extract_blocks(frames, 4, 2)
        assert blocks[1].shape == (1, 4, 2, 2)
        assert np.array_equal(blocks[1][0, :, 0, 0], [2, 3, 4, 5])

    def test_invalid_args(self):
        frames = np.zeros((6, 4, 4))
        with pytest.raises(ContractError):
            extract_blocks(frames, 8, 1)
        with pytest.raises(ContractError):
            extract_blocks(frames, 3, 4)
        with pytest.raises(ContractError):
            extract_blocks(frames, 3, 0)


class TestDatasetIO:
    def test_roundtrip_bit_exact(self, tmp_path):
        ds = make_dataset(3, SequenceSpec(n_frames=6, frame_hw=(16, 16)), master_seed=1)
        p = tmp_path / "a.hpnd"
        write_dataset(p, ds)
        back = read_dataset(p)
        assert len(back) == 3
        for a, b in zip(ds, back):
            assert a.label == b.label
            assert np.array_equal(a.frames, b.frames)  # masks are 0/1, exact under u8
        p2 = tmp_path / "b.hpnd"
        write_dataset(p2, back)
        assert p.read_bytes() == p2.read_bytes()

    def test_gray_levels_quantized(self, tmp_path):
        frames = np.full((2, 4, 4), 0.5)
        p = tmp_path / "g.hpnd"
        write_dataset(p, [Sequence(frames=frames, label=2)])
        back = read_dataset(p)[0]
        assert np.allclose(back.frames, 128.0 / 255.0)
        assert back.label == 2

    def test_empty_dataset(self, tmp_path):
        p = tmp_path / "e.hpnd"
        write_dataset(p, [])
        assert read_dataset(p) == []
        assert p.stat().st_size == 24

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "m.hpnd"
        p.write_bytes(b"XXXX" + bytes(20))
        with pytest.raises(FormatError, match="HPND"):
            read_dataset(p)

    def test_bad_version(self, tmp_path):
        p = tmp_path / "v.hpnd"
        import struct

        p.write_bytes(b"HPND" + struct.pack("<IIIII", 9, 0, 0, 0, 0))
        with pytest.raises(FormatError, match="version 9"):
            read_dataset(p)

    def test_truncation_reports_offset(self, tmp_path):
        ds = make_dataset(2, SequenceSpec(n_frames=4, frame_hw=(16, 16)), master_seed=2)
        p = tmp_path / "t.hpnd"
        write_dataset(p, ds)
        whole = p.read_bytes()
        p.write_bytes(whole[:100])
        with pytest.raises(FormatError, match="100"):
            read_dataset(p)

    def test_mismatched_shapes_rejected(self, tmp_path):
        a = Sequence(frames=np.zeros((2, 4, 4)), label=0)
        b = Sequence(frames=np.zeros((3, 4, 4)), label=1)
        with pytest.raises(ContractError):
            write_dataset(tmp_path / "x.hpnd", [a, b])
