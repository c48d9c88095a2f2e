import io

import numpy as np
import pytest

from fourdgc import stream as bs
from fourdgc.entropy import encode_tensor


def coded(block_id, x, q=50.0):
    payload, table, header, _ = encode_tensor(np.asarray(x), q)
    return bs.CodedBlock(block_id, header.q, header.offset, table, payload)


def sample_frames(rng):
    key = bs.FrameBitstream(bs.KEYFRAME, 1, [
        bs.RawBlock(bs.LAYOUT, [1, 1, 4, 2]),
        bs.RawBlock(bs.KEY_ATTRS, rng.normal(size=22)),
        coded(bs.KEY_SH, rng.normal(size=24)),
        bs.RawBlock(bs.MLP_MU, rng.normal(size=10)),
        bs.RawBlock(bs.MLP_R, rng.normal(size=12)),
    ])
    inter = bs.FrameBitstream(bs.INTERFRAME, 2, [coded(bs.GRID, rng.normal(0, 0.1, 300), 100.0)],
                              empty_delta=True)
    inter2 = bs.FrameBitstream(bs.INTERFRAME, 3, [
        coded(bs.GRID, rng.normal(0, 0.1, 300), 100.0),
        bs.RawBlock(bs.DELTA_ATTRS, rng.normal(size=11)),
        coded(bs.DELTA_SH, rng.normal(size=12)),
    ])
    return [key, inter, inter2]


def test_round_trip_identical_bytes(rng):
    frames = sample_frames(rng)
    data = bs.encode_frames(frames)
    back = bs.decode_frames(data)
    assert bs.encode_frames(back) == data
    assert [f.frame_index for f in back] == [1, 2, 3]
    assert back[1].empty_delta and not back[2].empty_delta
    assert sum(bs.frame_sizes(back)) == len(data)


def test_single_keyframe_round_trip(rng):
    key = sample_frames(rng)[0]
    buf = io.BytesIO()
    n = bs.write_stream([key], buf)
    assert n == len(buf.getvalue())
    back = bs.read_stream(io.BytesIO(buf.getvalue()))
    assert back[0].to_bytes() == key.to_bytes()


def test_header_layout(rng):
    key = sample_frames(rng)[0]
    data = key.to_bytes()
    assert data[:4] == b"4DGC" and data[4] == bs.VERSION and data[5] == 0
    assert int.from_bytes(data[6:10], "little") == 1 and data[10] == 5


def test_rejects_bad_header(rng):
    data = bytearray(bs.encode_frames(sample_frames(rng)))
    for pos, value in ((0, ord("X")), (4, 9), (5, 0x07)):
        bad = bytearray(data)
        bad[pos] = value
        with pytest.raises(bs.StreamFormatError):
            bs.decode_frames(bytes(bad))


def test_rejects_non_keyframe_start(rng):
    frames = sample_frames(rng)
    with pytest.raises(bs.StreamFormatError):
        bs.decode_frames(frames[1].to_bytes())
    with pytest.raises(bs.StreamFormatError):
        bs.encode_frames(frames[1:])


def test_rejects_non_increasing_indices(rng):
    frames = sample_frames(rng)
    frames[2].frame_index = 2
    with pytest.raises(bs.StreamFormatError):
        bs.encode_frames(frames)


def test_rejects_truncation_everywhere(rng):
    data = bs.encode_frames(sample_frames(rng)[:2])
    for cut in range(1, len(data)):
        try:
            frames = bs.decode_frames(data[:cut])
        except bs.StreamFormatError:
            continue
        # a cut on a record boundary leaves a shorter but valid stream
        assert bs.encode_frames(frames) == data[:cut]


def test_rejects_unknown_block_and_duplicates(rng):
    key = sample_frames(rng)[0]
    data = bytearray(key.to_bytes())
    data[11] = 0x7F  # first block id
    with pytest.raises(bs.StreamFormatError):
        bs.decode_frames(bytes(data))
    dup = bs.FrameBitstream(bs.KEYFRAME, 1, [bs.RawBlock(bs.LAYOUT, [1]), bs.RawBlock(bs.LAYOUT, [2])])
    with pytest.raises(bs.StreamFormatError):
        dup.to_bytes()


def test_rejects_bad_q_and_raw_length(rng):
    block = coded(bs.GRID, rng.normal(size=20))
    frame = bs.FrameBitstream(bs.KEYFRAME, 1, [block])
    data = bytearray(frame.to_bytes())
    data[12:16] = np.float32(-1.0).tobytes()
    with pytest.raises(bs.StreamFormatError):
        bs.decode_frames(bytes(data))
    raw = bytearray(bs.FrameBitstream(bs.KEYFRAME, 1, [bs.RawBlock(bs.LAYOUT, [1.0])]).to_bytes())
    raw[12:16] = (3).to_bytes(4, "little")
    with pytest.raises(bs.StreamFormatError):
        bs.decode_frames(bytes(raw))


def test_empty_flag_only_on_interframes():
    data = bytearray(bs.FrameBitstream(bs.KEYFRAME, 1, []).to_bytes())
    data[5] = bs.FLAG_EMPTY_DELTA
    with pytest.raises(bs.StreamFormatError):
        bs.decode_frames(bytes(data))
