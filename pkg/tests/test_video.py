import numpy as np
import pytest
from PIL import Image

from csmc import video
from csmc.errors import ConfigError, FormatError
from csmc.mh import SearchWindow, gather_hypotheses
from csmc.network import blocks_to_frame, frame_to_blocks


def test_gsv_round_trip(tmp_path):
    vid = video.make_synthetic("bounce", 48, 32, 3, (3, 1), seed=5)
    path = tmp_path / "a.gsv"
    video.write_gsv(path, vid)
    raw = path.read_bytes()
    again = video.read_gsv(path)
    assert again == vid
    video.write_gsv(tmp_path / "b.gsv", again)
    assert (tmp_path / "b.gsv").read_bytes() == raw
    assert raw[:4] == b"GSV1" and len(raw) == 16 + 48 * 32 * 3


def test_gsv_uniform_128():
    data = b"GSV1" + (16).to_bytes(4, "little") * 2 + (1).to_bytes(4, "little") + bytes([128]) * 256
    vid = video.from_bytes(data)
    assert vid.frame_count == 1 and (vid.height, vid.width) == (16, 16)
    assert np.all(vid.as_float() == 128 / 255)


def test_gsv_truncated_payload():
    data = video.to_bytes(video.make_synthetic("static", 16, 16, 2))
    with pytest.raises(FormatError, match=r"payload is 500 bytes, expected 512") as exc:
        video.from_bytes(data[:-12])
    assert exc.value.offset == 16 + 500
    assert "byte offset" in str(exc.value)


def test_gsv_bad_magic_and_short_header():
    data = video.to_bytes(video.make_synthetic("static", 16, 16, 1))
    with pytest.raises(FormatError, match="magic"):
        video.from_bytes(b"XXXX" + data[4:])
    with pytest.raises(FormatError, match="truncated header"):
        video.from_bytes(data[:7])


def test_png_sequence(tmp_path):
    vid = video.make_synthetic("translate", 32, 32, 3, (2, 0), seed=1)
    for t, f in enumerate(vid.frames):
        Image.fromarray(f).save(tmp_path / f"frame_{t:06d}.png")
    assert video.read_png_sequence(tmp_path) == vid
    with pytest.raises(ConfigError):
        video.read_png_sequence(tmp_path / "..")


def test_dataset_100_blocks_per_frame():
    vid = video.make_synthetic("translate", 176, 192, 3, (2, 0), seed=0)
    ds = video.build_dataset(vid)
    assert len(ds) == 3 * 100
    assert ds.has_ref.tolist() == [False] * 100 + [True] * 200


def test_dataset_reference_flags_two_frames():
    ds = video.build_dataset(video.make_synthetic("static", 160, 160, 2, seed=1))
    assert not ds.has_ref[:100].any() and ds.has_ref[100:].all()
    assert not ds.hypotheses(range(100)).any()


def test_dataset_scaling():
    frames = np.zeros((2, 160, 160), dtype=np.uint8)
    frames[:, :16, :16] = 255
    ds = video.build_dataset(video.RawVideo(frames))
    assert ds.x.max() == 1.0 and ds.x.min() == 0.0
    assert np.all(ds.x[0] == 1.0) and np.all(ds.x[1] == 0.0)


def test_dataset_hypotheses_match_full_frame():
    vid = video.make_synthetic("translate", 160, 160, 2, (2, -4), seed=9)
    ds = video.build_dataset(vid)
    ref = vid.as_float()[0]
    for i in (100, 101, 155, 199):
        _, _, r, c = ds.meta[i]
        np.testing.assert_array_equal(ds.hypotheses([i])[0],
                                      gather_hypotheses(ref, (r, c)).H)


def test_dataset_block_count_and_reassembly():
    vid = video.make_synthetic("bounce", 200, 180, 4, (3, 2), seed=2)
    ds = video.build_dataset(vid, crop=160)
    assert len(ds) == 4 * (160 // 16) * (160 // 16)
    cropped = video.center_crop(vid.frames, 160).astype(np.float64) / 255.0
    for t in range(4):
        frame = blocks_to_frame(ds.x[t * 100:(t + 1) * 100], 160, 160)
        assert np.array_equal(frame, cropped[t])


def test_dataset_errors():
    with pytest.raises(ConfigError):
        video.build_dataset(video.make_synthetic("static", 160, 160, 1))
    with pytest.raises(ConfigError):
        video.build_dataset(video.make_synthetic("static", 128, 128, 2))
    with pytest.raises(ConfigError):
        video.build_dataset(video.make_synthetic("static", 16, 16, 2), crop=0)


def test_concat_and_subset():
    a = video.build_dataset(video.make_synthetic("static", 32, 32, 2, seed=0), crop=32,
                            window=SearchWindow(4, 2))
    b = video.build_dataset(video.make_synthetic("static", 32, 32, 2, seed=1), crop=32,
                            window=SearchWindow(4, 2), video_id=1)
    ds = video.concat_datasets([a, b])
    assert len(ds) == len(a) + len(b)
    sub = ds.subset([0, len(a)])
    assert sub.meta == [(0, 0, 0, 0), (1, 0, 0, 0)]


def test_split_videos():
    train, val = video.split_videos(list(range(10)), 0.2, seed=4)
    assert sorted(train + val) == list(range(10)) and len(val) == 2
    assert video.split_videos(list(range(10)), 0.2, seed=4) == (train, val)


def test_synthetic_static():
    f = video.make_synthetic("static", 32, 32, 4, seed=3).frames
    assert all(np.array_equal(f[0], f[t]) for t in range(4))


@pytest.mark.parametrize("dx,dy", [(2, 0), (0, 2), (-4, 2), (3, -1)])
def test_synthetic_translate(dx, dy):
    f = video.make_synthetic("translate", 48, 40, 4, (dx, dy), seed=7).frames.astype(int)
    h, w = f.shape[1:]
    for t in range(1, 4):
        ys = slice(max(dy, 0), h + min(dy, 0))
        xs = slice(max(dx, 0), w + min(dx, 0))
        ys0 = slice(max(-dy, 0), h + min(-dy, 0))
        xs0 = slice(max(-dx, 0), w + min(-dx, 0))
        assert np.array_equal(f[t][ys, xs], f[t - 1][ys0, xs0])


def test_synthetic_deterministic_and_textured():
    for kind in video.SYNTHETIC_KINDS:
        a = video.make_synthetic(kind, 64, 64, 3, (2, 2), seed=11)
        assert a == video.make_synthetic(kind, 64, 64, 3, (2, 2), seed=11)
        assert a.frames.std() > 10
    assert video.make_synthetic("static", 32, 32, 1, seed=1) != \
        video.make_synthetic("static", 32, 32, 1, seed=2)


def test_synthetic_bounce_moves():
    f = video.make_synthetic("bounce", 64, 64, 30, (5, 3), seed=2).frames
    assert not np.array_equal(f[0], f[1])


def test_synthetic_errors():
    with pytest.raises(ConfigError):
        video.make_synthetic("spiral")
    with pytest.raises(ConfigError):
        video.make_synthetic("translate", velocity=(9, 0))


def test_subset_accepts_masks_and_empty():
    ds = video.build_dataset(video.make_synthetic("static", 32, 32, 2, seed=0), crop=32,
                             window=SearchWindow(4, 2))
    assert len(ds.subset([])) == 0
    mask = np.zeros(len(ds), dtype=bool)
    mask[[1, 3]] = True
    assert ds.subset(mask).meta == [ds.meta[1], ds.meta[3]]
