import numpy as np
import pytest

from m3v import synth
from m3v.video_io import (FrameSequence, PNMParseError, Y4MParseError,
                          load_image_sequence, parse_y4m, to_grayscale)


def _mono_y4m(width, height, frames, payloads=None):
    head = f"YUV4MPEG2 W{width} H{height} F25:1 Cmono\n".encode()
    body = b""
    for i in range(frames):
        body += b"FRAME\n"
        body += payloads[i] if payloads else bytes(width * height)
    return head + body


def test_zero_payload_mono():
    seq = parse_y4m(_mono_y4m(4, 4, 2))
    assert len(seq) == 2
    assert (seq.width, seq.height, seq.channels) == (4, 4, 1)
    for f in seq.frames:
        assert f.shape == (4, 4, 1)
        assert np.all(f == 0)


def test_bad_magic_offset_zero():
    with pytest.raises(Y4MParseError) as err:
        parse_y4m(b"YUV4MPEG3 W4 H4 F25:1 Cmono\nFRAME\n" + bytes(16))
    assert err.value.offset == 0


def test_unsupported_colorspace():
    data = b"YUV4MPEG2 W4 H4 F25:1 C444\nFRAME\n" + bytes(4 * 4 * 3)
    with pytest.raises(Y4MParseError, match="colorspace"):
        parse_y4m(data)


def test_truncated_payload():
    data = _mono_y4m(4, 4, 1)[:-3]
    with pytest.raises(Y4MParseError, match="truncated"):
        parse_y4m(data)


def test_payload_not_scanned_for_markers():
    # luma bytes that spell FRAME must not confuse the parser
    tricky = b"FRAME\n" + bytes(10)
    seq = parse_y4m(_mono_y4m(4, 4, 2, [tricky, bytes(16)]))
    assert len(seq) == 2
    assert seq.frames[0][0, 0, 0] == ord("F")


def test_c420_roundtrip_bit_exact():
    seq, _ = synth.gen_translating_texture((32, 32), (2.0, 0.0), 16, seed=3)
    parsed = parse_y4m(synth.write_y4m(seq, "C420"))
    assert len(parsed) == 16
    for a, b in zip(parsed.frames, seq.frames):
        assert np.array_equal(a, b)


def test_mono_roundtrip_random_payload(rng):
    frames = [rng.integers(0, 256, (8, 6, 1)).astype(np.float64)
              for _ in range(5)]
    seq = FrameSequence(frames=frames, width=6, height=8, channels=1)
    parsed = parse_y4m(synth.write_y4m(seq, "Cmono"))
    for a, b in zip(parsed.frames, seq.frames):
        assert np.array_equal(a, b)


def test_frame_rate_parsed():
    seq = parse_y4m(_mono_y4m(4, 4, 1).replace(b"F25:1", b"F30000:1001"))
    assert seq.frame_rate == pytest.approx(30000 / 1001)


# -- PNM ---------------------------------------------------------------------

def test_pgm_decode(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 2 2 255\n" + bytes([0, 85, 170, 255]))
    seq = load_image_sequence([str(path)])
    assert len(seq) == 1
    assert seq.channels == 1
    assert np.array_equal(seq.frames[0][:, :, 0], [[0, 85], [170, 255]])


def test_pnm_channel_mismatch(tmp_path):
    a = tmp_path / "a.pgm"
    a.write_bytes(b"P5 4 4 255\n" + bytes(16))
    b = tmp_path / "b.ppm"
    b.write_bytes(b"P6 4 4 255\n" + bytes(48))
    with pytest.raises(PNMParseError, match="mismatch"):
        load_image_sequence([str(a), str(b)])


@pytest.mark.parametrize("magic", [b"P1", b"P2", b"P3", b"P4"])
def test_pnm_unsupported_magic(tmp_path, magic):
    path = tmp_path / "a.pnm"
    path.write_bytes(magic + b" 2 2 255\n" + bytes(4))
    with pytest.raises(PNMParseError, match="unsupported"):
        load_image_sequence([str(path)])


def test_pnm_bad_maxval(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5 2 2 127\n" + bytes(4))
    with pytest.raises(PNMParseError, match="maxval"):
        load_image_sequence([str(path)])


def test_pnm_comment_header(tmp_path):
    path = tmp_path / "a.pgm"
    path.write_bytes(b"P5\n# comment\n2 2\n255\n" + bytes([1, 2, 3, 4]))
    seq = load_image_sequence([str(path)])
    assert np.array_equal(seq.frames[0][:, :, 0], [[1, 2], [3, 4]])


def test_pgm_sequence_roundtrip(tmp_path, rng):
    frames = [rng.integers(0, 256, (6, 5, 1)).astype(np.float64)
              for _ in range(8)]
    seq = FrameSequence(frames=frames, width=5, height=6, channels=1)
    paths = synth.save_image_sequence(seq, str(tmp_path))
    parsed = load_image_sequence(paths)
    for a, b in zip(parsed.frames, seq.frames):
        assert np.array_equal(a, b)


def test_ppm_sequence_roundtrip(tmp_path, rng):
    frames = [rng.integers(0, 256, (4, 4, 3)).astype(np.float64)
              for _ in range(3)]
    seq = FrameSequence(frames=frames, width=4, height=4, channels=3)
    paths = synth.save_image_sequence(seq, str(tmp_path))
    parsed = load_image_sequence(paths)
    assert parsed.channels == 3
    for a, b in zip(parsed.frames, seq.frames):
        assert np.array_equal(a, b)


# -- grayscale ---------------------------------------------------------------

def test_grayscale_identity():
    frame = np.full((3, 3, 1), 42.0)
    assert to_grayscale(frame) is frame


def test_grayscale_weights():
    white = np.full((1, 1, 3), 255.0)
    assert to_grayscale(white)[0, 0, 0] == pytest.approx(255.0)
    px = np.array([[[100.0, 150.0, 200.0]]])
    assert to_grayscale(px)[0, 0, 0] == pytest.approx(140.75)


def test_grayscale_idempotent(rng):
    frame = rng.uniform(0, 255, (5, 7, 3))
    once = to_grayscale(frame)
    assert np.array_equal(to_grayscale(once), once)
