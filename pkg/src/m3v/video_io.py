"""Frame ingestion from codec-free containers (Y4M subset, PGM/PPM)."""

from dataclasses import dataclass, field

import numpy as np

LUMA_WEIGHTS = (0.299, 0.587, 0.114)  # BT.601


class Y4MParseError(ValueError):
    """Malformed Y4M stream; carries the byte offset of the problem."""

    def __init__(self, message, offset):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class PNMParseError(ValueError):
    pass


@dataclass
class FrameSequence:
    """Decoded frames plus dimensions; immutable after construction.

    Each frame is an (H, W, C) float64 array with values in [0, 255].
    """

    frames: list = field(default_factory=list)
    width: int = 0
    height: int = 0
    channels: int = 1
    frame_rate: float = 25.0

    def __post_init__(self):
        if len(self.frames) < 1:
            raise ValueError("FrameSequence needs at least one frame")
        for f in self.frames:
            if f.shape != (self.height, self.width, self.channels):
                raise ValueError(
                    f"frame shape {f.shape} != "
                    f"({self.height}, {self.width}, {self.channels})"
                )
            f.setflags(write=False)

    def __len__(self):
        return len(self.frames)


def to_grayscale(frame):
    """Collapse an (H, W, 3) frame to luma; identity for single-channel."""
    if frame.ndim != 3 or frame.shape[2] not in (1, 3):
        raise ValueError(f"expected (H, W, 1|3) frame, got shape {frame.shape}")
    if frame.shape[2] == 1:
        return frame
    r, g, b = LUMA_WEIGHTS
    luma = r * frame[:, :, 0] + g * frame[:, :, 1] + b * frame[:, :, 2]
    return luma[:, :, None]


def gray_plane(frame):
    """(H, W) float64 luma view of a frame, converting RGB if needed."""
    return np.ascontiguousarray(to_grayscale(frame)[:, :, 0], dtype=np.float64)


def parse_y4m(data: bytes) -> FrameSequence:
    """Decode a YUV4MPEG2 stream (mono or 4:2:0) to grayscale frames.

    Chroma planes are skipped; only the luma plane is kept. Exactly the
    declared payload bytes are consumed per frame.
    """
    magic = b"YUV4MPEG2"
    if data[: len(magic)] != magic:
        raise Y4MParseError("bad magic, expected YUV4MPEG2", 0)
    nl = data.find(b"\x0a", len(magic))
    if nl < 0:
        raise Y4MParseError("unterminated stream header", len(magic))

    width = height = 0
    colorspace = "C420"
    rate = 25.0
    pos = len(magic)
    while pos < nl:
        if data[pos] != 0x20:
            raise Y4MParseError("expected space before header token", pos)
        pos += 1
        end = pos
        while end < nl and data[end] != 0x20:
            end += 1
        token = data[pos:end].decode("ascii", errors="replace")
        if token.startswith("W"):
            width = int(token[1:])
        elif token.startswith("H"):
            height = int(token[1:])
        elif token.startswith("F"):
            num, _, den = token[1:].partition(":")
            rate = float(num) / float(den or "1")
        elif token.startswith("C"):
            colorspace = token
            if token not in ("Cmono", "C420", "C420mpeg2"):
                raise Y4MParseError(f"unsupported colorspace {token}", pos)
        # I/A/X tokens are legal and ignored
        pos = end
    if width <= 0 or height <= 0:
        raise Y4MParseError("missing or invalid W/H header tokens", len(magic))

    mono = colorspace == "Cmono"
    luma_size = width * height
    payload = luma_size if mono else luma_size + (width // 2) * (height // 2) * 2

    frames = []
    pos = nl + 1
    while pos < len(data):
        marker = data[pos:pos + 5]
        if marker != b"FRAME":
            raise Y4MParseError("expected FRAME marker", pos)
        fnl = data.find(b"\x0a", pos + 5)
        if fnl < 0:
            raise Y4MParseError("unterminated FRAME header", pos + 5)
        body = fnl + 1
        if body + payload > len(data):
            raise Y4MParseError("truncated frame payload", body)
        luma = np.frombuffer(data[body:body + luma_size], dtype=np.uint8)
        frames.append(luma.reshape(height, width, 1).astype(np.float64))
        pos = body + payload
    if not frames:
        raise Y4MParseError("stream contains no frames", nl + 1)

    return FrameSequence(frames=frames, width=width, height=height,
                         channels=1, frame_rate=rate)


def _read_pnm_header(data, path):
    """Parse magic, width, height, maxval; returns them plus body offset."""
    magic = data[:2].decode("ascii", errors="replace")
    if magic in ("P1", "P2", "P3", "P4"):
        raise PNMParseError(f"{path}: unsupported PNM magic {magic} (want P5/P6)")
    if magic not in ("P5", "P6"):
        raise PNMParseError(f"{path}: not a PNM file (magic {magic!r})")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos] in b" \t\r\n":
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and data[pos] not in b" \t\r\n":
            pos += 1
        if start == pos:
            raise PNMParseError(f"{path}: truncated PNM header")
        fields.append(int(data[start:pos]))
    pos += 1  # single whitespace byte separates header from payload
    width, height, maxval = fields
    if maxval != 255:
        raise PNMParseError(f"{path}: maxval {maxval} unsupported (must be 255)")
    return magic, width, height, pos


def load_image_sequence(paths) -> FrameSequence:
    """Load an ordered list of binary PGM (P5) / PPM (P6) files as frames."""
    if not paths:
        raise ValueError("empty path list")
    frames = []
    dims = None
    for path in paths:
        with open(path, "rb") as fh:
            data = fh.read()
        magic, width, height, body = _read_pnm_header(data, path)
        channels = 1 if magic == "P5" else 3
        if dims is None:
            dims = (width, height, channels)
        elif dims != (width, height, channels):
            raise PNMParseError(
                f"{path}: dimension/channel mismatch "
                f"{(width, height, channels)} vs {dims}"
            )
        count = width * height * channels
        if body + count > len(data):
            raise PNMParseError(f"{path}: truncated pixel payload")
        pixels = np.frombuffer(data[body:body + count], dtype=np.uint8)
        frames.append(pixels.reshape(height, width, channels).astype(np.float64))
    return FrameSequence(frames=frames, width=dims[0], height=dims[1],
                         channels=dims[2])
