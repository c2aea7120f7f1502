"""Frame container, MMF file I/O, depth-offset simulation, patch extraction,
variance filtering and labeled dataset assembly.

MMF ("multi-modal frame") is a little-endian binary container:
magic "MMF1", u32 width, u32 height, u32 channel_count, channel_count bytes
of channel ids (R=0, G=1, B=2, Gr=3, L=4, U=5, V=6), then one row-major
float32 plane of height x width values per channel.

Dataset manifests are flat key=value text files; replaying a manifest over
the same frames reproduces the dataset bit-exactly.
"""

from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .offsets import OffsetClass

MMF_MAGIC = b"MMF1"
CHANNEL_IDS = {"R": 0, "G": 1, "B": 2, "Gr": 3, "L": 4, "U": 5, "V": 6}
CHANNEL_NAMES = {v: k for k, v in CHANNEL_IDS.items()}
_CANONICAL_ORDER = {name: i for i, name in enumerate(CHANNEL_IDS)}

DEFAULT_WIDTH = 800
DEFAULT_HEIGHT = 256
# "15%" variance cutoff read against the max possible variance (0.25) of a
# [0,1]-valued plane.
DEFAULT_TAU = 0.15 * 0.25
DEFAULT_FILL = 0.0


class FormatError(ValueError):
    """Malformed MMF/manifest/checkpoint content."""


class Frame:
    """Fixed-size multi-channel snapshot; planes are float32 in [0,1].

    Channels are kept in the canonical order R,G,B,Gr,L,U,V regardless of
    insertion order so that stacking and serialization are reproducible.
    """

    def __init__(self, channels: dict[str, np.ndarray]):
        if not channels:
            raise ValueError("frame needs at least one channel")
        planes: dict[str, np.ndarray] = {}
        shape = None
        for name, plane in channels.items():
            if name not in CHANNEL_IDS:
                raise ValueError(f"unknown channel id {name!r}; expected one of {list(CHANNEL_IDS)}")
            plane = np.asarray(plane, dtype=np.float32)
            if plane.ndim != 2:
                raise ValueError(f"channel {name} must be a 2-d plane, got shape {plane.shape}")
            if shape is None:
                shape = plane.shape
            elif plane.shape != shape:
                raise ValueError(f"channel {name} shape {plane.shape} differs from {shape}")
            lo, hi = float(plane.min()), float(plane.max())
            if lo < 0.0 or hi > 1.0:
                raise ValueError(f"channel {name} values outside [0,1]: min {lo}, max {hi}")
            planes[name] = plane
        self._channels = {name: planes[name]
                          for name in sorted(planes, key=_CANONICAL_ORDER.__getitem__)}

    @property
    def height(self) -> int:
        return next(iter(self._channels.values())).shape[0]

    @property
    def width(self) -> int:
        return next(iter(self._channels.values())).shape[1]

    @property
    def channel_names(self) -> list[str]:
        return list(self._channels)

    def has_channel(self, name: str) -> bool:
        return name in self._channels

    def plane(self, name: str) -> np.ndarray:
        if name not in self._channels:
            raise KeyError(f"frame has no channel {name!r}; present: {self.channel_names}")
        return self._channels[name]

    def with_channels(self, extra: dict[str, np.ndarray]) -> "Frame":
        merged = dict(self._channels)
        merged.update(extra)
        return Frame(merged)

    def stack(self, channels: list[str] | None = None) -> np.ndarray:
        """Stack the selected channels into an (H, W, C) array."""
        names = channels if channels is not None else self.channel_names
        return np.stack([self.plane(n) for n in names], axis=-1)


# ---------------------------------------------------------------------------
# MMF serialization
# ---------------------------------------------------------------------------


def write_frame(frame: Frame, path) -> None:
    with open(path, "wb") as fh:
        fh.write(MMF_MAGIC)
        fh.write(struct.pack("<III", frame.width, frame.height, len(frame.channel_names)))
        for name in frame.channel_names:
            fh.write(struct.pack("B", CHANNEL_IDS[name]))
        for name in frame.channel_names:
            fh.write(np.ascontiguousarray(frame.plane(name), dtype="<f4").tobytes())


def read_frame(path) -> Frame:
    data = Path(path).read_bytes()

    def need(count: int, offset: int, what: str) -> None:
        if len(data) < offset + count:
            raise FormatError(f"{path}: truncated {what} at byte offset {offset} "
                              f"(need {count} bytes, have {len(data) - offset})")

    need(4, 0, "magic")
    if data[:4] != MMF_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r} at byte offset 0, expected {MMF_MAGIC!r}")
    need(12, 4, "header")
    width, height, channel_count = struct.unpack_from("<III", data, 4)
    if width == 0 or height == 0:
        raise FormatError(f"{path}: zero frame dimension {width}x{height} at byte offset 4")
    if channel_count == 0 or channel_count > len(CHANNEL_IDS):
        raise FormatError(f"{path}: channel count {channel_count} at byte offset 12 "
                          f"outside [1, {len(CHANNEL_IDS)}]")
    offset = 16
    need(channel_count, offset, "channel id table")
    names = []
    for i in range(channel_count):
        cid = data[offset + i]
        if cid not in CHANNEL_NAMES:
            raise FormatError(f"{path}: unknown channel id {cid} at byte offset {offset + i}")
        names.append(CHANNEL_NAMES[cid])
    if len(set(names)) != len(names):
        raise FormatError(f"{path}: duplicate channel ids at byte offset {offset}")
    offset += channel_count

    plane_bytes = width * height * 4
    channels = {}
    for name in names:
        need(plane_bytes, offset, f"plane {name}")
        plane = np.frombuffer(data, dtype="<f4", count=width * height, offset=offset)
        channels[name] = plane.reshape(height, width).copy()
        offset += plane_bytes
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes at byte offset {offset}")
    try:
        return Frame(channels)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc


# ---------------------------------------------------------------------------
# Channel derivation and offset simulation
# ---------------------------------------------------------------------------


def rgb_to_gray(frame: Frame) -> Frame:
    """Add a Gr channel from R,G,B using Rec. 601 weights."""
    for name in ("R", "G", "B"):
        if not frame.has_channel(name):
            raise ValueError(f"rgb_to_gray needs R,G,B channels; frame has {frame.channel_names}")
    gray = (0.299 * frame.plane("R") + 0.587 * frame.plane("G") + 0.114 * frame.plane("B"))
    return frame.with_channels({"Gr": np.clip(gray, 0.0, 1.0).astype(np.float32)})


def shift_plane(plane: np.ndarray, dx: int, dy: int, fill: float) -> np.ndarray:
    """Translate a plane by (dx right, dy down); vacated pixels get fill."""
    h, w = plane.shape
    out = np.full_like(plane, fill)
    src_rows = slice(max(-dy, 0), h - max(dy, 0))
    dst_rows = slice(max(dy, 0), h + min(dy, 0))
    src_cols = slice(max(-dx, 0), w - max(dx, 0))
    dst_cols = slice(max(dx, 0), w + min(dx, 0))
    out[dst_rows, dst_cols] = plane[src_rows, src_cols]
    return out


def apply_offset(frame: Frame, offset: OffsetClass, fill: float = DEFAULT_FILL) -> Frame:
    """Translate only the depth (L) plane by the offset; video/flow planes stay put."""
    if not frame.has_channel("L"):
        raise ValueError(f"frame has no L channel to offset; present: {frame.channel_names}")
    if abs(offset.dx) >= frame.width or abs(offset.dy) >= frame.height:
        raise ValueError(f"offset ({offset.dx},{offset.dy}) exceeds frame dims "
                         f"{frame.width}x{frame.height}")
    if not 0.0 <= fill <= 1.0:
        raise ValueError(f"fill value {fill} outside [0,1]")
    if offset.dx == 0 and offset.dy == 0:
        return frame
    return frame.with_channels({"L": shift_plane(frame.plane("L"), offset.dx, offset.dy, fill)})


# ---------------------------------------------------------------------------
# Patch extraction and variance filtering
# ---------------------------------------------------------------------------


def patch_grid_shape(height: int, width: int, p: int, s: int) -> tuple[int, int]:
    """(rows, cols) of the patch grid for size p and stride s."""
    if p > height or p > width:
        raise ValueError(f"patch size {p} exceeds frame dims {width}x{height}")
    if s < 1:
        raise ValueError(f"stride must be >= 1, got {s}")
    return (height - p) // s + 1, (width - p) // s + 1


def _window_view(stacked: np.ndarray, p: int, s: int) -> np.ndarray:
    """(rows, cols, p, p, C) strided view over an (H, W, C) array."""
    windows = np.lib.stride_tricks.sliding_window_view(stacked, (p, p), axis=(0, 1))
    return windows[::s, ::s].transpose(0, 1, 3, 4, 2)


def extract_patches(frame: Frame, p: int, s: int,
                    channels: list[str] | None = None) -> list[tuple[tuple[int, int], np.ndarray]]:
    """All fully-inside p x p windows at stride s, with (row, col) origins.

    Patches stack the requested channels (frame order by default) into
    (p, p, C) arrays; count is ((H-p)//s + 1) * ((W-p)//s + 1).
    """
    rows, cols = patch_grid_shape(frame.height, frame.width, p, s)
    windows = _window_view(frame.stack(channels), p, s)
    return [((i * s, j * s), np.ascontiguousarray(windows[i, j]))
            for i in range(rows) for j in range(cols)]


def variance_keep(l_patch: np.ndarray, tau: float) -> bool:
    """Keep a patch iff the population variance of its depth values >= tau."""
    return bool(np.var(l_patch) >= tau)


# ---------------------------------------------------------------------------
# Dataset assembly
# ---------------------------------------------------------------------------


@dataclass
class PatchSample:
    """One labeled patch: (p, p, C) data plus its offset class and origin."""

    data: np.ndarray
    label: int
    frame_index: int
    origin: tuple[int, int]


@dataclass
class DatasetManifest:
    """Everything needed to regenerate a dataset bit-exactly from its frames."""

    patch_size: int
    stride: int
    channels: list[str]
    offsets: list[OffsetClass]
    tau: float
    fill: float
    seed: int
    split: str = "all"
    frames_dir: str = "."
    frame_files: list[str] = field(default_factory=list)
    frame_count: int = 0
    patch_count: int = 0


def iter_patch_samples(frames: Iterable[Frame], offsets: list[OffsetClass], p: int, s: int,
                       tau: float, fill: float = DEFAULT_FILL,
                       channels: list[str] | None = None,
                       workers: int = 1) -> Iterator[PatchSample]:
    """Stream PatchSamples: frames in index order, offset classes in table
    order, patch origins row-major; the depth plane is shifted per offset
    before extraction and low-variance depth patches are dropped.
    """
    if tau < 0:
        raise ValueError(f"variance threshold must be >= 0, got {tau}")
    if not offsets:
        raise ValueError("offset table is empty")
    if channels is not None and not channels:
        raise ValueError("channel selection is empty")

    def frame_samples(item):
        frame_index, frame = item
        sel = channels if channels is not None else frame.channel_names
        static = frame.stack([c for c in sel if c != "L"])
        static_cols = [i for i, c in enumerate(sel) if c != "L"]
        l_col = sel.index("L") if "L" in sel else None
        l_plane = frame.plane("L")
        out = []
        for offset in offsets:
            if abs(offset.dx) >= frame.width or abs(offset.dy) >= frame.height:
                raise ValueError(f"offset ({offset.dx},{offset.dy}) exceeds frame dims "
                                 f"{frame.width}x{frame.height}")
            shifted = shift_plane(l_plane, offset.dx, offset.dy, fill)
            stacked = np.empty((frame.height, frame.width, len(sel)), dtype=np.float32)
            for col, ci in zip(static_cols, range(static.shape[-1])):
                stacked[:, :, col] = static[:, :, ci]
            if l_col is not None:
                stacked[:, :, l_col] = shifted
            windows = _window_view(stacked, p, s)
            l_windows = _window_view(shifted[:, :, None], p, s)[:, :, :, :, 0]
            keep = l_windows.var(axis=(2, 3)) >= tau
            rows, cols = keep.shape
            for i in range(rows):
                for j in range(cols):
                    if keep[i, j]:
                        out.append(PatchSample(data=np.ascontiguousarray(windows[i, j]),
                                               label=offset.id,
                                               frame_index=frame_index,
                                               origin=(i * s, j * s)))
        return out

    def generate():
        indexed = enumerate(frames)
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                for batch in pool.map(frame_samples, indexed):
                    yield from batch
        else:
            for item in indexed:
                yield from frame_samples(item)

    return generate()


def build_dataset(frames: list[Frame], offsets: list[OffsetClass], p: int, s: int,
                  tau: float, fill: float = DEFAULT_FILL,
                  channels: list[str] | None = None, seed: int = 0,
                  split: str = "all", workers: int = 1,
                  ) -> tuple[list[PatchSample], DatasetManifest]:
    """Materialize the sample stream and its manifest.

    Raises if the variance filter leaves nothing.
    """
    frames = list(frames)
    if not frames:
        raise ValueError("no frames to build a dataset from")
    sel = channels if channels is not None else frames[0].channel_names
    # validate patch geometry up front so empty output means "filtered out"
    patch_grid_shape(frames[0].height, frames[0].width, p, s)
    samples = list(iter_patch_samples(frames, offsets, p, s, tau, fill, sel, workers))
    if not samples:
        raise ValueError(f"variance filter (tau={tau}) dropped every patch; lower tau")
    manifest = DatasetManifest(patch_size=p, stride=s, channels=list(sel),
                               offsets=list(offsets), tau=tau, fill=fill, seed=seed,
                               split=split, frame_count=len(frames),
                               patch_count=len(samples))
    return samples, manifest


def collect_arrays(samples: list[PatchSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into (X, labels) arrays for training."""
    if not samples:
        raise ValueError("no samples to collect")
    x = np.stack([s.data for s in samples]).astype(np.float32)
    y = np.array([s.label for s in samples], dtype=np.int64)
    return x, y


# ---------------------------------------------------------------------------
# Manifest serialization (flat key=value text)
# ---------------------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path) -> None:
    lines = [
        "format=mmreg-manifest-1",
        f"split={manifest.split}",
        f"patch_size={manifest.patch_size}",
        f"stride={manifest.stride}",
        f"tau={manifest.tau!r}",
        f"fill={manifest.fill!r}",
        f"seed={manifest.seed}",
        f"channels={','.join(manifest.channels)}",
        f"n_classes={len(manifest.offsets)}",
    ]
    for off in manifest.offsets:
        lines.append(f"offset_{off.id}={off.dx},{off.dy}")
    lines.append(f"frames_dir={manifest.frames_dir}")
    lines.append(f"frame_count={manifest.frame_count}")
    for i, name in enumerate(manifest.frame_files):
        lines.append(f"frame_{i}={name}")
    lines.append(f"patch_count={manifest.patch_count}")
    Path(path).write_text("\n".join(lines) + "\n")


def parse_key_values(text: str, source: str = "<manifest>") -> dict[str, str]:
    pairs: dict[str, str] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise FormatError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = line.split("=", 1)
        pairs[key.strip()] = value.strip()
    return pairs


def read_manifest(path) -> DatasetManifest:
    pairs = parse_key_values(Path(path).read_text(), source=str(path))
    try:
        if pairs.get("format") != "mmreg-manifest-1":
            raise FormatError(f"{path}: unknown manifest format {pairs.get('format')!r}")
        n_classes = int(pairs["n_classes"])
        offsets = []
        for i in range(n_classes):
            dx, dy = pairs[f"offset_{i}"].split(",")
            offsets.append(OffsetClass(id=i, dx=int(dx), dy=int(dy)))
        frame_count = int(pairs["frame_count"])
        frame_files = [pairs[f"frame_{i}"] for i in range(frame_count)
                       if f"frame_{i}" in pairs]
        return DatasetManifest(
            patch_size=int(pairs["patch_size"]),
            stride=int(pairs["stride"]),
            channels=pairs["channels"].split(","),
            offsets=offsets,
            tau=float(pairs["tau"]),
            fill=float(pairs["fill"]),
            seed=int(pairs["seed"]),
            split=pairs["split"],
            frames_dir=pairs.get("frames_dir", "."),
            frame_files=frame_files,
            frame_count=frame_count,
            patch_count=int(pairs["patch_count"]),
        )
    except KeyError as exc:
        raise FormatError(f"{path}: missing manifest key {exc}") from exc
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
