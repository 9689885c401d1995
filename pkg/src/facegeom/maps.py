"""Per-pixel map stacks: intensity, depth, xyz, correspondence and mask.

On disk a sample ``<stem>`` is a set of files::

    <stem>.intensity.pfm   grayscale PFM, values in [0, 1]
    <stem>.depth.pfm       grayscale PFM
    <stem>.xyz.pfm         RGB PFM, camera-frame coordinates
    <stem>.corr.pfm        RGB PFM, canonical embedding coordinates
    <stem>.mask.pgm        optional binary PGM, 255 = facial pixel
    <stem>.meta.json       sizes, units, depth sign and camera

PFM rasters are float32, little-endian, stored bottom row first. In memory
every raster is float64 with row 0 at the top of the image.

Camera frame: ``x`` to the right, ``y`` up, ``z`` towards the camera (larger
depth is closer). A point projects to pixel ``col = cx + x / scale``,
``row = cy - y / scale`` with ``scale`` in millimetres per pixel.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from facegeom.errors import (
    DimensionMismatch,
    EmptyFaceWarning,
    InvalidMaps,
    MalformedHeader,
    MaskChannelConflict,
)

DEPTH_UNITS_MM = {"mm": 1.0, "cm": 10.0, "m": 1000.0}
DEPTH_SIGNS = ("larger_is_closer", "larger_is_farther")
CHANNELS = ("intensity", "depth", "xyz", "corr")


@dataclass(frozen=True)
class CameraMeta:
    scale: float = 1.0
    cx: float = 0.0
    cy: float = 0.0
    depth_units: str = "mm"
    depth_sign: str = "larger_is_closer"

    def project(self, points):
        """Camera-frame points (..., 3) to continuous ``(row, col)`` pixel coords."""
        points = np.asarray(points, dtype=float)
        col = self.cx + points[..., 0] / self.scale
        row = self.cy - points[..., 1] / self.scale
        return row, col

    def unproject(self, row, col):
        """Pixel coordinates to camera-frame ``(x, y)``."""
        return (np.asarray(col) - self.cx) * self.scale, (self.cy - np.asarray(row)) * self.scale


@dataclass(frozen=True, eq=False)
class MapStack:
    intensity: np.ndarray
    depth: np.ndarray
    xyz: np.ndarray
    correspondence: np.ndarray
    mask: np.ndarray = None
    camera: CameraMeta = field(default_factory=CameraMeta)

    def __post_init__(self):
        intensity = np.array(self.intensity, dtype=np.float64)
        depth = np.array(self.depth, dtype=np.float64)
        xyz = np.array(self.xyz, dtype=np.float64)
        corr = np.array(self.correspondence, dtype=np.float64)
        if intensity.ndim != 2:
            raise DimensionMismatch("intensity must be a single-channel raster")
        hw = intensity.shape
        if depth.shape != hw or xyz.shape != hw + (3,) or corr.shape != hw + (3,):
            raise DimensionMismatch(
                f"raster shapes differ: intensity {intensity.shape}, depth {depth.shape}, "
                f"xyz {xyz.shape}, correspondence {corr.shape}")
        finite = (np.isfinite(depth) & np.isfinite(xyz).all(axis=2)
                  & np.isfinite(corr).all(axis=2))
        if self.mask is None:
            mask = finite
        else:
            mask = np.array(self.mask, dtype=bool)
            if mask.shape != hw:
                raise DimensionMismatch(f"mask shape {mask.shape} != {hw}")
            if np.any(mask & ~finite):
                raise MaskChannelConflict("mask marks pixels valid that hold non-finite values")
        if np.any(mask & ~np.isfinite(intensity)):
            raise InvalidMaps("intensity must be finite on the mask")
        depth[~mask] = np.nan
        xyz[~mask] = np.nan
        corr[~mask] = np.nan
        for arr in (intensity, depth, xyz, corr, mask):
            arr.setflags(write=False)
        object.__setattr__(self, "intensity", intensity)
        object.__setattr__(self, "depth", depth)
        object.__setattr__(self, "xyz", xyz)
        object.__setattr__(self, "correspondence", corr)
        object.__setattr__(self, "mask", mask)

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def valid_count(self) -> int:
        return int(self.mask.sum())

    def check_correspondence_bounds(self, embedding, margin=0.1):
        """Raise :class:`InvalidMaps` if valid correspondences leave the
        embedding's bounding box grown by ``margin`` of its extent."""
        embedding = np.asarray(embedding)
        lo, hi = embedding.min(axis=0), embedding.max(axis=0)
        pad = margin * (hi - lo)
        corr = self.correspondence[self.mask]
        bad = np.any((corr < lo - pad) | (corr > hi + pad), axis=1)
        if bad.any():
            raise InvalidMaps(f"{int(bad.sum())} correspondence values outside the template box")


# -- PFM / PGM ---------------------------------------------------------------

def _header_tokens(data, count):
    """Split the first ``count`` whitespace-separated tokens; return them and
    the offset just past the single whitespace byte that ends the header."""
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos < n and data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise MalformedHeader("truncated header")
        tokens.append(data[start:pos].decode("ascii", errors="replace"))
    return tokens, pos + 1


def read_pfm(path) -> np.ndarray:
    """Read a PFM file; returns float32 ``(H, W)`` or ``(H, W, 3)`` with row 0 on top."""
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data, 4)
    magic, w, h, scale = tokens
    if magic not in ("PF", "Pf"):
        raise MalformedHeader(f"{path}: not a PFM file")
    try:
        w, h, scale = int(w), int(h), float(scale)
    except ValueError:
        raise MalformedHeader(f"{path}: bad PFM size/scale fields") from None
    if w <= 0 or h <= 0 or scale == 0:
        raise MalformedHeader(f"{path}: bad PFM size/scale fields")
    channels = 3 if magic == "PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    count = w * h * channels
    if len(data) - offset < 4 * count:
        raise MalformedHeader(f"{path}: PFM payload shorter than header promises")
    arr = np.frombuffer(data, dtype=dtype, count=count, offset=offset).astype(np.float32)
    arr = arr.reshape((h, w, 3) if channels == 3 else (h, w))
    return np.ascontiguousarray(arr[::-1])


def write_pfm(path, raster):
    raster = np.asarray(raster)
    if raster.ndim == 3 and raster.shape[2] == 3:
        magic = "PF"
    elif raster.ndim == 2:
        magic = "Pf"
    else:
        raise ValueError("PFM holds 1- or 3-channel rasters")
    h, w = raster.shape[:2]
    payload = np.ascontiguousarray(raster[::-1], dtype="<f4").tobytes()
    with open(path, "wb") as fh:
        fh.write(f"{magic}\n{w} {h}\n-1.0\n".encode("ascii"))
        fh.write(payload)


def read_pgm_mask(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, offset = _header_tokens(data, 4)
    magic, w, h, maxval = tokens
    if magic != "P5":
        raise MalformedHeader(f"{path}: mask must be a binary PGM (P5)")
    w, h, maxval = int(w), int(h), int(maxval)
    if maxval > 255:
        raise MalformedHeader(f"{path}: 16-bit PGM masks are not supported")
    if len(data) - offset < w * h:
        raise MalformedHeader(f"{path}: PGM payload too short")
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=offset).reshape(h, w)
    return arr >= (maxval + 1) // 2


def write_pgm_mask(path, mask):
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.where(mask, 255, 0).astype(np.uint8).tobytes())


# -- sample layout -----------------------------------------------------------

@dataclass
class MapPaths:
    intensity: Path
    depth: Path
    xyz: Path
    corr: Path
    meta: Path
    mask: Path | None = None

    @classmethod
    def from_stem(cls, stem):
        stem = str(stem)
        mask = Path(stem + ".mask.pgm")
        return cls(
            intensity=Path(stem + ".intensity.pfm"),
            depth=Path(stem + ".depth.pfm"),
            xyz=Path(stem + ".xyz.pfm"),
            corr=Path(stem + ".corr.pfm"),
            meta=Path(stem + ".meta.json"),
            mask=mask if mask.exists() else None,
        )


def read_meta(path) -> tuple[dict, CameraMeta]:
    try:
        meta = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MalformedHeader(f"{path}: {exc}") from None
    units = meta.get("depth_units")
    if units is None:
        raise MalformedHeader(f"{path}: depth_units missing; no default unit is assumed")
    sign = meta.get("depth_sign")
    if sign not in DEPTH_SIGNS:
        raise MalformedHeader(f"{path}: depth_sign must be one of {DEPTH_SIGNS}")
    if units not in DEPTH_UNITS_MM and units != "normalized":
        raise MalformedHeader(f"{path}: unknown depth_units {units!r}")
    if units == "normalized" and "unit_scale_mm" not in meta:
        raise MalformedHeader(f"{path}: normalized depth needs unit_scale_mm")
    for key in ("width", "height", "camera_scale"):
        if key not in meta:
            raise MalformedHeader(f"{path}: missing {key}")
    pp = meta.get("principal_point", [meta["width"] / 2.0, meta["height"] / 2.0])
    camera = CameraMeta(
        scale=float(meta["camera_scale"]),
        cx=float(pp[0]),
        cy=float(pp[1]),
        depth_units="mm",
        depth_sign="larger_is_closer",
    )
    return meta, camera


def _unit_factor(meta):
    units = meta["depth_units"]
    if units == "normalized":
        return float(meta["unit_scale_mm"])
    return DEPTH_UNITS_MM[units]


def load_map_stack(paths) -> MapStack:
    """Load and validate a sample given a stem (str/Path) or :class:`MapPaths`.

    Depth and xyz are converted to millimetres with larger depth closer to
    the camera, according to the metadata sidecar. Without a mask file the
    mask is the set of pixels finite in depth, xyz and correspondence.
    """
    if not isinstance(paths, MapPaths):
        paths = MapPaths.from_stem(paths)
    for p in (paths.intensity, paths.depth, paths.xyz, paths.corr, paths.meta):
        if not Path(p).exists():
            raise FileNotFoundError(str(p))
    meta, camera = read_meta(paths.meta)
    intensity = read_pfm(paths.intensity)
    depth = read_pfm(paths.depth)
    xyz = read_pfm(paths.xyz)
    corr = read_pfm(paths.corr)
    if intensity.ndim != 2 or depth.ndim != 2 or xyz.ndim != 3 or corr.ndim != 3:
        raise MalformedHeader("channel count mismatch (expected Pf, Pf, PF, PF)")
    shapes = {intensity.shape, depth.shape, xyz.shape[:2], corr.shape[:2]}
    if len(shapes) != 1:
        raise DimensionMismatch(f"raster sizes differ: {sorted(shapes)}")
    h, w = depth.shape
    if (meta["width"], meta["height"]) != (w, h):
        raise DimensionMismatch(
            f"metadata says {meta['width']}x{meta['height']}, rasters are {w}x{h}")

    factor = _unit_factor(meta)
    depth = depth.astype(np.float64) * factor
    xyz = xyz.astype(np.float64) * factor
    if meta["depth_sign"] == "larger_is_farther":
        depth = -depth
        xyz[..., 2] = -xyz[..., 2]

    finite = (np.isfinite(depth) & np.isfinite(xyz).all(axis=2) & np.isfinite(corr).all(axis=2))
    mask = None
    if paths.mask is not None:
        mask = read_pgm_mask(paths.mask)
        if mask.shape != (h, w):
            raise DimensionMismatch(f"mask is {mask.shape[1]}x{mask.shape[0]}, rasters {w}x{h}")
        conflict = int((mask != finite).sum())
        if conflict:
            raise MaskChannelConflict(f"mask disagrees with the NaN pattern on {conflict} pixel(s)")
    stack = MapStack(intensity, depth, xyz, corr, mask, camera)
    if stack.valid_count == 0:
        warnings.warn(f"{paths.depth}: no valid facial pixels", EmptyFaceWarning, stacklevel=2)
    return stack


def save_map_stack(stack: MapStack, stem, write_mask=True, extra_meta=None):
    """Write ``stack`` in the per-sample layout (values stored as float32)."""
    stem = str(stem)
    Path(stem).parent.mkdir(parents=True, exist_ok=True)
    write_pfm(stem + ".intensity.pfm", stack.intensity)
    write_pfm(stem + ".depth.pfm", stack.depth)
    write_pfm(stem + ".xyz.pfm", stack.xyz)
    write_pfm(stem + ".corr.pfm", stack.correspondence)
    if write_mask:
        write_pgm_mask(stem + ".mask.pgm", stack.mask)
    meta = {
        "width": stack.width,
        "height": stack.height,
        "depth_units": "mm",
        "depth_sign": "larger_is_closer",
        "camera_scale": stack.camera.scale,
        "principal_point": [stack.camera.cx, stack.camera.cy],
    }
    meta.update(extra_meta or {})
    Path(stem + ".meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def camera_to_dict(camera: CameraMeta) -> dict:
    return asdict(camera)


# -- normals -----------------------------------------------------------------

def _axis_derivative(z, valid, axis):
    """Central differences inside the mask, one-sided where a neighbour is missing."""
    zf = np.where(valid, z, 0.0)
    fwd = np.zeros_like(zf)
    bwd = np.zeros_like(zf)
    has_fwd = np.zeros_like(valid)
    has_bwd = np.zeros_like(valid)
    if axis == 1:
        fwd[:, :-1] = zf[:, 1:] - zf[:, :-1]
        has_fwd[:, :-1] = valid[:, 1:] & valid[:, :-1]
        bwd[:, 1:] = zf[:, 1:] - zf[:, :-1]
        has_bwd[:, 1:] = valid[:, 1:] & valid[:, :-1]
    else:
        fwd[:-1] = zf[1:] - zf[:-1]
        has_fwd[:-1] = valid[1:] & valid[:-1]
        bwd[1:] = zf[1:] - zf[:-1]
        has_bwd[1:] = valid[1:] & valid[:-1]
    both = has_fwd & has_bwd
    return np.where(both, 0.5 * (fwd + bwd), np.where(has_fwd, fwd, np.where(has_bwd, bwd, 0.0)))


def depth_to_normals(depth, mask, spacing=1.0):
    """Unit normals ``(-dz/dx, -dz/dy, 1) / norm`` of a depth raster.

    ``x`` runs along columns and ``y`` up the image (against rows); ``spacing``
    is the pixel size in depth units. Pixels outside ``mask`` are NaN.
    """
    depth = np.asarray(depth, dtype=np.float64)
    valid = np.asarray(mask, dtype=bool) & np.isfinite(depth)
    dz_dcol = _axis_derivative(depth, valid, axis=1)
    dz_drow = _axis_derivative(depth, valid, axis=0)
    gx = dz_dcol / spacing
    gy = -dz_drow / spacing
    n = np.stack([-gx, -gy, np.ones_like(gx)], axis=-1)
    n /= np.sqrt((n * n).sum(axis=-1, keepdims=True))
    n[~valid] = np.nan
    return n
