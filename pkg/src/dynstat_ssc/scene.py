"""Synthetic box worlds, ray-cast stereo/temporal rendering and voxel labels.

World frame: x forward, y left, z up. Camera frame follows the OpenCV
convention (x right, y down, z forward); poses are camera-to-world.
Pixel (row i, col j) covers the continuous square [j, j+1) x [i, i+1), so its
center sits at (j + 0.5, i + 0.5).
"""
from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_CLASS_NAMES = ("empty", "ground", "car", "pedestrian", "building")
DEFAULT_DYNAMIC = ("car", "pedestrian")

GRID_MAGIC = b"CDSC"
GRID_VERSION = 1
_HEADER = struct.Struct("<4sH3IH6f")


class GridFormatError(ValueError):
    pass


class BadMagicError(GridFormatError):
    pass


class TruncatedError(GridFormatError):
    pass


class DimMismatchError(GridFormatError):
    pass


@dataclass(frozen=True)
class SemanticClassSet:
    names: Tuple[str, ...] = DEFAULT_CLASS_NAMES
    dynamic: Tuple[str, ...] = DEFAULT_DYNAMIC

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dynamic", tuple(self.dynamic))
        if len(set(self.names)) != len(self.names):
            raise ValueError(f"duplicate class names in {self.names}")
        if not self.names or self.names[0] != "empty":
            raise ValueError("class 0 must be 'empty'")
        unknown = set(self.dynamic) - set(self.names)
        if unknown:
            raise ValueError(f"dynamic classes not in class set: {sorted(unknown)}")

    @property
    def M(self) -> int:
        return len(self.names) - 1

    def index(self, name: str) -> int:
        return self.names.index(name)

    def is_dynamic(self, class_id: int) -> bool:
        return self.names[class_id] in self.dynamic


def _f32(values) -> Tuple[float, ...]:
    return tuple(float(v) for v in np.asarray(values, dtype=np.float32))


@dataclass(frozen=True)
class VoxelGridSpec:
    """Axis-aligned voxel lattice.

    origin/extent are canonicalised to float32 precision so a spec survives the
    on-disk label format unchanged.
    """

    origin: Tuple[float, float, float] = (0.0, -6.4, 0.0)
    extent: Tuple[float, float, float] = (12.8, 12.8, 3.2)
    dims: Tuple[int, int, int] = (32, 32, 8)

    def __post_init__(self):
        object.__setattr__(self, "origin", _f32(self.origin))
        object.__setattr__(self, "extent", _f32(self.extent))
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        if len(self.origin) != 3 or len(self.extent) != 3 or len(self.dims) != 3:
            raise ValueError("origin, extent and dims must have 3 components")
        if any(e <= 0 for e in self.extent):
            raise ValueError(f"extent must be positive, got {self.extent}")
        if any(d <= 0 for d in self.dims):
            raise ValueError(f"dims must be positive, got {self.dims}")

    @property
    def voxel_size(self) -> np.ndarray:
        return np.asarray(self.extent) / np.asarray(self.dims)

    def centers(self) -> np.ndarray:
        """(X, Y, Z, 3) array of voxel center coordinates."""
        axes = [
            self.origin[a] + (np.arange(self.dims[a]) + 0.5) * self.voxel_size[a]
            for a in range(3)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def scaled(self, factor: int) -> "VoxelGridSpec":
        """Same volume at dims // factor."""
        if any(d % factor for d in self.dims):
            raise ValueError(f"dims {self.dims} not divisible by {factor}")
        return VoxelGridSpec(self.origin, self.extent, tuple(d // factor for d in self.dims))


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0, self.cx], [0, self.fy, self.cy], [0, 0, 1.0]])

    def scaled(self, stride: int) -> "CameraIntrinsics":
        """Intrinsics of a feature map downsampled by `stride`."""
        if self.width % stride or self.height % stride:
            raise ValueError(f"image {self.width}x{self.height} not divisible by {stride}")
        return CameraIntrinsics(
            self.fx / stride, self.fy / stride, self.cx / stride, self.cy / stride,
            self.width // stride, self.height // stride,
        )


@dataclass(frozen=True)
class CameraPose:
    """Rigid transform mapping camera coordinates to world coordinates."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise ValueError("rotation must be a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    def apply(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def inverse(self) -> "CameraPose":
        return CameraPose(self.rotation.T, -self.rotation.T @ self.translation)

    def __matmul__(self, other: "CameraPose") -> "CameraPose":
        return CameraPose(
            self.rotation @ other.rotation, self.rotation @ other.translation + self.translation
        )

    @property
    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m


def relative_pose(ref: CameraPose, src: CameraPose) -> CameraPose:
    """Transform taking reference-camera coordinates into source-camera coordinates."""
    return src.inverse() @ ref


def look_forward_rotation(pitch_deg: float) -> np.ndarray:
    """Camera looking along world +x, tilted down by `pitch_deg`."""
    th = np.deg2rad(pitch_deg)
    forward = np.array([np.cos(th), 0.0, -np.sin(th)])
    right = np.array([0.0, -1.0, 0.0])
    down = np.cross(forward, right)
    return np.stack([right, down, forward], axis=1)


@dataclass(frozen=True)
class CameraRig:
    intrinsics: CameraIntrinsics
    left_poses: Tuple[CameraPose, ...]
    baseline: float

    def __post_init__(self):
        object.__setattr__(self, "left_poses", tuple(self.left_poses))
        if len(self.left_poses) < 2:
            raise ValueError("a rig needs at least two left frames")
        if self.baseline <= 0:
            raise ValueError("baseline must be positive")

    @property
    def n_frames(self) -> int:
        return len(self.left_poses)

    def right_pose(self, frame: int = 0) -> CameraPose:
        left = self.left_poses[frame]
        return left @ CameraPose(np.eye(3), np.array([self.baseline, 0.0, 0.0]))


def default_rig(
    n_frames: int = 3,
    width: int = 128,
    height: int = 64,
    fx: float = 64.0,
    baseline: float = 0.6,
    camera_height: float = 2.4,
    pitch_deg: float = 12.0,
    ego_step: float = 0.8,
) -> CameraRig:
    """Forward-driving rig: frame i (time t - i) sits `i * ego_step` behind frame 0."""
    intr = CameraIntrinsics(fx, fx, width / 2.0, height / 2.0, width, height)
    R = look_forward_rotation(pitch_deg)
    poses = [CameraPose(R, np.array([-i * ego_step, 0.0, camera_height])) for i in range(n_frames)]
    return CameraRig(intr, tuple(poses), baseline)


@dataclass(frozen=True)
class Box:
    class_id: int
    centers: np.ndarray  # (n_frames, 3)
    half_extents: np.ndarray  # (3,)

    @property
    def dynamic(self) -> bool:
        return not np.all(self.centers == self.centers[0])


@dataclass(frozen=True)
class SyntheticScene:
    seed: int
    ground_height: float
    boxes: Tuple[Box, ...]
    class_set: SemanticClassSet
    n_frames: int

    def fingerprint(self) -> str:
        h = hashlib.sha256()
        h.update(struct.pack("<qd", self.seed, self.ground_height))
        for b in self.boxes:
            h.update(struct.pack("<i", b.class_id))
            h.update(np.ascontiguousarray(b.centers, dtype=np.float64).tobytes())
            h.update(np.ascontiguousarray(b.half_extents, dtype=np.float64).tobytes())
        return h.hexdigest()


# Half-extent ranges in units of 0.4, so full extents are multiples of 0.8 and
# faces land on the half-resolution lattice once corners are snapped to 0.8.
_BOX_SHAPES = {
    "car": ((2, 3), (2, 2), (1, 2)),
    "pedestrian": ((1, 1), (1, 1), (2, 2)),
    "building": ((2, 4), (2, 5), (2, 3)),
}
_SNAP = 0.8


def _overlap(a_c, a_h, b_c, b_h) -> bool:
    return bool(np.all(np.abs(a_c - b_c) < a_h + b_h))


def _projects_into(rig: CameraRig, point: np.ndarray) -> bool:
    cam = rig.left_poses[0].inverse().apply(point[None])[0]
    if cam[2] <= 1.0:
        return False
    intr = rig.intrinsics
    u = intr.fx * cam[0] / cam[2] + intr.cx
    v = intr.fy * cam[1] / cam[2] + intr.cy
    return 0 <= u < intr.width and 0 <= v < intr.height


def generate_scene(
    seed: int,
    spec: VoxelGridSpec,
    class_set: SemanticClassSet,
    n_frames: int,
    n_boxes: int,
    rig: Optional[CameraRig] = None,
    ground_height: Optional[float] = None,
    max_attempts: int = 1000,
) -> SyntheticScene:
    """Place `n_boxes` non-overlapping boxes; the first is dynamic, the second static.

    When `rig` is given, every box center must project into the reference
    (frame 0) left image.
    """
    if n_frames < 2:
        raise ValueError("n_frames must be >= 2")
    if n_boxes < 1:
        raise ValueError("n_boxes must be >= 1")
    rng = np.random.default_rng(seed)
    origin = np.asarray(spec.origin)
    extent = np.asarray(spec.extent)
    gh = origin[2] + 2 * spec.voxel_size[2] if ground_height is None else ground_height

    shapes = {n: s for n, s in _BOX_SHAPES.items() if n in class_set.names}
    dyn_names = [n for n in shapes if n in class_set.dynamic]
    static_names = [n for n in shapes if n not in class_set.dynamic]
    if not dyn_names and not static_names:
        raise ValueError("class set has no placeable object classes")

    boxes: List[Box] = []
    for k in range(n_boxes):
        if k == 0 and dyn_names:
            pool = dyn_names
        elif k == 1 and static_names:
            pool = static_names
        else:
            pool = dyn_names + static_names
        for _ in range(max_attempts):
            name = pool[rng.integers(len(pool))]
            rx, ry, rz = shapes[name]
            half = 0.4 * np.array(
                [rng.integers(r[0], r[1] + 1) for r in (rx, ry, rz)], dtype=np.float64
            )
            if rng.random() < 0.5:
                half[[0, 1]] = half[[1, 0]]
            lo_max = (extent[:2] - 2 * half[:2]) / _SNAP
            corner = np.floor(rng.random(2) * (np.floor(lo_max) + 1)) * _SNAP
            c0 = np.array([*(origin[:2] + corner + half[:2]), gh + half[2]])
            if name in class_set.dynamic:
                speed = rng.choice([-0.4, 0.4])
                axis = rng.integers(2)
                vel = np.zeros(3)
                vel[axis] = speed
            else:
                vel = np.zeros(3)
            centers = np.stack([c0 - i * vel for i in range(n_frames)])
            inside = np.all(centers - half >= origin - 1e-9) and np.all(
                centers + half <= origin + extent + 1e-9
            )
            if not inside:
                continue
            if rig is not None and not _projects_into(rig, c0):
                continue
            if any(
                _overlap(centers[f], half, b.centers[f], b.half_extents)
                for b in boxes
                for f in range(n_frames)
            ):
                continue
            boxes.append(Box(class_set.index(name), centers, half))
            break
        else:
            raise ValueError(f"could not place box {k} without overlap after {max_attempts} attempts")
    return SyntheticScene(int(seed), float(gh), tuple(boxes), class_set, n_frames)


@dataclass(frozen=True)
class RenderedView:
    image: np.ndarray  # (3, H, W) in [0, 1]
    depth_gt: np.ndarray  # (H, W), 0 = no hit
    pose: CameraPose


_PALETTE = np.array(
    [
        [0.0, 0.0, 0.0],
        [0.45, 0.42, 0.38],
        [0.85, 0.25, 0.2],
        [0.95, 0.8, 0.25],
        [0.3, 0.45, 0.85],
        [0.3, 0.75, 0.35],
        [0.7, 0.35, 0.8],
        [0.3, 0.8, 0.8],
    ]
)
_SKY = np.array([0.55, 0.7, 0.9])
_LIGHT = np.array([-0.4, 0.3, 0.85]) / np.linalg.norm([-0.4, 0.3, 0.85])
_TEX_FREQ = np.array(
    [
        [7.1, 2.3, 5.2],
        [-3.7, 8.3, 1.9],
        [2.9, -6.1, 7.7],
        [11.3, 4.1, -3.3],
        [-5.9, -9.7, 6.1],
        [4.3, 12.7, 9.1],
    ]
)
_TEX_PHASE = np.array([0.3, 1.7, 2.9, 4.1, 5.3, 0.9])


def surface_texture(points: np.ndarray) -> np.ndarray:
    """Deterministic world-anchored texture in [0.4, 1]; identical across views."""
    s = np.sin(points @ _TEX_FREQ.T + _TEX_PHASE).mean(axis=-1)
    return 0.7 + 0.3 * s


def _class_color(class_id: int) -> np.ndarray:
    return _PALETTE[class_id % len(_PALETTE)]


def _ray_box(origin, dirs, lo, hi):
    """Slab test; returns (t_near, face_axis, valid) with t measured along `dirs`."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (lo - origin) * inv
        t2 = (hi - origin) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside the slab -> unbounded, outside -> miss
    par = dirs == 0
    inside_slab = (origin >= lo) & (origin <= hi)
    tmin = np.where(par, np.where(inside_slab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inside_slab, np.inf, -np.inf), tmax)
    t_near = tmin.max(axis=-1)
    t_far = tmax.min(axis=-1)
    axis = tmin.argmax(axis=-1)
    valid = (t_near <= t_far) & (t_near > 1e-9)
    return t_near, axis, valid


def pixel_rays(intr: CameraIntrinsics) -> np.ndarray:
    """(H, W, 3) camera-frame ray directions with unit z component."""
    u = np.arange(intr.width) + 0.5
    v = np.arange(intr.height) + 0.5
    uu, vv = np.meshgrid(u, v)
    return np.stack([(uu - intr.cx) / intr.fx, (vv - intr.cy) / intr.fy, np.ones_like(uu)], -1)


def render_view(scene: SyntheticScene, intr: CameraIntrinsics, pose: CameraPose, frame: int) -> RenderedView:
    """Ray-cast one camera; depth_gt is camera-frame z of the first hit."""
    H, W = intr.height, intr.width
    dirs = (pixel_rays(intr).reshape(-1, 3)) @ pose.rotation.T
    o = pose.translation
    best_t = np.full(H * W, np.inf)
    color = np.tile(_SKY, (H * W, 1))
    normal = np.zeros((H * W, 3))

    gid = scene.class_set.index("ground") if "ground" in scene.class_set.names else 0
    with np.errstate(divide="ignore", invalid="ignore"):
        tg = (scene.ground_height - o[2]) / dirs[:, 2]
    hit_g = np.isfinite(tg) & (tg > 1e-9)
    best_t[hit_g] = tg[hit_g]
    color[hit_g] = _class_color(gid)
    normal[hit_g] = [0.0, 0.0, 1.0]

    for box in scene.boxes:
        c = box.centers[frame]
        t, axis, valid = _ray_box(o, dirs, c - box.half_extents, c + box.half_extents)
        closer = valid & (t < best_t)
        best_t[closer] = t[closer]
        color[closer] = _class_color(box.class_id)
        n = np.zeros((closer.sum(), 3))
        ax = axis[closer]
        n[np.arange(len(ax)), ax] = -np.sign(dirs[closer, ax])
        normal[closer] = n

    hit = np.isfinite(best_t)
    depth = np.where(hit, best_t, 0.0)
    pts = o + dirs * depth[:, None]
    shade = 0.45 + 0.55 * np.clip(normal @ _LIGHT, 0.0, 1.0)
    tex = surface_texture(pts)
    img = np.where(hit[:, None], color * (shade * tex)[:, None], color)
    img = np.clip(img, 0.0, 1.0)
    return RenderedView(
        image=img.reshape(H, W, 3).transpose(2, 0, 1).copy(),
        depth_gt=depth.reshape(H, W),
        pose=pose,
    )


def render_views(scene: SyntheticScene, rig: CameraRig, frame: int) -> Tuple[RenderedView, RenderedView]:
    """Left and right views of `frame` (0 = reference time t, i = time t - i)."""
    if not 0 <= frame < min(scene.n_frames, rig.n_frames):
        raise ValueError(f"frame {frame} out of range")
    left = render_view(scene, rig.intrinsics, rig.left_poses[frame], frame)
    right = render_view(scene, rig.intrinsics, rig.right_pose(frame), frame)
    return left, right


def voxelize_labels(scene: SyntheticScene, spec: VoxelGridSpec, frame: int = 0) -> np.ndarray:
    """uint8 label grid (X, Y, Z); later boxes override earlier ones."""
    if not 0 <= frame < scene.n_frames:
        raise ValueError(f"frame {frame} out of range")
    centers = spec.centers()
    labels = np.zeros(spec.dims, dtype=np.uint8)
    if "ground" in scene.class_set.names:
        labels[centers[..., 2] < scene.ground_height] = scene.class_set.index("ground")
    for box in scene.boxes:
        inside = np.all(np.abs(centers - box.centers[frame]) <= box.half_extents, axis=-1)
        labels[inside] = box.class_id
    return labels


def save_grid(grid: np.ndarray, spec: VoxelGridSpec, path, n_classes: int = len(DEFAULT_CLASS_NAMES)) -> None:
    grid = np.asarray(grid)
    if tuple(grid.shape) != spec.dims:
        raise DimMismatchError(f"grid shape {grid.shape} != spec dims {spec.dims}")
    if any(d >= 2**32 for d in spec.dims):
        raise DimMismatchError("dims exceed u32")
    if grid.min(initial=0) < 0 or grid.max(initial=0) > 255:
        raise ValueError("labels must fit in u8")
    header = _HEADER.pack(GRID_MAGIC, GRID_VERSION, *spec.dims, n_classes, *spec.origin, *spec.extent)
    Path(path).write_bytes(header + np.ascontiguousarray(grid, dtype=np.uint8).tobytes())


def load_grid(path) -> Tuple[np.ndarray, VoxelGridSpec]:
    raw = Path(path).read_bytes()
    if len(raw) < 4 or raw[:4] != GRID_MAGIC:
        raise BadMagicError(f"{path}: bad magic")
    if len(raw) < _HEADER.size:
        raise TruncatedError(f"{path}: truncated header")
    _, version, X, Y, Z, _n_classes, *floats = _HEADER.unpack_from(raw)
    if version != GRID_VERSION:
        raise GridFormatError(f"{path}: unsupported version {version}")
    n = X * Y * Z
    payload = raw[_HEADER.size:]
    if len(payload) < n:
        raise TruncatedError(f"{path}: truncated payload ({len(payload)} < {n} bytes)")
    if len(payload) > n:
        raise DimMismatchError(f"{path}: payload of {len(payload)} bytes does not match dims {X}x{Y}x{Z}")
    spec = VoxelGridSpec(tuple(floats[:3]), tuple(floats[3:]), (X, Y, Z))
    grid = np.frombuffer(payload, dtype=np.uint8).reshape(X, Y, Z).copy()
    return grid, spec
