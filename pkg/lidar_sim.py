"""
Deterministic synthetic world and spinning LiDAR scanner.

The world is a ground plane (Road) with axis-aligned boxes (Building, Other,
Dynamic) and ellipsoids (Vegetation) arranged around a closed driving loop.
Scans are ray-cast per (beam, azimuth) and every return carries the
semantic superclass of the primitive it hit and the ID of the beam that
produced it. Beam ID 1 is the uppermost beam.
"""

import logging
from dataclasses import dataclass, asdict, field
from typing import Dict, Any, Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from features import SemanticSuperclass


@dataclass(frozen=True)
class ScannerSpec:
    """Spinning LiDAR geometry; defaults follow a 32-beam automotive sensor"""
    K: int = 32
    elevation_low_deg: float = -30.67
    elevation_high_deg: float = 10.67
    azimuth_steps: int = 720
    max_range: float = 80.0
    sensor_height: float = 1.8
    range_noise_std: float = 0.0

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"Scanner needs at least 2 beams, got K={self.K}")
        if not self.elevation_low_deg < self.elevation_high_deg:
            raise ValueError(
                f"Elevation range must be increasing, got [{self.elevation_low_deg}, {self.elevation_high_deg}]"
            )
        if self.azimuth_steps < 8:
            raise ValueError(f"azimuth_steps must be at least 8, got {self.azimuth_steps}")
        if self.max_range <= 0 or self.sensor_height <= 0:
            raise ValueError("max_range and sensor_height must be positive")
        if self.range_noise_std < 0:
            raise ValueError("range_noise_std must be non-negative")

    def elevations(self) -> np.ndarray:
        """Elevation angle of each beam in radians, index 0 = beam ID 1 (uppermost)"""
        return np.radians(np.linspace(self.elevation_high_deg, self.elevation_low_deg, self.K))

    def ray_directions(self) -> Tuple[np.ndarray, np.ndarray]:
        """Unit ray directions in the sensor frame (beam-major) and their beam IDs"""
        elevation = self.elevations()
        azimuth = 2.0 * np.pi * np.arange(self.azimuth_steps) / self.azimuth_steps
        phi, theta = np.meshgrid(elevation, azimuth, indexing='ij')
        directions = np.stack([
            np.cos(phi) * np.cos(theta),
            np.cos(phi) * np.sin(theta),
            np.sin(phi),
        ], axis=-1).reshape(-1, 3)
        beam_ids = np.repeat(np.arange(1, self.K + 1, dtype=np.int16), self.azimuth_steps)
        return directions, beam_ids

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ScannerSpec':
        return cls(**data)


@dataclass(frozen=True)
class SceneParams:
    """Counts and extents of the procedural scene"""
    route_radius: float = 30.0
    route_poses: int = 200
    road_half_width: float = 7.0
    outer_buildings: int = 22
    inner_buildings: int = 5
    vegetation: int = 18
    dynamic_objects: int = 12
    poles: int = 16
    dynamic_jitter: float = 1.5

    def __post_init__(self):
        if self.route_radius <= 0 or self.road_half_width <= 0:
            raise ValueError("route_radius and road_half_width must be positive")
        if self.road_half_width * 2.0 + 6.0 > self.route_radius:
            raise ValueError(
                f"road_half_width {self.road_half_width} is too wide for route_radius {self.route_radius}"
            )
        if self.route_poses < 1:
            raise ValueError("route_poses must be at least 1")
        if self.outer_buildings + self.inner_buildings < 1 or self.vegetation < 1 or self.poles < 1:
            raise ValueError("Scene needs at least one building, one vegetation object and one pole")
        if self.dynamic_objects < 0 or self.dynamic_jitter < 0:
            raise ValueError("dynamic_objects and dynamic_jitter must be non-negative")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SceneParams':
        return cls(**data)


@dataclass
class Scene:
    """Primitives and the ground-truth route (x, y, yaw per pose)"""
    seed: int
    params: SceneParams
    boxes: np.ndarray            # (n, 6) min xyz, max xyz
    box_labels: np.ndarray       # (n,)
    ellipsoids: np.ndarray       # (e, 6) center xyz, radii xyz
    ellipsoid_labels: np.ndarray  # (e,)
    route: np.ndarray            # (P, 3)

    @property
    def dynamic_mask(self) -> np.ndarray:
        return self.box_labels == SemanticSuperclass.DYNAMIC

    def dynamic_offsets(self, key: Optional[int]) -> np.ndarray:
        """Planar displacement of every dynamic box for a given scan key; zeros when key is None"""
        count = int(self.dynamic_mask.sum())
        offsets = np.zeros((count, 3))
        if key is None or count == 0 or self.params.dynamic_jitter == 0:
            return offsets
        rng = np.random.default_rng([self.seed, 7919, int(key)])
        offsets[:, :2] = rng.uniform(-self.params.dynamic_jitter, self.params.dynamic_jitter, size=(count, 2))
        return offsets

    def route_pose(self, index: int, sensor_height: float) -> np.ndarray:
        x, y, yaw = self.route[index]
        return pose_from_xyyaw(x, y, yaw, sensor_height)

    def superclasses_present(self) -> set:
        labels = {int(SemanticSuperclass.ROAD)}
        labels.update(int(v) for v in self.box_labels)
        labels.update(int(v) for v in self.ellipsoid_labels)
        return labels


@dataclass
class LabeledPointCloud:
    """Points in the sensor frame with superclass and beam ID, plus the sensor pose"""
    points: np.ndarray
    labels: np.ndarray
    beam_ids: np.ndarray
    pose: np.ndarray = field(default_factory=lambda: np.eye(4))

    def __len__(self) -> int:
        return int(self.points.shape[0])

    def world_points(self) -> np.ndarray:
        return transform_points(self.pose, self.points)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            'x': self.points[:, 0],
            'y': self.points[:, 1],
            'z': self.points[:, 2],
            'class': self.labels.astype(int),
            'beam': self.beam_ids.astype(int),
        })


@dataclass
class MapCloud:
    """World-frame static map"""
    points: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.points.shape[0])


def pose_from_xyyaw(x: float, y: float, yaw: float, z: float = 0.0) -> np.ndarray:
    """SE(2) ground pose lifted to a 4x4 SE(3) transform"""
    c, s = np.cos(yaw), np.sin(yaw)
    pose = np.eye(4)
    pose[:3, :3] = [[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]
    pose[:3, 3] = [x, y, z]
    return pose


def transform_points(pose: np.ndarray, points: np.ndarray) -> np.ndarray:
    return points @ pose[:3, :3].T + pose[:3, 3]


def invert_pose(pose: np.ndarray) -> np.ndarray:
    inverse = np.eye(4)
    inverse[:3, :3] = pose[:3, :3].T
    inverse[:3, 3] = -pose[:3, :3].T @ pose[:3, 3]
    return inverse


def beams_in_elevation_range(spec: ScannerSpec, low_deg: float, high_deg: float) -> Tuple[int, int]:
    """First and last beam ID whose elevation lies inside [low_deg, high_deg]"""
    elevation = np.degrees(spec.elevations())
    inside = np.nonzero((elevation >= low_deg - 1e-6) & (elevation <= high_deg + 1e-6))[0]
    if inside.size == 0:
        raise ValueError(f"No beam lies inside [{low_deg}, {high_deg}] degrees")
    return int(inside[0]) + 1, int(inside[-1]) + 1


def _footprint_clearance(lo: np.ndarray, hi: np.ndarray, radius: float) -> float:
    """Smallest distance between a box footprint and the route circle"""
    xs = np.linspace(lo[0], hi[0], 9)
    ys = np.linspace(lo[1], hi[1], 9)
    gx, gy = np.meshgrid(xs, ys)
    return float(np.min(np.abs(np.hypot(gx, gy) - radius)))


def _sample_box(rng, radius, radial_lo, radial_hi, size_lo, size_hi, height_lo, height_hi, clearance,
                max_attempts=200):
    for _ in range(max_attempts):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        dist = rng.uniform(radial_lo, radial_hi)
        center = np.array([dist * np.cos(angle), dist * np.sin(angle)])
        half = rng.uniform(size_lo, size_hi, size=2) / 2.0
        height = rng.uniform(height_lo, height_hi)
        lo = np.array([center[0] - half[0], center[1] - half[1], 0.0])
        hi = np.array([center[0] + half[0], center[1] + half[1], height])
        if _footprint_clearance(lo, hi, radius) >= clearance:
            return np.concatenate([lo, hi])
    return None


def generate_scene(seed: int, params: Optional[SceneParams] = None) -> Scene:
    """Procedural scene around a circular route; identical output for equal (seed, params)"""
    params = params or SceneParams()
    rng = np.random.default_rng(seed)
    radius = params.route_radius
    road = params.road_half_width

    boxes: List[np.ndarray] = []
    box_labels: List[int] = []

    def add_boxes(count, label, **kwargs):
        for _ in range(count):
            box = _sample_box(rng, radius, **kwargs)
            if box is None:
                logging.warning(f"Could not place a {SemanticSuperclass(label).name.lower()} box; skipping")
                continue
            boxes.append(box)
            box_labels.append(int(label))

    add_boxes(params.outer_buildings, SemanticSuperclass.BUILDING,
              radial_lo=radius + road + 6.0, radial_hi=radius + road + 22.0,
              size_lo=6.0, size_hi=16.0, height_lo=5.0, height_hi=24.0, clearance=road + 1.0)
    add_boxes(params.inner_buildings, SemanticSuperclass.BUILDING,
              radial_lo=0.0, radial_hi=max(radius - road - 10.0, 1.0),
              size_lo=4.0, size_hi=8.0, height_lo=5.0, height_hi=18.0, clearance=road + 1.0)

    # Poles at the road edge
    for _ in range(params.poles):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        dist = radius + rng.choice([-1.0, 1.0]) * (road - 0.5)
        center = np.array([dist * np.cos(angle), dist * np.sin(angle)])
        half = 0.15
        height = rng.uniform(4.0, 7.0)
        boxes.append(np.array([center[0] - half, center[1] - half, 0.0,
                               center[0] + half, center[1] + half, height]))
        box_labels.append(int(SemanticSuperclass.OTHER))

    # Parked and moving cars on the road, oriented along the dominant tangent axis
    for _ in range(params.dynamic_objects):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        dist = radius + rng.choice([-1.0, 1.0]) * 3.5
        center = np.array([dist * np.cos(angle), dist * np.sin(angle)])
        tangent = np.array([-np.sin(angle), np.cos(angle)])
        length, width = 4.5, 1.9
        if abs(tangent[0]) >= abs(tangent[1]):
            half = np.array([length, width]) / 2.0
        else:
            half = np.array([width, length]) / 2.0
        boxes.append(np.array([center[0] - half[0], center[1] - half[1], 0.0,
                               center[0] + half[0], center[1] + half[1], 1.5]))
        box_labels.append(int(SemanticSuperclass.DYNAMIC))

    ellipsoids: List[np.ndarray] = []
    for _ in range(params.vegetation):
        angle = rng.uniform(0.0, 2.0 * np.pi)
        radii = np.array([rng.uniform(1.5, 3.0), rng.uniform(1.5, 3.0), rng.uniform(2.0, 4.0)])
        offset = road + radii[:2].max() + rng.uniform(1.0, 4.0)
        dist = radius + rng.choice([-1.0, 1.0]) * offset
        center = np.array([dist * np.cos(angle), dist * np.sin(angle), radii[2] + rng.uniform(0.5, 1.5)])
        ellipsoids.append(np.concatenate([center, radii]))

    angles = 2.0 * np.pi * np.arange(params.route_poses) / params.route_poses
    route = np.stack([radius * np.cos(angles), radius * np.sin(angles), angles + np.pi / 2.0], axis=1)
    route[:, 2] = np.arctan2(np.sin(route[:, 2]), np.cos(route[:, 2]))

    scene = Scene(
        seed=int(seed),
        params=params,
        boxes=np.array(boxes).reshape(-1, 6),
        box_labels=np.array(box_labels, dtype=np.int8),
        ellipsoids=np.array(ellipsoids).reshape(-1, 6),
        ellipsoid_labels=np.full(len(ellipsoids), int(SemanticSuperclass.VEGETATION), dtype=np.int8),
        route=route,
    )

    for index in range(params.route_poses):
        origin = np.array([route[index, 0], route[index, 1], 1.0])
        if point_inside_solids(scene, origin):
            raise ValueError(f"Route pose {index} lies inside a solid; scene seed {seed} is degenerate")

    logging.info(
        f"Generated scene seed={seed}: {len(boxes)} boxes, {len(ellipsoids)} ellipsoids, "
        f"{params.route_poses} route poses"
    )
    return scene


def point_inside_solids(scene: Scene, point: np.ndarray) -> bool:
    if scene.boxes.size:
        inside = np.all((point >= scene.boxes[:, :3]) & (point <= scene.boxes[:, 3:]), axis=1)
        if inside.any():
            return True
    if scene.ellipsoids.size:
        scaled = (point - scene.ellipsoids[:, :3]) / scene.ellipsoids[:, 3:]
        if np.any(np.sum(scaled ** 2, axis=1) <= 1.0):
            return True
    return False


def cast_rays(scene: Scene, origin: np.ndarray, directions: np.ndarray, max_range: float,
              dynamic_offsets: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """Nearest hit distance and superclass per world-frame ray; inf / -1 where nothing is hit"""
    count = directions.shape[0]
    best_t = np.full(count, np.inf)
    best_label = np.full(count, -1, dtype=np.int8)

    # Ground plane z = 0
    if origin[2] > 0:
        dz = directions[:, 2]
        downward = dz < -1e-12
        t_ground = np.full(count, np.inf)
        t_ground[downward] = -origin[2] / dz[downward]
        closer = t_ground < best_t
        best_t[closer] = t_ground[closer]
        best_label[closer] = int(SemanticSuperclass.ROAD)

    boxes = scene.boxes.copy()
    if dynamic_offsets is not None and len(dynamic_offsets):
        mask = scene.dynamic_mask
        boxes[mask, :3] += dynamic_offsets
        boxes[mask, 3:] += dynamic_offsets

    with np.errstate(divide='ignore', invalid='ignore'):
        inverse = 1.0 / directions
        for box, label in zip(boxes, scene.box_labels):
            t_lo = (box[:3] - origin) * inverse
            t_hi = (box[3:] - origin) * inverse
            t_near = np.nanmax(np.fmin(t_lo, t_hi), axis=1)
            t_far = np.nanmin(np.fmax(t_lo, t_hi), axis=1)
            hit = (t_near > 0) & (t_far >= t_near) & (t_near < best_t)
            best_t[hit] = t_near[hit]
            best_label[hit] = label

    for ellipsoid, label in zip(scene.ellipsoids, scene.ellipsoid_labels):
        center, radii = ellipsoid[:3], ellipsoid[3:]
        o = (origin - center) / radii
        d = directions / radii
        a = np.einsum('ij,ij->i', d, d)
        b = 2.0 * d @ o
        c = o @ o - 1.0
        disc = b * b - 4.0 * a * c
        valid = disc >= 0
        t_hit = np.full(count, np.inf)
        t_hit[valid] = (-b[valid] - np.sqrt(disc[valid])) / (2.0 * a[valid])
        hit = valid & (t_hit > 0) & (t_hit < best_t)
        best_t[hit] = t_hit[hit]
        best_label[hit] = label

    out_of_range = best_t > max_range
    best_t[out_of_range] = np.inf
    best_label[out_of_range] = -1
    return best_t, best_label


def scan(scene: Scene, pose: np.ndarray, spec: ScannerSpec, dynamic_key: Optional[int] = None,
         noise_key: Optional[int] = None) -> LabeledPointCloud:
    """Ray-cast one revolution from the sensor at pose.

    dynamic_key selects the displacement of dynamic objects for this scan,
    noise_key seeds the optional Gaussian range jitter.
    """
    directions, beam_ids = spec.ray_directions()
    world_directions = directions @ pose[:3, :3].T
    offsets = scene.dynamic_offsets(dynamic_key)
    distances, labels = cast_rays(scene, pose[:3, 3], world_directions, spec.max_range, offsets)

    hit = np.isfinite(distances)
    distances = distances[hit]
    if spec.range_noise_std > 0 and distances.size:
        rng = np.random.default_rng([scene.seed, 104729, 0 if noise_key is None else int(noise_key)])
        distances = np.clip(distances + rng.normal(0.0, spec.range_noise_std, size=distances.shape),
                            0.0, spec.max_range)

    points = directions[hit] * distances[:, None]
    return LabeledPointCloud(
        points=points,
        labels=labels[hit].astype(np.int8),
        beam_ids=beam_ids[hit],
        pose=np.array(pose, dtype=float),
    )


def subsample_beams(cloud: LabeledPointCloud, beam_ids: Iterable[int]) -> LabeledPointCloud:
    """Keep exactly the points of the selected beams; accepts a BeamConfig or any ID iterable"""
    selected = np.fromiter((int(b) for b in beam_ids), dtype=np.int64)
    mask = np.isin(cloud.beam_ids, selected)
    return LabeledPointCloud(
        points=cloud.points[mask],
        labels=cloud.labels[mask],
        beam_ids=cloud.beam_ids[mask],
        pose=cloud.pose,
    )


def voxel_thin(points: np.ndarray, voxel_size: float) -> np.ndarray:
    """Indices of the first point in every occupied voxel, ordered by voxel"""
    if points.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    cells = np.floor(points / voxel_size).astype(np.int64)
    cells -= cells.min(axis=0)
    extent = cells.max(axis=0) + 1
    flat = (cells[:, 0] * extent[1] + cells[:, 1]) * extent[2] + cells[:, 2]
    _, first = np.unique(flat, return_index=True)
    return first


def build_map(scene: Scene, map_poses: Sequence[np.ndarray], spec: ScannerSpec,
              voxel_size: float = 0.1) -> MapCloud:
    """World-frame union of full scans at map_poses, Dynamic points removed, voxel-thinned"""
    if len(map_poses) < 1:
        raise ValueError("build_map needs at least one map pose")

    chunks, label_chunks = [], []
    for pose in map_poses:
        cloud = scan(scene, pose, spec)
        static = cloud.labels != SemanticSuperclass.DYNAMIC
        chunks.append(transform_points(cloud.pose, cloud.points[static]))
        label_chunks.append(cloud.labels[static])

    points = np.concatenate(chunks, axis=0)
    labels = np.concatenate(label_chunks, axis=0)
    keep = voxel_thin(points, voxel_size)
    logging.info(f"Map built from {len(map_poses)} poses: {points.shape[0]} points, {keep.size} after thinning")
    return MapCloud(points=points[keep], labels=labels[keep])


def export_cloud_csv(cloud: LabeledPointCloud, path: str) -> None:
    cloud.to_dataframe().to_csv(path, index=False)
