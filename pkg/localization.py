"""
Built-in localization environment.

Each evaluation pose is perturbed by a frozen GNSS-like draw, the scan is
reduced to the selected beams and registered against the static map with
point-to-plane ICP. The configuration value is the weighted share of poses
recovered within three nested (translation, rotation) thresholds.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
from scipy.spatial import cKDTree
from scipy.spatial.transform import Rotation

from config import Config
from lidar_sim import LabeledPointCloud, MapCloud, subsample_beams, transform_points, voxel_thin
from utils import format_beam_ids

MIN_CORRESPONDENCES = 6

REPORT_COLUMNS = ['pose_id', 'tx', 'ty', 'tz', 'trans_err', 'rot_err', 'hit1', 'hit2', 'hit3',
                  'success', 'residual']


@dataclass(frozen=True)
class IcpParams:
    """Registration settings; robust_cutoff (meters) bounds the residuals kept while refining"""
    max_iterations: int = 50
    tolerance: float = 1e-4
    max_correspondence_distance: float = 1.0
    initial_correspondence_distance: float = 5.0
    gate_decay: float = 0.7
    normal_neighbors: int = 10
    source_voxel_size: float = 0.3
    robust_cutoff: float = 0.1

    def __post_init__(self):
        if self.max_iterations < 1 or self.normal_neighbors < 3:
            raise ValueError("max_iterations must be positive and normal_neighbors at least 3")
        if self.tolerance <= 0 or self.max_correspondence_distance <= 0:
            raise ValueError("tolerance and max_correspondence_distance must be positive")
        if self.initial_correspondence_distance < self.max_correspondence_distance:
            raise ValueError("initial_correspondence_distance cannot be below max_correspondence_distance")
        if not 0 < self.gate_decay <= 1:
            raise ValueError(f"gate_decay must lie in (0, 1], got {self.gate_decay}")
        if self.source_voxel_size < 0:
            raise ValueError("source_voxel_size must be non-negative")
        if self.robust_cutoff <= 0:
            raise ValueError(f"robust_cutoff must be positive, got {self.robust_cutoff}")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'IcpParams':
        return cls(**data)


@dataclass(frozen=True)
class RewardSpec:
    """Nested (meters, degrees) thresholds and their weights"""
    thresholds: tuple = ((0.25, 2.0), (0.5, 5.0), (5.0, 10.0))
    weights: tuple = (3.0, 2.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, 'thresholds', tuple((float(t), float(r)) for t, r in self.thresholds))
        object.__setattr__(self, 'weights', tuple(float(w) for w in self.weights))
        if len(self.thresholds) != 3 or len(self.weights) != 3:
            raise ValueError("RewardSpec needs exactly three thresholds and three weights")
        if any(w <= 0 for w in self.weights):
            raise ValueError(f"Reward weights must be positive, got {self.weights}")
        for (t0, r0), (t1, r1) in zip(self.thresholds, self.thresholds[1:]):
            if not (t1 > t0 and r1 > r0):
                raise ValueError(f"Thresholds must increase strictly in both components: {self.thresholds}")

    @property
    def normalizer(self) -> float:
        return float(sum(self.weights))

    def value(self, accuracies: Sequence[float]) -> float:
        return float(sum(w * a for w, a in zip(self.weights, accuracies)) / self.normalizer)

    def to_dict(self) -> Dict[str, Any]:
        return {'thresholds': [list(t) for t in self.thresholds], 'weights': list(self.weights)}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RewardSpec':
        return cls(thresholds=tuple(tuple(float(v) for v in t) for t in data['thresholds']),
                   weights=tuple(float(w) for w in data['weights']))


@dataclass(frozen=True)
class NoiseSpec:
    """GNSS-like initial guess: planar RMS offset translation_std, yaw stddev yaw_std_deg"""
    translation_std: float = 2.0
    yaw_std_deg: float = 5.0
    seed: int = 0

    def __post_init__(self):
        if self.translation_std < 0 or self.yaw_std_deg < 0:
            raise ValueError("Noise standard deviations must be non-negative")

    def draw(self, count: int) -> np.ndarray:
        """(count, 3) rows of dx, dy, dyaw (radians)"""
        rng = np.random.default_rng([self.seed, 31337])
        draws = np.zeros((count, 3))
        draws[:, :2] = rng.normal(0.0, self.translation_std / np.sqrt(2.0), size=(count, 2))
        draws[:, 2] = rng.normal(0.0, np.radians(self.yaw_std_deg), size=count)
        return draws

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'NoiseSpec':
        return cls(**data)


@dataclass
class MapIndex:
    """Map points with unit normals, a validity mask and a kd-tree over the points"""
    points: np.ndarray
    normals: np.ndarray
    valid: np.ndarray
    tree: cKDTree = field(repr=False, default=None)

    def __post_init__(self):
        if self.tree is None:
            self.tree = cKDTree(self.points)


@dataclass
class IcpResult:
    pose: np.ndarray
    residual: float
    initial_residual: float
    success: bool
    iterations: int
    correspondences: int = 0


@dataclass
class RouteReport:
    frame: pd.DataFrame
    accuracies: Tuple[float, ...]
    value: float
    beam_ids: List[int]

    def to_csv(self, path: str) -> None:
        self.frame.to_csv(path, index=False)


def estimate_normals(points, neighbors: int = 10, chunk: int = 100000) -> Tuple[np.ndarray, np.ndarray]:
    """Unit normals from plane fits over each point's k nearest neighbours.

    Returns (normals, valid). Collinear or degenerate neighbourhoods are
    flagged invalid. Normals are oriented with a non-negative z component
    (x, then y, break ties for horizontal normals).
    """
    points = np.asarray(points.points if isinstance(points, MapCloud) else points, dtype=float)
    if points.shape[0] < neighbors + 1:
        raise ValueError(f"Normal estimation needs at least {neighbors + 1} points, got {points.shape[0]}")

    tree = cKDTree(points)
    normals = np.zeros_like(points)
    valid = np.zeros(points.shape[0], dtype=bool)

    for start in range(0, points.shape[0], chunk):
        block = points[start:start + chunk]
        _, idx = tree.query(block, k=neighbors + 1)
        neigh = points[idx]
        centered = neigh - neigh.mean(axis=1, keepdims=True)
        cov = np.einsum('nki,nkj->nij', centered, centered) / (neighbors + 1)
        eigenvalues, eigenvectors = np.linalg.eigh(cov)
        normal = eigenvectors[:, :, 0]
        # Second-largest spread vanishes for collinear neighbourhoods
        spread = eigenvalues[:, 2]
        valid[start:start + chunk] = (spread > 1e-12) & (eigenvalues[:, 1] > 1e-6 * spread)
        normals[start:start + chunk] = normal

    sign_ref = np.where(np.abs(normals[:, 2]) > 1e-9, normals[:, 2],
                        np.where(np.abs(normals[:, 0]) > 1e-9, normals[:, 0], normals[:, 1]))
    normals *= np.where(sign_ref < 0, -1.0, 1.0)[:, None]
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)

    invalid = int((~valid).sum())
    if invalid:
        logging.debug(f"{invalid} of {points.shape[0]} map points have degenerate neighbourhoods")
    return normals, valid


def build_map_index(map_cloud: MapCloud, neighbors: int = 10) -> MapIndex:
    normals, valid = estimate_normals(map_cloud.points, neighbors)
    return MapIndex(points=map_cloud.points, normals=normals, valid=valid)


def _correspondences(index: MapIndex, world: np.ndarray, gate: float):
    distances, idx = index.tree.query(world, k=1, distance_upper_bound=gate)
    ok = np.isfinite(distances)
    ok[ok] = index.valid[idx[ok]]
    return ok, idx


def _residual(index: MapIndex, source: np.ndarray, pose: np.ndarray, gate: float) -> Tuple[float, int]:
    world = transform_points(pose, source)
    ok, idx = _correspondences(index, world, gate)
    count = int(ok.sum())
    if count < MIN_CORRESPONDENCES:
        return float('inf'), count
    r = np.einsum('ij,ij->i', world[ok] - index.points[idx[ok]], index.normals[idx[ok]])
    return float(np.mean(r ** 2)), count


def tukey_weights(residuals: np.ndarray, cutoff: float) -> np.ndarray:
    """Biweight of every point-to-plane residual; zero at and beyond cutoff"""
    u = np.asarray(residuals, dtype=float) / cutoff
    return np.where(np.abs(u) < 1.0, (1.0 - u ** 2) ** 2, 0.0)


def icp_point_to_plane(scan: LabeledPointCloud, index: MapIndex, init_pose: np.ndarray,
                       params: Optional[IcpParams] = None) -> IcpResult:
    """Register a sensor-frame scan against the map starting from init_pose.

    The correspondence gate starts at initial_correspondence_distance and
    shrinks by gate_decay per iteration down to max_correspondence_distance.
    Once the update vanishes at the final gate, the pose is refined with
    biweight-weighted correspondences (zero weight beyond robust_cutoff),
    which drops points the map does not explain such as moved cars.
    Every step is linearized about the current sensor position.
    Fewer than six correspondences flag failure: the returned pose is
    init_pose and the residual is infinite.
    """
    params = params or IcpParams()
    init_pose = np.array(init_pose, dtype=float)
    source = scan.points
    if params.source_voxel_size > 0 and source.shape[0]:
        source = source[voxel_thin(source, params.source_voxel_size)]

    if source.shape[0] < MIN_CORRESPONDENCES:
        return IcpResult(pose=init_pose, residual=float('inf'), initial_residual=float('inf'),
                         success=False, iterations=0, correspondences=0)

    final_gate = params.max_correspondence_distance
    initial_residual, _ = _residual(index, source, init_pose, final_gate)

    def failed(iterations, count):
        return IcpResult(pose=init_pose, residual=float('inf'), initial_residual=initial_residual,
                         success=False, iterations=iterations, correspondences=count)

    pose = init_pose.copy()
    gate = params.initial_correspondence_distance
    refining = False
    iterations = 0
    for iterations in range(1, params.max_iterations + 1):
        world = transform_points(pose, source)
        ok, idx = _correspondences(index, world, gate)
        center = pose[:3, 3]
        p = world[ok] - center
        q = index.points[idx[ok]] - center
        n = index.normals[idx[ok]]
        r = np.einsum('ij,ij->i', p - q, n)

        w = tukey_weights(r, params.robust_cutoff) if refining else np.ones(r.shape[0])
        inliers = w > 0
        if int(inliers.sum()) < MIN_CORRESPONDENCES:
            if refining:
                break
            return failed(iterations, int(inliers.sum()))

        # Linearized (p + w x p + t - q) . n = 0 in unknowns (w, t), rotation about the sensor
        root = np.sqrt(w[inliers])
        A = np.hstack([np.cross(p[inliers], n[inliers]), n[inliers]]) * root[:, None]
        x, *_ = np.linalg.lstsq(A, -r[inliers] * root, rcond=None)
        omega, t = x[:3], x[3:]

        rotation = Rotation.from_rotvec(omega).as_matrix()
        delta = np.eye(4)
        delta[:3, :3] = rotation
        delta[:3, 3] = t + center - rotation @ center
        pose = delta @ pose

        at_final_gate = gate <= final_gate
        gate = max(gate * params.gate_decay, final_gate)
        if at_final_gate and np.linalg.norm(t) < params.tolerance and np.linalg.norm(omega) < params.tolerance:
            if refining:
                break
            refining = True

    residual, count = _residual(index, source, pose, final_gate)
    if count < MIN_CORRESPONDENCES:
        return failed(iterations, count)
    return IcpResult(pose=pose, residual=residual, initial_residual=initial_residual, success=True,
                     iterations=iterations, correspondences=count)


def pose_error(est: np.ndarray, gt: np.ndarray) -> Tuple[float, float]:
    """Translation error in meters and geodesic rotation error in degrees"""
    translation = float(np.linalg.norm(est[:3, 3] - gt[:3, 3]))
    relative = est[:3, :3] @ gt[:3, :3].T
    rotation = float(np.degrees(Rotation.from_matrix(relative).magnitude()))
    return translation, rotation


def perturb_pose(gt: np.ndarray, draw: Sequence[float]) -> np.ndarray:
    """Shift gt by (dx, dy) in the plane and rotate it by dyaw about its own vertical axis"""
    dx, dy, dyaw = draw
    pose = np.array(gt, dtype=float)
    c, s = np.cos(dyaw), np.sin(dyaw)
    pose[:3, :3] = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]]) @ pose[:3, :3]
    pose[0, 3] += dx
    pose[1, 3] += dy
    return pose


def threshold_hits(trans_err: np.ndarray, rot_err: np.ndarray, reward: RewardSpec) -> np.ndarray:
    """(P, len(thresholds)) boolean hits; errors on the threshold count as hits"""
    trans_err = np.asarray(trans_err, dtype=float)
    rot_err = np.asarray(rot_err, dtype=float)
    return np.stack([(trans_err <= t) & (rot_err <= r) for t, r in reward.thresholds], axis=1)


def evaluate_route(s, snapshot, params: Optional[IcpParams] = None, reward: Optional[RewardSpec] = None,
                   workers: Optional[int] = None) -> RouteReport:
    """Localize every frozen evaluation pose with the beams of s; per-pose errors plus accuracies.

    snapshot provides eval_scans, gt_poses, init_poses and map_index; pose_ids
    (route positions of the scans) is optional.
    Failed registrations get infinite errors and miss every threshold.
    """
    params = params or snapshot.icp
    reward = reward or snapshot.reward
    beam_ids = list(s.ids) if hasattr(s, 'ids') else [int(b) for b in s]
    index = snapshot.map_index
    init_poses = snapshot.init_poses

    def localize(pose_id: int) -> IcpResult:
        cloud = subsample_beams(snapshot.eval_scans[pose_id], beam_ids)
        return icp_point_to_plane(cloud, index, init_poses[pose_id], params)

    count = len(snapshot.eval_scans)
    workers = workers or Config.EVAL_WORKERS
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(localize, range(count)))
    else:
        results = [localize(i) for i in range(count)]

    trans_err = np.full(count, np.inf)
    rot_err = np.full(count, np.inf)
    for i, result in enumerate(results):
        if result.success:
            trans_err[i], rot_err[i] = pose_error(result.pose, snapshot.gt_poses[i])

    failures = sum(1 for r in results if not r.success)
    if failures:
        logging.warning(f"ICP failed on {failures} of {count} poses for beams {format_beam_ids(beam_ids)}")

    pose_ids = getattr(snapshot, 'pose_ids', None)
    pose_ids = np.arange(count) if pose_ids is None else np.asarray(pose_ids, dtype=int)
    hits = threshold_hits(trans_err, rot_err, reward)
    accuracies = tuple(float(a) for a in hits.mean(axis=0))
    frame = pd.DataFrame({
        'pose_id': pose_ids,
        'tx': [r.pose[0, 3] for r in results],
        'ty': [r.pose[1, 3] for r in results],
        'tz': [r.pose[2, 3] for r in results],
        'trans_err': trans_err,
        'rot_err': rot_err,
        'hit1': hits[:, 0],
        'hit2': hits[:, 1],
        'hit3': hits[:, 2],
        'success': [r.success for r in results],
        'residual': [r.residual for r in results],
    }, columns=REPORT_COLUMNS)
    return RouteReport(frame=frame, accuracies=accuracies, value=reward.value(accuracies), beam_ids=beam_ids)


def localization_value(s, snapshot, params: Optional[IcpParams] = None,
                       reward: Optional[RewardSpec] = None) -> float:
    """Weighted threshold accuracy of s over the frozen evaluation poses, in [0, 1]"""
    return evaluate_route(s, snapshot, params, reward).value


class LocalizationEnvironment:
    """Environment backed by a frozen snapshot"""

    def __init__(self, snapshot, params: Optional[IcpParams] = None, reward: Optional[RewardSpec] = None):
        self.snapshot = snapshot
        self.params = params or snapshot.icp
        self.reward = reward or snapshot.reward
        self.env_hash = snapshot.content_hash
        self.descriptor = f"builtin-loc:{snapshot.content_hash[:12]}"

    def value(self, s) -> float:
        value = localization_value(s, self.snapshot, self.params, self.reward)
        logging.debug(f"Localization value of {format_beam_ids(s)}: {value:.4f}")
        return value

    def route_report(self, s) -> RouteReport:
        return evaluate_route(s, self.snapshot, self.params, self.reward)
