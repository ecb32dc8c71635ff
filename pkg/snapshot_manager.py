import os
import json
import logging
from collections.abc import Sequence
from dataclasses import dataclass, asdict, field
from typing import Dict, List, Optional, Tuple, Any

import numpy as np

from config import Config
from features import BeamStats, BEAM_FEATURE_NAMES, compute_stats_table
from lidar_sim import (
    LabeledPointCloud,
    MapCloud,
    Scene,
    SceneParams,
    ScannerSpec,
    build_map,
    generate_scene,
    scan,
)
from localization import IcpParams, MapIndex, NoiseSpec, RewardSpec, estimate_normals, perturb_pose
from utils import content_hash


@dataclass(frozen=True)
class SnapshotSettings:
    """How the frozen environment is sampled from the scene"""
    scene_seed: int = 0
    eval_poses: int = 100
    map_pose_stride: int = 2
    map_voxel_size: float = 0.1

    def __post_init__(self):
        if self.eval_poses < 1 or self.map_pose_stride < 1:
            raise ValueError("eval_poses and map_pose_stride must be at least 1")
        if self.map_voxel_size <= 0:
            raise ValueError("map_voxel_size must be positive")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SnapshotSettings':
        return cls(**data)


@dataclass
class SnapshotInfo:
    """Information about a stored snapshot"""
    name: str
    path: str
    content_hash: str
    size_bytes: int
    K: int
    eval_poses: int
    version: str

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SnapshotInfo':
        return cls(**data)


class RouteScans(Sequence):
    """Full scans of every route pose, ray cast on access"""

    def __init__(self, scene: Scene, scanner: ScannerSpec):
        self.scene = scene
        self.scanner = scanner

    def __len__(self) -> int:
        return len(self.scene.route)

    def __getitem__(self, index: int) -> LabeledPointCloud:
        index = int(index)
        if not 0 <= index < len(self):
            raise IndexError(f"Route pose {index} out of range")
        pose = self.scene.route_pose(index, self.scanner.sensor_height)
        return scan(self.scene, pose, self.scanner, dynamic_key=index, noise_key=index)


@dataclass
class RouteView:
    """Every route pose in the layout evaluate_route reads"""
    eval_scans: RouteScans
    gt_poses: np.ndarray
    init_poses: np.ndarray
    map_index: MapIndex
    icp: IcpParams
    reward: RewardSpec
    pose_ids: np.ndarray


@dataclass
class EnvSnapshot:
    """Everything a localization evaluation reads; immutable once built"""
    scene: Scene
    scanner: ScannerSpec
    settings: SnapshotSettings
    map_cloud: MapCloud
    normals: np.ndarray
    normal_valid: np.ndarray
    eval_indices: np.ndarray
    gt_poses: np.ndarray
    noise_draws: np.ndarray
    eval_scans: List[LabeledPointCloud]
    stats_table: Dict[int, BeamStats]
    icp: IcpParams = field(default_factory=IcpParams)
    reward: RewardSpec = field(default_factory=RewardSpec)
    noise: NoiseSpec = field(default_factory=NoiseSpec)
    content_hash: str = ''
    _map_index: Optional[MapIndex] = field(default=None, repr=False)
    _init_poses: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def map_index(self) -> MapIndex:
        if self._map_index is None:
            self._map_index = MapIndex(points=self.map_cloud.points, normals=self.normals, valid=self.normal_valid)
        return self._map_index

    @property
    def init_poses(self) -> np.ndarray:
        """Ground-truth poses perturbed by the frozen noise draws"""
        if self._init_poses is None:
            self._init_poses = np.stack([perturb_pose(gt, draw) for gt, draw in zip(self.gt_poses, self.noise_draws)])
        return self._init_poses

    @property
    def pose_ids(self) -> np.ndarray:
        """Route positions of the evaluation scans"""
        return self.eval_indices

    def route_view(self) -> RouteView:
        """All route poses with the same dynamics, range noise and initial-guess noise as the frozen ones.

        Scans are ray cast again on access; at the evaluation indices they
        equal the stored scans.
        """
        route_count = len(self.scene.route)
        gt_poses = np.stack([self.scene.route_pose(i, self.scanner.sensor_height) for i in range(route_count)])
        draws = self.noise.draw(route_count)
        return RouteView(
            eval_scans=RouteScans(self.scene, self.scanner),
            gt_poses=gt_poses,
            init_poses=np.stack([perturb_pose(gt, draw) for gt, draw in zip(gt_poses, draws)]),
            map_index=self.map_index,
            icp=self.icp,
            reward=self.reward,
            pose_ids=np.arange(route_count),
        )

    @property
    def K(self) -> int:
        return self.scanner.K

    def parameters(self) -> Dict[str, Any]:
        return {
            'version': Config.SNAPSHOT_VERSION,
            'scene_seed': self.scene.seed,
            'scene': self.scene.params.to_dict(),
            'scanner': self.scanner.to_dict(),
            'settings': self.settings.to_dict(),
            'icp': self.icp.to_dict(),
            'reward': self.reward.to_dict(),
            'noise': self.noise.to_dict(),
        }

    def arrays(self) -> Dict[str, np.ndarray]:
        """Array payload in the on-disk layout"""
        offsets = np.cumsum([0] + [len(c) for c in self.eval_scans]).astype(np.int64)
        stats = np.array([[b, *self.stats_table[b].as_array(), self.stats_table[b].M]
                          for b in sorted(self.stats_table)], dtype=float)
        return {
            'scene_boxes': self.scene.boxes,
            'scene_box_labels': self.scene.box_labels,
            'scene_ellipsoids': self.scene.ellipsoids,
            'scene_ellipsoid_labels': self.scene.ellipsoid_labels,
            'scene_route': self.scene.route,
            'map_points': self.map_cloud.points,
            'map_labels': self.map_cloud.labels,
            'normals': self.normals,
            'normal_valid': self.normal_valid,
            'eval_indices': self.eval_indices,
            'gt_poses': self.gt_poses,
            'noise_draws': self.noise_draws,
            'scan_points': np.concatenate([c.points for c in self.eval_scans]) if self.eval_scans else np.zeros((0, 3)),
            'scan_labels': np.concatenate([c.labels for c in self.eval_scans]) if self.eval_scans else np.zeros(0, np.int8),
            'scan_beam_ids': np.concatenate([c.beam_ids for c in self.eval_scans]) if self.eval_scans else np.zeros(0, np.int16),
            'scan_offsets': offsets,
            'stats': stats,
        }

    def compute_hash(self) -> str:
        return content_hash(self.parameters(), self.arrays())


class SnapshotManager:
    """Builds, stores, loads and verifies frozen localization environments"""

    def __init__(self, directory: Optional[str] = None):
        self.directory = directory or Config.OUTPUT_DIR

    def build(self, settings: SnapshotSettings, scanner: Optional[ScannerSpec] = None,
              scene_params: Optional[SceneParams] = None, icp: Optional[IcpParams] = None,
              reward: Optional[RewardSpec] = None, noise: Optional[NoiseSpec] = None) -> EnvSnapshot:
        """Generate the scene, map, normals, evaluation poses, noise draws, full scans and beam statistics"""
        scanner = scanner or ScannerSpec()
        scene_params = scene_params or SceneParams()
        icp = icp or IcpParams()
        reward = reward or RewardSpec()
        noise = noise or NoiseSpec(seed=settings.scene_seed)

        if settings.eval_poses > scene_params.route_poses:
            raise ValueError(
                f"eval_poses ({settings.eval_poses}) exceeds the {scene_params.route_poses} route poses"
            )

        scene = generate_scene(settings.scene_seed, scene_params)
        route_count = scene_params.route_poses

        map_poses = [scene.route_pose(i, scanner.sensor_height) for i in range(0, route_count, settings.map_pose_stride)]
        map_cloud = build_map(scene, map_poses, scanner, settings.map_voxel_size)
        normals, valid = estimate_normals(map_cloud.points, icp.normal_neighbors)

        rng = np.random.default_rng([settings.scene_seed, 4242])
        eval_indices = np.sort(rng.choice(route_count, size=settings.eval_poses, replace=False)).astype(np.int64)
        gt_poses = np.stack([scene.route_pose(int(i), scanner.sensor_height) for i in eval_indices])
        noise_draws = noise.draw(route_count)[eval_indices]

        eval_scans = [scan(scene, pose, scanner, dynamic_key=int(i), noise_key=int(i))
                      for i, pose in zip(eval_indices, gt_poses)]
        stats_table = compute_stats_table(eval_scans, scanner.K, scanner.elevations())

        snapshot = EnvSnapshot(
            scene=scene, scanner=scanner, settings=settings, map_cloud=map_cloud,
            normals=normals, normal_valid=valid, eval_indices=eval_indices, gt_poses=gt_poses,
            noise_draws=noise_draws, eval_scans=eval_scans, stats_table=stats_table,
            icp=icp, reward=reward, noise=noise,
        )
        snapshot.content_hash = snapshot.compute_hash()
        logging.info(
            f"Built snapshot {snapshot.content_hash[:12]}: map of {len(map_cloud)} points, "
            f"{settings.eval_poses} evaluation poses"
        )
        return snapshot

    def snapshot_path(self, name: Optional[str] = None) -> str:
        return os.path.join(self.directory, name or Config.SNAPSHOT_FILE_NAME)

    def save(self, snapshot: EnvSnapshot, path: Optional[str] = None) -> str:
        """Compressed npz with a JSON metadata entry"""
        path = path or self.snapshot_path()
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        meta = {
            'version': Config.SNAPSHOT_VERSION,
            'tool_version': Config.APP_VERSION,
            'content_hash': snapshot.content_hash,
            'parameters': snapshot.parameters(),
        }
        try:
            np.savez_compressed(path, meta=np.array(json.dumps(meta, sort_keys=True)), **snapshot.arrays())
        except Exception as e:
            logging.error(f"Failed to save snapshot to {path}: {str(e)}")
            raise
        logging.info(f"Snapshot saved: {path}")
        return path

    @staticmethod
    def _read_meta(data) -> Dict[str, Any]:
        if 'meta' not in data:
            raise ValueError("Snapshot file has no metadata entry")
        return json.loads(str(data['meta']))

    def load(self, path: Optional[str] = None, verify: bool = True) -> EnvSnapshot:
        path = path or self.snapshot_path()
        if not os.path.exists(path):
            raise FileNotFoundError(f"Snapshot not found: {path}")

        with np.load(path, allow_pickle=False) as data:
            meta = self._read_meta(data)
            if meta.get('version') != Config.SNAPSHOT_VERSION:
                raise ValueError(f"Unsupported snapshot version {meta.get('version')} in {path}")
            arrays = {name: data[name] for name in data.files if name != 'meta'}

        params = meta['parameters']
        scene = Scene(
            seed=int(params['scene_seed']),
            params=SceneParams.from_dict(params['scene']),
            boxes=arrays['scene_boxes'],
            box_labels=arrays['scene_box_labels'],
            ellipsoids=arrays['scene_ellipsoids'],
            ellipsoid_labels=arrays['scene_ellipsoid_labels'],
            route=arrays['scene_route'],
        )
        gt_poses = arrays['gt_poses']
        offsets = arrays['scan_offsets']
        eval_scans = [
            LabeledPointCloud(
                points=arrays['scan_points'][offsets[i]:offsets[i + 1]],
                labels=arrays['scan_labels'][offsets[i]:offsets[i + 1]],
                beam_ids=arrays['scan_beam_ids'][offsets[i]:offsets[i + 1]],
                pose=gt_poses[i],
            )
            for i in range(len(offsets) - 1)
        ]
        stats_table = {
            int(row[0]): BeamStats.from_array(int(row[0]), row[1:1 + len(BEAM_FEATURE_NAMES)], int(row[-1]))
            for row in arrays['stats']
        }

        snapshot = EnvSnapshot(
            scene=scene,
            scanner=ScannerSpec.from_dict(params['scanner']),
            settings=SnapshotSettings.from_dict(params['settings']),
            map_cloud=MapCloud(points=arrays['map_points'], labels=arrays['map_labels']),
            normals=arrays['normals'],
            normal_valid=arrays['normal_valid'],
            eval_indices=arrays['eval_indices'],
            gt_poses=gt_poses,
            noise_draws=arrays['noise_draws'],
            eval_scans=eval_scans,
            stats_table=stats_table,
            icp=IcpParams.from_dict(params['icp']),
            reward=RewardSpec.from_dict(params['reward']),
            noise=NoiseSpec.from_dict(params['noise']),
            content_hash=meta['content_hash'],
        )

        if verify:
            actual = snapshot.compute_hash()
            if actual != snapshot.content_hash:
                raise ValueError(f"Snapshot {path} is corrupt: hash {actual[:12]} != recorded {snapshot.content_hash[:12]}")
        logging.info(f"Snapshot loaded: {path} ({snapshot.content_hash[:12]})")
        return snapshot

    def verify_snapshot(self, path: Optional[str] = None) -> Tuple[bool, str]:
        """
        Recompute the content hash of a stored snapshot

        Returns:
            (is_intact, message)
        """
        try:
            snapshot = self.load(path, verify=False)
        except Exception as e:
            return False, f"Snapshot could not be read: {str(e)}"
        actual = snapshot.compute_hash()
        if actual != snapshot.content_hash:
            return False, f"Hash mismatch: recorded {snapshot.content_hash[:12]}, actual {actual[:12]}"
        return True, f"Snapshot intact ({actual[:12]})"

    def list_snapshots(self) -> List[SnapshotInfo]:
        """Snapshots under the managed directory, newest first"""
        if not os.path.isdir(self.directory):
            return []

        snapshots = []
        for root, _, files in os.walk(self.directory):
            for name in files:
                if not name.endswith('.npz'):
                    continue
                path = os.path.join(root, name)
                info = self._parse_snapshot_info(path)
                if info:
                    snapshots.append(info)
        snapshots.sort(key=lambda s: os.path.getmtime(s.path), reverse=True)
        return snapshots

    def _parse_snapshot_info(self, path: str) -> Optional[SnapshotInfo]:
        try:
            with np.load(path, allow_pickle=False) as data:
                meta = self._read_meta(data)
            params = meta['parameters']
            return SnapshotInfo(
                name=os.path.relpath(path, self.directory),
                path=path,
                content_hash=meta['content_hash'],
                size_bytes=os.path.getsize(path),
                K=int(params['scanner']['K']),
                eval_poses=int(params['settings']['eval_poses']),
                version=str(meta.get('version')),
            )
        except Exception as e:
            logging.warning(f"Skipping unreadable snapshot {path}: {str(e)}")
            return None
