"""
Beam-wise and pairwise features of beam configurations.

Per beam, averaged over M scans: point count, point count per semantic
superclass, mean horizontal distance, mean per-scan standard deviation of
the horizontal distance and mean elevation angle. Between consecutive beams
of a configuration: the elevation difference. The feature vector of a
configuration concatenates the per-beam blocks followed by the pairwise
entries.
"""

import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd


class SemanticSuperclass(IntEnum):
    ROAD = 0
    BUILDING = 1
    VEGETATION = 2
    DYNAMIC = 3
    OTHER = 4


NUM_CLASSES = len(SemanticSuperclass)

# Feature groups in the order the ablation adds them
FEATURE_GROUPS = ('pts', 'dist', 'std_dist', 'sem_pts', 'phi_diff', 'phi')

BEAM_FEATURE_NAMES = (
    ['f_pts']
    + [f"f_sem_pts_{c.name.lower()}" for c in SemanticSuperclass]
    + ['f_dist', 'f_std_dist', 'f_phi']
)

_GROUP_OF_BEAM_FEATURE = (
    ['pts'] + ['sem_pts'] * NUM_CLASSES + ['dist', 'std_dist', 'phi']
)


@dataclass(frozen=True)
class BeamStats:
    beam_id: int
    f_pts: float
    f_sem_pts: tuple
    f_dist: float
    f_std_dist: float
    f_phi: float
    M: int

    def as_array(self) -> np.ndarray:
        """The 9 beam features in canonical order"""
        return np.array([self.f_pts, *self.f_sem_pts, self.f_dist, self.f_std_dist, self.f_phi], dtype=float)

    @classmethod
    def from_array(cls, beam_id: int, values: Sequence[float], M: int) -> 'BeamStats':
        values = [float(v) for v in values]
        return cls(
            beam_id=int(beam_id),
            f_pts=values[0],
            f_sem_pts=tuple(values[1:1 + NUM_CLASSES]),
            f_dist=values[1 + NUM_CLASSES],
            f_std_dist=values[2 + NUM_CLASSES],
            f_phi=values[3 + NUM_CLASSES],
            M=int(M),
        )


@dataclass(frozen=True)
class FeatureVector:
    values: np.ndarray
    layout: tuple  # (slot, feature name) per index

    def __len__(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True)
class NormStats:
    mean: np.ndarray
    std: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        scale = np.where(self.std < 1e-12, 1.0, self.std)
        z = (x - self.mean) / scale
        return np.where(self.std < 1e-12, 0.0, z)


def beam_stats(scans: Sequence, beam_id: int) -> BeamStats:
    """Average the five beam features of one beam over M scans.

    Scans without points on the beam count as zero points and are skipped
    for the distance and angle averages.
    """
    if len(scans) < 1:
        raise ValueError("beam_stats needs at least one scan")

    counts = np.zeros(len(scans))
    class_counts = np.zeros((len(scans), NUM_CLASSES))
    dists, stds, phis = [], [], []

    for index, cloud in enumerate(scans):
        mask = cloud.beam_ids == beam_id
        n = int(mask.sum())
        counts[index] = n
        if n == 0:
            continue
        labels = cloud.labels[mask].astype(np.int64)
        class_counts[index] = np.bincount(labels, minlength=NUM_CLASSES)[:NUM_CLASSES]

        points = cloud.points[mask]
        horizontal = np.hypot(points[:, 0], points[:, 1])
        with np.errstate(divide='ignore', invalid='ignore'):
            ratio = np.where(horizontal > 0, points[:, 2] / horizontal, np.sign(points[:, 2]))
        dists.append(horizontal.mean())
        stds.append(horizontal.std())
        phis.append(np.arcsin(np.clip(ratio, -1.0, 1.0)).mean())

    if not dists:
        raise ValueError(f"Beam {beam_id} has no points in any of the {len(scans)} scans")

    return BeamStats(
        beam_id=int(beam_id),
        f_pts=float(counts.mean()),
        f_sem_pts=tuple(float(v) for v in class_counts.mean(axis=0)),
        f_dist=float(np.mean(dists)),
        f_std_dist=float(np.mean(stds)),
        f_phi=float(np.mean(phis)),
        M=len(scans),
    )


def compute_stats_table(scans: Sequence, K: int,
                        nominal_elevations: Optional[np.ndarray] = None) -> Dict[int, BeamStats]:
    """BeamStats for every beam ID 1..K.

    A beam that never returns a point gets zero counts and distances; its
    angle falls back to arcsin(tan) of the nominal elevation when one is
    given, the value its returns would have produced.
    """
    table = {}
    for beam_id in range(1, K + 1):
        try:
            table[beam_id] = beam_stats(scans, beam_id)
        except ValueError:
            phi = 0.0
            if nominal_elevations is not None:
                phi = float(np.arcsin(np.clip(np.tan(nominal_elevations[beam_id - 1]), -1.0, 1.0)))
            logging.warning(f"Beam {beam_id} returned no points; using empty statistics")
            table[beam_id] = BeamStats(beam_id, 0.0, (0.0,) * NUM_CLASSES, 0.0, 0.0, phi, len(scans))
    return table


def pairwise_phi_diff(lower: BeamStats, upper: BeamStats) -> float:
    """Elevation difference f_phi(s_j) - f_phi(s_i) for s_i < s_j"""
    return upper.f_phi - lower.f_phi


def _normalize_groups(groups: Iterable[str]) -> Tuple[str, ...]:
    groups = tuple(groups)
    unknown = [g for g in groups if g not in FEATURE_GROUPS]
    if unknown:
        raise ValueError(f"Unknown feature groups: {unknown}")
    return groups


def feature_dimension(k: int, groups: Iterable[str] = FEATURE_GROUPS) -> int:
    groups = _normalize_groups(groups)
    per_beam = sum(1 for g in _GROUP_OF_BEAM_FEATURE if g in groups)
    return k * per_beam + ((k - 1) if 'phi_diff' in groups else 0)


def feature_vector(s, stats_table: Dict[int, BeamStats],
                   groups: Iterable[str] = FEATURE_GROUPS) -> FeatureVector:
    """Concatenate per-beam blocks of the config's beams, then consecutive-pair elevation differences"""
    groups = _normalize_groups(groups)
    ids = list(s.ids) if hasattr(s, 'ids') else list(s)

    missing = [b for b in ids if b not in stats_table]
    if missing:
        raise ValueError(f"No beam statistics for beam IDs {missing}")

    keep = np.array([g in groups for g in _GROUP_OF_BEAM_FEATURE])
    names = [n for n, k in zip(BEAM_FEATURE_NAMES, keep) if k]

    values: List[float] = []
    layout: List[tuple] = []
    for slot, beam_id in enumerate(ids, start=1):
        values.extend(stats_table[beam_id].as_array()[keep])
        layout.extend((f"s{slot}", name) for name in names)

    if 'phi_diff' in groups:
        for slot in range(1, len(ids)):
            lower, upper = stats_table[ids[slot - 1]], stats_table[ids[slot]]
            values.append(pairwise_phi_diff(lower, upper))
            layout.append((f"s{slot}-s{slot + 1}", 'f_phi_diff'))

    return FeatureVector(values=np.array(values, dtype=float), layout=tuple(layout))


def beam_id_encoding(s) -> FeatureVector:
    """Raw beam IDs as features (ablation baseline)"""
    ids = list(s.ids) if hasattr(s, 'ids') else list(s)
    return FeatureVector(
        values=np.array(ids, dtype=float),
        layout=tuple((f"s{slot}", 'beam_id') for slot in range(1, len(ids) + 1)),
    )


def normalize(batch: Union[Sequence[FeatureVector], np.ndarray]) -> Tuple[np.ndarray, NormStats]:
    """Per-dimension z-score over the batch; near-constant dimensions map to 0"""
    if isinstance(batch, np.ndarray):
        matrix = np.atleast_2d(np.asarray(batch, dtype=float))
    else:
        if len(batch) == 0:
            raise ValueError("Cannot normalize an empty batch")
        matrix = np.stack([fv.values for fv in batch])
    if matrix.shape[0] == 0:
        raise ValueError("Cannot normalize an empty batch")

    stats = NormStats(mean=matrix.mean(axis=0), std=matrix.std(axis=0))
    return stats.apply(matrix), stats


class FeatureProvider:
    """Maps configurations to feature arrays for the value predictor.

    mode is 'full', 'beam_id', or a tuple of feature groups.
    """

    def __init__(self, stats_table: Dict[int, BeamStats], mode: Union[str, Tuple[str, ...]] = 'full'):
        self.stats_table = stats_table
        if mode == 'full':
            self.groups: Optional[Tuple[str, ...]] = FEATURE_GROUPS
        elif mode == 'beam_id':
            self.groups = None
        else:
            self.groups = _normalize_groups(mode)
        self.mode = mode
        self._cache: Dict[tuple, np.ndarray] = {}

    def vector(self, s) -> FeatureVector:
        if self.groups is None:
            return beam_id_encoding(s)
        return feature_vector(s, self.stats_table, self.groups)

    def __call__(self, s) -> np.ndarray:
        key = tuple(s.ids)
        if key not in self._cache:
            self._cache[key] = self.vector(s).values
        return self._cache[key]

    def batch(self, configs: Sequence) -> np.ndarray:
        if not configs:
            return np.zeros((0, 0))
        return np.stack([self(s) for s in configs])

    def dimension(self, k: int) -> int:
        if self.groups is None:
            return k
        return feature_dimension(k, self.groups)


def stats_table_to_dataframe(stats_table: Dict[int, BeamStats]) -> pd.DataFrame:
    rows = []
    for beam_id in sorted(stats_table):
        stats = stats_table[beam_id]
        row = {'beam_id': beam_id}
        row.update(dict(zip(BEAM_FEATURE_NAMES, stats.as_array())))
        row['M'] = stats.M
        rows.append(row)
    return pd.DataFrame(rows, columns=['beam_id', *BEAM_FEATURE_NAMES, 'M'])


def stats_table_from_dataframe(frame: pd.DataFrame) -> Dict[int, BeamStats]:
    table = {}
    for _, row in frame.iterrows():
        beam_id = int(row['beam_id'])
        table[beam_id] = BeamStats.from_array(beam_id, [row[n] for n in BEAM_FEATURE_NAMES], int(row['M']))
    return table


def export_stats_csv(stats_table: Dict[int, BeamStats], path: str) -> None:
    """One row per beam: ID, the nine beam features, M"""
    stats_table_to_dataframe(stats_table).to_csv(path, index=False)
