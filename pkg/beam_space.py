"""
Discrete solution space of LiDAR beam configurations.

A configuration is a strictly ascending tuple of k beam IDs taken from the
K candidate beams (1-indexed) of a high-resolution sensor. Actions shift
every beam by an integer step in [-m, m].
"""

import itertools
import logging
import math
from dataclasses import dataclass
from typing import Iterator, List, Optional, Sequence, Set

import numpy as np

from config import Config


class EnumerationCapExceeded(ValueError):
    """Raised when a request would enumerate or sample more configs than allowed"""


@dataclass(frozen=True)
class SolutionSpaceSpec:
    """K candidate beams, k selected beams, maximum per-beam step m"""
    K: int
    k: int
    m: int = 2

    def __post_init__(self):
        if self.K < 2:
            raise ValueError(f"K must be at least 2, got {self.K}")
        if not 1 <= self.k < self.K:
            raise ValueError(f"k must satisfy 1 <= k < K, got k={self.k}, K={self.K}")
        if self.m < 1:
            raise ValueError(f"m must be at least 1, got {self.m}")

    def to_dict(self) -> dict:
        return {'K': self.K, 'k': self.k, 'm': self.m}

    @classmethod
    def from_dict(cls, data: dict) -> 'SolutionSpaceSpec':
        return cls(K=int(data['K']), k=int(data['k']), m=int(data.get('m', 2)))


@dataclass(frozen=True)
class BeamConfig:
    """A state: strictly ascending beam IDs. Build through new_config()."""
    ids: tuple

    def __len__(self) -> int:
        return len(self.ids)

    def __iter__(self):
        return iter(self.ids)

    def to_list(self) -> List[int]:
        return list(self.ids)


@dataclass(frozen=True)
class ActionVec:
    """Per-beam integer shifts; never all zero"""
    deltas: tuple

    def to_list(self) -> List[int]:
        return list(self.deltas)


def new_config(ids: Sequence[int], space: SolutionSpaceSpec) -> BeamConfig:
    """Validate beam IDs against the space and return a BeamConfig.

    Unsorted input is sorted first; duplicates and out-of-range IDs are rejected.
    """
    try:
        values = sorted(int(i) for i in ids)
    except (TypeError, ValueError):
        raise ValueError(f"Beam IDs must be integers, got {ids!r}")

    if len(values) != space.k:
        raise ValueError(f"Expected {space.k} beam IDs, got {len(values)}: {values}")

    out_of_range = [v for v in values if v < 1 or v > space.K]
    if out_of_range:
        raise ValueError(f"Beam IDs out of range [1, {space.K}]: {out_of_range}")

    if len(set(values)) != len(values):
        duplicates = sorted({v for v in values if values.count(v) > 1})
        raise ValueError(f"Duplicate beam IDs: {duplicates}")

    return BeamConfig(ids=tuple(values))


def apply_action(s: BeamConfig, a: ActionVec, space: SolutionSpaceSpec) -> Optional[BeamConfig]:
    """Componentwise s + a, re-sorted ascending.

    Returns None (the Invalid value) when a component leaves [1, K] or two
    beams collide.
    """
    if len(a.deltas) != len(s.ids):
        raise ValueError(f"Action length {len(a.deltas)} does not match config length {len(s.ids)}")

    moved = sorted(sid + delta for sid, delta in zip(s.ids, a.deltas))
    if moved[0] < 1 or moved[-1] > space.K:
        return None
    if any(lo == hi for lo, hi in zip(moved, moved[1:])):
        return None
    return BeamConfig(ids=tuple(moved))


def enumerate_valid_actions(s: BeamConfig, space: SolutionSpaceSpec) -> List[ActionVec]:
    """All non-zero actions with a valid successor, in lexicographic order"""
    actions = []
    for deltas in itertools.product(range(-space.m, space.m + 1), repeat=space.k):
        if not any(deltas):
            continue
        action = ActionVec(deltas=deltas)
        if apply_action(s, action, space) is not None:
            actions.append(action)
    return actions


def count_configs(space: SolutionSpaceSpec) -> int:
    """C(K, k)"""
    return math.comb(space.K, space.k)


def check_enumeration_cap(space: SolutionSpaceSpec, cap: Optional[int]) -> int:
    total = count_configs(space)
    cap = Config.ENUMERATION_CAP if cap is None else cap
    if total > cap:
        raise EnumerationCapExceeded(
            f"C({space.K},{space.k}) = {total:,} configurations exceeds the enumeration cap of {cap:,}"
        )
    if total > Config.ENUMERATION_WARN_AT:
        logging.warning(f"Enumerating {total:,} configurations for K={space.K}, k={space.k}")
    return total


def enumerate_all_configs(space: SolutionSpaceSpec, cap: Optional[int] = None) -> Iterator[BeamConfig]:
    """Yield every k-combination of [1, K] once, ascending lexicographic.

    The cap check happens eagerly, before the first config is produced.
    """
    check_enumeration_cap(space, cap)
    return (BeamConfig(ids=combo) for combo in itertools.combinations(range(1, space.K + 1), space.k))


def unrank_config(index: int, space: SolutionSpaceSpec) -> BeamConfig:
    """The index-th config in lexicographic order (0-based)"""
    total = count_configs(space)
    if not 0 <= index < total:
        raise ValueError(f"Index {index} outside [0, {total})")

    ids = []
    candidate = 1
    for slot in range(space.k):
        remaining = space.k - slot - 1
        while True:
            block = math.comb(space.K - candidate, remaining)
            if index < block:
                break
            index -= block
            candidate += 1
        ids.append(candidate)
        candidate += 1
    return BeamConfig(ids=tuple(ids))


def canonical_key(s: BeamConfig) -> str:
    """Stable string key, e.g. '7-8-9-10'"""
    return '-'.join(str(i) for i in s.ids)


def config_from_key(key: str, space: SolutionSpaceSpec) -> BeamConfig:
    return new_config([int(part) for part in key.split('-')], space)


def equidistant_config(space: SolutionSpaceSpec, first: int = 1, last: Optional[int] = None) -> BeamConfig:
    """k beams spread evenly over the ID interval [first, last]"""
    last = space.K if last is None else last
    if last - first + 1 < space.k:
        raise ValueError(f"Interval [{first}, {last}] holds fewer than {space.k} beams")
    if space.k == 1:
        return new_config([int(round((first + last) / 2))], space)
    ids = np.round(np.linspace(first, last, space.k)).astype(int)
    return new_config(ids.tolist(), space)


class ConfigSampler:
    """Uniform draws without replacement over the whole solution space.

    The order is a seeded permutation of config ranks, so two samplers built
    from equal generators yield the same sequence.
    """

    def __init__(self, space: SolutionSpaceSpec, rng: np.random.Generator, cap: Optional[int] = None):
        self.space = space
        self.total = check_enumeration_cap(space, cap)
        self._order = rng.permutation(self.total)
        self._position = 0

    @property
    def exhausted(self) -> bool:
        return self._position >= self.total

    def next_unvisited(self, visited: Set[str]) -> Optional[BeamConfig]:
        """Next config in the stream whose key is not in visited, or None"""
        while self._position < self.total:
            config = unrank_config(int(self._order[self._position]), self.space)
            self._position += 1
            if canonical_key(config) not in visited:
                return config
        return None

    def draw(self, count: int, visited: Optional[Set[str]] = None) -> List[BeamConfig]:
        seen = set(visited or ())
        configs = []
        while len(configs) < count:
            config = self.next_unvisited(seen)
            if config is None:
                raise EnumerationCapExceeded(
                    f"Only {len(configs)} unvisited configurations left, {count} requested"
                )
            seen.add(canonical_key(config))
            configs.append(config)
        return configs
