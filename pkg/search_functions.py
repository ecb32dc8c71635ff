"""
Search over beam configurations: epsilon-greedy search with a learned value
predictor, the random-search baseline and the exhaustive oracle.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, asdict
from typing import Any, Dict, List, Optional, Protocol, Sequence, Tuple

import numpy as np
import pandas as pd

from beam_space import (
    ActionVec,
    BeamConfig,
    ConfigSampler,
    EnumerationCapExceeded,
    SolutionSpaceSpec,
    apply_action,
    canonical_key,
    count_configs,
    enumerate_all_configs,
    enumerate_valid_actions,
    new_config,
)
from config import Config
from features import FeatureProvider
from predictor import Network, PredictorSpec, TrainSet, train
from utils import format_beam_ids


class Environment(Protocol):
    """Anything that maps a beam configuration to a task value in [0, 1]"""
    descriptor: str

    def value(self, s: BeamConfig) -> float:
        ...


class EnvironmentFailure(RuntimeError):
    """An environment call failed; carries the offending configuration"""

    def __init__(self, config: BeamConfig, message: str):
        super().__init__(f"Environment failed for {format_beam_ids(config)}: {message}")
        self.config = config


class SearchAborted(RuntimeError):
    """No valid action exists from the current state"""


@dataclass(frozen=True)
class SearchParams:
    epsilon: float = Config.DEFAULT_EPSILON
    T: int = 200
    initial_size: int = Config.DEFAULT_INITIAL_SIZE
    seed: int = 0
    exploration: str = Config.DEFAULT_EXPLORATION
    max_steps: Optional[int] = None

    def __post_init__(self):
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.initial_size < 1:
            raise ValueError(f"initial_size must be at least 1, got {self.initial_size}")
        if self.initial_size > self.T:
            raise ValueError(f"initial_size ({self.initial_size}) cannot exceed the budget T ({self.T})")
        if self.exploration not in ('state', 'action'):
            raise ValueError(f"exploration must be 'state' or 'action', got {self.exploration!r}")

    @property
    def step_limit(self) -> int:
        return self.max_steps if self.max_steps is not None else Config.MAX_STEPS_FACTOR * self.T

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SearchParams':
        return cls(**data)


@dataclass
class HistoryRecord:
    """One visited state; action stays None for warm-start draws and state-exploration jumps"""
    step: int
    beam_ids: List[int]
    value: float
    reward: Optional[float] = None
    action: Optional[List[int]] = None
    exploration: bool = False
    epsilon_draw: Optional[float] = None
    predicted: Optional[float] = None
    new_state: bool = True
    phase: str = 'search'

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'HistoryRecord':
        return cls(**data)


class SearchHistory:
    """Visited states in step order with true values and the reward series r_t = v_t - v_{t-1}"""

    def __init__(self, records: Optional[List[HistoryRecord]] = None):
        self.records: List[HistoryRecord] = []
        for record in records or []:
            self.records.append(record)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: HistoryRecord) -> HistoryRecord:
        if self.records and record.step <= self.records[-1].step:
            raise ValueError(f"History steps must increase: {record.step} after {self.records[-1].step}")
        if not 0.0 <= record.value <= 1.0:
            raise ValueError(f"History value must lie in [0, 1], got {record.value}")
        record.reward = None if not self.records else record.value - self.records[-1].value
        self.records.append(record)
        return record

    def values(self) -> np.ndarray:
        return np.array([r.value for r in self.records], dtype=float)

    def rewards(self) -> List[Optional[float]]:
        return [r.reward for r in self.records]

    def recompute_rewards(self) -> List[Optional[float]]:
        values = self.values()
        return [None] + [float(values[i] - values[i - 1]) for i in range(1, len(values))]

    def best(self) -> HistoryRecord:
        """Highest true value; the earliest visit wins ties"""
        if not self.records:
            raise ValueError("Empty history has no best state")
        best = self.records[0]
        for record in self.records[1:]:
            if record.value > best.value:
                best = record
        return best

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for r in self.records:
            rows.append({
                'step': r.step,
                'beam_ids': format_beam_ids(r.beam_ids),
                'value': r.value,
                'reward': r.reward,
                'epsilon_draw': r.epsilon_draw,
                'action': '' if r.action is None else ' '.join(str(a) for a in r.action),
                'exploration': r.exploration,
                'predicted': r.predicted,
                'new_state': r.new_state,
                'phase': r.phase,
            })
        return pd.DataFrame(rows, columns=['step', 'beam_ids', 'value', 'reward', 'epsilon_draw', 'action',
                                           'exploration', 'predicted', 'new_state', 'phase'])


@dataclass
class SearchResult:
    method: str
    space: Dict[str, int]
    params: Dict[str, Any]
    env_descriptor: str
    env_hash: Optional[str]
    history: SearchHistory
    best_ids: List[int]
    best_value: float
    best_step: int
    evaluations: int
    stalled: bool = False
    feature_mode: Optional[str] = None
    predictor: Optional[Dict[str, Any]] = None

    @property
    def seed(self) -> int:
        return int(self.params.get('seed', 0))

    def to_dict(self) -> Dict[str, Any]:
        return {
            'method': self.method,
            'space': self.space,
            'params': self.params,
            'env_descriptor': self.env_descriptor,
            'env_hash': self.env_hash,
            'history': [r.to_dict() for r in self.history.records],
            'best_ids': self.best_ids,
            'best_value': self.best_value,
            'best_step': self.best_step,
            'evaluations': self.evaluations,
            'stalled': self.stalled,
            'feature_mode': self.feature_mode,
            'predictor': self.predictor,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SearchResult':
        data = dict(data)
        data['history'] = SearchHistory([HistoryRecord.from_dict(r) for r in data['history']])
        return cls(**data)

    def save_json(self, path: str, extra: Optional[Dict[str, Any]] = None) -> None:
        payload = self.to_dict()
        if extra:
            payload.update(extra)
        with open(path, 'w') as handle:
            json.dump(payload, handle, indent=2, sort_keys=True)

    @classmethod
    def load_json(cls, path: str) -> Tuple['SearchResult', Dict[str, Any]]:
        """The result plus any extra top-level keys stored with it"""
        with open(path) as handle:
            payload = json.load(handle)
        known = set(cls.__dataclass_fields__)
        extra = {k: v for k, v in payload.items() if k not in known}
        return cls.from_dict({k: v for k, v in payload.items() if k in known}), extra


class _Evaluator:
    """Counts environment calls, remembers values, wraps failures"""

    def __init__(self, env: Environment):
        self.env = env
        self.count = 0
        self.known: Dict[str, float] = {}

    def _call(self, s: BeamConfig) -> float:
        try:
            value = float(self.env.value(s))
        except EnvironmentFailure:
            raise
        except Exception as e:
            logging.error(f"Environment call failed for {format_beam_ids(s)}: {str(e)}")
            raise EnvironmentFailure(s, str(e)) from e
        if not 0.0 <= value <= 1.0 or not np.isfinite(value):
            raise EnvironmentFailure(s, f"value {value} outside [0, 1]")
        return value

    def evaluate(self, s: BeamConfig) -> float:
        key = canonical_key(s)
        if key not in self.known:
            self.known[key] = self._call(s)
            self.count += 1
        return self.known[key]

    def evaluate_many(self, configs: Sequence[BeamConfig]) -> List[float]:
        """Distinct configs may be evaluated concurrently; results keep input order"""
        pending = [s for s in configs if canonical_key(s) not in self.known]
        workers = min(getattr(self.env, 'workers', None) or Config.EVAL_WORKERS, max(len(pending), 1))
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                values = list(pool.map(self._call, pending))
        else:
            values = [self._call(s) for s in pending]
        for s, value in zip(pending, values):
            self.known[canonical_key(s)] = value
            self.count += 1
        return [self.known[canonical_key(s)] for s in configs]


def _env_hash(env: Environment) -> Optional[str]:
    return getattr(env, 'env_hash', None)


def score_successors(s: BeamConfig, net: Network, space: SolutionSpaceSpec,
                     feat: FeatureProvider) -> Tuple[List[ActionVec], List[BeamConfig], np.ndarray]:
    """Valid actions from s, their successor states and the predicted value of each successor"""
    actions = enumerate_valid_actions(s, space)
    if not actions:
        raise SearchAborted(f"No valid action exists from state {format_beam_ids(s)}")
    successors = [apply_action(s, a, space) for a in actions]
    predictions = np.atleast_1d(net.predict(feat.batch(successors)))
    return actions, successors, predictions


def get_best_action(s: BeamConfig, net: Network, space: SolutionSpaceSpec, feat: FeatureProvider,
                    rng: np.random.Generator) -> ActionVec:
    """Action whose successor has the largest predicted value; ties broken uniformly with rng"""
    actions, _, predictions = score_successors(s, net, space, feat)
    tied = np.flatnonzero(predictions == predictions.max())
    return actions[int(tied[rng.integers(len(tied))])] if len(tied) > 1 else actions[int(tied[0])]


def _make_result(method, space, params, env, history, evaluations, stalled=False,
                 feature_mode=None, predictor=None) -> SearchResult:
    best = history.best()
    return SearchResult(
        method=method,
        space=space.to_dict(),
        params=params,
        env_descriptor=getattr(env, 'descriptor', type(env).__name__),
        env_hash=_env_hash(env),
        history=history,
        best_ids=list(best.beam_ids),
        best_value=best.value,
        best_step=best.step,
        evaluations=evaluations,
        stalled=stalled,
        feature_mode=feature_mode,
        predictor=predictor,
    )


def epsilon_greedy_search(env: Environment, space: SolutionSpaceSpec, params: SearchParams,
                          feat: FeatureProvider, predictor_spec: Optional[PredictorSpec] = None) -> SearchResult:
    """Epsilon-greedy search with a value predictor retrained from scratch on every new state.

    Environment calls (warm start included) never exceed params.T.
    """
    total = count_configs(space)
    if params.initial_size > total or params.T > total:
        raise EnumerationCapExceeded(
            f"Budget T={params.T} / initial_size={params.initial_size} exceeds the {total} configurations of the space"
        )

    predictor_spec = predictor_spec or PredictorSpec(input_dim=feat.dimension(space.k))
    if predictor_spec.input_dim != feat.dimension(space.k):
        raise ValueError(
            f"Predictor input_dim {predictor_spec.input_dim} does not match feature dimension {feat.dimension(space.k)}"
        )

    sampler = ConfigSampler(space, np.random.default_rng(params.seed))
    rng = np.random.default_rng([params.seed, 1])
    evaluator = _Evaluator(env)
    history = SearchHistory()
    train_set = TrainSet()

    def retrain() -> Network:
        return train(predictor_spec.with_seed(params.seed * 1000 + len(train_set)), train_set)

    # Warm start
    warm = sampler.draw(params.initial_size)
    warm_values = evaluator.evaluate_many(warm)
    for step, (s, value) in enumerate(zip(warm, warm_values)):
        train_set.add(canonical_key(s), feat(s), value)
        history.append(HistoryRecord(step=step, beam_ids=s.to_list(), value=value, phase='warm_start'))
    net = retrain()

    best = history.best()
    state = new_config(best.beam_ids, space)
    logging.info(f"Warm start done: {params.initial_size} states, best {format_beam_ids(state)} = {best.value:.4f}")

    step = params.initial_size - 1
    steps_taken = 0
    stalled = False
    while evaluator.count < params.T:
        if steps_taken >= params.step_limit:
            stalled = True
            logging.warning(
                f"Search stopped after {steps_taken} steps with {evaluator.count}/{params.T} evaluations spent"
            )
            break
        steps_taken += 1
        step += 1

        draw = float(rng.random())
        exploring = draw < params.epsilon
        if exploring and params.exploration == 'state':
            nxt = sampler.next_unvisited(set(train_set.keys))
            if nxt is None:
                logging.warning("Every configuration has been visited; stopping")
                stalled = True
                break
            # A jump to an unvisited state is not a bounded action
            action = None
        elif exploring:
            actions = enumerate_valid_actions(state, space)
            if not actions:
                raise SearchAborted(f"No valid action exists from state {format_beam_ids(state)}")
            chosen = actions[int(rng.integers(len(actions)))]
            nxt = apply_action(state, chosen, space)
            action = chosen.to_list()
        else:
            chosen = get_best_action(state, net, space, feat, rng)
            nxt = apply_action(state, chosen, space)
            action = chosen.to_list()

        predicted = float(net.predict(feat(nxt)))
        key = canonical_key(nxt)
        is_new = key not in train_set
        if is_new:
            value = evaluator.evaluate(nxt)
            train_set.add(key, feat(nxt), value)
            net = retrain()
        else:
            value = train_set.value_of(key)

        history.append(HistoryRecord(
            step=step, beam_ids=nxt.to_list(), value=value, action=action, exploration=exploring,
            epsilon_draw=draw, predicted=predicted, new_state=is_new,
        ))
        logging.debug(
            f"step {step}: {format_beam_ids(nxt)} value={value:.4f} predicted={predicted:.4f} "
            f"{'explore' if exploring else 'greedy'}{'' if is_new else ' (revisit)'}"
        )
        state = nxt

    result = _make_result(
        'egs', space, params.to_dict(), env, history, evaluator.count, stalled,
        feature_mode=feat.mode if isinstance(feat.mode, str) else ','.join(feat.mode),
        predictor=predictor_spec.to_dict(),
    )
    logging.info(f"Epsilon-greedy search finished: best {format_beam_ids(result.best_ids)} = {result.best_value:.4f} "
                 f"after {result.evaluations} evaluations")
    return result


def random_search(env: Environment, space: SolutionSpaceSpec, T: int, seed: int) -> SearchResult:
    """T configurations drawn uniformly without replacement, each evaluated once"""
    if T < 1:
        raise ValueError(f"T must be at least 1, got {T}")
    total = count_configs(space)
    if T > total:
        raise EnumerationCapExceeded(f"Budget T={T} exceeds the {total} configurations of the space")

    sampler = ConfigSampler(space, np.random.default_rng(seed))
    evaluator = _Evaluator(env)
    configs = sampler.draw(T)
    values = evaluator.evaluate_many(configs)

    history = SearchHistory()
    for step, (s, value) in enumerate(zip(configs, values)):
        history.append(HistoryRecord(step=step, beam_ids=s.to_list(), value=value, exploration=True,
                                     phase='random'))

    params = {'epsilon': 1.0, 'T': T, 'initial_size': T, 'seed': seed}
    result = _make_result('random', space, params, env, history, evaluator.count)
    logging.info(f"Random search finished: best {format_beam_ids(result.best_ids)} = {result.best_value:.4f}")
    return result


@dataclass
class ExhaustiveTable:
    configs: List[BeamConfig]
    values: np.ndarray
    best: BeamConfig
    best_value: float

    def __len__(self) -> int:
        return len(self.configs)

    def to_dataframe(self) -> pd.DataFrame:
        return pd.DataFrame({
            'beam_ids': [format_beam_ids(s) for s in self.configs],
            'key': [canonical_key(s) for s in self.configs],
            'value': self.values,
        })

    def top_fraction_threshold(self, fraction: float) -> float:
        """Smallest value that still lies in the top fraction of the table"""
        ordered = np.sort(self.values)[::-1]
        count = max(1, int(np.ceil(fraction * len(ordered))))
        return float(ordered[count - 1])


def exhaustive_search(env: Environment, space: SolutionSpaceSpec, cap: Optional[int] = None) -> ExhaustiveTable:
    """Value of every configuration plus the global argmax (earliest on ties)"""
    configs = list(enumerate_all_configs(space, cap))
    evaluator = _Evaluator(env)
    values = np.array(evaluator.evaluate_many(configs), dtype=float)
    best_index = int(np.argmax(values))
    logging.info(f"Exhaustive search over {len(configs)} configs: best {format_beam_ids(configs[best_index])} "
                 f"= {values[best_index]:.4f}")
    return ExhaustiveTable(configs=configs, values=values, best=configs[best_index],
                           best_value=float(values[best_index]))


def prediction_mae(table: ExhaustiveTable, feat: FeatureProvider, train_size: int, seed: int,
                   test_size: Optional[int] = None, predictor_spec: Optional[PredictorSpec] = None) -> float:
    """Train on a random subset of an exhaustive table, return the mean absolute error on held-out states"""
    n = len(table)
    if not 1 <= train_size < n:
        raise ValueError(f"train_size must lie in [1, {n - 1}], got {train_size}")
    order = np.random.default_rng(seed).permutation(n)
    train_idx = order[:train_size]
    test_idx = order[train_size:] if test_size is None else order[train_size:train_size + test_size]

    k = len(table.configs[0].ids)
    spec = (predictor_spec or PredictorSpec(input_dim=feat.dimension(k))).with_seed(seed)
    data = TrainSet()
    for index in train_idx:
        s = table.configs[index]
        data.add(canonical_key(s), feat(s), float(table.values[index]))
    net = train(spec, data)

    features = feat.batch([table.configs[i] for i in test_idx])
    predictions = np.atleast_1d(net.predict(features))
    return float(np.mean(np.abs(predictions - table.values[test_idx])))
