import os
import sys
import tempfile
import unittest
from collections import Counter
from unittest.mock import patch

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from beam_space import (
    ActionVec,
    EnumerationCapExceeded,
    SolutionSpaceSpec,
    apply_action,
    canonical_key,
    enumerate_valid_actions,
    new_config,
)
from features import FeatureProvider
from predictor import Network, PredictorSpec
from search_functions import (
    EnvironmentFailure,
    HistoryRecord,
    SearchHistory,
    SearchParams,
    SearchResult,
    epsilon_greedy_search,
    exhaustive_search,
    get_best_action,
    prediction_mae,
    random_search,
    score_successors,
)
from test_features import synthetic_table


class PeakEnvironment:
    """Smooth synthetic value with a single peak; counts calls"""
    descriptor = 'synthetic-peak'
    env_hash = 'synthetic'

    def __init__(self, peak=(3, 6, 10)):
        self.peak = np.array(peak, dtype=float)
        self.calls = 0

    def value(self, s):
        self.calls += 1
        distance = np.abs(np.array(s.ids, dtype=float) - self.peak).sum()
        return float(np.exp(-distance / 6.0))


class FailingEnvironment:
    descriptor = 'failing'

    def value(self, s):
        raise RuntimeError('sensor pipeline crashed')


class FixedPredictor:
    """Scores one target configuration high and everything else low"""

    def __init__(self, target_key):
        self.target_key = target_key
        self.seen = []

    def predict(self, batch):
        batch = np.atleast_2d(batch)
        self.seen.append(batch.shape[0])
        keys = ['-'.join(str(int(v)) for v in row) for row in batch]
        return np.array([0.9 if key == self.target_key else 0.1 for key in keys])


class TestSearchParams(unittest.TestCase):

    def test_validation(self):
        with self.assertRaises(ValueError):
            SearchParams(epsilon=1.5)
        with self.assertRaises(ValueError):
            SearchParams(T=5, initial_size=6)
        with self.assertRaises(ValueError):
            SearchParams(exploration='sideways')
        self.assertEqual(SearchParams(T=10, initial_size=10).initial_size, 10)

    def test_round_trip(self):
        params = SearchParams(epsilon=0.3, T=40, initial_size=5, seed=2)
        self.assertEqual(SearchParams.from_dict(params.to_dict()), params)


class TestHistory(unittest.TestCase):

    def test_rewards_and_best(self):
        history = SearchHistory()
        for step, value in enumerate([0.2, 0.5, 0.5, 0.3]):
            history.append(HistoryRecord(step=step, beam_ids=[1, 2, step + 3], value=value))
        self.assertEqual(history.rewards()[0], None)
        np.testing.assert_allclose(history.rewards()[1:], [0.3, 0.0, -0.2])
        self.assertEqual(history.best().step, 1)

    def test_steps_must_increase(self):
        history = SearchHistory()
        history.append(HistoryRecord(step=0, beam_ids=[1, 2, 3], value=0.1))
        with self.assertRaises(ValueError):
            history.append(HistoryRecord(step=0, beam_ids=[1, 2, 4], value=0.1))


class TestBestAction(unittest.TestCase):
    """Greedy action selection"""

    def setUp(self):
        self.space = SolutionSpaceSpec(K=12, k=3)
        self.feat = FeatureProvider(synthetic_table(12), 'beam_id')
        self.s = new_config([4, 7, 9], self.space)

    def test_argmax_successor(self):
        target = apply_action(self.s, ActionVec((1, -1, 2)), self.space)
        net = FixedPredictor(canonical_key(target))
        action = get_best_action(self.s, net, self.space, self.feat, np.random.default_rng(0))
        self.assertEqual(apply_action(self.s, action, self.space), target)
        self.assertEqual(net.seen, [len(enumerate_valid_actions(self.s, self.space))])

    def test_constant_predictor_ties_uniformly(self):
        net = Network.zeros(PredictorSpec(input_dim=3))
        rng = np.random.default_rng(1)
        chosen = Counter(get_best_action(self.s, net, self.space, self.feat, rng).deltas for _ in range(400))
        self.assertGreater(len(chosen), 50)

    def test_prediction_count(self):
        net = Network.zeros(PredictorSpec(input_dim=3))
        actions, successors, predictions = score_successors(self.s, net, self.space, self.feat)
        self.assertEqual(len(predictions), len(enumerate_valid_actions(self.s, self.space)))
        self.assertEqual(len(actions), len(successors))


class TestRandomAndExhaustive(unittest.TestCase):

    def setUp(self):
        self.space = SolutionSpaceSpec(K=12, k=3)

    def test_random_search_is_seeded(self):
        a = random_search(PeakEnvironment(), self.space, 30, seed=4)
        b = random_search(PeakEnvironment(), self.space, 30, seed=4)
        self.assertEqual([r.beam_ids for r in a.history.records], [r.beam_ids for r in b.history.records])
        self.assertEqual(len({tuple(r.beam_ids) for r in a.history.records}), 30)
        self.assertEqual(a.evaluations, 30)

    def test_random_search_full_budget_finds_optimum(self):
        env = PeakEnvironment()
        result = random_search(env, self.space, 220, seed=0)
        self.assertEqual(result.best_ids, [3, 6, 10])
        self.assertEqual(result.best_value, 1.0)

    def test_random_search_budget_violation(self):
        with self.assertRaises(EnumerationCapExceeded):
            random_search(PeakEnvironment(), self.space, 221, seed=0)

    def test_best_so_far_prefix_monotone(self):
        result = random_search(PeakEnvironment(), self.space, 50, seed=2)
        values = result.history.values()
        prefix_best = [values[:n].max() for n in range(1, 51)]
        self.assertTrue(all(a <= b for a, b in zip(prefix_best, prefix_best[1:])))

    def test_exhaustive_table(self):
        env = PeakEnvironment()
        table = exhaustive_search(env, self.space)
        self.assertEqual(len(table), 220)
        self.assertEqual(env.calls, 220)
        self.assertEqual(table.best.ids, (3, 6, 10))
        result = random_search(PeakEnvironment(), self.space, 40, seed=1)
        self.assertGreaterEqual(table.best_value, result.best_value)
        self.assertEqual(list(table.to_dataframe().columns), ['beam_ids', 'key', 'value'])

    def test_environment_failure_carries_config(self):
        with self.assertRaises(EnvironmentFailure) as ctx:
            random_search(FailingEnvironment(), self.space, 3, seed=0)
        self.assertEqual(len(ctx.exception.config.ids), 3)

    def test_concurrent_warm_start_keeps_order(self):
        sequential = random_search(PeakEnvironment(), self.space, 25, seed=6)
        with patch('search_functions.Config') as mock_config:
            mock_config.EVAL_WORKERS = 4
            concurrent = random_search(PeakEnvironment(), self.space, 25, seed=6)
        self.assertEqual(sequential.to_dict(), concurrent.to_dict())


class TestEpsilonGreedySearch(unittest.TestCase):
    """Epsilon-greedy search loop"""

    def setUp(self):
        self.space = SolutionSpaceSpec(K=12, k=3)
        self.feat = FeatureProvider(synthetic_table(12), 'full')

    def test_budget_is_exact(self):
        env = PeakEnvironment()
        result = epsilon_greedy_search(env, self.space, SearchParams(epsilon=0.2, T=30, initial_size=10, seed=1),
                                       self.feat)
        self.assertEqual(env.calls, 30)
        self.assertEqual(result.evaluations, 30)
        self.assertFalse(result.stalled)
        self.assertEqual(sum(1 for r in result.history.records if r.new_state), 30)

    def test_epsilon_one_matches_random_search(self):
        for seed in range(3):
            egs = epsilon_greedy_search(PeakEnvironment(), self.space,
                                        SearchParams(epsilon=1.0, T=25, initial_size=5, seed=seed), self.feat)
            rnd = random_search(PeakEnvironment(), self.space, 25, seed)
            self.assertEqual(Counter(tuple(r.beam_ids) for r in egs.history.records),
                             Counter(tuple(r.beam_ids) for r in rnd.history.records))

    def test_warm_start_only(self):
        env = PeakEnvironment()
        with patch('search_functions.train', wraps=__import__('predictor').train) as train_spy:
            result = epsilon_greedy_search(env, self.space, SearchParams(T=8, initial_size=8, seed=3), self.feat)
        self.assertEqual(train_spy.call_count, 1)
        self.assertEqual(len(result.history), 8)
        warm_best = max(r.value for r in result.history.records)
        self.assertEqual(result.best_value, warm_best)

    def test_retrains_only_on_new_states(self):
        with patch('search_functions.train', wraps=__import__('predictor').train) as train_spy:
            result = epsilon_greedy_search(PeakEnvironment(), self.space,
                                           SearchParams(epsilon=0.2, T=20, initial_size=5, seed=0), self.feat)
        self.assertEqual(train_spy.call_count, 1 + sum(1 for r in result.history.records[5:] if r.new_state))

    def test_history_records_predictions(self):
        result = epsilon_greedy_search(PeakEnvironment(), self.space,
                                       SearchParams(epsilon=0.2, T=15, initial_size=5, seed=2, exploration='state'),
                                       self.feat)
        for record in result.history.records[5:]:
            self.assertIsNotNone(record.predicted)
            self.assertTrue(0.0 < record.predicted < 1.0)
            self.assertIsNotNone(record.epsilon_draw)
            if record.exploration:
                self.assertIsNone(record.action)
            else:
                self.assertEqual(len(record.action), 3)
        self.assertIsNone(result.history.records[0].predicted)

    def test_recorded_actions_stay_bounded(self):
        # Jumps far across the space must not show up as actions beyond m
        result = epsilon_greedy_search(PeakEnvironment(), self.space,
                                       SearchParams(epsilon=0.8, T=30, initial_size=5, seed=6, exploration='state'),
                                       self.feat)
        jumps = [r for r in result.history.records[5:] if r.exploration]
        self.assertTrue(jumps)
        for record in result.history.records:
            if record.action is not None:
                self.assertTrue(all(abs(d) <= self.space.m for d in record.action))
        for record in jumps:
            self.assertIsNone(record.action)
        frame = result.history.to_dataframe()
        self.assertTrue((frame.loc[frame['exploration'], 'action'] == '').all())

    def test_action_exploration_mode(self):
        result = epsilon_greedy_search(PeakEnvironment(), self.space,
                                       SearchParams(epsilon=0.5, T=20, initial_size=5, seed=4, exploration='action'),
                                       self.feat)
        self.assertEqual(result.evaluations, 20)
        for record in result.history.records[5:]:
            self.assertTrue(all(abs(d) <= 2 for d in record.action))
            self.assertTrue(any(record.action))

    def test_deterministic(self):
        params = SearchParams(epsilon=0.2, T=20, initial_size=5, seed=7)
        a = epsilon_greedy_search(PeakEnvironment(), self.space, params, self.feat)
        b = epsilon_greedy_search(PeakEnvironment(), self.space, params, self.feat)
        self.assertTrue(a.history.to_dataframe().equals(b.history.to_dataframe()))

    def test_stall_guard(self):
        # Pure greedy with a tiny step limit cannot spend the whole budget
        result = epsilon_greedy_search(PeakEnvironment(), self.space,
                                       SearchParams(epsilon=0.0, T=60, initial_size=5, seed=0, max_steps=3),
                                       self.feat)
        self.assertTrue(result.stalled)
        self.assertLessEqual(result.evaluations, 8)

    def test_input_dim_mismatch(self):
        with self.assertRaises(ValueError):
            epsilon_greedy_search(PeakEnvironment(), self.space, SearchParams(T=10, initial_size=5),
                                  self.feat, PredictorSpec(input_dim=4))

    def test_result_json_round_trip(self):
        result = epsilon_greedy_search(PeakEnvironment(), self.space,
                                       SearchParams(epsilon=0.2, T=12, initial_size=5, seed=5), self.feat)
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'result.json')
            result.save_json(path, extra={'config_hash': 'abc'})
            restored, extra = SearchResult.load_json(path)
        self.assertEqual(restored.to_dict(), result.to_dict())
        self.assertEqual(extra['config_hash'], 'abc')


class TestPredictionMae(unittest.TestCase):

    def test_mae_is_finite_and_bounded(self):
        space = SolutionSpaceSpec(K=12, k=3)
        table = exhaustive_search(PeakEnvironment(), space)
        mae = prediction_mae(table, FeatureProvider(synthetic_table(12)), train_size=100, seed=0)
        self.assertTrue(0.0 <= mae <= 1.0)
        with self.assertRaises(ValueError):
            prediction_mae(table, FeatureProvider(synthetic_table(12)), train_size=220, seed=0)


if __name__ == '__main__':
    unittest.main()
