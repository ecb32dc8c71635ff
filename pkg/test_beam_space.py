import itertools
import math
import os
import sys
import unittest
from unittest.mock import patch

import numpy as np

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from beam_space import (
    ActionVec,
    ConfigSampler,
    EnumerationCapExceeded,
    SolutionSpaceSpec,
    apply_action,
    canonical_key,
    config_from_key,
    count_configs,
    enumerate_all_configs,
    enumerate_valid_actions,
    equidistant_config,
    new_config,
    unrank_config,
)


class TestNewConfig(unittest.TestCase):
    """Validation of beam configurations"""

    def setUp(self):
        self.space = SolutionSpaceSpec(K=40, k=4)

    def test_valid_configs(self):
        self.assertEqual(new_config([5, 7, 9, 11], self.space).ids, (5, 7, 9, 11))
        self.assertEqual(new_config([1, 2, 3, 4], self.space).ids, (1, 2, 3, 4))

    def test_unsorted_input_is_sorted(self):
        self.assertEqual(new_config([11, 5, 9, 7], self.space).ids, (5, 7, 9, 11))

    def test_duplicates_rejected(self):
        with self.assertRaises(ValueError) as ctx:
            new_config([5, 5, 9, 11], self.space)
        self.assertIn('Duplicate', str(ctx.exception))

    def test_out_of_range_and_length(self):
        with self.assertRaises(ValueError):
            new_config([0, 5, 9, 11], self.space)
        with self.assertRaises(ValueError):
            new_config([5, 9, 11, 41], self.space)
        with self.assertRaises(ValueError):
            new_config([5, 9, 11], self.space)

    def test_space_validation(self):
        with self.assertRaises(ValueError):
            SolutionSpaceSpec(K=4, k=4)
        with self.assertRaises(ValueError):
            SolutionSpaceSpec(K=10, k=2, m=0)


class TestActions(unittest.TestCase):
    """Action application and enumeration"""

    def test_apply_action(self):
        space = SolutionSpaceSpec(K=40, k=4)
        s = new_config([5, 7, 9, 11], space)
        self.assertEqual(apply_action(s, ActionVec((2, 1, 0, -1)), space).ids, (7, 8, 9, 10))

    def test_apply_action_invalid(self):
        space = SolutionSpaceSpec(K=40, k=4)
        self.assertIsNone(apply_action(new_config([1, 6, 19, 40], space), ActionVec((-1, 0, 0, 0)), space))
        self.assertIsNone(apply_action(new_config([3, 4, 10, 12], space), ActionVec((1, 0, 0, 0)), space))

    def test_apply_action_resorts(self):
        space = SolutionSpaceSpec(K=40, k=4)
        s = new_config([3, 4, 10, 12], space)
        self.assertEqual(apply_action(s, ActionVec((1, -1, 0, 0)), space).ids, (3, 4, 10, 12))
        crossed = apply_action(s, ActionVec((2, 0, 0, 0)), space)
        self.assertEqual(crossed.ids, (4, 5, 10, 12))

    def test_single_valid_action(self):
        space = SolutionSpaceSpec(K=5, k=4, m=1)
        actions = enumerate_valid_actions(new_config([1, 2, 3, 4], space), space)
        self.assertEqual(len(actions), 1)
        self.assertEqual(actions[0].deltas, (0, 0, 0, 1))
        self.assertEqual(apply_action(new_config([1, 2, 3, 4], space), actions[0], space).ids, (1, 2, 3, 5))

    def test_action_count_matches_brute_force(self):
        space = SolutionSpaceSpec(K=40, k=4, m=2)
        s = new_config([20, 21, 22, 23], space)
        expected = 0
        for deltas in itertools.product(range(-2, 3), repeat=4):
            if not any(deltas):
                continue
            moved = sorted(a + b for a, b in zip(s.ids, deltas))
            if moved[0] >= 1 and moved[-1] <= 40 and len(set(moved)) == 4:
                expected += 1
        actions = enumerate_valid_actions(s, space)
        self.assertEqual(len(actions), expected)
        self.assertTrue(all(any(a.deltas) for a in actions))


class TestEnumeration(unittest.TestCase):
    """Counting, enumeration and unranking"""

    def test_counts(self):
        self.assertEqual(count_configs(SolutionSpaceSpec(K=40, k=4)), 91390)
        self.assertEqual(len(list(enumerate_all_configs(SolutionSpaceSpec(K=5, k=4)))), 5)
        self.assertEqual(len(list(enumerate_all_configs(SolutionSpaceSpec(K=12, k=3)))), 220)

    def test_large_enumeration_count_streams(self):
        count = sum(1 for _ in enumerate_all_configs(SolutionSpaceSpec(K=40, k=4)))
        self.assertEqual(count, 91390)

    def test_lexicographic_and_unique(self):
        space = SolutionSpaceSpec(K=9, k=3)
        configs = [c.ids for c in enumerate_all_configs(space)]
        self.assertEqual(configs, sorted(configs))
        self.assertEqual(len(set(configs)), math.comb(9, 3))

    def test_unrank_matches_enumeration(self):
        space = SolutionSpaceSpec(K=10, k=4)
        for index, config in enumerate(enumerate_all_configs(space)):
            self.assertEqual(unrank_config(index, space), config)

    def test_cap_exceeded_before_first_config(self):
        with patch('beam_space.Config') as mock_config:
            mock_config.ENUMERATION_CAP = 100
            mock_config.ENUMERATION_WARN_AT = 50
            with self.assertRaises(EnumerationCapExceeded):
                enumerate_all_configs(SolutionSpaceSpec(K=12, k=3))

    def test_explicit_cap(self):
        with self.assertRaises(EnumerationCapExceeded):
            enumerate_all_configs(SolutionSpaceSpec(K=12, k=3), cap=219)


class TestKeysAndBaselines(unittest.TestCase):

    def test_canonical_key(self):
        space = SolutionSpaceSpec(K=40, k=4)
        self.assertEqual(canonical_key(new_config([7, 8, 9, 10], space)), '7-8-9-10')
        self.assertEqual(canonical_key(new_config([7, 8, 9, 10], space)),
                         canonical_key(new_config([10, 9, 8, 7], space)))
        self.assertNotEqual(canonical_key(new_config([5, 7, 9, 11], space)),
                            canonical_key(new_config([5, 7, 9, 12], space)))
        self.assertEqual(config_from_key('5-7-9-11', space).ids, (5, 7, 9, 11))

    def test_equidistant_config(self):
        space = SolutionSpaceSpec(K=40, k=4)
        self.assertEqual(equidistant_config(space, 5, 11).ids, (5, 7, 9, 11))
        self.assertEqual(equidistant_config(space).ids, (1, 14, 27, 40))
        with self.assertRaises(ValueError):
            equidistant_config(space, 5, 7)


class TestConfigSampler(unittest.TestCase):

    def test_same_seed_same_stream(self):
        space = SolutionSpaceSpec(K=12, k=3)
        a = ConfigSampler(space, np.random.default_rng(3)).draw(50)
        b = ConfigSampler(space, np.random.default_rng(3)).draw(50)
        self.assertEqual(a, b)
        self.assertEqual(len({c.ids for c in a}), 50)

    def test_skips_visited_and_exhausts(self):
        space = SolutionSpaceSpec(K=5, k=4)
        sampler = ConfigSampler(space, np.random.default_rng(0))
        visited = {'1-2-3-4'}
        drawn = sampler.draw(4, visited)
        self.assertNotIn('1-2-3-4', [canonical_key(c) for c in drawn])
        self.assertIsNone(sampler.next_unvisited(visited))
        with self.assertRaises(EnumerationCapExceeded):
            ConfigSampler(space, np.random.default_rng(0)).draw(6)


if __name__ == '__main__':
    unittest.main()
