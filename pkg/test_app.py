import unittest
import tempfile
import os
import json
import shutil
import sys
import filecmp
from unittest.mock import patch

import numpy as np
import pandas as pd

sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from app import EXIT_BUDGET, EXIT_CONFIG, EXIT_ENVIRONMENT, EXIT_OK, main, paired_outcome
from utils import (
    best_so_far,
    content_hash,
    format_beam_ids,
    parse_beam_ids,
    read_csv,
    validate_run_config,
    write_csv,
)

TEST_MODULES = [
    'test_beam_space',
    'test_features',
    'test_predictor',
    'test_search_functions',
    'test_lidar_sim',
    'test_localization',
    'test_snapshot_manager',
    'test_env_bridge',
    'test_app',
    'test_acceptance',
]

BRIDGE_STUB = (
    "import json, sys; r = json.loads(sys.stdin.readline()); "
    "print(json.dumps({'value': sum(r['beam_ids']) / 20.0}))"
)


def tiny_run_config(out_dir: str) -> dict:
    return {
        'space': {'K': 8, 'k': 2},
        'search': {'epsilon': 0.2, 'T': 8, 'initial_size': 3, 'seed': 0},
        'predictor': {'epochs': 5},
        'scene': {'seed': 0, 'route_poses': 12},
        'scanner': {'azimuth_steps': 180},
        'snapshot': {'eval_poses': 3, 'map_pose_stride': 1},
        'env': {'snapshot': os.path.join(out_dir, 'snapshot.npz')},
        'output': {'dir': out_dir},
    }


def write_config(directory: str, run_config: dict, name: str = 'run.json') -> str:
    path = os.path.join(directory, name)
    with open(path, 'w') as handle:
        json.dump(run_config, handle)
    return path


class TestUtils(unittest.TestCase):
    """Test cases for run configuration and output helpers"""

    def test_validate_run_config(self):
        """Test run configuration validation"""
        valid_config = {'space': {'K': 40, 'k': 4}, 'search': {'epsilon': 0.2, 'T': 200}}
        is_valid, errors = validate_run_config(valid_config)
        self.assertTrue(is_valid)
        self.assertEqual(len(errors), 0)

        invalid_config = {
            'space': {'k': 4, 'colour': 'red'},
            'search': {'epsilon': True},
            'telemetry': {},
        }
        is_valid, errors = validate_run_config(invalid_config)
        self.assertFalse(is_valid)
        self.assertIn('Missing required key: space.K', errors)
        self.assertIn('Unknown key: space.colour', errors)
        self.assertIn('Unknown section: telemetry', errors)
        self.assertTrue(any('search.epsilon' in e for e in errors))

    def test_bridge_needs_command(self):
        is_valid, errors = validate_run_config({'space': {'K': 40, 'k': 4}, 'env': {'type': 'bridge'}})
        self.assertFalse(is_valid)
        self.assertTrue(any('env.command' in e for e in errors))

        is_valid, errors = validate_run_config({'space': {'K': 40, 'k': 4}, 'env': {'type': 'carla'}})
        self.assertFalse(is_valid)

    def test_scanner_must_match_space(self):
        is_valid, errors = validate_run_config({'space': {'K': 40, 'k': 4}, 'scanner': {'K': 32}})
        self.assertFalse(is_valid)
        self.assertIn('scanner.K', errors[0])

    def test_beam_id_formats(self):
        """Test beam ID parsing and display"""
        for text in ('7,8,9,10', '7 8 9 10', '[7, 8, 9, 10]', '7-8-9-10'):
            self.assertEqual(parse_beam_ids(text), [7, 8, 9, 10])
        self.assertEqual(format_beam_ids([7, 8, 9, 10]), '[7, 8, 9, 10]')
        with self.assertRaises(ValueError):
            parse_beam_ids('none')
        for text in ('-1,2,3,4', '1,-2', 'a,b', '1.5,2', '3,4,', '7--8'):
            with self.assertRaises(ValueError):
                parse_beam_ids(text)

    def test_best_so_far(self):
        self.assertEqual(best_so_far([0.2, 0.1, 0.5, 0.4]).tolist(), [0.2, 0.2, 0.5, 0.5])
        self.assertEqual(len(best_so_far([])), 0)

    def test_content_hash(self):
        self.assertEqual(content_hash({'a': 1, 'b': [1, 2]}), content_hash({'b': [1, 2], 'a': 1}))
        self.assertNotEqual(content_hash({'a': 1}), content_hash({'a': 2}))
        arrays = {'x': np.arange(4)}
        self.assertNotEqual(content_hash({}, arrays), content_hash({}, {'x': np.arange(4).astype(np.int32)}))

    def test_csv_header_round_trip(self):
        import pandas as pd
        with tempfile.TemporaryDirectory() as tmp:
            path = os.path.join(tmp, 'out.csv')
            write_csv(pd.DataFrame({'a': [1, 2]}), path, {'tool_version': '1.0.0', 'config_hash': 'abc'})
            frame, header = read_csv(path)
        self.assertEqual(header, {'tool_version': '1.0.0', 'config_hash': 'abc'})
        self.assertEqual(frame['a'].tolist(), [1, 2])


class TestCommandLine(unittest.TestCase):
    """Exit codes of the command-line surface"""

    def setUp(self):
        self.test_dir = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.test_dir, ignore_errors=True)

    def test_missing_config_file(self):
        code = main(['search', '--config', os.path.join(self.test_dir, 'missing.json')])
        self.assertEqual(code, EXIT_CONFIG)

    def test_unknown_key(self):
        run_config = tiny_run_config(self.test_dir)
        run_config['search']['temperature'] = 0.5
        self.assertEqual(main(['search', '--config', write_config(self.test_dir, run_config)]), EXIT_CONFIG)

    def test_budget_beyond_space(self):
        run_config = tiny_run_config(self.test_dir)
        run_config['search']['T'] = 50
        path = write_config(self.test_dir, run_config)
        self.assertEqual(main(['search', '--config', path, '--method', 'random']), EXIT_BUDGET)

    def test_enumeration_cap(self):
        path = write_config(self.test_dir, tiny_run_config(self.test_dir))
        with patch('beam_space.Config') as mock_config:
            mock_config.ENUMERATION_CAP = 10
            mock_config.ENUMERATION_WARN_AT = 5
            self.assertEqual(main(['search', '--config', path, '--method', 'exhaustive']), EXIT_BUDGET)

    def test_missing_snapshot(self):
        path = write_config(self.test_dir, tiny_run_config(self.test_dir))
        self.assertEqual(main(['search', '--config', path]), EXIT_CONFIG)

    def test_invalid_beams(self):
        path = write_config(self.test_dir, tiny_run_config(self.test_dir))
        self.assertEqual(main(['eval', '--config', path, '--beams', '3,3']), EXIT_CONFIG)
        self.assertEqual(main(['eval', '--config', path, '--beams=-1,2']), EXIT_CONFIG)
        self.assertEqual(main(['eval', '--config', path, '--beams', 'a,b']), EXIT_CONFIG)

    def test_paired_outcome(self):
        self.assertEqual(paired_outcome(0.9, 0.8), 'win')
        self.assertEqual(paired_outcome(0.8, 0.8), 'tie')
        self.assertEqual(paired_outcome(0.7, 0.8), 'loss')

    def test_failing_bridge(self):
        run_config = tiny_run_config(self.test_dir)
        run_config['env'] = {
            'type': 'bridge',
            'command': [sys.executable, '-c', 'import sys; sys.exit(1)'],
            'cache_path': os.path.join(self.test_dir, 'cache.jsonl'),
        }
        path = write_config(self.test_dir, run_config)
        self.assertEqual(main(['search', '--config', path, '--method', 'random']), EXIT_ENVIRONMENT)

    def test_bridge_search_with_beam_id_features(self):
        run_config = tiny_run_config(self.test_dir)
        run_config['search']['features'] = 'beam_id'
        run_config['env'] = {
            'type': 'bridge',
            'command': [sys.executable, '-c', BRIDGE_STUB],
            'cache_path': os.path.join(self.test_dir, 'cache.jsonl'),
        }
        path = write_config(self.test_dir, run_config)
        self.assertEqual(main(['search', '--config', path, '--method', 'egs']), EXIT_OK)
        with open(os.path.join(self.test_dir, 'egs_seed0.json')) as handle:
            result = json.load(handle)
        self.assertEqual(result['evaluations'], 8)
        self.assertEqual(result['feature_mode'], 'beam_id')

        run_config['search']['features'] = 'full'
        path = write_config(self.test_dir, run_config)
        self.assertEqual(main(['search', '--config', path, '--method', 'egs']), EXIT_CONFIG)

    def test_report_needs_readable_results(self):
        self.assertEqual(main(['report', os.path.join(self.test_dir, 'missing.json')]), EXIT_CONFIG)


class TestIntegration(unittest.TestCase):
    """End-to-end runs against a tiny built-in environment"""

    @classmethod
    def setUpClass(cls):
        cls.test_dir = tempfile.mkdtemp()
        cls.run_config = tiny_run_config(cls.test_dir)
        cls.config_path = write_config(cls.test_dir, cls.run_config)
        assert main(['gen-env', '--config', cls.config_path]) == EXIT_OK

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.test_dir, ignore_errors=True)

    def output(self, name):
        return os.path.join(self.test_dir, name)

    def test_gen_env_outputs(self):
        self.assertTrue(os.path.exists(self.output('snapshot.npz')))
        self.assertTrue(os.path.exists(self.output('snapshot.npz.run.json')))
        frame, header = read_csv(self.output('beam_stats.csv'))
        self.assertEqual(len(frame), 8)
        self.assertEqual(header['config_hash'], content_hash(self.run_config))
        self.assertEqual(len(header['snapshot_hash']), 64)
        cloud = pd.read_csv(self.output('eval_scan_0.csv'))
        self.assertEqual(list(cloud.columns), ['x', 'y', 'z', 'class', 'beam'])
        self.assertTrue(cloud['beam'].between(1, 8).all())

    def test_search_methods_and_report(self):
        for method in ('egs', 'random'):
            for seed in ('0', '1'):
                code = main(['search', '--config', self.config_path, '--method', method, '--seed', seed])
                self.assertEqual(code, EXIT_OK)
        self.assertEqual(main(['search', '--config', self.config_path, '--method', 'exhaustive']), EXIT_OK)

        with open(self.output('egs_seed1.json')) as handle:
            egs = json.load(handle)
        self.assertEqual(egs['evaluations'], 8)
        self.assertEqual(egs['params']['seed'], 1)
        with open(self.output('exhaustive.json')) as handle:
            exhaustive = json.load(handle)
        self.assertEqual(exhaustive['configs'], 28)
        self.assertGreaterEqual(exhaustive['best_value'], egs['best_value'])

        history, header = read_csv(self.output('egs_seed0_history.csv'))
        self.assertEqual(int(history['new_state'].sum()), 8)
        self.assertEqual(history['step'].tolist(), list(range(len(history))))
        self.assertEqual(header['env_hash'], egs['env_hash'])

        out = self.output('report')
        results = [self.output(f"{m}_seed{s}.json") for m in ('egs', 'random') for s in (0, 1)]
        self.assertEqual(main(['report', *results, '--out', out]), EXIT_OK)

        curves, _ = read_csv(os.path.join(out, 'best_so_far.csv'))
        self.assertEqual(len(curves), 8)
        for column in curves.columns[1:]:
            self.assertTrue(np.all(np.diff(curves[column].values) >= 0))
        dominance, _ = read_csv(os.path.join(out, 'dominance.csv'))
        self.assertEqual(dominance['seed'].tolist(), [0, 1])
        self.assertTrue(dominance['outcome'].isin(['win', 'tie', 'loss']).all())
        summary, _ = read_csv(os.path.join(out, 'summary.csv'))
        self.assertEqual(len(summary), 4)

    def test_search_is_reproducible(self):
        first = self.output('first')
        second = self.output('second')
        for out in (first, second):
            self.assertEqual(main(['search', '--config', self.config_path, '--seed', '2', '--out', out]), EXIT_OK)
        self.assertTrue(filecmp.cmp(os.path.join(first, 'egs_seed2_history.csv'),
                                    os.path.join(second, 'egs_seed2_history.csv'), shallow=False))

    def test_report_rejects_mixed_environments(self):
        out = self.output('mixed')
        self.assertEqual(main(['search', '--config', self.config_path, '--method', 'random', '--seed', '5',
                               '--out', out]), EXIT_OK)
        original = os.path.join(out, 'random_seed5.json')
        with open(original) as handle:
            payload = json.load(handle)
        payload['env_hash'] = '0' * 64
        payload['params']['seed'] = 6
        tampered = os.path.join(out, 'random_seed6.json')
        with open(tampered, 'w') as handle:
            json.dump(payload, handle)
        self.assertEqual(main(['report', original, tampered, '--out', out]), EXIT_CONFIG)

    def test_eval_rows(self):
        self.assertEqual(main(['eval', '--config', self.config_path, '--beams', '2,5']), EXIT_OK)
        summary, header = read_csv(self.output('eval_2-5_summary.csv'))
        self.assertEqual(summary['label'].tolist(), ['requested', 'equidistant', 'full_lidar'])
        self.assertTrue(np.all(summary['value'].between(0.0, 1.0)))
        for _, row in summary.iterrows():
            self.assertLessEqual(row['acc1'], row['acc2'])
            self.assertLessEqual(row['acc2'], row['acc3'])

        report, _ = read_csv(self.output('eval_2-5.csv'))
        self.assertEqual(len(report), 12)
        self.assertEqual(report['pose_id'].tolist(), list(range(12)))
        self.assertTrue(np.all(summary['search_value'].between(0.0, 1.0)))

    def test_eval_full_lidar_request(self):
        self.assertEqual(main(['eval', '--config', self.config_path, '--beams', '1-2-3-4-5-6-7-8']), EXIT_OK)
        self.assertTrue(os.path.exists(self.output('eval_1-2-3-4-5-6-7-8_summary.csv')))


def create_test_suite():
    """Create and return test suite"""
    loader = unittest.TestLoader()
    suite = unittest.TestSuite()
    for name in TEST_MODULES:
        suite.addTests(loader.loadTestsFromName(name))
    return suite


def run_tests():
    """Run all tests"""
    # Create test suite
    suite = create_test_suite()

    # Run tests
    runner = unittest.TextTestRunner(verbosity=2)
    result = runner.run(suite)

    # Print summary
    print(f"\n{'='*50}")
    print(f"Tests run: {result.testsRun}")
    print(f"Failures: {len(result.failures)}")
    print(f"Errors: {len(result.errors)}")
    print(f"Success rate: {((result.testsRun - len(result.failures) - len(result.errors)) / max(result.testsRun, 1) * 100):.1f}%")
    print(f"{'='*50}")

    return result.wasSuccessful()


if __name__ == '__main__':
    # Slow acceptance tests run only on request
    os.environ.setdefault('RUN_SLOW_TESTS', '0')

    # Run tests
    success = run_tests()
    sys.exit(0 if success else 1)
