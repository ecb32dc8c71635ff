"""
Command-line surface of the LiDAR beam configuration optimizer.

    python app.py gen-env --config run.json [--out DIR]
    python app.py search  --config run.json --method egs|random|exhaustive [--seed N] [--out DIR]
    python app.py eval    --config run.json --beams 7,8,9,10 [--out DIR]
    python app.py report  RESULT.json [RESULT.json ...] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 environment failure,
4 enumeration cap or budget violation.
"""

import argparse
import logging
import os
import sys
from typing import Any, Dict, List, Optional, Tuple

import numpy as np
import pandas as pd

from beam_space import (
    BeamConfig,
    EnumerationCapExceeded,
    SolutionSpaceSpec,
    check_enumeration_cap,
    canonical_key,
    count_configs,
    equidistant_config,
    new_config,
)
from config import Config
from env_bridge import BridgeEnvironment, BridgeError, BridgeSpec
from features import FeatureProvider, stats_table_to_dataframe
from lidar_sim import SceneParams, ScannerSpec, beams_in_elevation_range, export_cloud_csv
from localization import IcpParams, LocalizationEnvironment, NoiseSpec, RewardSpec, evaluate_route
from predictor import PredictorSpec
from search_functions import (
    EnvironmentFailure,
    SearchAborted,
    SearchParams,
    SearchResult,
    epsilon_greedy_search,
    exhaustive_search,
    random_search,
)
from snapshot_manager import EnvSnapshot, SnapshotManager, SnapshotSettings
from utils import (
    ConfigValidationError,
    best_so_far,
    content_hash,
    format_beam_ids,
    load_run_config,
    output_header,
    parse_beam_ids,
    section,
    write_csv,
    write_json,
    write_sidecar,
)

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_ENVIRONMENT = 3
EXIT_BUDGET = 4

METHODS = ('egs', 'random', 'exhaustive')


class ResultMismatchError(ValueError):
    """Search results produced against different environments"""


# Run configuration -> domain objects

def _space(run_config: Dict[str, Any]) -> SolutionSpaceSpec:
    return SolutionSpaceSpec.from_dict(run_config['space'])


def _scanner(run_config: Dict[str, Any]) -> ScannerSpec:
    data = section(run_config, 'scanner')
    data['K'] = run_config['space']['K']
    return ScannerSpec.from_dict(data)


def _snapshot_settings(run_config: Dict[str, Any]) -> SnapshotSettings:
    data = section(run_config, 'snapshot')
    data['scene_seed'] = section(run_config, 'scene').get('seed', 0)
    return SnapshotSettings.from_dict(data)


def _scene_params(run_config: Dict[str, Any]) -> SceneParams:
    data = section(run_config, 'scene')
    data.pop('seed', None)
    return SceneParams.from_dict(data)


def _noise(run_config: Dict[str, Any]) -> NoiseSpec:
    data = section(run_config, 'noise')
    data.setdefault('seed', section(run_config, 'scene').get('seed', 0))
    return NoiseSpec.from_dict(data)


def _reward(run_config: Dict[str, Any]) -> RewardSpec:
    data = section(run_config, 'reward')
    if not data:
        return RewardSpec()
    defaults = RewardSpec().to_dict()
    defaults.update(data)
    return RewardSpec.from_dict(defaults)


def _search_params(run_config: Dict[str, Any], seed: Optional[int]) -> SearchParams:
    data = section(run_config, 'search')
    data.pop('features', None)
    if seed is not None:
        data['seed'] = seed
    return SearchParams.from_dict(data)


def _feature_mode(run_config: Dict[str, Any]):
    mode = section(run_config, 'search').get('features', 'full')
    return tuple(mode) if isinstance(mode, list) else mode


def _predictor_spec(run_config: Dict[str, Any], input_dim: int) -> PredictorSpec:
    data = section(run_config, 'predictor')
    data['input_dim'] = input_dim
    return PredictorSpec.from_dict(data)


def _output_dir(run_config: Dict[str, Any], out: Optional[str]) -> str:
    directory = out or section(run_config, 'output').get('dir') or Config.OUTPUT_DIR
    os.makedirs(directory, exist_ok=True)
    return directory


def _snapshot_path(run_config: Dict[str, Any], out_dir: str) -> str:
    return section(run_config, 'env').get('snapshot') or os.path.join(out_dir, Config.SNAPSHOT_FILE_NAME)


def _load_snapshot(run_config: Dict[str, Any], out_dir: str) -> EnvSnapshot:
    path = _snapshot_path(run_config, out_dir)
    snapshot = SnapshotManager(out_dir).load(path)
    if snapshot.K != run_config['space']['K']:
        raise ConfigValidationError([f"space.K ({run_config['space']['K']}) does not match snapshot K ({snapshot.K})"])
    return snapshot


def _bridge_spec(run_config: Dict[str, Any]) -> BridgeSpec:
    data = section(run_config, 'env')
    return BridgeSpec(
        command=data['command'],
        timeout=data.get('timeout', Config.BRIDGE_TIMEOUT_SECONDS),
        cache_path=data.get('cache_path'),
        retries=data.get('retries', Config.BRIDGE_RETRIES),
        parallelism=data.get('parallelism', Config.BRIDGE_PARALLELISM),
    )


def _environment(run_config: Dict[str, Any], out_dir: str) -> Tuple[Any, Optional[EnvSnapshot]]:
    """The configured environment plus the snapshot providing beam statistics, if any"""
    env_type = section(run_config, 'env').get('type', 'builtin-loc')
    if env_type == 'bridge':
        snapshot = None
        if os.path.exists(_snapshot_path(run_config, out_dir)):
            snapshot = _load_snapshot(run_config, out_dir)
        return BridgeEnvironment(_bridge_spec(run_config)), snapshot
    snapshot = _load_snapshot(run_config, out_dir)
    return LocalizationEnvironment(snapshot), snapshot


def _feature_provider(run_config: Dict[str, Any], snapshot: Optional[EnvSnapshot]) -> FeatureProvider:
    mode = _feature_mode(run_config)
    if snapshot is None:
        if mode != 'beam_id':
            raise ConfigValidationError(
                ["search.features requires beam statistics; run gen-env first or set search.features to beam_id"]
            )
        return FeatureProvider({}, 'beam_id')
    return FeatureProvider(snapshot.stats_table, mode)


def _result_stem(method: str, seed: int) -> str:
    return f"{method}_seed{seed}"


# Commands

def cmd_gen_env(run_config: Dict[str, Any], out: Optional[str] = None) -> str:
    """Build and persist the frozen environment snapshot; returns the snapshot path"""
    config_hash = content_hash(run_config)
    out_dir = _output_dir(run_config, out)
    manager = SnapshotManager(out_dir)

    snapshot = manager.build(
        _snapshot_settings(run_config),
        scanner=_scanner(run_config),
        scene_params=_scene_params(run_config),
        icp=IcpParams.from_dict(section(run_config, 'icp')),
        reward=_reward(run_config),
        noise=_noise(run_config),
    )
    path = manager.save(snapshot, _snapshot_path(run_config, out_dir))

    header = output_header(config_hash)
    header['snapshot_hash'] = snapshot.content_hash
    stats_path = os.path.join(out_dir, 'beam_stats.csv')
    write_csv(stats_table_to_dataframe(snapshot.stats_table), stats_path, header)
    write_json({**header, 'snapshot': os.path.basename(path), 'parameters': snapshot.parameters()},
               os.path.join(out_dir, 'snapshot_info.json'))
    export_cloud_csv(snapshot.eval_scans[0], os.path.join(out_dir, 'eval_scan_0.csv'))
    write_sidecar(path, 'gen-env')

    print("=" * 70)
    print(f"Snapshot written: {path}")
    print(f"Content hash:     {snapshot.content_hash}")
    print(f"Map points:       {len(snapshot.map_cloud)}")
    print(f"Eval poses:       {len(snapshot.eval_scans)}")
    print(f"Beam statistics:  {stats_path} ({len(snapshot.stats_table)} beams)")
    print("=" * 70)
    return path


def cmd_search(run_config: Dict[str, Any], method: str, seed: Optional[int] = None,
               out: Optional[str] = None):
    """Run one search method and write its result JSON plus history CSV"""
    if method not in METHODS:
        raise ConfigValidationError([f"Unknown method: {method}"])

    config_hash = content_hash(run_config)
    out_dir = _output_dir(run_config, out)
    space = _space(run_config)

    # Budget and cap checks happen before the environment is touched
    total = count_configs(space)
    if method == 'exhaustive':
        check_enumeration_cap(space, None)
        params = None
    else:
        params = _search_params(run_config, seed)
        if params.T > total:
            raise EnumerationCapExceeded(f"Budget T={params.T} exceeds the {total} configurations of the space")
        if method == 'egs':
            check_enumeration_cap(space, None)

    env, snapshot = _environment(run_config, out_dir)
    header = output_header(config_hash)
    header['env_hash'] = getattr(env, 'env_hash', '') or ''

    if method == 'exhaustive':
        table = exhaustive_search(env, space)
        path = os.path.join(out_dir, 'exhaustive.csv')
        write_csv(table.to_dataframe(), path, header)
        write_json({**header, 'method': 'exhaustive', 'space': space.to_dict(), 'configs': len(table),
                    'best_ids': table.best.to_list(), 'best_value': table.best_value},
                   os.path.join(out_dir, 'exhaustive.json'))
        write_sidecar(path, 'search --method exhaustive')
        print(f"✅ Exhaustive search over {len(table)} configurations")
        print(f"Best configuration: {format_beam_ids(table.best)} value {table.best_value:.4f}")
        return table

    if method == 'random':
        result = random_search(env, space, params.T, params.seed)
    else:
        feat = _feature_provider(run_config, snapshot)
        predictor = _predictor_spec(run_config, feat.dimension(space.k))
        result = epsilon_greedy_search(env, space, params, feat, predictor)

    stem = _result_stem(method, result.seed)
    json_path = os.path.join(out_dir, f"{stem}.json")
    csv_path = os.path.join(out_dir, f"{stem}_history.csv")
    result.save_json(json_path, extra={'tool_version': Config.APP_VERSION, 'config_hash': config_hash})
    write_csv(result.history.to_dataframe(), csv_path, header)
    write_sidecar(json_path, f"search --method {method} --seed {result.seed}")

    print(f"✅ {method} search finished ({result.evaluations} evaluations{', stalled' if result.stalled else ''})")
    print(f"Best configuration: {format_beam_ids(result.best_ids)} value {result.best_value:.4f} "
          f"(step {result.best_step})")
    print(f"Result: {json_path}")
    return result


def _eval_config(ids: List[int], K: int, m: int) -> BeamConfig:
    """Any non-empty set of distinct beams; the full set is the full-LiDAR reference"""
    if sorted(ids) == list(range(1, K + 1)):
        return BeamConfig(ids=tuple(range(1, K + 1)))
    if not 1 <= len(ids) < K:
        raise ValueError(f"Expected between 1 and {K} beam IDs, got {len(ids)}")
    return new_config(ids, SolutionSpaceSpec(K=K, k=len(ids), m=m))


def cmd_eval(run_config: Dict[str, Any], beam_ids: List[int], out: Optional[str] = None) -> pd.DataFrame:
    """Route report for a configuration plus the equidistant and full-LiDAR reference rows.

    Every route pose is localized; search_value restricts the accuracies to
    the frozen evaluation poses the search optimizes.
    """
    config_hash = content_hash(run_config)
    out_dir = _output_dir(run_config, out)
    space = _space(run_config)
    s = _eval_config(beam_ids, space.K, space.m)

    snapshot = _load_snapshot(run_config, out_dir)
    header = output_header(config_hash)
    header['env_hash'] = snapshot.content_hash

    first, last = beams_in_elevation_range(snapshot.scanner, Config.EQUIDISTANT_LOW_DEG, Config.EQUIDISTANT_HIGH_DEG)
    rows = [('requested', s)]
    try:
        rows.append(('equidistant', equidistant_config(space, first, last)))
    except ValueError as e:
        logging.warning(f"No equidistant reference row: {str(e)}")
    rows.append(('full_lidar', BeamConfig(ids=tuple(range(1, space.K + 1)))))

    route = snapshot.route_view()
    search_rows = np.isin(route.pose_ids, snapshot.pose_ids)
    summary = []
    for label, config in rows:
        report = evaluate_route(config, route)
        if label == 'requested':
            report_path = os.path.join(out_dir, f"eval_{canonical_key(config)}.csv")
            write_csv(report.frame, report_path, header)
        search_hits = report.frame.loc[search_rows, ['hit1', 'hit2', 'hit3']].to_numpy(dtype=float)
        summary.append({
            'label': label,
            'beam_ids': format_beam_ids(config),
            'acc1': report.accuracies[0],
            'acc2': report.accuracies[1],
            'acc3': report.accuracies[2],
            'value': report.value,
            'search_value': snapshot.reward.value(tuple(search_hits.mean(axis=0))),
        })

    frame = pd.DataFrame(summary, columns=['label', 'beam_ids', 'acc1', 'acc2', 'acc3', 'value', 'search_value'])
    summary_path = os.path.join(out_dir, f"eval_{canonical_key(s)}_summary.csv")
    write_csv(frame, summary_path, header)
    write_sidecar(summary_path, 'eval')

    thresholds = snapshot.reward.thresholds
    print("=" * 70)
    print(f"{'row':<12} {'beams':<28} " + ' '.join(f"{t:g}m/{r:g}°".rjust(9) for t, r in thresholds) + '     value')
    for row in summary:
        print(f"{row['label']:<12} {row['beam_ids'][:28]:<28} "
              f"{row['acc1']:>9.3f} {row['acc2']:>9.3f} {row['acc3']:>9.3f} {row['value']:>9.4f}")
    print("=" * 70)
    print(f"Route poses: {len(route.pose_ids)} (search value over {int(search_rows.sum())})")
    print(f"Per-pose report: {report_path}")
    return frame


def _evaluation_curve(result: SearchResult) -> np.ndarray:
    """Best true value after each environment evaluation"""
    values = [r.value for r in result.history.records if r.new_state]
    return best_so_far(values)


def paired_outcome(egs_best: float, random_best: float) -> str:
    """'win', 'tie' or 'loss' of epsilon-greedy against random search on one seed"""
    if egs_best > random_best:
        return 'win'
    return 'tie' if egs_best == random_best else 'loss'


def cmd_report(result_paths: List[str], out: Optional[str] = None) -> pd.DataFrame:
    """Best-so-far curves, a summary table and the paired-seed dominance count"""
    if not result_paths:
        raise ConfigValidationError(["report needs at least one result file"])

    loaded = []
    for path in result_paths:
        try:
            result, extra = SearchResult.load_json(path)
        except (OSError, ValueError, KeyError, TypeError) as e:
            raise ConfigValidationError([f"Cannot read result {path}: {str(e)}"])
        loaded.append((path, result, extra))

    env_hashes = {result.env_hash for _, result, _ in loaded}
    if len(env_hashes) > 1:
        raise ResultMismatchError(
            "Results come from different environments: " + ', '.join(sorted(str(h)[:12] for h in env_hashes))
        )

    out_dir = out or Config.OUTPUT_DIR
    os.makedirs(out_dir, exist_ok=True)
    config_hash = content_hash({'results': sorted(extra.get('config_hash', '') for _, _, extra in loaded)})
    header = output_header(config_hash)
    header['env_hash'] = str(next(iter(env_hashes)))

    curves = {}
    summary = []
    for path, result, _ in loaded:
        label = _result_stem(result.method, result.seed)
        curves[label] = _evaluation_curve(result)
        summary.append({
            'result': os.path.basename(path),
            'method': result.method,
            'seed': result.seed,
            'T': result.params.get('T'),
            'evaluations': result.evaluations,
            'best_value': result.best_value,
            'best_ids': format_beam_ids(result.best_ids),
            'best_step': result.best_step,
            'stalled': result.stalled,
        })

    length = max(len(c) for c in curves.values())
    curve_frame = pd.DataFrame({'evaluation': np.arange(1, length + 1)})
    for label, curve in curves.items():
        padded = np.full(length, np.nan)
        padded[:len(curve)] = curve
        curve_frame[label] = padded
    write_csv(curve_frame, os.path.join(out_dir, 'best_so_far.csv'), header)

    summary_frame = pd.DataFrame(summary)
    write_csv(summary_frame, os.path.join(out_dir, 'summary.csv'), header)

    egs = {r.seed: r.best_value for _, r, _ in loaded if r.method == 'egs'}
    rnd = {r.seed: r.best_value for _, r, _ in loaded if r.method == 'random'}
    paired = sorted(set(egs) & set(rnd))
    if paired:
        dominance = pd.DataFrame({
            'seed': paired,
            'egs_best': [egs[s] for s in paired],
            'random_best': [rnd[s] for s in paired],
            'outcome': [paired_outcome(egs[s], rnd[s]) for s in paired],
        })
        write_csv(dominance, os.path.join(out_dir, 'dominance.csv'), header)

    print("=" * 70)
    print(summary_frame.to_string(index=False))
    if paired:
        counts = dominance['outcome'].value_counts()
        print(f"\nEpsilon-greedy vs random over {len(paired)} paired seeds: "
              f"{counts.get('win', 0)} wins, {counts.get('tie', 0)} ties, {counts.get('loss', 0)} losses")
    print("=" * 70)
    return summary_frame


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='beamopt', description=Config.APP_NAME)
    parser.add_argument('--version', action='version', version=f"%(prog)s {Config.APP_VERSION}")
    commands = parser.add_subparsers(dest='command', required=True)

    gen_env = commands.add_parser('gen-env', help='Build the frozen localization environment snapshot')
    gen_env.add_argument('--config', required=True, help='Run configuration JSON')
    gen_env.add_argument('--out', help='Output directory')

    search = commands.add_parser('search', help='Search for the best beam configuration')
    search.add_argument('--config', required=True, help='Run configuration JSON')
    search.add_argument('--method', choices=METHODS, default='egs')
    search.add_argument('--seed', type=int, help='Overrides search.seed')
    search.add_argument('--out', help='Output directory')

    evaluate = commands.add_parser('eval', help='Localize the whole route with a beam configuration')
    evaluate.add_argument('--config', required=True, help='Run configuration JSON')
    evaluate.add_argument('--beams', required=True, help="Beam IDs, e.g. '7,8,9,10'")
    evaluate.add_argument('--out', help='Output directory')

    report = commands.add_parser('report', help='Summarize search result files')
    report.add_argument('results', nargs='+', help='Result JSON files written by search')
    report.add_argument('--out', help='Output directory')
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(
        level=getattr(logging, Config.LOG_LEVEL.upper(), logging.INFO),
        format='%(asctime)s - %(levelname)s - %(message)s'
    )
    args = build_parser().parse_args(argv)

    if not Config.validate_configuration():
        return EXIT_CONFIG
    logging.debug(f"Settings: {Config.get_summary()}")

    try:
        if args.command == 'report':
            cmd_report(args.results, args.out)
            return EXIT_OK

        run_config = load_run_config(args.config)
        if args.command == 'gen-env':
            cmd_gen_env(run_config, args.out)
        elif args.command == 'search':
            cmd_search(run_config, args.method, args.seed, args.out)
        elif args.command == 'eval':
            cmd_eval(run_config, parse_beam_ids(args.beams), args.out)
        return EXIT_OK

    except EnumerationCapExceeded as e:
        logging.error(str(e))
        print(f"❌ {str(e)}", file=sys.stderr)
        return EXIT_BUDGET
    except ConfigValidationError as e:
        for error in e.errors:
            print(f"❌ {error}", file=sys.stderr)
        return EXIT_CONFIG
    except (EnvironmentFailure, BridgeError, SearchAborted) as e:
        logging.error(str(e))
        print(f"❌ {str(e)}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    except (ValueError, FileNotFoundError) as e:
        logging.error(str(e))
        print(f"❌ {str(e)}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
