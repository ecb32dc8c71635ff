import hashlib
import json
import logging
import os
import re
from datetime import datetime, timezone
from typing import Optional, Dict, Any, List, Iterable, Tuple

import numpy as np
import pandas as pd

from config import Config


class ConfigValidationError(ValueError):
    """Run configuration failed validation; errors lists every problem"""

    def __init__(self, errors: List[str]):
        super().__init__("Invalid run configuration: " + "; ".join(errors))
        self.errors = errors


_NUMBER = (int, float)

# Allowed keys and value types of every run configuration section
RUN_CONFIG_SCHEMA: Dict[str, Dict[str, tuple]] = {
    'space': {'K': (int,), 'k': (int,), 'm': (int,)},
    'search': {
        'epsilon': _NUMBER, 'T': (int,), 'initial_size': (int,), 'seed': (int,),
        'exploration': (str,), 'max_steps': (int,), 'features': (str, list),
    },
    'predictor': {'hidden': (list,), 'epochs': (int,), 'learning_rate': _NUMBER},
    'env': {
        'type': (str,), 'snapshot': (str,), 'command': (list, str), 'timeout': _NUMBER,
        'retries': (int,), 'parallelism': (int,), 'cache_path': (str,),
    },
    'scene': {
        'seed': (int,), 'route_radius': _NUMBER, 'route_poses': (int,), 'road_half_width': _NUMBER,
        'outer_buildings': (int,), 'inner_buildings': (int,), 'vegetation': (int,),
        'dynamic_objects': (int,), 'poles': (int,), 'dynamic_jitter': _NUMBER,
    },
    'scanner': {
        'K': (int,), 'elevation_low_deg': _NUMBER, 'elevation_high_deg': _NUMBER, 'azimuth_steps': (int,),
        'max_range': _NUMBER, 'sensor_height': _NUMBER, 'range_noise_std': _NUMBER,
    },
    'snapshot': {'eval_poses': (int,), 'map_pose_stride': (int,), 'map_voxel_size': _NUMBER},
    'icp': {
        'max_iterations': (int,), 'tolerance': _NUMBER, 'max_correspondence_distance': _NUMBER,
        'initial_correspondence_distance': _NUMBER, 'gate_decay': _NUMBER, 'normal_neighbors': (int,),
        'source_voxel_size': _NUMBER, 'robust_cutoff': _NUMBER,
    },
    'reward': {'thresholds': (list,), 'weights': (list,)},
    'noise': {'translation_std': _NUMBER, 'yaw_std_deg': _NUMBER, 'seed': (int,)},
    'output': {'dir': (str,)},
}

REQUIRED_KEYS = [('space', 'K'), ('space', 'k')]

ENV_TYPES = ('builtin-loc', 'bridge')


def validate_run_config(run_config: Dict[str, Any]) -> Tuple[bool, List[str]]:
    """
    Validate a run configuration document against the schema
    Returns (is_valid, error_messages)
    """
    errors = []

    if not isinstance(run_config, dict):
        return False, ["Run configuration must be a JSON object"]

    for name, body in run_config.items():
        if name not in RUN_CONFIG_SCHEMA:
            errors.append(f"Unknown section: {name}")
            continue
        if not isinstance(body, dict):
            errors.append(f"Section {name} must be an object")
            continue
        allowed = RUN_CONFIG_SCHEMA[name]
        for key, value in body.items():
            if key not in allowed:
                errors.append(f"Unknown key: {name}.{key}")
                continue
            # bool is an int subclass and never a valid number here
            if isinstance(value, bool) or not isinstance(value, allowed[key]):
                types = '/'.join(t.__name__ for t in allowed[key])
                errors.append(f"{name}.{key} must be of type {types}")

    for name, key in REQUIRED_KEYS:
        body = run_config.get(name)
        if not isinstance(body, dict) or key not in body:
            errors.append(f"Missing required key: {name}.{key}")

    env = run_config.get('env', {})
    if isinstance(env, dict):
        env_type = env.get('type', 'builtin-loc')
        if env_type not in ENV_TYPES:
            errors.append(f"env.type must be one of {', '.join(ENV_TYPES)}")
        if env_type == 'bridge' and not env.get('command'):
            errors.append("Missing required key: env.command (required when env.type is bridge)")

    space = run_config.get('space', {})
    scanner = run_config.get('scanner', {})
    if isinstance(space, dict) and isinstance(scanner, dict):
        if 'K' in scanner and 'K' in space and scanner['K'] != space['K']:
            errors.append(f"scanner.K ({scanner['K']}) must equal space.K ({space['K']})")

    return len(errors) == 0, errors


def load_run_config(path: str) -> Dict[str, Any]:
    """Read and validate a run configuration file; raises ConfigValidationError"""
    try:
        with open(path) as handle:
            run_config = json.load(handle)
    except FileNotFoundError:
        raise ConfigValidationError([f"Configuration file not found: {path}"])
    except json.JSONDecodeError as e:
        raise ConfigValidationError([f"Configuration file is not valid JSON: {str(e)}"])

    is_valid, errors = validate_run_config(run_config)
    if not is_valid:
        raise ConfigValidationError(errors)
    return run_config


def section(run_config: Dict[str, Any], name: str) -> Dict[str, Any]:
    return dict(run_config.get(name, {}))


def _canonical(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(k): _canonical(v) for k, v in sorted(value.items(), key=lambda kv: str(kv[0]))}
    if isinstance(value, (list, tuple)):
        return [_canonical(v) for v in value]
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, float) and not np.isfinite(value):
        return repr(value)
    return value


def content_hash(payload: Dict[str, Any], arrays: Optional[Dict[str, np.ndarray]] = None) -> str:
    """SHA-256 over canonical JSON of payload plus dtype, shape and bytes of every array"""
    digest = hashlib.sha256()
    digest.update(json.dumps(_canonical(payload), sort_keys=True, separators=(',', ':')).encode())
    for name in sorted(arrays or {}):
        array = np.ascontiguousarray(arrays[name])
        digest.update(name.encode())
        digest.update(str(array.dtype).encode())
        digest.update(str(array.shape).encode())
        digest.update(array.tobytes())
    return digest.hexdigest()


def format_beam_ids(ids: Iterable[int]) -> str:
    """Display form of a configuration, e.g. '[7, 8, 9, 10]'"""
    ids = ids.ids if hasattr(ids, 'ids') else ids
    return '[' + ', '.join(str(int(i)) for i in ids) + ']'


BEAM_LIST_PATTERN = re.compile(r'\[?\s*\d+(?:\s*[,-]\s*\d+|\s+\d+)*\s*\]?')


def parse_beam_ids(text: str) -> List[int]:
    """Accepts '7,8,9,10', '7 8 9 10', '[7, 8, 9, 10]' or '7-8-9-10'.

    Signs, fractions and any other text raise ValueError.
    """
    text = (text or '').strip()
    if not BEAM_LIST_PATTERN.fullmatch(text):
        raise ValueError(f"Beam IDs must be unsigned whole numbers, got {text!r}")
    return [int(n) for n in re.findall(r'\d+', text)]


def best_so_far(values: Iterable[float]) -> np.ndarray:
    """Running maximum; non-decreasing by construction"""
    values = np.asarray(list(values), dtype=float)
    if values.size == 0:
        return values
    return np.maximum.accumulate(values)


def output_header(config_hash: str) -> Dict[str, str]:
    return {'tool': Config.APP_NAME, 'tool_version': Config.APP_VERSION, 'config_hash': config_hash}


def write_csv(frame: pd.DataFrame, path: str, header: Optional[Dict[str, str]] = None) -> None:
    """CSV with '# key=value' header lines; no timestamps so reruns are byte-identical"""
    with open(path, 'w', newline='') as handle:
        for key, value in (header or {}).items():
            handle.write(f"# {key}={value}\n")
        frame.to_csv(handle, index=False, lineterminator='\n')


def read_csv(path: str) -> Tuple[pd.DataFrame, Dict[str, str]]:
    header = {}
    with open(path) as handle:
        for line in handle:
            if not line.startswith('# '):
                break
            key, _, value = line[2:].rstrip('\n').partition('=')
            header[key] = value
    return pd.read_csv(path, skiprows=len(header)), header


def write_json(payload: Dict[str, Any], path: str) -> None:
    with open(path, 'w') as handle:
        json.dump(_canonical(payload), handle, indent=2, sort_keys=True)
        handle.write('\n')


def write_sidecar(path: str, command: str, extra: Optional[Dict[str, Any]] = None) -> str:
    """Timestamps and run context next to a data file, never inside it"""
    sidecar = f"{path}.run.json"
    info = {
        'command': command,
        'created_at': datetime.now(timezone.utc).isoformat(),
        'tool_version': Config.APP_VERSION,
        'pid': os.getpid(),
    }
    info.update(extra or {})
    try:
        write_json(info, sidecar)
    except OSError as e:
        logging.warning(f"Could not write sidecar {sidecar}: {str(e)}")
    return sidecar
