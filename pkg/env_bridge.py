"""
External environment bridge.

Each evaluation spawns the configured program, writes one JSON request line
{"beam_ids": [...]} to its stdin and reads one JSON response line
{"value": x} with x in [0, 1] from its stdout. Values are cached on disk in
an append-only JSON-lines file keyed by (command hash, canonical key), so an
interrupted search resumes without paying for known configurations again.
"""

import hashlib
import json
import logging
import math
import os
import shlex
import subprocess
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, asdict
from datetime import datetime, timezone
from typing import Any, Dict, List, Optional, Sequence

from beam_space import BeamConfig, canonical_key
from config import Config
from utils import format_beam_ids

ERROR_KINDS = ('exit', 'malformed', 'range', 'timeout')


class BridgeError(RuntimeError):
    """External program failed; kind is one of exit, malformed, range, timeout"""

    def __init__(self, kind: str, config: BeamConfig, message: str, raw_output: str = ''):
        super().__init__(f"Bridge {kind} error for {format_beam_ids(config)}: {message}")
        self.kind = kind
        self.config = config
        self.raw_output = raw_output


@dataclass(frozen=True)
class BridgeSpec:
    command: tuple
    timeout: float = Config.BRIDGE_TIMEOUT_SECONDS
    cache_path: Optional[str] = None
    retries: int = Config.BRIDGE_RETRIES
    parallelism: int = Config.BRIDGE_PARALLELISM

    def __post_init__(self):
        command = self.command
        if isinstance(command, str):
            command = shlex.split(command)
        object.__setattr__(self, 'command', tuple(str(part) for part in command))
        if not self.command:
            raise ValueError("Bridge command must not be empty")
        if self.timeout <= 0:
            raise ValueError(f"Bridge timeout must be positive, got {self.timeout}")
        if self.retries < 0 or self.parallelism < 1:
            raise ValueError("Bridge retries must be non-negative and parallelism at least 1")

    @property
    def command_hash(self) -> str:
        return hashlib.sha256(json.dumps(list(self.command)).encode()).hexdigest()

    def resolved_cache_path(self) -> str:
        if self.cache_path:
            return self.cache_path
        return os.path.join(Config.CACHE_DIR or Config.OUTPUT_DIR, Config.BRIDGE_CACHE_FILE)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['command'] = list(self.command)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'BridgeSpec':
        return cls(**data)


class BridgeCache:
    """Append-only JSON-lines value cache.

    Each put appends one line with a single write in append mode, so
    several processes can share the file without dropping each other's
    entries. A miss re-reads whatever other writers appended since.
    """

    def __init__(self, path: str):
        self.path = path
        self._lock = threading.Lock()
        self._values: Dict[tuple, float] = {}
        self._offset = 0
        self._lines_read = 0
        self._load()

    def _load(self):
        """Read entries appended after the last read; a trailing partial line waits for the next read"""
        if not os.path.exists(self.path):
            return
        before = len(self._values)
        with open(self.path, 'rb') as handle:
            handle.seek(self._offset)
            chunk = handle.read()
        complete = chunk[:chunk.rfind(b'\n') + 1]
        self._offset += len(complete)
        for raw in complete.decode('utf-8', errors='replace').splitlines():
            self._lines_read += 1
            line = raw.strip()
            if not line:
                continue
            try:
                entry = json.loads(line)
                self._values[(entry['command'], entry['key'])] = float(entry['value'])
            except (ValueError, KeyError, TypeError) as e:
                logging.warning(f"Skipping bad cache line {self._lines_read} in {self.path}: {str(e)}")
        if len(self._values) > before:
            logging.debug(f"Loaded {len(self._values) - before} cached bridge values from {self.path}")

    def get(self, command_hash: str, key: str) -> Optional[float]:
        with self._lock:
            value = self._values.get((command_hash, key))
            if value is None:
                self._load()
                value = self._values.get((command_hash, key))
            return value

    def put(self, command_hash: str, key: str, value: float) -> None:
        entry = {
            'command': command_hash,
            'key': key,
            'value': value,
            'timestamp': datetime.now(timezone.utc).isoformat(),
        }
        line = json.dumps(entry, sort_keys=True) + '\n'
        with self._lock:
            self._values[(command_hash, key)] = value
            os.makedirs(os.path.dirname(os.path.abspath(self.path)), exist_ok=True)
            with open(self.path, 'a') as handle:
                handle.write(line)

    def __len__(self) -> int:
        with self._lock:
            self._load()
            return len(self._values)


def _parse_response(s: BeamConfig, stdout: str) -> float:
    lines = [line for line in stdout.splitlines() if line.strip()]
    if not lines:
        raise BridgeError('malformed', s, "empty response", stdout)
    try:
        response = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise BridgeError('malformed', s, f"response is not JSON: {str(e)}", stdout)
    if not isinstance(response, dict) or 'value' not in response:
        raise BridgeError('malformed', s, "response has no 'value' field", stdout)

    value = response['value']
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
        raise BridgeError('malformed', s, f"value {value!r} is not a finite number", stdout)
    if not 0.0 <= value <= 1.0:
        raise BridgeError('range', s, f"value {value} outside [0, 1]", stdout)
    return float(value)


def run_command(s: BeamConfig, spec: BridgeSpec) -> float:
    """One spawn of the external program; raises BridgeError"""
    request = json.dumps({'beam_ids': list(s.ids)}) + '\n'
    try:
        completed = subprocess.run(
            list(spec.command),
            input=request,
            capture_output=True,
            text=True,
            timeout=spec.timeout,
        )
    except subprocess.TimeoutExpired as e:
        raw = e.stdout.decode() if isinstance(e.stdout, bytes) else (e.stdout or '')
        raise BridgeError('timeout', s, f"no response within {spec.timeout} s", raw)
    except OSError as e:
        raise BridgeError('exit', s, f"could not start {spec.command[0]}: {str(e)}")

    if completed.returncode != 0:
        raise BridgeError('exit', s, f"exit code {completed.returncode}: {completed.stderr.strip()[:500]}",
                          completed.stdout)
    return _parse_response(s, completed.stdout)


class BridgeEnvironment:
    """Environment that delegates every value to an external program"""

    def __init__(self, spec: BridgeSpec, cache: Optional[BridgeCache] = None):
        self.spec = spec
        self.cache = cache if cache is not None else BridgeCache(spec.resolved_cache_path())
        self.command_hash = spec.command_hash
        self.env_hash = f"bridge:{self.command_hash}"
        self.descriptor = f"bridge:{' '.join(spec.command)}"
        self.workers = spec.parallelism
        self.spawn_count = 0
        self._count_lock = threading.Lock()

    def value(self, s: BeamConfig) -> float:
        key = canonical_key(s)
        cached = self.cache.get(self.command_hash, key)
        if cached is not None:
            logging.debug(f"Bridge cache hit for {key}")
            return cached

        attempts = self.spec.retries + 1
        for attempt in range(1, attempts + 1):
            with self._count_lock:
                self.spawn_count += 1
            try:
                value = run_command(s, self.spec)
                break
            except BridgeError as e:
                if attempt == attempts:
                    logging.error(str(e))
                    raise
                logging.warning(f"{str(e)}; retrying ({attempt}/{self.spec.retries})")

        self.cache.put(self.command_hash, key, value)
        return value

    def evaluate_many(self, configs: Sequence[BeamConfig]) -> List[float]:
        """Distinct configurations run concurrently up to spec.parallelism; order preserved"""
        if self.spec.parallelism <= 1 or len(configs) <= 1:
            return [self.value(s) for s in configs]
        with ThreadPoolExecutor(max_workers=self.spec.parallelism) as pool:
            return list(pool.map(self.value, configs))


def external_value(s: BeamConfig, spec: BridgeSpec, cache: Optional[BridgeCache] = None) -> float:
    """Value of s from the external program, served from the on-disk cache when known"""
    return BridgeEnvironment(spec, cache).value(s)
