import os
from typing import Optional
from dotenv import load_dotenv

load_dotenv()  # Load environment variables from .env file if it exists

class Config:
    """Configuration class for the LiDAR beam configuration optimizer"""

    # Application Configuration
    APP_NAME: str = "LiDAR Beam Configuration Optimizer"
    APP_VERSION: str = "1.0.0"

    # Logging Configuration
    LOG_LEVEL: str = os.environ.get('LOG_LEVEL', 'INFO')

    # Output Configuration
    OUTPUT_DIR: str = os.environ.get('BEAMOPT_OUTPUT_DIR', 'runs')
    CACHE_DIR: Optional[str] = os.environ.get('BEAMOPT_CACHE_DIR')
    SNAPSHOT_VERSION: str = "2"
    SNAPSHOT_FILE_NAME: str = os.environ.get('SNAPSHOT_FILE_NAME', 'snapshot.npz')

    # Solution space
    ENUMERATION_CAP: int = int(os.environ.get('ENUMERATION_CAP', '2000000'))
    ENUMERATION_WARN_AT: int = int(os.environ.get('ENUMERATION_WARN_AT', '250000'))

    # Search Configuration
    DEFAULT_EPSILON: float = float(os.environ.get('DEFAULT_EPSILON', '0.2'))
    DEFAULT_INITIAL_SIZE: int = int(os.environ.get('DEFAULT_INITIAL_SIZE', '10'))
    DEFAULT_EXPLORATION: str = os.environ.get('DEFAULT_EXPLORATION', 'state')
    MAX_STEPS_FACTOR: int = int(os.environ.get('MAX_STEPS_FACTOR', '50'))
    EVAL_WORKERS: int = int(os.environ.get('EVAL_WORKERS', '1'))

    # Value predictor
    PREDICTOR_HIDDEN: tuple = (128, 64)
    PREDICTOR_EPOCHS: int = int(os.environ.get('PREDICTOR_EPOCHS', '10'))
    PREDICTOR_LEARNING_RATE: float = float(os.environ.get('PREDICTOR_LEARNING_RATE', '1e-3'))
    ADAM_BETA1: float = float(os.environ.get('ADAM_BETA1', '0.9'))
    ADAM_BETA2: float = float(os.environ.get('ADAM_BETA2', '0.999'))
    ADAM_EPSILON: float = float(os.environ.get('ADAM_EPSILON', '1e-8'))

    # Equidistant baseline elevation window (degrees)
    EQUIDISTANT_LOW_DEG: float = float(os.environ.get('EQUIDISTANT_LOW_DEG', '-6.67'))
    EQUIDISTANT_HIGH_DEG: float = float(os.environ.get('EQUIDISTANT_HIGH_DEG', '6.67'))

    # External environment bridge
    BRIDGE_TIMEOUT_SECONDS: float = float(os.environ.get('BRIDGE_TIMEOUT_SECONDS', '86400'))
    BRIDGE_RETRIES: int = int(os.environ.get('BRIDGE_RETRIES', '0'))
    BRIDGE_PARALLELISM: int = int(os.environ.get('BRIDGE_PARALLELISM', '1'))
    BRIDGE_CACHE_FILE: str = os.environ.get('BRIDGE_CACHE_FILE', 'bridge_cache.jsonl')

    @classmethod
    def validate_configuration(cls) -> bool:
        """Validate that numeric settings are usable"""
        problems = []

        if cls.ENUMERATION_CAP < 1:
            problems.append('ENUMERATION_CAP')
        if not 0.0 <= cls.DEFAULT_EPSILON <= 1.0:
            problems.append('DEFAULT_EPSILON')
        if cls.DEFAULT_INITIAL_SIZE < 1:
            problems.append('DEFAULT_INITIAL_SIZE')
        if cls.DEFAULT_EXPLORATION not in ('state', 'action'):
            problems.append('DEFAULT_EXPLORATION')
        if cls.PREDICTOR_EPOCHS < 1:
            problems.append('PREDICTOR_EPOCHS')
        if cls.PREDICTOR_LEARNING_RATE <= 0:
            problems.append('PREDICTOR_LEARNING_RATE')
        if cls.EVAL_WORKERS < 1 or cls.BRIDGE_PARALLELISM < 1:
            problems.append('EVAL_WORKERS/BRIDGE_PARALLELISM')
        if cls.BRIDGE_TIMEOUT_SECONDS <= 0:
            problems.append('BRIDGE_TIMEOUT_SECONDS')

        if problems:
            print(f"Invalid configuration values: {', '.join(problems)}")

        return len(problems) == 0

    @classmethod
    def get_summary(cls) -> dict:
        """Get configuration summary"""
        return {
            'app_name': cls.APP_NAME,
            'app_version': cls.APP_VERSION,
            'log_level': cls.LOG_LEVEL,
            'output_dir': cls.OUTPUT_DIR,
            'cache_dir': cls.CACHE_DIR,
            'enumeration_cap': cls.ENUMERATION_CAP,
            'default_epsilon': cls.DEFAULT_EPSILON,
            'default_initial_size': cls.DEFAULT_INITIAL_SIZE,
            'default_exploration': cls.DEFAULT_EXPLORATION,
            'max_steps_factor': cls.MAX_STEPS_FACTOR,
            'eval_workers': cls.EVAL_WORKERS,
            'predictor_hidden': list(cls.PREDICTOR_HIDDEN),
            'predictor_epochs': cls.PREDICTOR_EPOCHS,
            'predictor_learning_rate': cls.PREDICTOR_LEARNING_RATE,
            'adam': [cls.ADAM_BETA1, cls.ADAM_BETA2, cls.ADAM_EPSILON],
            'bridge_timeout_seconds': cls.BRIDGE_TIMEOUT_SECONDS,
            'bridge_retries': cls.BRIDGE_RETRIES,
            'bridge_parallelism': cls.BRIDGE_PARALLELISM,
        }
