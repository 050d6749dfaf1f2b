"""
Centralized configuration management for relational pretraining runs.
Loads experiment settings from config.toml and machine-local overrides from .env files.
"""
import copy
import os
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Optional, Dict, Any
from dotenv import load_dotenv
from pydantic import ValidationError
import logging
import sys

# Handle Python version compatibility for TOML
if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from pipeline.error_handling import ConfigurationError
from shared.models import ExperimentConfig, LinearEvalConfig

SCHEMA_VERSION = 1


@dataclass
class AppConfig:
    """Application-level configuration."""
    data_directory: str = "data"
    runs_directory: str = "runs"
    log_level: str = "INFO"
    device: str = "auto"  # auto, cpu, cuda, cuda:N
    num_workers: int = 4
    progress_bars: bool = True
    download_retries: int = 3
    retry_delay_seconds: float = 2.0


@dataclass
class KnnConfig:
    """Weighted kNN evaluation settings."""
    k: int = 200
    temperature: float = 0.1


@dataclass
class SweepConfig:
    """Grid sweep defaults."""
    parallel: int = 1
    eval: str = "knn"
    budget_epochs: Optional[int] = None


@dataclass
class Config:
    """Master configuration container."""
    app: AppConfig
    experiment: ExperimentConfig
    linear_eval: LinearEvalConfig
    knn: KnnConfig = field(default_factory=KnnConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)

    def to_dict(self) -> Dict[str, Any]:
        """Convert config to dictionary for serialization."""
        return {
            "schema_version": SCHEMA_VERSION,
            "app": asdict(self.app),
            "experiment": self.experiment.model_dump(mode="json"),
            "linear_eval": self.linear_eval.model_dump(mode="json"),
            "knn": asdict(self.knn),
            "sweep": asdict(self.sweep),
        }


def deep_merge(base: Dict[str, Any], overrides: Dict[str, Any]) -> Dict[str, Any]:
    """Recursively merge ``overrides`` into a copy of ``base``."""
    merged = copy.deepcopy(base)
    for key, value in overrides.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = deep_merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def _format_validation_error(section: str, error: ValidationError) -> str:
    details = "; ".join(
        f"{'.'.join(str(p) for p in e['loc']) or section}: {e['msg']}" for e in error.errors()
    )
    return f"Invalid [{section}] configuration: {details}"


def build_experiment(section: Dict[str, Any], data_directory: str) -> ExperimentConfig:
    """Validate an experiment table, defaulting the dataset root to the data directory."""
    section = copy.deepcopy(section)
    dataset = section.setdefault("dataset", {})
    if not isinstance(dataset, dict) or "name" not in dataset:
        raise ConfigurationError("Invalid [experiment] configuration: dataset.name is required")
    dataset.setdefault("root_path", data_directory)
    try:
        return ExperimentConfig.model_validate(section)
    except ValidationError as e:
        raise ConfigurationError(_format_validation_error("experiment", e)) from e


def load_config(
    config_file: str = "config.toml",
    env_file: Optional[str] = None,
    overrides: Optional[Dict[str, Any]] = None,
) -> Config:
    """
    Load configuration from TOML file and environment variables.

    Args:
        config_file: Path to TOML configuration file.
        env_file: Optional path to .env file. If None, uses default discovery.
        overrides: Nested mapping applied on top of the TOML document
            (command-line flags), e.g. {"experiment": {"epochs": 2}}.

    Returns:
        Validated Config instance.

    Raises:
        ConfigurationError: If the file is missing, unparsable or invalid.
    """
    # Machine-local overrides (data locations, device)
    if env_file:
        load_dotenv(env_file)
    else:
        load_dotenv()

    try:
        with open(config_file, 'rb') as f:
            toml_config = tomllib.load(f)
    except FileNotFoundError:
        raise ConfigurationError(f"Configuration file '{config_file}' not found")
    except Exception as e:
        raise ConfigurationError(f"Failed to parse TOML configuration file '{config_file}': {e}")

    if overrides:
        toml_config = deep_merge(toml_config, overrides)

    version = toml_config.get('schema_version', SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigurationError(f"Unsupported config schema_version {version} (expected {SCHEMA_VERSION})")

    app_section = toml_config.get('app', {})
    app_config = AppConfig(
        data_directory=os.getenv('RESSL_DATA_DIR', app_section.get('data_directory', 'data')),
        runs_directory=os.getenv('RESSL_RUNS_DIR', app_section.get('runs_directory', 'runs')),
        log_level=os.getenv('RESSL_LOG_LEVEL', app_section.get('log_level', 'INFO')),
        device=os.getenv('RESSL_DEVICE', app_section.get('device', 'auto')),
        num_workers=int(os.getenv('RESSL_NUM_WORKERS', app_section.get('num_workers', 4))),
        progress_bars=app_section.get('progress_bars', True),
        download_retries=app_section.get('download_retries', 3),
        retry_delay_seconds=app_section.get('retry_delay_seconds', 2.0),
    )

    experiment = build_experiment(toml_config.get('experiment', {}), app_config.data_directory)

    try:
        linear_eval = LinearEvalConfig.model_validate(toml_config.get('linear_eval', {}))
    except ValidationError as e:
        raise ConfigurationError(_format_validation_error("linear_eval", e)) from e

    knn_section = toml_config.get('knn', {})
    knn_config = KnnConfig(
        k=knn_section.get('k', 200),
        temperature=knn_section.get('temperature', 0.1),
    )

    sweep_section = toml_config.get('sweep', {})
    sweep_config = SweepConfig(
        parallel=sweep_section.get('parallel', 1),
        eval=sweep_section.get('eval', 'knn'),
        budget_epochs=sweep_section.get('budget_epochs'),
    )

    return Config(
        app=app_config,
        experiment=experiment,
        linear_eval=linear_eval,
        knn=knn_config,
        sweep=sweep_config,
    )


def setup_logging(config: AppConfig, log_file: Optional[Path] = None) -> None:
    """Configure logging based on configuration."""
    if log_file is None:
        log_file = Path(config.runs_directory) / 'logs' / 'ressl.log'
    Path(log_file).parent.mkdir(parents=True, exist_ok=True)

    logging.basicConfig(
        level=getattr(logging, config.log_level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        handlers=[
            logging.StreamHandler(sys.stderr),
            logging.FileHandler(log_file, mode='a')
        ],
        force=True,
    )
