from pathlib import Path
from typing import List, Dict, Optional, Any
import logging
import logging.handlers
import yaml
import os
import json

from dotenv import load_dotenv

ENV_PREFIX = "FLOODLOSS_"


def ensure_directories(directories: List[Path] = None) -> None:
    """
    Ensures that a list of directories exists, creating them if necessary.

    Args:
        directories (List[Path], optional): A list of Path objects.
            If None, directories are loaded from config. Defaults to None.
    """
    if not directories:
        directories = get_config_directories()
    for directory in directories:
        Path(directory).mkdir(parents=True, exist_ok=True)


def get_config_directories() -> List[Path]:
    """
    Loads directory paths from the config file, relative to the project directory.

    Returns:
        List[Path]: A list of Path objects for the directories.
    """
    try:
        config_data = load_config()
        if config_data and "directories" in config_data:
            script_dir = Path(__file__).parent
            return [
                script_dir / Path(value)
                for value in config_data.get("directories", {}).values()
            ]
    except Exception as e:
        print(f"Error reading or parsing config file: {e}")
    return []


def load_config(config_path: Path = None) -> dict:
    """
    Loads the YAML configuration file.

    Args:
        config_path (Path, optional): The path to the config file.
            Defaults to 'config.yaml' in the same directory as this script.

    Returns:
        dict: The loaded configuration data.
    """
    if config_path is None:
        config_path = Path(__file__).parent / "config.yaml"

    try:
        with Path(config_path).open("r", encoding="utf-8") as f:
            config = yaml.safe_load(f)
            return config or {}
    except FileNotFoundError:
        print(f"Warning: Config file not found at {config_path}")
    except yaml.YAMLError as e:
        print(f"Error parsing YAML file: {e}")
    return {}


def load_yaml_file(path: Path) -> dict:
    """
    Loads an arbitrary YAML document and fails loudly, unlike load_config.

    Used for experiment configs and schema files.

    Raises:
        FileNotFoundError: If the file does not exist.
        yaml.YAMLError: If the file is not valid YAML.
    """
    with Path(path).open("r", encoding="utf-8") as f:
        return yaml.safe_load(f) or {}


def section(config: Dict[str, Any], name: str) -> Dict[str, Any]:
    """Returns a config section, or an empty dict when it is absent."""
    return dict(config.get(name) or {})


def setup_logger(
    name: str,
    config: Dict[str, Any],
    level: Optional[str] = None,
    filename: Optional[str] = None,
) -> logging.Logger:
    """
    Configure and return a file logger.

    Console output is left to the CLI's print statements so that log lines
    never interleave with summaries written to stdout.

    Args:
        name (str): Name of the logger (typically __name__).
        config (Dict[str, Any]): Configuration dictionary containing logger settings.
        level (Optional[str]): Optional log level override.
        filename (Optional[str]): Optional custom filename. If None, uses config["logger"]["filename"].

    Returns:
        logging.Logger: Configured logger instance.

    Example:
        >>> logger = setup_logger(__name__, config)
        >>> logger.info("Processing started")
    """
    logger_config = config.get("logger") or {}
    logger = logging.getLogger(name)
    log_level = level or logger_config.get("level", "INFO")
    logger.setLevel(getattr(logging, log_level))

    # Prevent adding duplicate handlers
    if logger.hasHandlers():
        logger.handlers.clear()

    formatter = logging.Formatter(
        logger_config.get(
            "format", "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
        ),
        datefmt=logger_config.get("datefmt", "%Y-%m-%d %H:%M:%S"),
    )

    log_dir = Path(__file__).resolve().parent / (
        config.get("directories", {}).get("logs", "logs")
    )
    log_dir.mkdir(parents=True, exist_ok=True)
    log_filename = filename or logger_config.get("filename", "floodloss.log")
    log_file = log_dir / log_filename

    max_bytes = int(logger_config.get("max_bytes", 1024 * 1024 * 5))
    backup_count = int(logger_config.get("backup_count", 3))

    file_handler = logging.handlers.RotatingFileHandler(
        log_file,
        mode="a",
        maxBytes=max_bytes,
        backupCount=backup_count,
        encoding="utf-8",
    )
    file_handler.setFormatter(formatter)
    logger.addHandler(file_handler)
    logger.propagate = False

    return logger


def env_override(flag: str, default: Any = None) -> Any:
    """
    Reads a FLOODLOSS_<FLAG> environment variable, loading .env first.

    Args:
        flag (str): Flag name without dashes, e.g. "seed" or "jobs".
        default (Any): Value returned when the variable is unset or empty.

    Returns:
        Any: The raw string from the environment, or default.
    """
    load_dotenv("./.env")
    value = os.getenv(f"{ENV_PREFIX}{flag.upper()}")
    if value is None or value.strip() == "":
        return default
    return value


def load_from_json(filepath: str | Path) -> dict:
    """Loads data from a JSON file.

    Args:
        filepath (str | Path): The path to the input JSON file.

    Returns:
        dict: The loaded data. Returns an empty dictionary if the file doesn't exist or is empty.
    """
    try:
        with open(filepath, "r", encoding="utf-8") as f:
            return json.load(f)
    except FileNotFoundError:
        return {}
    except (IOError, json.JSONDecodeError) as e:
        logging.getLogger(__name__).error(
            "Error loading data from JSON file %s: %s", filepath, e
        )
        return {}


def save_to_json(data: Any, filepath: str | Path) -> None:
    """Saves data to a JSON file, creating the parent directory.

    Keys are sorted so identical data always produces identical bytes.

    Args:
        data (Any): The data to save (must be JSON-serializable).
        filepath (str | Path): The path to the output JSON file.
    """
    path = Path(filepath)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(data, f, ensure_ascii=False, indent=4, sort_keys=True)
        f.write("\n")
