# backend/api/common.py
import json
import sys
import logging
from functools import wraps
from typing import Optional

from pydantic import ValidationError

from core.config import ExperimentConfig, load_experiment_config
from core.errors import ConfigError, OpfIqError

logger = logging.getLogger(__name__)

EXIT_OK     = 0
EXIT_DOMAIN = 1
EXIT_USAGE  = 2


def command(handler):
    """Translate OpfIQ errors into exit statuses, the way routes turn them into HTTP codes."""
    @wraps(handler)
    def wrapper(args) -> int:
        try:
            return handler(args)
        except OpfIqError as e:
            logger.error(f"❌ {args.command}: {e}")
            return e.exit_status
        except ValidationError as e:
            logger.error(f"❌ {args.command}: invalid option: {e}")
            return EXIT_USAGE
        except Exception as e:
            logger.exception(f"❌ {args.command} failed: {e}")
            return EXIT_DOMAIN
    return wrapper


def emit(document) -> None:
    """Data goes to stdout only; logs stay on stderr."""
    sys.stdout.write(json.dumps(document, indent=2, default=_jsonable) + "\n")
    sys.stdout.flush()


def _jsonable(value):
    if hasattr(value, "tolist"):
        return value.tolist()
    if hasattr(value, "model_dump"):
        return value.model_dump(mode="json")
    raise TypeError(f"cannot serialise {type(value).__name__}")


def load_config(args, extra: Optional[dict] = None) -> ExperimentConfig:
    overrides = {"output_dir": getattr(args, "out", None), **(extra or {})}
    if getattr(args, "seed", None) is not None:
        overrides["sampler.seed"] = args.seed
    try:
        return load_experiment_config(args.config, overrides)
    except ConfigError:
        raise
    except OSError as e:
        raise ConfigError(f"cannot read config {args.config}: {e}")
