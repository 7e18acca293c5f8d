import json
import sys
import logging
import os

from dotenv import load_dotenv


def setup_logging():
    """Setup logging based on environment variables"""
    load_dotenv()
    log_level = os.getenv('LOG_LEVEL', 'info').upper()
    app_env = os.getenv('APP_ENV', 'production').lower()

    level_map = {
        'DEBUG': logging.DEBUG,
        'INFO': logging.INFO,
        'WARNING': logging.WARNING,
        'ERROR': logging.ERROR,
        'CRITICAL': logging.CRITICAL
    }

    if app_env == 'development' and log_level == 'DEBUG':
        logging.basicConfig(
            level=level_map.get(log_level, logging.INFO),
            format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
            datefmt="%Y-%m-%d %H:%M:%S"
        )
    elif app_env == 'development':
        logging.basicConfig(
            level=level_map.get(log_level, logging.INFO),
            format="%(levelname)s: %(message)s"
        )
    else:
        logging.basicConfig(
            level=logging.ERROR,
            format="%(levelname)s: %(message)s"
        )

    return logging.getLogger("hpseg")

logger = setup_logging()


class HPSegError(Exception):
    """Base class for every error raised by the hpseg package."""

    kind = "hpseg-error"


class EncodingError(HPSegError):
    kind = "encoding-error"


class ContractError(HPSegError):
    kind = "contract-error"


class ShapeError(HPSegError):
    kind = "shape-error"


class PhantomSpecError(HPSegError):
    kind = "phantom-spec-error"


class PipelineError(HPSegError):
    kind = "pipeline-error"


class SlabIndexError(HPSegError, IndexError):
    kind = "slab-index-error"


class AugmentationConfigError(HPSegError):
    kind = "augmentation-config-error"


class SamplerError(HPSegError):
    kind = "sampler-error"


class CropError(HPSegError):
    kind = "crop-error"


class ConfigError(HPSegError):
    kind = "config-error"


class CheckpointError(HPSegError):
    kind = "checkpoint-error"


class VolumeFormatError(HPSegError):
    kind = "volume-format-error"


class TrainingError(HPSegError):
    kind = "training-error"


class BatchCompositionError(TrainingError):
    kind = "batch-composition-error"


def handle_error(message, exit_code=1, kind="runtime-error"):
    """Report a structured error on stderr and exit"""
    payload = json.dumps({"error": kind, "message": str(message)})
    print(f"ERROR: {payload}", file=sys.stderr)
    sys.exit(exit_code)
