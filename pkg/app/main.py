import logging
import sys
from typing import List, Optional

from app.cli.commands import build_parser, dispatch
from app.config.settings import settings
from app.errors import BootViTError, ConfigurationError, UsageError

logger = logging.getLogger(__name__)


def configure_logging(verbose: bool = False) -> None:
    level = logging.DEBUG if verbose else getattr(logging, settings.log_level.upper(), logging.INFO)
    logging.basicConfig(
        level=level,
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s"
    )


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.verbose)
    debug = args.debug or settings.debug

    logger.info(f"Starting {settings.app_name} v{settings.app_version}: {args.command}")
    logger.debug(f"Settings: {settings.model_dump()}")
    try:
        return dispatch(args, settings)
    except (UsageError, ConfigurationError) as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        if debug:
            raise
        return 2
    except BootViTError as e:
        logger.error(f"{type(e).__name__}: {str(e)}")
        if debug:
            raise
        return 1
    except KeyboardInterrupt:
        logger.warning("Interrupted")
        return 130
    except Exception as e:
        if debug:
            raise
        logger.error(f"Unexpected error: {str(e)}")
        return 1


if __name__ == "__main__":
    sys.exit(main())
