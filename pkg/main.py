import logging
import os
import sys

from pydantic import ValidationError

# Add the current directory to the path
sys.path.append(os.path.dirname(os.path.abspath(__file__)))

from cli.commands import COMMANDS, EXIT_FAILURE, EXIT_USAGE
from cli.parser import build_parser, build_run_config
from core.errors import AdaScanError, ContractViolation, IngestionError

LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"

logger = logging.getLogger("adascan")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=args.log_level, format=LOG_FORMAT, stream=sys.stderr, force=True)

    try:
        cfg = build_run_config(args)
    except (ValidationError, ContractViolation) as e:
        parser.error(str(e))
    except OSError as e:
        logger.error("cannot read configuration: %s", e)
        return EXIT_USAGE

    try:
        return COMMANDS[cfg.command](cfg)
    except IngestionError as e:
        logger.error("%s", e)
        return EXIT_FAILURE
    except ContractViolation as e:
        logger.error("usage: %s", e)
        return EXIT_USAGE
    except (AdaScanError, OSError) as e:
        logger.error("%s failed: %s", cfg.command, e)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
