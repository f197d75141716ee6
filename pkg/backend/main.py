"""
OpfIQ - Optimal Power Flow Intelligence Toolkit
Command-line application
"""

from dotenv import load_dotenv
load_dotenv()

import sys
import logging
from typing import List, Optional

from core.config import settings
from api.common import EXIT_USAGE
from api.routes import build_parser

logging.basicConfig(
    level=settings.LOG_LEVEL,
    format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    stream=sys.stderr,
)
logger = logging.getLogger(__name__)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        # argparse exits 2 on usage errors and 0 on --help
        return EXIT_USAGE if e.code else 0

    if args.log_level:
        level = logging.getLevelName(args.log_level.upper())
        if not isinstance(level, int):
            logger.error(f"❌ unknown log level {args.log_level}")
            return EXIT_USAGE
        logging.getLogger().setLevel(level)

    logger.debug(f"🚀 {settings.APP_NAME} v{settings.APP_VERSION}: {args.command}")
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
