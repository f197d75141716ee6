# backend/api/report.py
import sys
import logging
from pathlib import Path

from api.common import EXIT_DOMAIN, EXIT_OK, command
from core.config import settings
from tools.experiments import summarize_reports

logger = logging.getLogger(__name__)


def register(subparsers, common):
    p = subparsers.add_parser("report", parents=[common], help="summarise every report in the output directory")
    p.set_defaults(handler=cmd_report)


@command
def cmd_report(args) -> int:
    out = Path(args.out or settings.OUTPUT_DIR)
    table = summarize_reports(out)
    if table.empty:
        logger.warning(f"⚠️  no reports found in {out}")
        return EXIT_DOMAIN
    table.to_csv(out / "summary.csv", index=False, float_format="%.17g", lineterminator="\n")
    table.to_csv(sys.stdout, index=False, float_format="%.6g", lineterminator="\n")
    logger.info(f"📊 {len(table)} reports summarised into {out / 'summary.csv'}")
    return EXIT_OK
