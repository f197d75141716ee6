# backend/api/validate.py
import logging

from api.common import EXIT_DOMAIN, EXIT_OK, command, emit
from tools.cases import read_case
from tools.grid_model import validate

logger = logging.getLogger(__name__)


def register(subparsers, common):
    p = subparsers.add_parser("validate", parents=[common], help="parse and validate a MATPOWER case")
    p.add_argument("case", help="path to a .m case file or a built-in case name")
    p.set_defaults(handler=cmd_validate)


@command
def cmd_validate(args) -> int:
    net = read_case(args.case)
    violations = validate(net)
    emit({
        "case":       net.name,
        "buses":      net.n_bus,
        "generators": len(net.generators),
        "branches":   len(net.branches),
        "valid":      not violations,
        "violations": violations,
    })
    if violations:
        for v in violations:
            logger.error(f"❌ {v}")
        return EXIT_DOMAIN
    logger.info(f"✅ {net.name} is valid ({net.n_bus} buses)")
    return EXIT_OK
