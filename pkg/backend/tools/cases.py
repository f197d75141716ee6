# backend/tools/cases.py

"""
Reference test cases (IEEE 30-bus, IEEE 118-bus) sourced from pypower's case data.
"""

import logging
from pathlib import Path
from typing import Dict, Union

from pypower.case30 import case30
from pypower.case118 import case118

from core.config import settings
from core.errors import ConfigError
from tools.grid_model import Network, format_matpower, parse_matpower_case

logger = logging.getLogger(__name__)

BUILTIN_CASES = {
    "case30":  case30,
    "case118": case118,
}


def builtin_case_text(name: str) -> str:
    """MATPOWER text for a bundled case, rendered from pypower's ppc dictionary."""
    if name not in BUILTIN_CASES:
        raise ConfigError(f"unknown built-in case '{name}' (known: {', '.join(BUILTIN_CASES)})")
    ppc: Dict = BUILTIN_CASES[name]()
    tables = {key: ppc[key].tolist() for key in ("bus", "gen", "branch", "gencost")}
    return format_matpower(name, float(ppc["baseMVA"]), tables)


def load_builtin_case(name: str) -> Network:
    return parse_matpower_case(builtin_case_text(name))


def read_case(source: Union[str, Path]) -> Network:
    """Load a case from a .m file path, then the case directory, then the built-in cases."""
    path = Path(source)
    if not path.is_file():
        path = Path(settings.CASE_DIR) / f"{source}.m"
    if path.is_file():
        logger.debug(f"Reading case file {path}")
        return parse_matpower_case(path.read_text(encoding="utf-8"))
    if str(source) in BUILTIN_CASES:
        return load_builtin_case(str(source))
    raise ConfigError(f"case file not found: {source}")
