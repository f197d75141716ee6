#!/usr/bin/env python3
"""
Write the reference MATPOWER cases and their experiment configs
2 cases (IEEE 30-bus, IEEE 118-bus) → data/cases/*.m + data/configs/*.json
"""

import json
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parents[2]
sys.path.insert(0, str(ROOT / "backend"))

from core.config import settings          # noqa: E402
from tools.cases import builtin_case_text  # noqa: E402
from tools.grid_model import parse_matpower_case, validate  # noqa: E402

CASE_DIR   = Path(settings.CASE_DIR)
CONFIG_DIR = ROOT / "data" / "configs"

# ── Per-case experiment settings ──────────────────────────────────────────────
# Desk-scale sample counts; perturbation ±10% around the base load
CASES = {
    "case30":  {"perturbation": 0.1, "seeds": [0, 1, 2]},
    "case118": {"perturbation": 0.1, "seeds": [0, 1, 2]},
}


def write_case(name: str) -> Path:
    text = builtin_case_text(name)
    problems = validate(parse_matpower_case(text))
    if problems:
        raise SystemExit(f"❌ {name}: {'; '.join(problems)}")
    path = CASE_DIR / f"{name}.m"
    path.write_text(text, encoding="utf-8")
    return path


def write_config(name: str, options: dict) -> Path:
    config = {
        "version":       settings.CONFIG_VERSION,
        "case_path":     name,
        "output_dir":    f"../../out/{name}",
        "test_fraction": 0.1,
        "seeds":         options["seeds"],
        "sampler": {
            "perturbation": options["perturbation"],
            "n_target":     settings.DESK_SCALE_SAMPLES[name],
            "seed":         1,
        },
    }
    path = CONFIG_DIR / f"{name}.json"
    path.write_text(json.dumps(config, indent=2) + "\n", encoding="utf-8")
    return path


# ── Main ──────────────────────────────────────────────────────────────────────
if __name__ == "__main__":
    CASE_DIR.mkdir(parents=True, exist_ok=True)
    CONFIG_DIR.mkdir(parents=True, exist_ok=True)

    for name, options in CASES.items():
        print(f"✅ {write_case(name)}")
        print(f"✅ {write_config(name, options)}")

    print(f"\n🎉 Wrote {len(CASES)} cases to {CASE_DIR}/")
    print("\nNext:")
    for name in CASES:
        print(f"  python backend/main.py generate data/configs/{name}.json")
