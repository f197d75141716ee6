# backend/api/bench.py
import logging
from pathlib import Path

from api.common import EXIT_DOMAIN, EXIT_OK, command, emit, load_config
from core.errors import ConfigError
from tools.cases import read_case
from tools.datagen import load_dataset
from tools.experiments import run_warm_start_benchmark, save_report
from tools.neural import load_model
from tools.opf import OpfOptions

logger = logging.getLogger(__name__)


def register(subparsers, common):
    p = subparsers.add_parser("bench-warmstart", parents=[common], help="paired cold/warm ACOPF benchmark")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("model", nargs="?", default=None, help="trained constraint model JSON")
    p.add_argument("--oracle-labels", action="store_true", help="warm start from the stored true active sets")
    p.add_argument("--predictions", choices=["model", "oracle", "zeros", "random"], default=None)
    p.add_argument("--limit", type=int, default=None, help="benchmark at most this many test instances")
    p.set_defaults(handler=cmd_bench_warmstart)


@command
def cmd_bench_warmstart(args) -> int:
    cfg = load_config(args)
    mode = "oracle" if args.oracle_labels else (args.predictions or "model")
    model = None
    if mode == "model":
        if not args.model:
            raise ConfigError("a model path is required unless --oracle-labels or --predictions is given")
        if not Path(args.model).is_file():
            raise ConfigError(f"model file not found: {args.model}")
        model = load_model(args.model)

    ds = load_dataset(cfg.resolved_dataset_path())
    net = read_case(cfg.case_path)
    report = run_warm_start_benchmark(
        ds, net, model,
        predictions=mode,
        opts=OpfOptions(**cfg.opf.model_dump()),
        test_fraction=cfg.test_fraction,
        split_seed=cfg.sampler.seed,
        limit=args.limit,
    )
    path = save_report(report, cfg.output_dir, ds.manifest.case_name, f"warmstart-{mode}", cfg.sampler.seed)
    emit({
        "report":               str(path),
        "predictions":          mode,
        "pairs":                len(report.pairs),
        "failures":             report.failures,
        "fraction_improved":    report.fraction_improved,
        "mean_iteration_ratio": report.mean_iteration_ratio,
    })
    return EXIT_OK if report.pairs else EXIT_DOMAIN
