# backend/api/train.py
import logging
from pathlib import Path

from api.common import EXIT_DOMAIN, EXIT_OK, command, emit, load_config
from tools.cases import read_case
from tools.datagen import load_dataset
from tools.experiments import GridSearchSpace, run_constraint_prediction, run_end_to_end, save_report
from tools.neural import TrainConfig

logger = logging.getLogger(__name__)


def register(subparsers, common):
    p = subparsers.add_parser("train", parents=[common], help="grid-search and train surrogate models")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--task", choices=["e2e", "constraints"], required=True)
    p.set_defaults(handler=cmd_train)


def search_space(cfg) -> GridSearchSpace:
    return GridSearchSpace(
        hidden_layer_options=cfg.search.hidden_layers,
        activations=cfg.search.activations,
        penalty_options=cfg.search.penalty_options,
        base=TrainConfig(**cfg.train.model_dump()),
    )


@command
def cmd_train(args) -> int:
    cfg = load_config(args)
    ds = load_dataset(cfg.resolved_dataset_path())
    out = Path(cfg.output_dir)
    model_dir = out / "models"
    split_seed = cfg.sampler.seed
    logger.info(f"🧠 Training {args.task} models on {len(ds)} samples from {ds.manifest.case_name}")

    if args.task == "e2e":
        net = read_case(cfg.case_path)
        report = run_end_to_end(
            ds, net, search_space(cfg),
            seeds=cfg.seeds, test_fraction=cfg.test_fraction, split_seed=split_seed, model_dir=model_dir,
        )
        headline = {"legality_rate": report.legality_rate, "avg_cost_deviation": report.avg_cost_deviation}
    else:
        report = run_constraint_prediction(
            ds, search_space(cfg),
            seeds=cfg.seeds, test_fraction=cfg.test_fraction, split_seed=split_seed, model_dir=model_dir,
        )
        headline = {"elementwise_accuracy": report.elementwise_accuracy}

    path = save_report(report, out, ds.manifest.case_name, args.task, split_seed)
    emit({"report": str(path), "task": args.task, "best_config": report.best_config, **headline})

    if report.best_config is None:
        logger.error(f"❌ every configuration failed to train")
        return EXIT_DOMAIN
    logger.info(f"✅ best configuration {report.best_config}")
    return EXIT_OK
