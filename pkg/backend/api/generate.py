# backend/api/generate.py
import logging

from api.common import EXIT_DOMAIN, EXIT_OK, command, emit, load_config
from core.config import settings
from core.errors import Exhausted
from tools.cases import read_case
from tools.datagen import SamplerConfig, generate_dataset, save_dataset
from tools.opf import OpfOptions

logger = logging.getLogger(__name__)


def register(subparsers, common):
    p = subparsers.add_parser("generate", parents=[common], help="generate a perturbed-load ACOPF dataset")
    p.add_argument("config", help="experiment config JSON")
    p.add_argument("--n", type=int, default=None, help="solved samples requested")
    p.add_argument("--perturbation", type=float, default=None, help="uniform load perturbation half-width")
    p.set_defaults(handler=cmd_generate)


@command
def cmd_generate(args) -> int:
    cfg = load_config(args, {"sampler.n_target": args.n, "sampler.perturbation": args.perturbation})
    net = read_case(cfg.case_path)

    sampler = cfg.sampler.model_dump()
    if sampler["n_target"] is None:
        sampler["n_target"] = settings.DESK_SCALE_SAMPLES.get(net.name, 1000)
    target = cfg.resolved_dataset_path()

    status = EXIT_OK
    try:
        ds = generate_dataset(net, SamplerConfig(**sampler), OpfOptions(**cfg.opf.model_dump()), workers=args.threads)
    except Exhausted as e:
        logger.error(f"❌ {e}; partial dataset kept")
        ds = e.dataset
        status = EXIT_DOMAIN

    save_dataset(ds, target)
    emit({"dataset": str(target), **ds.manifest.model_dump(mode="json")})
    logger.info(f"💾 Dataset written to {target}")
    return status
