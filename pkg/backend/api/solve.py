# backend/api/solve.py
import logging

from api.common import EXIT_OK, command, emit
from core.config import settings
from tools.cases import read_case
from tools.opf import OpfOptions, solve_acopf
from tools.power_flow import SetpointProfile, solve_newton

logger = logging.getLogger(__name__)


def register(subparsers, common):
    p = subparsers.add_parser("solve", parents=[common], help="run power flow or ACOPF on a case")
    p.add_argument("case", help="path to a .m case file or a built-in case name")
    p.add_argument("--mode", choices=["pf", "opf"], default="opf")
    p.add_argument("--tol", type=float, default=settings.PF_TOL, help="power-flow mismatch tolerance (p.u.)")
    p.add_argument("--max-iter", type=int, default=None, help="iteration cap for either solver")
    p.add_argument("--kkt-tol", type=float, default=settings.OPF_KKT_TOL, help="ACOPF KKT tolerance")
    p.set_defaults(handler=cmd_solve)


def _pf_document(net, sol) -> dict:
    sf, st = sol.branch_flows
    return {
        "mode":         "pf",
        "case":         net.name,
        "converged":    sol.converged,
        "iterations":   sol.iterations,
        "max_mismatch": sol.max_mismatch,
        "v_mag":        sol.state.v_mag,
        "v_ang":        sol.state.v_ang,
        "p_gen":        sol.p_gen,
        "q_gen":        sol.q_gen,
        "p_slack":      sol.p_slack,
        "flow_from":    {"p": sf.real, "q": sf.imag},
        "flow_to":      {"p": st.real, "q": st.imag},
    }


@command
def cmd_solve(args) -> int:
    net = read_case(args.case)

    if args.mode == "pf":
        sol = solve_newton(
            net,
            SetpointProfile.from_network(net),
            tol=args.tol,
            max_iter=args.max_iter or settings.PF_MAX_ITER,
        )
        emit(_pf_document(net, sol))
        sol.raise_for_status()
        logger.info(f"✅ {net.name}: power flow converged in {sol.iterations} iterations")
        return EXIT_OK

    opts = OpfOptions(kkt_tol=args.kkt_tol, max_iter=args.max_iter or settings.OPF_MAX_ITER)
    sol = solve_acopf(net, opts)
    emit({"mode": "opf", "case": net.name, **sol.to_document()})
    sol.raise_for_status()
    logger.info(f"✅ {net.name}: ACOPF converged in {sol.iterations} iterations, cost {sol.objective:.2f} $/hr")
    return EXIT_OK
