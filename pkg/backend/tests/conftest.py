# backend/tests/conftest.py
import pytest

from tools.cases import load_builtin_case
from tools.datagen import SamplerConfig, generate_dataset
from tools.grid_model import parse_matpower_case

# One slack bus carrying its own load; quadratic cost.
ONE_BUS = """\
function mpc = onebus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	30	0	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	0	0	50	-50	1	100	1	100	0;
];
mpc.branch = [
];
mpc.gencost = [
	2	0	0	3	0.01	10	0;
];
"""

# Merit order: the cheap unit at bus 2 cannot cover the 50 MW load on its own.
TWO_BUS = """\
function mpc = twobus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.05	0.95;
	2	2	50	0	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	10	0	100	-100	1	100	1	100	0;
	2	40	0	100	-100	1	100	1	40	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	50	0;
	2	0	0	2	10	0;
];
"""

# Lossless triangle; the 2-3 line is rated 50 MVA and binds before the cheap unit is exhausted.
THREE_BUS = """\
function mpc = threebus
mpc.version = '2';
mpc.baseMVA = 100;
mpc.bus = [
	1	3	0	0	0	0	1	1	0	135	1	1.05	0.95;
	2	2	0	0	0	0	1	1	0	135	1	1	1;
	3	1	100	0	0	0	1	1	0	135	1	1.05	0.95;
];
mpc.gen = [
	1	0	0	100	-100	1	100	1	200	0;
	2	0	0	100	-100	1	100	1	200	0;
];
mpc.branch = [
	1	2	0	0.1	0	0	0	0	0	0	1	-360	360;
	1	3	0	0.1	0	0	0	0	0	0	1	-360	360;
	2	3	0	0.1	0	50	0	0	0	0	1	-360	360;
];
mpc.gencost = [
	2	0	0	2	40	0;
	2	0	0	2	10	0;
];
"""


@pytest.fixture
def one_bus():
    return parse_matpower_case(ONE_BUS)


@pytest.fixture
def two_bus():
    return parse_matpower_case(TWO_BUS)


@pytest.fixture
def three_bus():
    return parse_matpower_case(THREE_BUS)


@pytest.fixture(scope="session")
def case30():
    return load_builtin_case("case30")


@pytest.fixture(scope="session")
def case118():
    return load_builtin_case("case118")


@pytest.fixture(scope="session")
def two_bus_dataset():
    """Twelve solved perturbations of the merit-order case."""
    net = parse_matpower_case(TWO_BUS)
    return generate_dataset(net, SamplerConfig(perturbation=0.1, n_target=12, seed=5))


@pytest.fixture(scope="session")
def case30_dataset(case30):
    """Forty 10% load perturbations of case30, solved at default options. Slow tests only."""
    return generate_dataset(case30, SamplerConfig(perturbation=0.1, n_target=40, seed=7))


@pytest.fixture
def out_dir(tmp_path):
    path = tmp_path / "out"
    path.mkdir()
    return path
