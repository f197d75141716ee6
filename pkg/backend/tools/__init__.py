# backend/tools/__init__.py

"""
OpfIQ Tools Module
Exports the grid model, solvers, dataset and learning tools
"""

from .grid_model import Network, parse_matpower_case, serialize_case, build_admittance, compile_network
from .power_flow import SetpointProfile, SetpointLayout, solve_newton
from .opf import ActiveSetVector, OpfOptions, solve_acopf, extract_active_set, check_legality, warm_start_from_active_set
from .datagen import SamplerConfig, generate_dataset, load_dataset, save_dataset, split_dataset
from .neural import MlpConfig, TrainConfig, init_model, train, predict

__all__ = [
    'Network',
    'parse_matpower_case',
    'serialize_case',
    'build_admittance',
    'compile_network',
    'SetpointProfile',
    'SetpointLayout',
    'solve_newton',
    'ActiveSetVector',
    'OpfOptions',
    'solve_acopf',
    'extract_active_set',
    'check_legality',
    'warm_start_from_active_set',
    'SamplerConfig',
    'generate_dataset',
    'load_dataset',
    'save_dataset',
    'split_dataset',
    'MlpConfig',
    'TrainConfig',
    'init_model',
    'train',
    'predict',
]
