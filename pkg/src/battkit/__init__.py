"""battkit: reduced spherical-diffusion battery models with corrected outputs and LMI observers."""
from .errors import (AssemblyError, BattkitError, DesignFailure, DomainError, FormatError, InputError,
                     IntegrationFailure, InvalidGridError, NumericalFailure)
from .params import CellParams, ElectrodeParams, load_params, parse_params, default_params
from .diffusion import build_radial_grid, correction_coefficients, electrode_system
from .reference import solve_reference
from .cell import CellModel, assemble_cell, cell_model, equilibrium_state, output_voltage, soc
from .observer import build_vertices, design_gain, simulate_coupled, simulate_observer, verify_lmi
from .sim import CampaignConfig, compare_models, run_campaign, synthetic_phev

__version__ = "0.1.0"
