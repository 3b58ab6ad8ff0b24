"""Simulation and filtering for a laser-probed collective atomic spin.

The package propagates conditional (filtered) and unconditional quantum
states of a collective spin coupled to polarized light, co-simulates
photon-counting and homodyne observation records, and provides analytic
characteristic functionals of the output processes for validation.
"""

__version__ = "0.1.0"

from .spin_algebra import SpinSpace, DensityState, make_spin_ops, op_function, l_xi_eta, coherent_x_state
from .generators import ModelParams, lindblad_heisenberg, lindblad_schrodinger, limit_lindblad, master_evolve
from .ito_calculus import QNoiseExpr, ito_product, basis_change, qsde_coefficients, unitarity_defect, qsde_product
from . import filters
from . import trajectory
from . import charfuncs

__all__ = [
    "SpinSpace",
    "DensityState",
    "make_spin_ops",
    "op_function",
    "l_xi_eta",
    "coherent_x_state",
    "ModelParams",
    "lindblad_heisenberg",
    "lindblad_schrodinger",
    "limit_lindblad",
    "master_evolve",
    "QNoiseExpr",
    "ito_product",
    "basis_change",
    "qsde_coefficients",
    "unitarity_defect",
    "qsde_product",
    "filters",
    "trajectory",
    "charfuncs",
]
