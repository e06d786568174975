"""Domain-decomposed Bayesian inversion of permeability fields."""
from .covariance_kl import CovarianceSpec, FieldSample, KLBasis, build_basis, evaluate_field, extract_local_coeffs
from .field_model import Partition, assemble, coupling_matrix, posterior_moments, stitch
from .kernels import BACKEND
from .mesh_fem import BoundarySpec, Dirichlet, DiffusionProblem, GaussianSource, Grid2D, Neumann, assemble_and_solve

__version__ = "0.1.0"
