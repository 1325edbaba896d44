"""Mechanics of stepped cracks from tracked tracer particles.

Deformation gradients on a gridless particle cloud, polar decomposition,
Neo-Hookean strain energy, ligament energy integrals and CTOD-based
fracture energy, with synthetic generators that serve as oracles for every
stage.
"""

__version__ = "0.1.0"

from .constitutive import MaterialModel, ScalarField, max_principal_stretch_field, strain_energy_density
from .errors import (
    ConditioningError,
    ConfigError,
    FitError,
    FormatError,
    InvalidInputError,
    InvertedElementError,
    StepcrackError,
)
from .fracture import (
    CtodProfile,
    FractureFit,
    RegressionResult,
    extract_ctod_from_surface,
    fit_ctod,
    regress_gc_vs_elig,
)
from .kinematics import (
    DefGradField,
    EstimatorConfig,
    ParticleSet,
    ParticleTrack,
    SampleFlag,
    build_particle_set,
    estimate_def_grad,
    field_quality_report,
)
from .regions import RadialWeights, RegionEnergy, RegionSpec, integrate_region_energy, radial_weights, select_region
from .tensor3 import EigenSym3, PolarFactors, eig_sym3, invariants3, polar_decompose

__all__ = [name for name in dir() if not name.startswith("_")]
