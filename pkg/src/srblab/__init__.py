"""srblab: a numerical laboratory for the measurable machinery behind
SRB measures on partially hyperbolic attractors.

Subpackages by capability:

- ``pliss``     exact Pliss-time extraction over finite sequences
- ``systems``   example smooth systems, Lyapunov spectra, invariant bundles,
                domination certificates, unstable plaques
- ``measures``  grid-histogram probability measures with weak-* surrogates
- ``randomdyn`` random perturbations, skew orbits, stationary measures,
                zero-noise limits
- ``pesin``     Pesin-block membership and block-mass statistics
- ``gibbs``     unstable Jacobians, conditional densities along plaques,
                absolute-continuity checks, entropy-formula reports
- ``pipelines`` named experiment pipelines with manifests
- ``cli``       command-line front end over the pipelines
"""

from . import pliss  # noqa: F401

__version__ = "0.1.0"
