"""SPD-manifold representation learning with dynamic-graph-guided modulation.

Subpackages: :mod:`geospd.spd` (Log-Euclidean primitives), :mod:`geospd.layers`
(BiMap/ReEig/LogEig with analytic backwards), :mod:`geospd.attention`
(manifold cross-attention), :mod:`geospd.graph` (spectral graph encoding),
:mod:`geospd.autodiff` (reverse-mode tape), :mod:`geospd.model` (pipeline,
losses, training), :mod:`geospd.data` (synthetic datasets and file formats),
:mod:`geospd.cli` (command line).
"""

__version__ = "0.1.0"

from . import attention, autodiff, data, graph, layers, model, spd  # noqa: F401
from .errors import (CorruptData, GeoSpdError, IncompatibleFormat,  # noqa: F401
                     InvalidInput, IoError, NotPositiveDefinite,
                     NumericalFailure)
