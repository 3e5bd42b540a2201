"""Submanifold sparse convolutional networks on hash tables and rule books."""
from .tensor import Coordinate, SparseTensor, create, densify, from_coords, set_site, sparsify
from .rulebook import FilterGeometry, RuleBook, RuleBookCache, build_pool, build_sc, build_ssc, invert
from .network import NetworkSpec, build_network

__version__ = "0.1.0"
