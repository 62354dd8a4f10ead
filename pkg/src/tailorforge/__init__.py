"""tailorforge: compile static graphs into SuperNets, predict, and search."""

from .errors import TailorError
from .graph import ComputationGraph, GraphNode, TensorShape, export_graph, graph_isomorphic, load_graph
from .ir import Modification, TailorModule, build, infer_shapes, transform, update
from .modspace import ModificationSpace, SubNetSpec, apply_subnet, count_variants, parse_config, sample_subnet
from .compiler import compile, compile_report

__version__ = "0.1.0"
