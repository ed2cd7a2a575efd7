"""Desk-scale distributed sparse linear algebra with simulated device asynchrony."""

from .comm import Communicator, ReduceOp, comm_self, spawn_world
from .core_la import DistVector, InsertMode, Layout
from .mat import DistCsrMatrix, mat_from_global, mat_mult
from .sf import StarForest, sf_setup

__version__ = "0.1.0"
