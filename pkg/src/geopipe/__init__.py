"""Planning, simulation, and miniature execution of decentralized pipelined
DNN training over heterogeneous, geo-distributed devices."""

from . import compressor, costmodel, executor, opdag, opfence, planner, simulator

__all__ = [
    "compressor",
    "costmodel",
    "executor",
    "opdag",
    "opfence",
    "planner",
    "simulator",
]

__version__ = "0.1.0"
