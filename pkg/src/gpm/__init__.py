"""Graph learning from random-walk substructure patterns."""

from .graph import Graph, GraphBatch, InstanceKind, InstanceRef, load_graph
from .model import GPM, Task
from .tokenizer import BiasParams, PatternCache, anonymize, presample
from .train import RunConfig, TaskData, train, tta_infer

__all__ = [
    "BiasParams", "GPM", "Graph", "GraphBatch", "InstanceKind", "InstanceRef", "PatternCache",
    "RunConfig", "Task", "TaskData", "anonymize", "load_graph", "presample", "train",
    "tta_infer",
]
__version__ = "0.1.0"
