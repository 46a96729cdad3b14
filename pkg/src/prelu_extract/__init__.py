"""Black-box parameter extraction for fully-connected PReLU networks."""
from .critical_search import ExpansivenessError
from .evaluation import EquivalenceReport, evaluate
from .network import PReluNetwork, fuse_outputs, load, random_network, save, split_layer
from .oracle import FeedbackMode, Oracle
from .orchestrator import AttackConfig, ExtractionError, ExtractionResult, PReluExtractor, extract

__version__ = "0.1.0"

__all__ = [
    "AttackConfig", "EquivalenceReport", "ExpansivenessError", "ExtractionError", "ExtractionResult",
    "FeedbackMode", "Oracle", "PReluExtractor", "PReluNetwork", "evaluate", "extract", "fuse_outputs",
    "load", "random_network", "save", "split_layer",
]
