"""Co-eating tie inference and matched causal analysis of purchase healthiness.

The pipeline turns point-of-sale transaction logs into effect estimates:

    ingest -> ties -> cohort -> propensity -> matching -> estimation
                                                        -> sensitivity

plus a synthetic-log generator (``synth``) with known ground truth for
validating the whole chain end to end.
"""

__version__ = "0.1.0"

from mensa.health import HealthScore, NoPurchasesError, score
from mensa.ingest import ItemCatalog, LogIndex, Transaction, parse_catalog, parse_log

__all__ = [
    "__version__",
    "HealthScore",
    "ItemCatalog",
    "LogIndex",
    "NoPurchasesError",
    "Transaction",
    "parse_catalog",
    "parse_log",
    "score",
]
