"""Exception hierarchy.

Every error carries a short ``category`` string; the CLI prints it as the
machine-parsable prefix of its single-line failure message.
"""


class HssError(Exception):
    category = "error"


class DimensionError(HssError, ValueError):
    category = "dimension"


class ContractError(HssError, RuntimeError):
    category = "contract"


class ParseError(HssError, ValueError):
    category = "parse"


class ConfigError(HssError, ValueError):
    category = "config"


class InputError(HssError, ValueError):
    category = "input"


class MetricError(HssError, ValueError):
    category = "metric"


class IngestionError(HssError, OSError):
    category = "ingestion"


class UsageError(HssError):
    category = "usage"
