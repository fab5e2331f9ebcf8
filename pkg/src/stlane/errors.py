"""Error taxonomy shared across the package.

ConfigError   - a layer/model/run was described inconsistently (bad dims, bad spec)
UsageError    - an operation was called outside its contract (bad arguments, bad state)
DataError     - dataset ingestion failed (missing file, malformed index line, bad mask)
FormatError   - a binary artifact (checkpoint) is corrupt or has the wrong magic/version
InternalError - an invariant the code itself must uphold was violated
"""


class StlaneError(Exception):
    pass


class ConfigError(StlaneError):
    pass


class UsageError(StlaneError):
    pass


class DataError(StlaneError):
    pass


class FormatError(StlaneError):
    pass


class InternalError(StlaneError):
    pass
