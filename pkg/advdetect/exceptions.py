"""Error taxonomy. The CLI maps these onto exit codes; everything is still a ValueError."""


class ConfigError(ValueError):
    """Invalid or missing experiment configuration (exit code 2)."""


class DataFormatError(ValueError):
    """Malformed, missing or inconsistent dataset or artifact (exit code 3)."""


class ChecksumError(DataFormatError):
    pass


class VersionError(DataFormatError):
    pass
