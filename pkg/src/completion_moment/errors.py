class ConfigError(ValueError):
    """Invalid configuration or violated training/evaluation precondition."""


class FormatError(ValueError):
    """Malformed feature, manifest or checkpoint file."""

    def __init__(self, message: str, path=None, offset: int | None = None):
        where = []
        if path is not None:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.path = path
        self.offset = offset


class ResolutionError(FileNotFoundError):
    """Manifest entries whose files cannot be found."""

    def __init__(self, missing: list[str]):
        super().__init__(f"missing files for id(s): {', '.join(missing)}")
        self.missing = missing
