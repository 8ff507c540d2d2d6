class FrameSkipError(RuntimeError):
    """A frame cannot be processed (e.g. no pose near its timestamp) and is skipped."""


class FrameLoadError(RuntimeError):
    """A dataset file is malformed. Carries the offending path and byte offset."""

    def __init__(self, path, offset: int | None, message: str):
        self.path = str(path)
        self.offset = offset
        where = f"{self.path}" if offset is None else f"{self.path} @ byte {offset}"
        super().__init__(f"{where}: {message}")
