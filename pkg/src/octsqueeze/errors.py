class CorruptStreamError(ValueError):
    """A bitstream or symbol stream is malformed, truncated or fails its checksum."""


class ModelMismatchError(ValueError):
    """A stream was produced with a different model than the one supplied."""
