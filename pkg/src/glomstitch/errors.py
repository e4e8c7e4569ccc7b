"""Exception types raised across the package."""


class GlomStitchError(Exception):
    """Base class for every error raised by glomstitch."""


class ShapeMismatch(GlomStitchError, ValueError):
    pass


class NonFiniteInput(GlomStitchError, ValueError):
    pass


class IndexOutOfRange(GlomStitchError, ValueError):
    pass


# tiler
class UnrecognizedConvention(GlomStitchError, ValueError):
    pass


class MalformedCoordinate(GlomStitchError, ValueError):
    pass


# stitcher
class OutOfBand(GlomStitchError, ValueError):
    """A tile was fed for rows that are already finalized or beyond the band."""


class OutOfExtent(GlomStitchError, ValueError):
    pass


class MixedSlide(GlomStitchError, ValueError):
    pass


class MissingTarget(GlomStitchError, KeyError):
    pass


class TileFailure(GlomStitchError):
    """Wraps a predictor or reader failure together with the tile that caused it."""

    def __init__(self, tile, cause):
        super().__init__(f"tile at (x={tile.x}, y={tile.y}, size={tile.size}) failed: {cause!r}")
        self.tile = tile
        self.cause = cause


# predictor protocol
class ProtocolError(GlomStitchError):
    pass


class DimensionMismatch(ProtocolError):
    pass


class RemoteError(GlomStitchError):
    pass


class PredictorTimeout(GlomStitchError, TimeoutError):
    pass


# eval
class UnitSetMismatch(GlomStitchError, ValueError):
    pass


# synthbench / ingest
class InfeasibleSpec(GlomStitchError, ValueError):
    pass


class UnknownSlide(GlomStitchError, KeyError):
    pass


# io
class UnsupportedFormat(GlomStitchError, ValueError):
    pass


class CorruptFile(GlomStitchError, ValueError):
    pass


class SinkContractError(GlomStitchError, RuntimeError):
    pass


class ConfigError(GlomStitchError, ValueError):
    pass
