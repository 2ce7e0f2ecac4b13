class ExtractorError(Exception):
    """Base class for everything this package raises on purpose."""


class UnknownBackbone(ExtractorError):
    pass


class UnreadableImage(ExtractorError):
    pass


class WeightsUnavailable(ExtractorError):
    pass


class BadLevels(ExtractorError):
    pass
