"""Exception types shared across the library."""


class PpfError(Exception):
    """Base class for all library errors."""


class AllZeroWeights(PpfError):
    """Every particle weight is zero; the filter is fully degenerate."""


class NotNormalized(PpfError):
    """Weights were expected to sum to one but do not."""


class InvalidCount(PpfError):
    """A particle count argument is out of range."""


class OutOfBounds(PpfError):
    """A state position lies outside the image."""


class InconsistentClassification(PpfError):
    """Sender surpluses and receiver deficits do not balance."""


class LengthMismatch(PpfError):
    """Paired sequences have different lengths."""


class TransportError(PpfError):
    """Base class for message-passing failures."""


class ClosedEndpoint(TransportError):
    """Operation attempted on a closed endpoint."""


class PeerUnreachable(TransportError):
    """A TCP peer could not be dialed."""


class Timeout(TransportError):
    """A blocking receive or collective timed out."""
