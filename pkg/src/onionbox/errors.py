class OnionError(Exception):
    """Base class for everything this package raises on purpose."""


class FramingError(OnionError):
    pass


class ProtocolError(OnionError):
    pass


class SizeError(OnionError):
    pass


class UnwrapError(OnionError):
    """Authenticated decryption of a layer failed (wrong key, wrong order or tampering)."""


class ReplayError(OnionError):
    """A (key, counter) pair was presented out of sequence."""


class HandshakeError(OnionError):
    pass


class ValidationError(OnionError):
    pass


class NotFoundError(OnionError):
    pass


class DirectoryError(OnionError):
    pass


class SelectionError(OnionError):
    pass


class CircuitBuildError(OnionError):
    def __init__(self, hop: int, reason: str):
        super().__init__(f"circuit build failed at hop {hop}: {reason}")
        self.hop = hop
        self.reason = reason


class CircuitClosedError(OnionError):
    pass


class StreamOpenError(OnionError):
    def __init__(self, reason: int, message: str = ""):
        super().__init__(message or f"stream refused by exit (reason {reason})")
        self.reason = reason


class ResolutionError(OnionError):
    def __init__(self, hostname: str, code: int):
        super().__init__(f"could not resolve {hostname!r} (code {code:#04x})")
        self.hostname = hostname
        self.code = code


class HarnessError(OnionError):
    pass


class SpawnError(HarnessError):
    pass
