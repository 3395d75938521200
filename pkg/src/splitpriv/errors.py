"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Tensor or model seam shapes do not line up."""


class ProtocolError(RuntimeError):
    """Client and server disagree about the split boundary."""


class InfeasibleClientError(ValueError):
    """No split point satisfies a client's power cap."""

    def __init__(self, message, client_id=None):
        super().__init__(message)
        self.client_id = client_id


class ConfigError(ValueError):
    """Malformed experiment configuration."""


class DependencyError(FileNotFoundError):
    """A subcommand needs an artifact that an earlier step should have written."""


class ContractError(RuntimeError):
    """An operation was called outside its precondition."""
