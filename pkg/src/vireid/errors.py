"""Exception types shared across the package.

The CLI maps these onto exit codes: ValidationError -> 2, OSError -> 3,
TrainingDiverged -> 4.
"""


class ValidationError(ValueError):
    """Bad arguments, malformed inputs, or violated preconditions."""


class ManifestError(ValidationError):
    """Malformed dataset manifest row or header."""


class ArchiveError(ValidationError):
    """Parameter archive is missing keys or structurally invalid."""


class CheckpointError(ValidationError):
    """Checkpoint cannot be loaded (version or config mismatch)."""


class ConfigError(ValidationError):
    """Run configuration failed validation; carries every problem found."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("invalid configuration:\n" + "\n".join(f"  - {p}" for p in self.problems))


class TrainingDiverged(RuntimeError):
    """A training stage produced a non-finite loss."""
