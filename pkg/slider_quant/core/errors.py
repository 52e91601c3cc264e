"""
Error hierarchy shared by every slider_quant module.

Each error class carries a machine-readable ``category`` and the process ``exit_code``
the CLI uses when the error escapes a subcommand.
"""
import typing as t


class SliderQuantError(Exception):
    """Base class for all errors raised deliberately by slider_quant."""
    category: t.ClassVar[str] = "runtime"
    exit_code: t.ClassVar[int] = 1
    code: t.ClassVar[int] = 1

    def to_record(self) -> dict:
        return {"error": self.category, "code": self.code, "message": str(self)}


class ConfigError(SliderQuantError, ValueError):
    """A configuration value violates a named constraint."""
    category = "config"
    exit_code = 3
    code = 30


class ContractError(SliderQuantError, ValueError):
    """A precondition of an operation does not hold."""
    category = "contract"
    code = 10


class DimensionError(ContractError):
    category = "dimension"
    code = 11


class DomainError(ContractError):
    """Non-finite values, zero divisors and similar numeric domain violations."""
    category = "domain"
    code = 12


class OptimizerError(SliderQuantError):
    category = "optimizer"
    code = 20


class DivergenceError(SliderQuantError):
    """Training or calibration produced a non-finite loss."""
    category = "divergence"
    code = 21


class PackError(SliderQuantError):
    """Base class for packed-file format errors."""
    category = "format"
    exit_code = 4
    code = 40


class MagicError(PackError):
    code = 41


class ChecksumError(PackError):
    code = 42


class VersionError(PackError):
    code = 43


class TruncatedError(PackError):
    code = 44
