"""Exception types raised across the package."""


class VdpbcError(Exception):
    """Base class for all package errors."""


class DomainError(VdpbcError, ValueError):
    """Input outside the admissible domain (non-finite values, wrong shapes)."""


class SingularInertiaError(VdpbcError, ArithmeticError):
    """The inertia matrix could not be inverted at the given configuration."""

    def __init__(self, q):
        self.q = [float(v) for v in q]
        super().__init__(f"singular inertia matrix at q={self.q}")


class CertificateError(VdpbcError):
    """A metric or storage function failed its positivity certificate."""


class SynthesisError(VdpbcError):
    """Controller gains or model structure violate a design inequality."""


class DivergenceError(VdpbcError, RuntimeError):
    """Integration left the admissible region (state norm above the bound)."""

    def __init__(self, time, norm=None):
        self.time = time
        self.norm = norm
        super().__init__(f"integration diverged at t={time:.6g} s")
