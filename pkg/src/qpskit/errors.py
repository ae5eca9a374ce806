"""Exception types and result flags shared across qpskit."""


class QPSError(Exception):
    """Base class for all qpskit errors."""


class DegenerateGeometry(QPSError, ValueError):
    """A charge sits closer to a sensor than one C-C bond length."""


class LabelOrder(QPSError, ValueError):
    """Transition frequencies were passed with f_Ex < f_Ey."""


class NoValidPivot(QPSError, ValueError):
    """Every candidate folding pivot is invalid for the event."""


class NoConvergence(QPSError, RuntimeError):
    """No localization start converged to a finite objective."""


class ConfigInvalid(QPSError, ValueError):
    """Configuration failed validation.

    ``problems`` holds one ``(field, message)`` pair per violation.
    """

    def __init__(self, problems):
        if isinstance(problems, str):
            problems = [("", problems)]
        self.problems = list(problems)
        lines = [f"{f}: {m}" if f else m for f, m in self.problems]
        super().__init__("invalid configuration:\n  " + "\n  ".join(lines))


# Non-fatal conditions are reported as flags on results rather than raised.
NEAR_SINGULAR_JACOBIAN = "NearSingularJacobian"
SINGULAR_INFORMATION = "SingularInformation"
AMBIGUOUS_ASSIGNMENT = "AmbiguousAssignment"
INCONSISTENT_TRACE = "InconsistentTrace"
RANK_DEFICIENT = "RankDeficient"
POLARITY_AMBIGUOUS = "PolarityAmbiguous"
