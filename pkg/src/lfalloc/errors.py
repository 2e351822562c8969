"""Exception hierarchy.

Every error raised on purpose by the package derives from LfallocError, and
each family carries the process exit code the CLI reports for it.
"""


class LfallocError(Exception):
    exit_code = 1


class InputError(LfallocError, ValueError):
    """Malformed file, out-of-range argument or inconsistent shapes."""

    exit_code = 3


class FitError(InputError):
    """Regression cannot be carried out on the given samples."""


class InfeasibleError(LfallocError):
    """The allocation problem has no feasible point."""

    exit_code = 4


class ConvergenceError(LfallocError):
    """Iterative solver hit its iteration cap.

    The best iterate found is attached as ``best``.
    """

    exit_code = 4

    def __init__(self, message, best=None):
        super().__init__(message)
        self.best = best


class BackendError(LfallocError):
    exit_code = 5


class ProcessFailedError(BackendError):
    def __init__(self, returncode, stdout="", stderr=""):
        super().__init__(
            f"encoder exited with status {returncode}: {stderr.strip()[-2000:]}"
        )
        self.returncode = returncode
        self.stdout = stdout
        self.stderr = stderr


class EncoderTimeoutError(BackendError):
    pass


class MalformedStatsError(BackendError):
    pass


class FirstPassError(BackendError):
    """One or more sweep encodes failed; completed sweeps are kept in ``partial``."""

    def __init__(self, failed, partial):
        qps = ", ".join(str(q) for q in sorted(failed))
        super().__init__(f"first pass failed for sweep QP(s) {qps}")
        self.failed = dict(failed)
        self.partial = partial


class StageError(LfallocError):
    """Wraps an error raised inside one stage of the two-pass pipeline."""

    def __init__(self, stage, cause):
        super().__init__(f"[{stage}] {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)
