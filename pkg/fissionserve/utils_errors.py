class FissionError(Exception):
    code = "internal_error"
    user_error = False
    http_status = 500

    def __init__(self, message="", **details):
        super().__init__(message)
        self.message = message
        self.details = details

    def to_dict(self):
        body = {"error": self.code, "message": self.message}
        for key, value in self.details.items():
            body[key] = value
        return body


class UserError(FissionError):
    user_error = True
    http_status = 400


# ---------------------------------------------------------------------------
# Task model and registry
# ---------------------------------------------------------------------------


class TaskValidationError(UserError):
    code = "invalid_task"


class UnsupportedModalityError(UserError):
    code = "unsupported_modality"


class ManifestError(UserError):
    code = "invalid_manifest"

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors), errors=self.errors)


class DuplicateAppError(UserError):
    code = "duplicate_app"
    http_status = 409


class NotFoundError(UserError):
    code = "not_found"
    http_status = 404


class AppBusyError(UserError):
    code = "app_busy"
    http_status = 409


# ---------------------------------------------------------------------------
# Record / replay and graphs
# ---------------------------------------------------------------------------


class RecordingError(FissionError):
    code = "recording_error"


class DeterminismViolation(FissionError):
    code = "determinism_violation"

    def __init__(self, message, step=None, **details):
        super().__init__(message, step=step, **details)
        self.step = step


class PlaceholderAccessError(DeterminismViolation):
    """A placeholder was inspected as a concrete value during record."""


class DanglingReferenceError(FissionError):
    code = "dangling_reference"


class GraphValidationError(FissionError):
    code = "invalid_graph"


class GraphCycleError(GraphValidationError):
    def __init__(self, message, cycle):
        super().__init__(message, cycle=list(cycle))
        self.cycle = list(cycle)


# ---------------------------------------------------------------------------
# Dispatch and execution
# ---------------------------------------------------------------------------


class DispatchError(FissionError):
    code = "dispatch_error"


class DispatchTimeout(FissionError):
    code = "dispatch_timeout"


class ExecutorFailure(FissionError):
    code = "executor_failure"

    def __init__(self, message, invocation_id=None, **details):
        super().__init__(message, invocation_id=invocation_id, **details)
        self.invocation_id = invocation_id


class UpstreamFailure(ExecutorFailure):
    """A node was cancelled because something it depends on failed first."""

    code = "upstream_failure"

    def __init__(self, message, invocation_id=None, origin=None, cause_code=None):
        super().__init__(
            message, invocation_id=invocation_id, origin=origin, cause_code=cause_code
        )
        self.origin = origin
        self.cause_code = cause_code


class ActivationOOM(ExecutorFailure):
    code = "oom"


# ---------------------------------------------------------------------------
# Placement and planning
# ---------------------------------------------------------------------------


class PlacementError(UserError):
    code = "placement_error"
    http_status = 507

    def __init__(self, message, oom=False, **details):
        super().__init__(message, oom=oom, **details)
        self.oom = oom


class PlacementConflict(PlacementError):
    code = "placement_conflict"
    http_status = 409


class CapacityExceeded(PlacementError):
    code = "oom"

    def __init__(self, message, **details):
        super().__init__(message, oom=True, **details)


class PlannerInfeasible(UserError):
    code = "infeasible"

    def __init__(self, message, component=None, **details):
        super().__init__(message, component=component, **details)
        self.component = component


class TractabilityError(UserError):
    code = "intractable"


# ---------------------------------------------------------------------------
# Sidecar and wire protocol
# ---------------------------------------------------------------------------


class ProtocolError(FissionError):
    code = "protocol_error"


class IntegrityError(FissionError):
    code = "integrity_error"


class BackpressureTimeout(FissionError):
    code = "backpressure_timeout"


class ProducerFailed(FissionError):
    code = "producer_failed"


class UnknownGpuError(UserError):
    code = "unknown_gpu"


# ---------------------------------------------------------------------------
# Configuration and profiles
# ---------------------------------------------------------------------------


class ConfigError(UserError):
    code = "config_error"

    def __init__(self, errors):
        if isinstance(errors, str):
            errors = [errors]
        self.errors = list(errors)
        super().__init__("; ".join(self.errors), errors=self.errors)


class ProfileError(UserError):
    code = "profile_error"


class MixError(UserError):
    code = "invalid_mix"


ERROR_CLASSES = {
    cls.code: cls
    for cls in (
        TaskValidationError,
        UnsupportedModalityError,
        ManifestError,
        DuplicateAppError,
        NotFoundError,
        AppBusyError,
        RecordingError,
        DeterminismViolation,
        DanglingReferenceError,
        GraphValidationError,
        DispatchError,
        DispatchTimeout,
        ExecutorFailure,
        UpstreamFailure,
        ActivationOOM,
        PlacementError,
        PlacementConflict,
        PlannerInfeasible,
        TractabilityError,
        ProtocolError,
        IntegrityError,
        BackpressureTimeout,
        ProducerFailed,
        UnknownGpuError,
        ProfileError,
        MixError,
    )
}


def error_from_dict(body):
    """Rebuild an error received over the wire (executor hosts, HTTP)."""
    code = body.get("error", "internal_error")
    message = body.get("message", "")
    if code == "upstream_failure":
        return UpstreamFailure(
            message,
            invocation_id=body.get("invocation_id"),
            origin=body.get("origin"),
            cause_code=body.get("cause_code"),
        )
    if code == "oom" and body.get("oom"):
        return CapacityExceeded(message)
    if code in ("executor_failure", "oom"):
        return ERROR_CLASSES[code](message, invocation_id=body.get("invocation_id"))
    if code == "config_error":
        return ConfigError(body.get("errors") or message)
    if code == "invalid_manifest":
        return ManifestError(body.get("errors") or message)
    cls = ERROR_CLASSES.get(code)
    if cls is None:
        err = FissionError(message)
        err.code = code
        return err
    if cls in (PlacementError, PlacementConflict):
        return cls(message, oom=body.get("oom", False))
    if cls is PlannerInfeasible:
        return cls(message, component=body.get("component"))
    if cls is DeterminismViolation:
        return cls(message, step=body.get("step"))
    if cls is UnsupportedModalityError:
        return cls(message, modality=body.get("modality"))
    return cls(message)
