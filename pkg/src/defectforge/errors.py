"""Exception hierarchy shared by every defectforge module."""


class DefectForgeError(Exception):
    """Base class; ``code`` is the machine-readable name used by the CLI."""

    code = "DefectForgeError"

    def to_dict(self):
        return {"error": self.code, "message": str(self)}


class _PathError(DefectForgeError):
    def __init__(self, path, detail=""):
        self.path = str(path)
        msg = f"{self.path}"
        if detail:
            msg += f": {detail}"
        super().__init__(msg)

    def to_dict(self):
        d = super().to_dict()
        d["path"] = self.path
        return d


class NotFound(_PathError):
    code = "NotFound"


class UnsupportedFormat(_PathError):
    code = "UnsupportedFormat"


class CorruptHeader(_PathError):
    code = "CorruptHeader"


class IoFailure(_PathError):
    code = "IoFailure"


class DimensionMismatch(DefectForgeError):
    code = "DimensionMismatch"


class DimensionTooSmall(DefectForgeError):
    code = "DimensionTooSmall"


class PatchDoesNotFit(DefectForgeError):
    code = "PatchDoesNotFit"


class MaskTouchesBorder(DefectForgeError):
    code = "MaskTouchesBorder"


class EmptyMask(DefectForgeError):
    code = "EmptyMask"


class DidNotConverge(DefectForgeError):
    """Raised by the Poisson solver; carries the best iterate and its residual."""

    code = "DidNotConverge"

    def __init__(self, message, sample=None, residual=float("nan")):
        super().__init__(message)
        self.sample = sample
        self.residual = residual


class UnknownDefectType(DefectForgeError):
    code = "UnknownDefectType"


class ServiceUnavailable(DefectForgeError):
    code = "ServiceUnavailable"

    def __init__(self, message, attempts=0):
        super().__init__(message)
        self.attempts = attempts


class MalformedResponse(DefectForgeError):
    code = "MalformedResponse"


class PortInUse(DefectForgeError):
    code = "PortInUse"


class ImageTooSmall(DefectForgeError):
    code = "ImageTooSmall"


class DegenerateImage(DefectForgeError):
    code = "DegenerateImage"


class PatchTooLarge(DefectForgeError):
    code = "PatchTooLarge"


class NonFiniteLoss(DefectForgeError):
    code = "NonFiniteLoss"


class OneClassOnly(DefectForgeError):
    code = "OneClassOnly"


class EngineFailure(DefectForgeError):
    code = "EngineFailure"

    def __init__(self, failures):
        self.failures = list(failures)
        ids = ", ".join(sid for sid, _ in self.failures[:10])
        super().__init__(f"{len(self.failures)} sample(s) failed: {ids}")

    def to_dict(self):
        d = super().to_dict()
        d["failures"] = [{"sample_id": s, "error": str(e)} for s, e in self.failures]
        return d


class AcceptanceExhausted(DefectForgeError):
    code = "AcceptanceExhausted"

    def __init__(self, message, accepted=0, attempts=0):
        super().__init__(message)
        self.accepted = accepted
        self.attempts = attempts

    @property
    def acceptance_rate(self):
        return self.accepted / self.attempts if self.attempts else 0.0

    def to_dict(self):
        d = super().to_dict()
        d.update(accepted=self.accepted, attempts=self.attempts,
                 acceptance_rate=self.acceptance_rate)
        return d


class ManifestInvalid(DefectForgeError):
    code = "ManifestInvalid"
