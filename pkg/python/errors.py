from typing import Optional, Sequence


class InvalidSpecError(ValueError):
    """A ladder spec (or other domain record) violates one of its bounds."""

    def __init__(self, bound: str, detail: str = ""):
        self.bound = bound
        super().__init__(f"invalid spec: violates {bound}" + (f" ({detail})" if detail else ""))


class SimulationDivergedError(RuntimeError):
    def __init__(self, quantity: str, env_ids: Sequence[int], result=None):
        self.quantity = quantity
        self.env_ids = list(env_ids)
        # the stepped batch, so callers can reset the offending envs and keep the rest
        self.result = result
        super().__init__(f"simulation diverged: non-finite {quantity} in envs {self.env_ids}")


class LayoutMismatchError(RuntimeError):
    def __init__(self, expected: str, got: str):
        self.expected = expected
        self.got = got
        super().__init__(f"observation layout mismatch: net expects {expected}, got {got}")


class CheckpointError(RuntimeError):
    def __init__(self, msg: str, byte_offset: Optional[int] = None):
        self.byte_offset = byte_offset
        if byte_offset is not None:
            msg = f"{msg} (at byte offset {byte_offset})"
        super().__init__(msg)


class ConfigError(ValueError):
    pass


class MissingArtifactError(FileNotFoundError):
    def __init__(self, what: str, path: str):
        self.path = path
        super().__init__(f"missing {what}: {path}")
