import json
import os
import pickle
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from errors import CheckpointError, MissingArtifactError
from models import PolicyRole

MAGIC = "laddergym-ckpt"
SCHEMA_VERSION = 1


@dataclass
class Checkpoint:
    layout_hash: str
    role: PolicyRole
    tensors: dict[str, np.ndarray] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    version: int = SCHEMA_VERSION

    def group(self, prefix: str) -> dict[str, np.ndarray]:
        """Tensors under `prefix.` with the prefix stripped."""
        start = len(prefix) + 1
        return {name[start:]: value for name, value in self.tensors.items() if name.startswith(prefix + ".")}


def _format_tensor(name: str, value: np.ndarray) -> str:
    value = np.asarray(value, dtype=float)
    dims = " ".join(str(d) for d in value.shape)
    values = " ".join(f"{v:.17g}" for v in value.ravel())
    parts = [name, str(value.ndim)] + ([dims] if dims else []) + ([values] if values else [])
    return " ".join(parts)


def save_checkpoint(checkpoint: Checkpoint, path: Union[str, os.PathLike]):
    """
    Text checkpoint: a header line `laddergym-ckpt v1 <layout-hash>`, a `role` line, `meta key value`
    lines, then one line per tensor `name ndims dims... values...` at 17 significant digits.
    """
    lines = [f"{MAGIC} v{checkpoint.version} {checkpoint.layout_hash}", f"role {checkpoint.role.value}"]
    for key, value in checkpoint.meta.items():
        lines.append(f"meta {key} {value}")
    for name, value in checkpoint.tensors.items():
        lines.append("tensor " + _format_tensor(name, value))
    tmp = f"{path}.tmp"
    with open(tmp, "w") as file:
        file.write("\n".join(lines) + "\n")
    os.replace(tmp, path)


def _tokens(line: str, offset: int):
    """Whitespace separated tokens of one line with their absolute byte offsets."""
    pos = 0
    out = []
    for token in line.split():
        pos = line.index(token, pos)
        out.append((token, offset + pos))
        pos += len(token)
    return out


def _parse_tensor(tokens) -> tuple[str, np.ndarray]:
    if len(tokens) < 2:
        raise CheckpointError("truncated tensor record", tokens[-1][1] if tokens else None)
    name = tokens[0][0]
    try:
        ndims = int(tokens[1][0])
    except ValueError:
        raise CheckpointError(f"bad dimension count {tokens[1][0]!r} for tensor {name}", tokens[1][1]) from None
    if ndims < 0 or len(tokens) < 2 + ndims:
        raise CheckpointError(f"tensor {name}: expected {ndims} dims", tokens[1][1])
    shape = []
    for token, offset in tokens[2:2 + ndims]:
        try:
            shape.append(int(token))
        except ValueError:
            raise CheckpointError(f"bad dimension {token!r} for tensor {name}", offset) from None
    value_tokens = tokens[2 + ndims:]
    count = int(np.prod(shape)) if shape else 1
    if len(value_tokens) != count:
        where = value_tokens[-1][1] if value_tokens else tokens[-1][1]
        raise CheckpointError(f"tensor {name}: expected {count} values, found {len(value_tokens)}", where)
    values = np.empty(count)
    for i, (token, offset) in enumerate(value_tokens):
        try:
            values[i] = float(token)
        except ValueError:
            raise CheckpointError(f"bad value {token!r} in tensor {name}", offset) from None
    return name, values.reshape(shape)


def load_checkpoint(path: Union[str, os.PathLike], expected_role: Optional[PolicyRole] = None,
                    expected_layout: Optional[str] = None) -> Checkpoint:
    if not os.path.exists(path):
        raise MissingArtifactError("checkpoint", str(path))
    with open(path, "rb") as file:
        raw = file.read()
    try:
        text = raw.decode("ascii")
    except UnicodeDecodeError as e:
        raise CheckpointError("checkpoint is not plain text", e.start) from None

    offset = 0
    checkpoint = None
    for line in text.split("\n"):
        tokens = _tokens(line, offset)
        line_offset = offset
        offset += len(line) + 1
        if not tokens:
            continue
        if checkpoint is None:
            if len(tokens) != 3 or tokens[0][0] != MAGIC:
                raise CheckpointError(f"not a {MAGIC} file", line_offset)
            version_token, version_offset = tokens[1]
            if version_token != f"v{SCHEMA_VERSION}":
                raise CheckpointError(f"unsupported checkpoint version {version_token!r}, expected v{SCHEMA_VERSION}",
                                      version_offset)
            checkpoint = Checkpoint(layout_hash=tokens[2][0], role=PolicyRole.TEACHER)
            continue
        kind = tokens[0][0]
        if kind == "role":
            try:
                checkpoint.role = PolicyRole(tokens[1][0])
            except (IndexError, ValueError):
                raise CheckpointError("bad role record", line_offset) from None
        elif kind == "meta":
            if len(tokens) < 3:
                raise CheckpointError("bad meta record", line_offset)
            checkpoint.meta[tokens[1][0]] = line[tokens[2][1] - line_offset:].strip()
        elif kind == "tensor":
            name, value = _parse_tensor(tokens[1:])
            checkpoint.tensors[name] = value
        else:
            raise CheckpointError(f"unknown record {kind!r}", line_offset)
    if checkpoint is None:
        raise CheckpointError("empty checkpoint", 0)

    if expected_role is not None and checkpoint.role != expected_role:
        raise CheckpointError(f"{path} holds a {checkpoint.role.value} policy, expected {expected_role.value}")
    if expected_layout is not None and checkpoint.layout_hash != expected_layout:
        raise CheckpointError(f"{path} was written for observation layout {checkpoint.layout_hash}, "
                              f"current layout is {expected_layout}")
    return checkpoint


def generator_state(rng: np.random.Generator) -> str:
    """The bit generator state as one line of JSON, fit for a meta record."""
    return json.dumps(rng.bit_generator.state, separators=(",", ":"))


def restore_generator(text: str) -> np.random.Generator:
    try:
        state = json.loads(text)
        bit_generator = getattr(np.random, state["bit_generator"])()
        bit_generator.state = state
    except (ValueError, KeyError, TypeError, AttributeError) as e:
        raise CheckpointError(f"bad generator state: {e}") from None
    return np.random.Generator(bit_generator)


def snapshot_path(path: Union[str, os.PathLike]) -> str:
    return f"{path}.envs"


def save_snapshot(envs: list, path: Union[str, os.PathLike]):
    """
    Pickles the training environments next to a checkpoint, so that a resumed run continues from
    the exact simulator, curriculum and random state.
    """
    target = snapshot_path(path)
    tmp = f"{target}.tmp"
    with open(tmp, "wb") as file:
        pickle.dump(envs, file, protocol=pickle.HIGHEST_PROTOCOL)
    os.replace(tmp, target)


def load_snapshot(path: Union[str, os.PathLike]) -> Optional[list]:
    """The environments saved beside `path`, or None when there is no snapshot."""
    target = snapshot_path(path)
    if not os.path.exists(target):
        return None
    with open(target, "rb") as file:
        try:
            return pickle.load(file)
        except (pickle.UnpicklingError, EOFError) as e:
            raise CheckpointError(f"unreadable environment snapshot {target}: {e}") from None
