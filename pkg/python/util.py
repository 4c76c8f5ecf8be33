import multiprocessing
from typing import Callable, Iterable, Optional

import numpy as np


def log(msg: str, env_id: Optional[int] = None, level: int = 0):
    if level > 0:
        return
    if env_id is None:
        print(msg)
    else:
        print(f"{env_id:03d} {msg}")


def spawn_generators(seed: int, count: int, offset: int = 0) -> list[np.random.Generator]:
    """
    One independent stream per environment. Stream i only depends on (seed, offset + i), so
    splitting environments over workers never changes what any of them draws.
    """
    children = np.random.SeedSequence(seed).spawn(offset + count)[offset:]
    return [np.random.default_rng(child) for child in children]


def derive_seed(seed: int, *keys: int) -> int:
    return int(np.random.SeedSequence([seed, *keys]).generate_state(1)[0])


def starmap(function: Callable, arguments: Iterable[tuple], workers: int = 1) -> list:
    """Runs inline for a single worker, otherwise over a process pool. Results keep the input order."""
    arguments = list(arguments)
    if workers <= 1 or len(arguments) <= 1:
        return [function(*args) for args in arguments]
    with multiprocessing.Pool(min(workers, len(arguments))) as pool:
        return pool.starmap(function, arguments)


def perp(v: np.ndarray) -> np.ndarray:
    """Rotates planar (x, z) vectors by +90 degrees."""
    return np.stack([-v[..., 1], v[..., 0]], axis=-1)


def leg_direction(angle: np.ndarray) -> np.ndarray:
    """Unit vector of a link hanging straight down at angle 0, swinging forward for positive angles."""
    return np.stack([np.sin(angle), -np.cos(angle)], axis=-1)


def world_to_base(pitch: np.ndarray, vec: np.ndarray) -> np.ndarray:
    """
    Planar world vectors (..., 2) into the base frame as 3-vectors with a zero y component.
    pitch must broadcast against vec[..., 0].
    """
    c, s = np.cos(pitch), np.sin(pitch)
    x = c * vec[..., 0] + s * vec[..., 1]
    z = -s * vec[..., 0] + c * vec[..., 1]
    return np.stack([x, np.zeros_like(x), z], axis=-1)


def wrap_angle(angle):
    return (angle + np.pi) % (2 * np.pi) - np.pi
