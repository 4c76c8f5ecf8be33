import math
import os
from typing import Optional, Union

import numpy as np

from errors import InvalidSpecError
from models import LadderSpec, TerrainInstance, TerrainKind, CurriculumState, CurriculumSchedule, EpisodeOutcome

CELL_SIZE = 0.1
NOMINAL_BASE_HEIGHT = 0.55
MAX_PLATFORM_OFFSET = 0.15
MIN_FOOT_CLEARANCE = 0.06
LADDER_BASE_X = 1.0
FIRST_RUNG_HEIGHT = 0.15
FIELD_X_RANGE = (-4.0, 6.0)
FIELD_Y_RANGE = (-1.0, 1.0)
ROUGH_MAX_AMPLITUDE = 0.2
SPEC_TOLERANCE = 1e-9


def validate_ladder_spec(spec: LadderSpec):
    if spec.num_rungs < 2:
        raise InvalidSpecError("num_rungs >= 2", f"num_rungs={spec.num_rungs}")
    if spec.spacing_m <= 0:
        raise InvalidSpecError("spacing_m > 0", f"spacing_m={spec.spacing_m}")
    if (spec.num_rungs - 1) * spec.spacing_m > spec.length_m + SPEC_TOLERANCE:
        raise InvalidSpecError("(num_rungs - 1) * spacing_m <= length_m",
                               f"{spec.num_rungs - 1} * {spec.spacing_m} > {spec.length_m}")
    if not spec.rung_minor_radius_m > 0:
        raise InvalidSpecError("rung_minor_radius_m > 0", f"rung_minor_radius_m={spec.rung_minor_radius_m}")
    if spec.rung_major_radius_m < spec.rung_minor_radius_m:
        raise InvalidSpecError("rung_major_radius_m >= rung_minor_radius_m",
                               f"{spec.rung_major_radius_m} < {spec.rung_minor_radius_m}")
    if not 0 < spec.incline_rad <= math.pi / 2 + SPEC_TOLERANCE:
        raise InvalidSpecError("0 < incline_rad <= pi/2", f"incline_rad={spec.incline_rad}")
    if not 0 <= spec.platform_offset_m <= MAX_PLATFORM_OFFSET + SPEC_TOLERANCE:
        raise InvalidSpecError("0 <= platform_offset_m <= 0.15", f"platform_offset_m={spec.platform_offset_m}")


def _empty_field(x_range=FIELD_X_RANGE, y_range=FIELD_Y_RANGE) -> tuple[np.ndarray, tuple[float, float]]:
    cols = int(round((x_range[1] - x_range[0]) / CELL_SIZE))
    rows = int(round((y_range[1] - y_range[0]) / CELL_SIZE)) + 1
    origin = (x_range[0], y_range[0])
    return np.zeros((rows, cols)), origin


def _cell_xs(cells: np.ndarray, origin) -> np.ndarray:
    return origin[0] + CELL_SIZE * np.arange(cells.shape[1])


def generate_ladder(spec: LadderSpec, rng: np.random.Generator, level=0, seed=0,
                    base_height=NOMINAL_BASE_HEIGHT, goal_distance=(0.5, 0.8), heading_range=0.0) -> TerrainInstance:
    """
    Lays the ladder out in the sagittal plane. Rung 0 sits at the ladder base, the rest follow every
    spacing_m along the incline. The end platform starts past the top rung, leaving at least
    MIN_FOOT_CLEARANCE horizontally (plus the random platform offset) and vertically.
    """
    validate_ladder_spec(spec)
    direction = np.array([math.cos(spec.incline_rad), math.sin(spec.incline_rad)])
    base = np.array([LADDER_BASE_X, FIRST_RUNG_HEIGHT])
    steps = spec.spacing_m * np.arange(spec.num_rungs)
    rung_centers = base[None, :] + steps[:, None] * direction[None, :]

    top = rung_centers[-1]
    rise = max(MIN_FOOT_CLEARANCE, 0.5 * spec.spacing_m * direction[1])
    platform_height = float(top[1] + min(rise, spec.spacing_m))
    lip_x = float(top[0] + spec.rung_major_radius_m + MIN_FOOT_CLEARANCE + spec.platform_offset_m)

    x_end = max(FIELD_X_RANGE[1], lip_x + 3.0)
    cells, origin = _empty_field((FIELD_X_RANGE[0], x_end))
    cells[:, _cell_xs(cells, origin) >= lip_x] = platform_height
    ground_profile = np.array([[FIELD_X_RANGE[0], 0.0], [lip_x - 0.01, 0.0], [lip_x, platform_height],
                               [x_end, platform_height]])

    goal_x = lip_x + rng.uniform(*goal_distance)
    heading = rng.uniform(-heading_range, heading_range) if heading_range > 0 else 0.0
    spawn_x = LADDER_BASE_X - 0.75
    return TerrainInstance(kind=TerrainKind.LADDER, ladder=spec, rung_centers=rung_centers,
                           platform_height_m=platform_height, platform_lip_x=lip_x, rough_cells=cells,
                           cell_size_m=CELL_SIZE, origin=origin, ground_profile=ground_profile,
                           spawn_region=(spawn_x - 0.15, spawn_x + 0.05, 0.0, 0.0),
                           goal_pose=(float(goal_x), platform_height + base_height, float(heading)),
                           level=level, seed=seed)


def _rough_pattern(rng: np.random.Generator, cells: np.ndarray, origin) -> np.ndarray:
    """Unit-scale boxes and slopes along x, with 0.5 m lateral blocks."""
    xs = _cell_xs(cells, origin)
    profile = np.zeros_like(xs)
    x = xs[0]
    while x < xs[-1]:
        seg = rng.uniform(0.5, 1.0)
        mask = (xs >= x) & (xs < x + seg)
        if rng.random() < 0.5:
            profile[mask] = rng.uniform(0.0, 1.0)
        else:
            start, end = rng.uniform(0.0, 1.0, size=2)
            profile[mask] = np.linspace(start, end, int(mask.sum())) if mask.any() else profile[mask]
        x += seg
    block_rows = max(1, int(round(0.5 / CELL_SIZE)))
    lateral = rng.uniform(0.0, 0.25, size=(cells.shape[0] + block_rows - 1) // block_rows)
    lateral = np.repeat(lateral, block_rows)[:cells.shape[0]]
    return profile[None, :] + lateral[:, None]


def generate_rough(difficulty: float, rng: np.random.Generator, level=0, seed=0, max_amplitude=ROUGH_MAX_AMPLITUDE,
                   base_height=NOMINAL_BASE_HEIGHT, goal_distance=(1.0, 3.0), heading_range=0.0) -> TerrainInstance:
    if not 0.0 <= difficulty <= 1.0:
        raise InvalidSpecError("0 <= difficulty <= 1", f"difficulty={difficulty}")
    cells, origin = _empty_field()
    raw = _rough_pattern(rng, cells, origin)
    # keep the spawn patch level so the robot never starts inside a box
    spawn = (-0.4, 0.4)
    xs = _cell_xs(cells, origin)
    spawn_mask = (xs >= spawn[0] - 0.3) & (xs <= spawn[1] + 0.3)
    center_row = int(round(-origin[1] / CELL_SIZE))
    raw[:, spawn_mask] = raw[center_row, spawn_mask].mean()
    span = raw.max() - raw.min()
    unit = (raw - raw.min()) / span if span > 0 else np.zeros_like(raw)
    cells = difficulty * max_amplitude * unit
    return _finish_open_terrain(TerrainKind.ROUGH, cells, origin, spawn, rng, level, seed, base_height,
                                goal_distance, heading_range)


def generate_flat(rng: np.random.Generator, level=0, seed=0, base_height=NOMINAL_BASE_HEIGHT,
                  goal_distance=(1.0, 3.0), heading_range=0.0) -> TerrainInstance:
    cells, origin = _empty_field()
    return _finish_open_terrain(TerrainKind.FLAT, cells, origin, (-0.4, 0.4), rng, level, seed, base_height,
                                goal_distance, heading_range)


def _finish_open_terrain(kind, cells, origin, spawn, rng, level, seed, base_height, goal_distance, heading_range):
    xs = _cell_xs(cells, origin)
    center_row = int(round(-origin[1] / CELL_SIZE))
    ground_profile = np.stack([xs, cells[center_row]], axis=1)
    direction = 1.0 if rng.random() < 0.5 else -1.0
    goal_x = direction * rng.uniform(*goal_distance)
    goal_ground = float(np.interp(goal_x, ground_profile[:, 0], ground_profile[:, 1]))
    heading = rng.uniform(-heading_range, heading_range) if heading_range > 0 else 0.0
    return TerrainInstance(kind=kind, ladder=None, rung_centers=np.zeros((0, 2)), platform_height_m=0.0,
                           platform_lip_x=math.inf, rough_cells=cells, cell_size_m=CELL_SIZE, origin=origin,
                           ground_profile=ground_profile, spawn_region=(spawn[0], spawn[1], 0.0, 0.0),
                           goal_pose=(float(goal_x), goal_ground + base_height, float(heading)), level=level,
                           seed=seed)


def level_parameters(schedule: CurriculumSchedule, level: int) -> dict:
    """Linear interpolation between the schedule endpoints; exact endpoint values at level 0 and max level."""
    f = level / schedule.max_level if schedule.max_level > 0 else 1.0

    def lerp(pair):
        return (1.0 - f) * pair[0] + f * pair[1]

    return {
        "incline_deg": lerp(schedule.incline_range_deg),
        "length_m": lerp(schedule.length_range_m),
        "major_radius_m": lerp(schedule.major_radius_range_m) if level < schedule.max_level
        else schedule.minor_radius_m,
    }


def curriculum_sample(state: CurriculumState, rng: np.random.Generator) -> LadderSpec:
    schedule = state.schedule
    if not 0 <= state.level <= schedule.max_level:
        raise InvalidSpecError("0 <= level <= max_level", f"level={state.level}")
    params = level_parameters(schedule, state.level)
    # length is drawn inside the band up to the next level, which keeps promotions monotone
    upper = level_parameters(schedule, min(state.level + 1, schedule.max_level))["length_m"]
    length = rng.uniform(params["length_m"], upper) if upper > params["length_m"] else params["length_m"]
    spacing = rng.uniform(*schedule.spacing_range_m)
    width = rng.uniform(*schedule.width_range_m)
    offset = rng.uniform(0.0, schedule.max_platform_offset_m)
    return LadderSpec(length_m=float(length), width_m=float(width), spacing_m=float(spacing),
                      rung_minor_radius_m=schedule.minor_radius_m,
                      rung_major_radius_m=max(params["major_radius_m"], schedule.minor_radius_m),
                      incline_rad=math.radians(params["incline_deg"]),
                      num_rungs=rungs_for_length(length, spacing), platform_offset_m=float(offset))


def rungs_for_length(length_m: float, spacing_m: float) -> int:
    return max(2, int(math.floor(length_m / spacing_m + SPEC_TOLERANCE)) + 1)


def curriculum_update(state: CurriculumState, episode_outcome: EpisodeOutcome) -> CurriculumState:
    level, promotions, demotions = state.level, state.promotions, state.demotions
    if episode_outcome == EpisodeOutcome.REACHED_GOAL:
        if level < state.schedule.max_level:
            level += 1
            promotions += 1
    elif episode_outcome == EpisodeOutcome.TERMINATED:
        if level > 0:
            level -= 1
            demotions += 1
    return CurriculumState(level=level, promotions=promotions, demotions=demotions, schedule=state.schedule)


def sample_eval_ladders(count: int, rng: np.random.Generator, incline_deg=90.0, radius_m=0.025,
                        length_range=(1.0, 3.0), width_range=(1.0, 1.25),
                        spacing_range=(0.275, 0.325)) -> list[LadderSpec]:
    if count < 1:
        raise InvalidSpecError("count >= 1", f"count={count}")
    specs = []
    for _ in range(count):
        length = rng.uniform(*length_range)
        spacing = rng.uniform(*spacing_range)
        width = rng.uniform(*width_range)
        offset = rng.uniform(0.0, MAX_PLATFORM_OFFSET)
        specs.append(LadderSpec(length_m=float(length), width_m=float(width), spacing_m=float(spacing),
                                rung_minor_radius_m=radius_m, rung_major_radius_m=radius_m,
                                incline_rad=math.radians(incline_deg), num_rungs=rungs_for_length(length, spacing),
                                platform_offset_m=float(offset)))
    return specs


def ground_height(terrain: TerrainInstance, x: np.ndarray) -> np.ndarray:
    profile = terrain.ground_profile
    return np.interp(x, profile[:, 0], profile[:, 1])


def ground_slope(terrain: TerrainInstance, x: np.ndarray) -> np.ndarray:
    profile = terrain.ground_profile
    dx = np.diff(profile[:, 0])
    slopes = np.diff(profile[:, 1]) / np.where(dx > 0, dx, 1.0)
    idx = np.clip(np.searchsorted(profile[:, 0], x, side="right") - 1, 0, len(slopes) - 1)
    inside = (x >= profile[0, 0]) & (x <= profile[-1, 0])
    return np.where(inside, slopes[idx], 0.0)


def terrain_height(terrain: TerrainInstance, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Highest surface under world points (x, y), rung tops included within the ladder width."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if terrain.kind == TerrainKind.ROUGH:
        col = np.clip(np.round((x - terrain.origin[0]) / terrain.cell_size_m).astype(int), 0,
                      terrain.rough_cells.shape[1] - 1)
        row = np.clip(np.round((y - terrain.origin[1]) / terrain.cell_size_m).astype(int), 0,
                      terrain.rough_cells.shape[0] - 1)
        heights = terrain.rough_cells[row, col]
    else:
        heights = ground_height(terrain, x)
    if terrain.ladder is not None:
        a, b = terrain.ladder.rung_major_radius_m, terrain.ladder.rung_minor_radius_m
        within = np.abs(y) <= 0.5 * terrain.ladder.width_m
        for xc, zc in terrain.rung_centers:
            u = (x - xc) / a
            over = within & (np.abs(u) <= 1.0)
            top = zc + b * np.sqrt(np.clip(1.0 - u * u, 0.0, 1.0))
            heights = np.where(over, np.maximum(heights, top), heights)
    return heights


def is_locally_flat(terrain: TerrainInstance, x: float, radius=0.5, threshold=0.02) -> bool:
    xs = np.linspace(x - radius, x + radius, int(2 * radius / CELL_SIZE) + 1)
    ys = np.zeros_like(xs)
    heights = terrain_height(terrain, xs, ys)
    return float(heights.max() - heights.min()) < threshold


def dump_terrain(terrain: TerrainInstance, path: Union[str, os.PathLike]):
    """One text file per instance: header, rung lines, then the row-major height field."""
    with open(path, "w") as file:
        file.write(f"{terrain.kind.name.lower()} {terrain.level} {terrain.seed}\n")
        if terrain.ladder is not None:
            spec = terrain.ladder
            file.write(f"# length {spec.length_m!r} width {spec.width_m!r} spacing {spec.spacing_m!r} "
                       f"minor {spec.rung_minor_radius_m!r} major {spec.rung_major_radius_m!r} "
                       f"incline {spec.incline_rad!r} offset {spec.platform_offset_m!r}\n")
        for x, z in terrain.rung_centers:
            file.write(f"rung {float(x)!r} {float(z)!r}\n")
        rows, cols = terrain.rough_cells.shape
        file.write(f"field {rows} {cols} {terrain.cell_size_m!r} {terrain.origin[0]!r} {terrain.origin[1]!r}\n")
        for row in terrain.rough_cells:
            file.write(" ".join(f"{v:.6g}" for v in row) + "\n")


def read_terrain_header(path: Union[str, os.PathLike]) -> tuple[str, int, int, Optional[np.ndarray]]:
    with open(path) as file:
        kind, level, seed = file.readline().split()
        rungs = [[float(v) for v in line.split()[1:]] for line in file if line.startswith("rung ")]
    return kind, int(level), int(seed), np.array(rungs) if rungs else None


GROUND_GRID = (-4.0, 10.0, 0.01)
PADDED_RUNG = 1e3


class TerrainBatch:
    """Per-environment terrains resampled onto shared arrays so that contact queries stay vectorized."""

    def __init__(self, terrains: list[TerrainInstance], max_rungs: Optional[int] = None):
        x0, x1, dx = GROUND_GRID
        self.x0, self.dx = x0, dx
        grid = x0 + dx * np.arange(int(round((x1 - x0) / dx)) + 1)
        self.terrains = list(terrains)
        self.ground = np.stack([np.interp(grid, t.ground_profile[:, 0], t.ground_profile[:, 1]) for t in terrains])
        counts = [len(t.rung_centers) for t in terrains]
        r = max([1] + counts) if max_rungs is None else max_rungs
        self.rungs = np.full((len(terrains), r, 2), PADDED_RUNG)
        self.rung_a = np.ones(len(terrains))
        self.rung_b = np.ones(len(terrains))
        for i, t in enumerate(terrains):
            if counts[i]:
                self.rungs[i, :counts[i]] = t.rung_centers
                self.rung_a[i] = t.ladder.rung_major_radius_m
                self.rung_b[i] = t.ladder.rung_minor_radius_m
        self.num_rungs = np.array(counts, dtype=int)

    def __len__(self):
        return self.ground.shape[0]

    def replace(self, env_id: int, terrain: TerrainInstance):
        one = TerrainBatch([terrain], max_rungs=max(self.rungs.shape[1], len(terrain.rung_centers)))
        if one.rungs.shape[1] > self.rungs.shape[1]:
            pad = np.full((len(self), one.rungs.shape[1] - self.rungs.shape[1], 2), PADDED_RUNG)
            self.rungs = np.concatenate([self.rungs, pad], axis=1)
        self.terrains[env_id] = terrain
        self.ground[env_id] = one.ground[0]
        self.rungs[env_id] = one.rungs[0]
        self.rung_a[env_id] = one.rung_a[0]
        self.rung_b[env_id] = one.rung_b[0]
        self.num_rungs[env_id] = one.num_rungs[0]

    def select(self, ids) -> "TerrainBatch":
        return TerrainBatch([self.terrains[i] for i in np.atleast_1d(ids)], max_rungs=self.rungs.shape[1])

    def ground_at(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Ground height and slope for points x of shape (N, P)."""
        pos = (x - self.x0) / self.dx
        last = self.ground.shape[1] - 1
        i0 = np.clip(np.floor(pos).astype(int), 0, last - 1)
        frac = np.clip(pos - i0, 0.0, 1.0)
        g0 = np.take_along_axis(self.ground, i0, axis=1)
        g1 = np.take_along_axis(self.ground, i0 + 1, axis=1)
        inside = (pos >= 0) & (pos <= last)
        slope = np.where(inside, (g1 - g0) / self.dx, 0.0)
        return g0 * (1.0 - frac) + g1 * frac, slope
