import math
from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence, Union

import numpy as np

from errors import SimulationDivergedError
from ladder_terrain import TerrainBatch, ground_height
from models import RobotModel, RobotState, ContactState, HookModel, HookStatus, DisturbanceConfig, EndEffector, \
    TerrainInstance, RandomizationRecord, NUM_DOF, NUM_CONTACT_POINTS
from util import log, perp, leg_direction, world_to_base

PHYSICS_DT = 1.0 / 400.0
SUBSTEPS = 8
POLICY_DT = PHYSICS_DT * SUBSTEPS
TERMINATION_ANGLE = math.radians(100.0)
TARGET_SANITY_RAD = 4.0
# relative tolerance of the per-step energy balance
ENERGY_SLACK = 1e-9

# point table: 4 feet, (mid, knee) per thigh, mid per shank, 4 base corners, base center, 4 hook pockets
BASE_CENTER = NUM_CONTACT_POINTS
POCKETS = slice(NUM_CONTACT_POINTS + 1, NUM_CONTACT_POINTS + 5)
NUM_POINTS = NUM_CONTACT_POINTS + 5
_LEVEL = np.array([2] * 4 + [1] * 8 + [2] * 4 + [0] * 5 + [2] * 4)
_LEG = np.array(list(range(4)) + [i for i in range(4) for _ in range(2)] + list(range(4)) + [0] * 5 + list(range(4)))
THIGH_COM = np.arange(4, 12, 2)
SHANK_COM = np.arange(12, 16)
MASS_POINTS = np.concatenate([[BASE_CENTER], THIGH_COM, SHANK_COM])


def check_termination(state: RobotState) -> np.ndarray:
    """True where |pitch| or |roll| exceeds 100 degrees."""
    return (np.abs(state.pitch) > TERMINATION_ANGLE) | (np.abs(state.roll) > TERMINATION_ANGLE)


def pocket_frame(foot_pos: np.ndarray, shank_angle: np.ndarray, hook: HookModel) -> tuple[np.ndarray, np.ndarray]:
    """Pocket center and unit aperture direction, both in world coordinates."""
    along = leg_direction(shank_angle)
    forward = perp(along)
    off = hook.pocket_center_offset
    center = foot_pos + off[0] * forward + off[1] * along
    ax = hook.aperture_axis
    aperture = ax[0] * forward + ax[1] * along
    aperture = aperture / np.linalg.norm(aperture, axis=-1, keepdims=True)
    return center, aperture


def hook_engage_check(foot_pos, shank_angle, rung_center, rung_radius, hook: HookModel, foot_radius=None):
    """
    Engaged iff the rung fits the opening, the pocket center is within the engage tolerance of the rung
    center and the rung sits on the aperture side of the pocket. Resting means the hook touches the rung
    without capturing it. Scalar inputs give a HookStatus, batched inputs an int array of HookStatus values.
    """
    foot_pos = np.asarray(foot_pos, dtype=float)
    rung_center = np.asarray(rung_center, dtype=float)
    rung_radius = np.asarray(rung_radius, dtype=float)
    shell = hook.shell_radius_m if foot_radius is None else foot_radius
    center, aperture = pocket_frame(foot_pos, np.asarray(shank_angle, dtype=float), hook)
    rel = rung_center - center
    dist = np.linalg.norm(rel, axis=-1)
    faces = (dist < 1e-9) | (np.sum(rel * aperture, axis=-1) >= dist * math.cos(hook.aperture_half_angle_rad))
    engaged = (rung_radius < hook.opening_radius_m) & (dist <= hook.engage_tolerance_m) & faces
    touching = np.linalg.norm(foot_pos - rung_center, axis=-1) <= rung_radius + shell + hook.engage_tolerance_m
    resting = ~engaged & ((dist <= hook.engage_tolerance_m) | touching)
    status = np.where(engaged, HookStatus.ENGAGED.value, np.where(resting, HookStatus.RESTING.value,
                                                                  HookStatus.DISENGAGED.value))
    if status.ndim == 0:
        return HookStatus(int(status))
    return status


def hook_release_check(relative_motion, aperture_dir, hook: HookModel, min_speed=0.0):
    """
    An engaged hook lets go when the foot moves against the aperture direction, i.e. the rung leaves
    through the opening, within the aperture half angle. Anything else keeps the pin (and its tension).
    """
    motion = np.asarray(relative_motion, dtype=float)
    escape = -np.asarray(aperture_dir, dtype=float)
    speed = np.linalg.norm(motion, axis=-1)
    escape_norm = np.linalg.norm(escape, axis=-1)
    cos_angle = np.sum(motion * escape, axis=-1) / np.maximum(speed * escape_norm, 1e-300)
    released = (speed > max(min_speed, 1e-12)) & (cos_angle >= math.cos(hook.aperture_half_angle_rad))
    if np.ndim(released) == 0:
        return bool(released)
    return released


def resolve_contacts(points: np.ndarray, velocities: np.ndarray, radii: np.ndarray, friction: np.ndarray,
                     anchors: np.ndarray, was_touching: np.ndarray, prev_surface: np.ndarray, terrain: TerrainBatch,
                     contact_model, exclude_rung: Optional[np.ndarray] = None) -> dict:
    """
    Penalty contacts of disc-shaped points against the ground profile and the (elliptic) rungs.

    Normal force k_n * depth - d_n * v_n, floored at zero. Tangential friction is a spring to a stick
    anchor with damping, capped by the Coulomb cone; when capped the anchor slides along, and the spring
    it leaves behind never stores more than it did before the slide.
    All arrays are (N, P, ...) and the point radius broadcasts over P.
    """
    n, p = points.shape[:2]
    x, z = points[..., 0], points[..., 1]
    h, slope = terrain.ground_at(x)
    norm = np.sqrt(1.0 + slope * slope)
    phi_ground = (z - h) / norm - radii
    n_ground = np.stack([-slope / norm, 1.0 / norm], axis=-1)

    d = points[:, :, None, :] - terrain.rungs[:, None, :, :]
    inflate = np.broadcast_to(radii, (n, p))[..., None]
    a = terrain.rung_a[:, None, None] + inflate
    b = terrain.rung_b[:, None, None] + inflate
    k = np.maximum(np.sqrt((d[..., 0] / a) ** 2 + (d[..., 1] / b) ** 2), 1e-12)
    grad = np.stack([d[..., 0] / (a * a), d[..., 1] / (b * b)], axis=-1) / k[..., None]
    grad_norm = np.maximum(np.linalg.norm(grad, axis=-1), 1e-12)
    phi_rungs = (k - 1.0) / grad_norm
    n_rungs = grad / grad_norm[..., None]
    if exclude_rung is not None:
        rung_ids = np.arange(terrain.rungs.shape[1])
        phi_rungs = np.where(rung_ids[None, None, :] == exclude_rung[..., None], np.inf, phi_rungs)

    phis = np.concatenate([phi_ground[..., None], phi_rungs], axis=2)
    normals = np.concatenate([n_ground[:, :, None, :], n_rungs], axis=2)
    surface = np.argmin(phis, axis=2)
    phi = np.take_along_axis(phis, surface[..., None], axis=2)[..., 0]
    normal = np.take_along_axis(normals, surface[..., None, None], axis=2)[:, :, 0, :]
    tangent = np.stack([normal[..., 1], -normal[..., 0]], axis=-1)

    depth = np.maximum(-phi, 0.0)
    pressing = depth > 0.0
    flag = phi <= contact_model.tolerance_m
    vn = np.sum(velocities * normal, axis=-1)
    vt = np.sum(velocities * tangent, axis=-1)
    fn = np.where(pressing, np.maximum(contact_model.normal_stiffness * depth - contact_model.normal_damping * vn,
                                       0.0), 0.0)

    fresh = ~was_touching | (surface != prev_surface)
    anchors = np.where(fresh[..., None], points, anchors)
    slip_disp = np.sum((points - anchors) * tangent, axis=-1)
    spring = -contact_model.tangential_stiffness * slip_disp
    ft = spring - contact_model.tangential_damping * vt
    limit = friction * fn
    slipping = np.abs(ft) > limit
    ft = np.where(slipping, np.sign(ft) * limit, ft)
    # a sliding anchor only ever gives up spring energy
    kept = np.clip(spring, -limit, limit)
    anchors = np.where(slipping[..., None], points + (kept / contact_model.tangential_stiffness)[..., None] * tangent,
                       anchors)
    ft = np.where(pressing, ft, 0.0)
    anchors = np.where(pressing[..., None], anchors, points)
    slip_disp = np.where(pressing, np.sum((points - anchors) * tangent, axis=-1), 0.0)

    force = fn[..., None] * normal + ft[..., None] * tangent
    energy = 0.5 * contact_model.normal_stiffness * depth ** 2 + \
        0.5 * contact_model.tangential_stiffness * slip_disp ** 2
    return {"force": force, "normal_force": fn, "normal": normal, "flag": flag, "pressing": pressing,
            "surface": np.where(pressing, surface, -1), "anchors": anchors, "energy": energy.sum(axis=1)}


@dataclass
class ResetCacheEntry:
    terrain: TerrainInstance
    state: RobotState
    contacts: ContactState


def apply_randomization(model: RobotModel, rng: np.random.Generator, config: DisturbanceConfig) -> RobotModel:
    """Samples the per-episode physical randomization; zero-width ranges leave the model value alone."""
    changes = {}
    lo, hi = config.added_mass_range_kg
    if hi > lo:
        changes["added_mass"] = float(rng.uniform(lo, hi))
    lo, hi = config.friction_range
    if hi > lo:
        changes["foot_friction"] = tuple(float(v) for v in rng.uniform(lo, hi, size=4))
    if config.base_force_range_n > 0:
        force = rng.uniform(-config.base_force_range_n, config.base_force_range_n, size=3)
        force[1] = 0.0
        changes["external_base_force"] = tuple(float(v) for v in force)
    if config.base_torque_range_nm > 0:
        torque = rng.uniform(-config.base_torque_range_nm, config.base_torque_range_nm, size=3)
        changes["external_base_torque"] = (0.0, float(torque[1]), 0.0)
    if config.foot_force_range_n > 0:
        forces = rng.uniform(-config.foot_force_range_n, config.foot_force_range_n, size=(4, 3))
        forces[:, 1] = 0.0
        changes["external_foot_forces"] = tuple(tuple(float(v) for v in row) for row in forces)
    return replace(model, **changes) if changes else model


def push_due(step_index: int, period_s: float, policy_dt: float = POLICY_DT) -> bool:
    period_steps = int(round(period_s / policy_dt))
    return period_s > 0 and step_index > 0 and step_index % period_steps == 0


def apply_push(state: RobotState, rng: Union[np.random.Generator, Sequence[np.random.Generator]], std: float,
               env_ids: Optional[np.ndarray] = None) -> RobotState:
    """Adds N(0, std^2) per axis to the base velocity; the lateral axis is drawn and dropped."""
    state = state.copy()
    ids = np.arange(state.num_envs) if env_ids is None else np.asarray(env_ids)
    if std <= 0 or len(ids) == 0:
        return state
    if isinstance(rng, np.random.Generator):
        kicks = rng.normal(0.0, std, size=(len(ids), 3))
    else:
        kicks = np.stack([rng[i].normal(0.0, std, size=3) for i in ids])
    state.base_vel[ids] += kicks[:, [0, 2]]
    return state


def reset(model: RobotModel, terrain: Union[TerrainInstance, Callable[[], TerrainInstance]],
          cache: Optional[ResetCacheEntry], rng: np.random.Generator, reuse_probability=0.5, base_velocity_noise=0.2,
          joint_velocity_noise=0.5, joint_position_noise=0.1) -> tuple[TerrainInstance, RobotState, ContactState, bool]:
    """
    Single-environment reset. With a cache entry, half of the resets continue from the cached state
    on its terrain with only the velocities perturbed; the rest spawn fresh in the spawn region.
    `terrain` may be a factory, called only for a fresh spawn.
    """
    if cache is not None and rng.random() < reuse_probability:
        state = cache.state.copy()
        state.base_vel += rng.normal(0.0, base_velocity_noise, size=state.base_vel.shape)
        state.pitch_rate += rng.normal(0.0, base_velocity_noise, size=state.pitch_rate.shape)
        state.qd += rng.normal(0.0, joint_velocity_noise, size=state.qd.shape)
        return cache.terrain, state, cache.contacts.copy(), True

    if callable(terrain):
        terrain = terrain()
    x_min, x_max = terrain.spawn_region[0], terrain.spawn_region[1]
    x = rng.uniform(x_min, x_max) if x_max > x_min else x_min
    q = model.q0 + rng.uniform(-joint_position_noise, joint_position_noise, size=8)
    state = spawn_state(model, terrain, x, q)
    contacts = ContactState.empty(1)
    contacts.friction[0] = model.foot_friction
    return terrain, state, contacts, False


def spawn_state(model: RobotModel, terrain: TerrainInstance, x: float, q: Optional[np.ndarray] = None,
                pitch: float = 0.0, clearance: float = 0.005) -> RobotState:
    """A resting robot whose lowest foot sits `clearance` above the ground below it."""
    q = model.q0 if q is None else np.asarray(q, dtype=float)
    state = RobotState.zeros(1)
    state.base_pos[0] = (x, 0.0)
    state.pitch[0] = pitch
    state.q[0] = q
    state.action_hist[0] = q
    feet = forward_kinematics(model, state)["feet"][0]
    gaps = feet[:, 1] - ground_height(terrain, feet[:, 0]) - model.foot_radius
    state.base_pos[0, 1] = -float(gaps.min()) + clearance
    return state


def forward_kinematics(model: RobotModel, state_or_pos, hook: Optional[HookModel] = None) -> dict:
    if isinstance(state_or_pos, RobotState):
        pos = state_or_pos.generalized()[0]
    else:
        pos = state_or_pos
    base = pos[:, :2]
    pitch = pos[:, 2]
    q = pos[:, 3:]
    a1 = pitch[:, None] + q[:, 0::2]
    a2 = a1 + q[:, 1::2]
    heading = np.stack([np.cos(pitch), np.sin(pitch)], axis=-1)
    up = perp(heading)
    hips = base[:, None, :] + model.hip_offsets[None, :, None] * heading[:, None, :]
    d1 = leg_direction(a1)
    d2 = leg_direction(a2)
    knees = hips + model.thigh_length * d1
    feet = knees + model.shank_length * d2
    half_l, half_h = 0.5 * model.trunk_length, 0.5 * model.trunk_height
    corners = np.stack([base + sx * half_l * heading + sz * half_h * up
                        for sx, sz in ((1, 1), (1, -1), (-1, 1), (-1, -1))], axis=1)
    thigh_pts = np.stack([hips + 0.5 * model.thigh_length * d1, knees], axis=2).reshape(-1, 8, 2)
    shank_mid = knees + 0.5 * model.shank_length * d2
    pockets, apertures = pocket_frame(feet, a2, hook or model.hook)
    points = np.concatenate([feet, thigh_pts, shank_mid, corners, base[:, None, :], pockets], axis=1)
    return {"base": base, "pitch": pitch, "hips": hips, "knees": knees, "feet": feet, "a1": a1, "a2": a2,
            "points": points, "apertures": apertures}


class PlanarSimulator:
    """
    Batched sagittal-plane quadruped. Generalized coordinates are (x, z, pitch, 8 joints); the base and the
    eight links are rigid bodies, contact geometry is a set of discs riding on them.
    """
    verbose = False

    def __init__(self, model: RobotModel, num_envs: int):
        self.model = model
        self.num_envs = num_envs
        self.added_mass = np.zeros(num_envs)
        self.external_base_force = np.zeros((num_envs, 3))
        self.external_base_torque = np.zeros((num_envs, 3))
        self.external_foot_forces = np.zeros((num_envs, 4, 3))
        self.incidents = {"hook_breakaway": 0, "hook_release": 0, "hook_engage": 0, "energy_clamp": 0}
        # (foot normal force, hook engaged) after every physics substep while a list is attached
        self.substep_trace: Optional[list] = None

        foot_radius = model.hook.shell_radius_m if model.end_effector == EndEffector.HOOK else model.foot_radius
        self.radii = np.array([foot_radius] * 4 + [model.link_radius] * 12 + [model.base_corner_radius] * 4)
        base_inertia = model.base_mass * (model.trunk_length ** 2 + model.trunk_height ** 2) / 12.0
        thigh_inertia = model.thigh_mass * model.thigh_length ** 2 / 12.0
        shank_inertia = model.shank_mass * model.shank_length ** 2 / 12.0
        rot = np.zeros((NUM_DOF, NUM_DOF))
        rot[2, 2] += base_inertia
        for leg in range(4):
            w = np.zeros(NUM_DOF)
            w[2] = 1.0
            w[3 + 2 * leg] = 1.0
            rot += thigh_inertia * np.outer(w, w)
            w[4 + 2 * leg] = 1.0
            rot += shank_inertia * np.outer(w, w)
        self.rotational_mass = rot

    def set_env_params(self, env_ids, models: Sequence[RobotModel]):
        for i, m in zip(np.atleast_1d(env_ids), models):
            self.added_mass[i] = m.added_mass
            self.external_base_force[i] = m.external_base_force
            self.external_base_torque[i] = m.external_base_torque
            self.external_foot_forces[i] = np.asarray(m.external_foot_forces, dtype=float)

    def randomization_record(self) -> RandomizationRecord:
        return RandomizationRecord(added_mass=self.added_mass.copy(),
                                   external_base_force=self.external_base_force.copy(),
                                   external_base_torque=self.external_base_torque.copy(),
                                   external_foot_forces=self.external_foot_forces.copy())

    def masses(self, n: int) -> np.ndarray:
        m = self.model
        base = m.base_mass + self.added_mass[:n]
        return np.concatenate([base[:, None], np.full((n, 4), m.thigh_mass), np.full((n, 4), m.shank_mass)], axis=1)

    def jacobians(self, kin: dict) -> np.ndarray:
        """Point Jacobians d(point)/d(generalized coordinates), (N, P, 2, 11)."""
        points = kin["points"]
        n = points.shape[0]
        jac = np.zeros((n, NUM_POINTS, 2, NUM_DOF))
        jac[:, :, 0, 0] = 1.0
        jac[:, :, 1, 1] = 1.0
        jac[:, :, :, 2] = perp(points - kin["base"][:, None, :])
        for leg in range(4):
            on_leg = np.flatnonzero((_LEG == leg) & (_LEVEL >= 1))
            hip_col = jac[:, :, :, 3 + 2 * leg]
            hip_col[:, on_leg] = perp(points[:, on_leg] - kin["hips"][:, leg:leg + 1])
            on_shank = np.flatnonzero((_LEG == leg) & (_LEVEL == 2))
            knee_col = jac[:, :, :, 4 + 2 * leg]
            knee_col[:, on_shank] = perp(points[:, on_shank] - kin["knees"][:, leg:leg + 1])
        return jac

    def bias_accelerations(self, kin: dict, vel: np.ndarray) -> np.ndarray:
        """Point accelerations from velocity products alone (zero generalized acceleration)."""
        points = kin["points"]
        base = kin["base"][:, None, :]
        w0 = vel[:, 2]
        w1 = w0[:, None] + vel[:, 3::2]
        w2 = w1 + vel[:, 4::2]
        hips = kin["hips"][:, _LEG]
        knees = kin["knees"][:, _LEG]
        w1p = w1[:, _LEG][..., None]
        w2p = w2[:, _LEG][..., None]
        level = _LEVEL[None, :, None]
        w0sq = (w0 ** 2)[:, None, None]
        acc_base = -w0sq * (points - base)
        acc_thigh = -w0sq * (hips - base) - w1p ** 2 * (points - hips)
        acc_shank = -w0sq * (hips - base) - w1p ** 2 * (knees - hips) - w2p ** 2 * (points - knees)
        return np.where(level == 0, acc_base, np.where(level == 1, acc_thigh, acc_shank))

    def mass_matrix(self, jac: np.ndarray, masses: np.ndarray) -> np.ndarray:
        jm = jac[:, MASS_POINTS]
        return np.einsum("nb,nbki,nbkj->nij", masses, jm, jm) + self.rotational_mass[None]

    def _dynamics(self, pos, vel, tau, contacts: ContactState, terrain: TerrainBatch, commit: bool):
        model = self.model
        n = pos.shape[0]
        kin = forward_kinematics(model, pos)
        jac = self.jacobians(kin)
        masses = self.masses(n)
        mass = self.mass_matrix(jac, masses)
        point_vel = np.einsum("npki,ni->npk", jac, vel)
        bias = self.bias_accelerations(kin, vel)

        jm = jac[:, MASS_POINTS]
        gen = -np.einsum("nb,nbki,nbk->ni", masses, jm, bias[:, MASS_POINTS])
        gen -= model.gravity * np.einsum("nb,nbi->ni", masses, jm[:, :, 1, :])
        gen[:, 3:] += tau - model.joint_damping * vel[:, 3:]

        hooked = model.end_effector == EndEffector.HOOK
        engaged = contacts.hook_engaged.copy()
        engaged_rung = contacts.engaged_rung.copy()
        exclude = None
        if hooked:
            exclude = np.full((n, NUM_CONTACT_POINTS), -1)
            # a rung a hook just let go of stays transparent to that foot until they separate
            exclude[:, :4] = np.where(engaged, engaged_rung, contacts.hook_cooldown_rung)
        friction = np.concatenate([contacts.friction, np.full((n, 16), model.contact.body_friction)], axis=1)
        cpts = slice(0, NUM_CONTACT_POINTS)
        res = resolve_contacts(kin["points"][:, cpts], point_vel[:, cpts], self.radii, friction, contacts.anchors,
                               contacts.point_surface >= 0, contacts.point_surface, terrain, model.contact, exclude)
        forces = np.zeros((n, NUM_POINTS, 2))
        forces[:, cpts] = res["force"]
        forces[:, BASE_CENTER] += self.external_base_force[:, [0, 2]]
        forces[:, :4] += self.external_foot_forces[:, :, [0, 2]]
        foot_normal = res["normal_force"][:, :4].copy()
        energy = res["energy"]

        if hooked:
            pin = self._hook_pins(kin, point_vel, terrain, contacts, engaged, engaged_rung, commit)
            forces[:, POCKETS] += pin["force"]
            foot_normal = np.where(engaged, pin["normal_force"], foot_normal)
            engaged, engaged_rung = pin["engaged"], pin["engaged_rung"]
            energy = energy + pin["energy"]

        gen += np.einsum("npki,npk->ni", jac, forces)
        gen[:, 2] += self.external_base_torque[:, 1]
        acc = np.linalg.solve(mass, gen[..., None])[..., 0]

        if commit:
            contacts.anchors = res["anchors"]
            contacts.point_surface = res["surface"]
            contacts.point_contact = res["flag"]
            contacts.hook_engaged = engaged
            contacts.engaged_rung = engaged_rung
            foot_force = res["force"][:, :4]
            if hooked:
                foot_force = foot_force + pin["force"]
            contacts.foot_force = np.stack([foot_force[..., 0], np.zeros((n, 4)), foot_force[..., 1]], axis=-1)
            contacts.foot_normal_force = foot_normal
            contacts.point_contact[:, :4] |= engaged
        return acc, {"energy": energy, "mass": mass, "kin": kin}

    def _hook_pins(self, kin, point_vel, terrain: TerrainBatch, contacts: ContactState, engaged, engaged_rung,
                   commit: bool) -> dict:
        hook, cm = self.model.hook, self.model.contact
        n = engaged.shape[0]
        pockets = kin["points"][:, POCKETS]
        pocket_vel = point_vel[:, POCKETS]
        feet = kin["feet"]
        rows = np.arange(n)[:, None]
        rung_idx = np.clip(engaged_rung, 0, terrain.rungs.shape[1] - 1)
        centers = terrain.rungs[rows, rung_idx]

        offset = pockets - centers
        stretch = offset - contacts.hook_anchor
        force = np.where(engaged[..., None], -cm.normal_stiffness * stretch - cm.normal_damping * pocket_vel, 0.0)
        radial = feet - centers
        radial = radial / np.maximum(np.linalg.norm(radial, axis=-1, keepdims=True), 1e-12)
        normal_force = np.sum(force * radial, axis=-1)
        energy = np.where(engaged, 0.5 * cm.normal_stiffness * np.sum(stretch * stretch, axis=-1), 0.0).sum(axis=1)

        if not commit:
            return {"force": force, "normal_force": normal_force, "engaged": engaged, "engaged_rung": engaged_rung,
                    "energy": energy}

        breakaway = engaged & (-normal_force > hook.breakaway_force_n)
        escaping = engaged & hook_release_check(pocket_vel, kin["apertures"], hook, min_speed=hook.release_speed_mps)
        released = breakaway | escaping
        if released.any():
            contacts.hook_breakaways += breakaway
            contacts.hook_cooldown_rung = np.where(released, engaged_rung, contacts.hook_cooldown_rung)
            self.incidents["hook_breakaway"] += int(breakaway.sum())
            self.incidents["hook_release"] += int(escaping.sum())
            if self.verbose:
                for env_id, leg in zip(*np.nonzero(breakaway)):
                    log(f"hook breakaway on leg {leg} at rung {engaged_rung[env_id, leg]}", env_id)
            force = np.where(released[..., None], 0.0, force)
            normal_force = np.where(released, 0.0, normal_force)
        engaged = engaged & ~released
        engaged_rung = np.where(engaged, engaged_rung, -1)

        # capture: nearest rung to each free pocket
        if terrain.rungs.shape[1] and (~engaged).any():
            dists = np.linalg.norm(pockets[:, :, None, :] - terrain.rungs[:, None, :, :], axis=-1)
            nearest = np.argmin(dists, axis=2)
            near_centers = terrain.rungs[rows, nearest]
            radius = np.broadcast_to(terrain.rung_a[:, None], nearest.shape)
            status = hook_engage_check(feet, kin["a2"], near_centers, radius, hook, self.radii[0])
            left = terrain.rungs[rows, np.clip(contacts.hook_cooldown_rung, 0, terrain.rungs.shape[1] - 1)]
            pocket_clear = np.linalg.norm(pockets - left, axis=-1) > hook.opening_radius_m + hook.engage_tolerance_m
            shell_clear = np.linalg.norm(feet - left, axis=-1) > terrain.rung_a[:, None] + self.radii[0]
            cleared = (contacts.hook_cooldown_rung < 0) | (pocket_clear & shell_clear)
            contacts.hook_cooldown_rung = np.where(cleared, -1, contacts.hook_cooldown_rung)
            valid = nearest < terrain.num_rungs[:, None]
            capture = ~engaged & valid & (status == HookStatus.ENGAGED.value) & \
                ((contacts.hook_cooldown_rung < 0) | (contacts.hook_cooldown_rung != nearest))
            if capture.any():
                self.incidents["hook_engage"] += int(capture.sum())
            engaged = engaged | capture
            engaged_rung = np.where(capture, nearest, engaged_rung)
            # pin rest offset: where the rung was caught
            contacts.hook_anchor = np.where(capture[..., None], pockets - near_centers, contacts.hook_anchor)
        return {"force": force, "normal_force": normal_force, "engaged": engaged, "engaged_rung": engaged_rung,
                "energy": energy}

    def step(self, state: RobotState, contacts: ContactState, joint_targets: np.ndarray,
             terrain: TerrainBatch) -> tuple[RobotState, ContactState]:
        """
        One policy step: SUBSTEPS physics steps of PHYSICS_DT with the PD loop closed every substep,
        integrated kick-drift-kick. Raises SimulationDivergedError (carrying the stepped batch) when any
        environment ends up with a non-finite state.

        Energy balance: an environment never ends the step with more mechanical energy than it started
        with plus the work done by the joint torques and the external forces. Any integration surplus is
        taken out of the kinetic energy.
        """
        model = self.model
        n = state.num_envs
        targets = np.clip(joint_targets, state.q - TARGET_SANITY_RAD, state.q + TARGET_SANITY_RAD)
        pos, vel = state.generalized()
        contacts = contacts.copy()
        imu = np.zeros((n, SUBSTEPS, 6))
        tau = tau_cmd = np.zeros((n, 8))
        qdd = np.zeros((n, 8))
        work = np.zeros(n)
        dt = PHYSICS_DT
        with np.errstate(invalid="ignore", over="ignore"):
            _, start_energy = self._mechanical_energy(pos, vel, contacts, terrain)
            for k in range(SUBSTEPS):
                tau_cmd = model.kp * (targets - pos[:, 3:]) - model.kd * vel[:, 3:]
                tau = np.clip(tau_cmd, -model.torque_limit, model.torque_limit)
                acc, before = self._dynamics(pos, vel, tau, contacts, terrain, commit=False)
                half = vel + 0.5 * dt * acc
                moved = dt * half
                pos = pos + moved
                acc, after = self._dynamics(pos, half, tau, contacts, terrain, commit=True)
                new_vel = half + 0.5 * dt * acc
                work += self._work(tau, moved, after["kin"]["feet"] - before["kin"]["feet"])
                qdd = (new_vel[:, 3:] - vel[:, 3:]) / dt
                base_acc = (new_vel[:, :2] - vel[:, :2]) / dt
                specific = base_acc + np.array([0.0, model.gravity])
                imu[:, k, :3] = world_to_base(pos[:, 2:3], specific[:, None, :])[:, 0]
                imu[:, k, 4] = new_vel[:, 2]
                vel = new_vel
                feet_down = contacts.point_contact[:, :4]
                contacts.airtime = np.where(feet_down, 0.0, contacts.airtime + dt)
                if self.substep_trace is not None:
                    self.substep_trace.append((contacts.foot_normal_force.copy(), contacts.hook_engaged.copy()))
            vel = self._enforce_energy_balance(pos, vel, contacts, terrain, start_energy + work)

        new_state = RobotState(base_pos=pos[:, :2].copy(), pitch=pos[:, 2].copy(), base_vel=vel[:, :2].copy(),
                               pitch_rate=vel[:, 2].copy(), q=pos[:, 3:].copy(), qd=vel[:, 3:].copy(),
                               qdd=qdd, tau=tau, tau_cmd=tau_cmd,
                               action_hist=np.concatenate([targets[:, None], state.action_hist[:, :2]], axis=1),
                               imu=imu)
        kin = forward_kinematics(model, pos)
        foot_vel = np.einsum("npki,ni->npk", self.jacobians(kin)[:, :4], vel)
        contacts.foot_velocity_b = world_to_base(pos[:, 2:3], foot_vel)

        bad = self._diverged(new_state)
        if bad is not None:
            quantity, env_ids = bad
            if self.verbose:
                for env_id in env_ids:
                    log(f"simulation diverged: non-finite {quantity}", env_id)
            raise SimulationDivergedError(quantity, env_ids, result=(new_state, contacts))
        return new_state, contacts

    def _work(self, tau: np.ndarray, moved: np.ndarray, feet_moved: np.ndarray) -> np.ndarray:
        """Work of the joint torques and the external loads over one substep's displacement."""
        n = tau.shape[0]
        work = np.sum(tau * moved[:, 3:], axis=1)
        work += np.sum(self.external_base_force[:n, [0, 2]] * moved[:, :2], axis=1)
        work += self.external_base_torque[:n, 1] * moved[:, 2]
        work += np.sum(self.external_foot_forces[:n, :, [0, 2]] * feet_moved, axis=(1, 2))
        return work

    def _enforce_energy_balance(self, pos, vel, contacts: ContactState, terrain: TerrainBatch,
                                budget: np.ndarray) -> np.ndarray:
        kinetic, total = self._mechanical_energy(pos, vel, contacts, terrain)
        surplus = total - budget
        slack = ENERGY_SLACK * (1.0 + np.abs(budget))
        fix = np.isfinite(surplus) & (surplus > slack) & (kinetic > 0)
        if not fix.any():
            return vel
        keep = np.clip((kinetic - surplus) / np.where(fix, kinetic, 1.0), 0.0, 1.0)
        scale = np.where(fix, np.sqrt(keep), 1.0)
        self.incidents["energy_clamp"] += int(fix.sum())
        return vel * scale[:, None]

    def subset(self, env_ids) -> "PlanarSimulator":
        """A simulator over some of the environments, sharing the model and their parameters."""
        ids = np.atleast_1d(env_ids)
        sub = PlanarSimulator.__new__(PlanarSimulator)
        sub.__dict__.update(self.__dict__)
        sub.num_envs = len(ids)
        sub.added_mass = self.added_mass[ids]
        sub.external_base_force = self.external_base_force[ids]
        sub.external_base_torque = self.external_base_torque[ids]
        sub.external_foot_forces = self.external_foot_forces[ids]
        return sub

    @staticmethod
    def _diverged(state: RobotState):
        for name in ("base_pos", "pitch", "base_vel", "pitch_rate", "q", "qd"):
            values = getattr(state, name).reshape(state.num_envs, -1)
            bad = ~np.isfinite(values).all(axis=1)
            if bad.any():
                return name, [int(i) for i in np.flatnonzero(bad)]
        return None

    def _mechanical_energy(self, pos, vel, contacts: ContactState, terrain: TerrainBatch):
        """Kinetic and total energy. Stored spring energy is evaluated at rest, so it depends on positions only."""
        n = pos.shape[0]
        _, info = self._dynamics(pos, np.zeros_like(vel), np.zeros((n, 8)), contacts, terrain, commit=False)
        kinetic = 0.5 * np.einsum("ni,nij,nj->n", vel, info["mass"], vel)
        heights = info["kin"]["points"][:, MASS_POINTS, 1]
        potential = self.model.gravity * np.sum(self.masses(n) * heights, axis=1)
        return kinetic, kinetic + potential + info["energy"]

    def energy(self, state: RobotState, contacts: ContactState, terrain: TerrainBatch) -> np.ndarray:
        """Kinetic + gravitational + stored contact spring energy, per environment."""
        pos, vel = state.generalized()
        return self._mechanical_energy(pos, vel, contacts, terrain)[1]
