"""LatchWorld: a deterministic 2-D latched-door task.

A mobile base with a one-joint arm must approach a latched door, press the
handle on the swing-correct side to release the latch, push the door open,
and drive through the doorway. Two sensor modalities (a coarse top-down
RGB-like grid and a 16-ray depth panorama) are rendered in two visual
domains (SIM_STYLE / REAL_STYLE) that differ in palette, texture,
distractors, and noise but never in task-relevant geometry.

Geometry (meters): corridor x in [0, 4] with walls at y = +-1.5; a wall at
x = 4 with a 1 m doorway centered on y = 0; inner room x in [4, 7] with
walls at y = +-2. The door (length 1) hinges on one doorway post and swings
into the inner room.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np

from .errors import ShapeError, VibfuseError

DT = 0.1
MAX_BASE_SPEED = 1.0  # m/s per body axis
MAX_YAW_RATE = 1.0  # rad/s
MAX_ARM_RATE = 2.0  # rad/s
ARM_REACH = 0.45  # forward offset of the gripper tip
ARM_LATERAL = 0.4  # lateral tip offset per unit of arm joint
HANDLE_RADIUS = 0.3
UNLATCH_MIN_RATE = 0.05  # minimum swing-correct arm action to trip the latch
DOOR_LENGTH = 1.0
DOOR_OPEN_SUCCESS = math.pi / 3
DOOR_PUSH_GAIN = 1.5  # rad per (m of commanded push)
DOOR_BLOCK_X = 3.7  # base cannot pass this while the door is shut
SUCCESS_X = 4.4
GRID = 16
DEPTH_MAX_RANGE = 4.0
REAL_NOISE_SIGMA = 0.02

SEEN_ROOMS = (0, 1, 2, 3, 4, 5)
UNSEEN_ROOMS = (6, 7, 8, 9)
ALL_ROOMS = SEEN_ROOMS + UNSEEN_ROOMS


class Swing(Enum):
    LEFT = "left"
    RIGHT = "right"


class DomainStyle(Enum):
    SIM_STYLE = "sim"
    REAL_STYLE = "real"


class Modality(Enum):
    RGB_LIKE = "rgb"
    DEPTH_LIKE = "depth"


class Phase(Enum):
    APPROACH = 0
    UNLATCH = 1
    TRAVERSE = 2


class CorruptionKind(Enum):
    HUE_SHIFT = "hue_shift"
    PATCH_BLACKOUT = "patch_blackout"
    HEAVY_NOISE = "heavy_noise"


@dataclass(frozen=True)
class WorldConfig:
    door_swing: Swing
    room_id: int
    domain_style: DomainStyle = DomainStyle.SIM_STYLE
    handle_height: float = 0.5
    max_steps: int = 200

    @classmethod
    def for_room(
        cls, room_id: int, domain_style: DomainStyle = DomainStyle.SIM_STYLE, **kw
    ) -> "WorldConfig":
        swing = Swing.RIGHT if room_id % 2 else Swing.LEFT
        return cls(door_swing=swing, room_id=room_id, domain_style=domain_style, **kw)


@dataclass(frozen=True)
class EnvState:
    base_pose: tuple  # (x, y, heading)
    arm_joint: float
    door_angle: float
    latch_engaged: bool
    t: int

    @property
    def gripper_tip(self) -> tuple:
        x, y, h = self.base_pose
        lateral = ARM_LATERAL * self.arm_joint
        tx = x + math.cos(h) * ARM_REACH - math.sin(h) * lateral
        ty = y + math.sin(h) * ARM_REACH + math.cos(h) * lateral
        return (tx, ty)


@dataclass
class Observation:
    grid: np.ndarray  # [16, 16, C], values in [0, 1]
    modality: Modality
    domain_style: DomainStyle


@dataclass
class DemoRecord:
    episode_id: int
    t: int
    domain_style: DomainStyle
    obs: dict  # Modality -> Observation
    action: np.ndarray  # [4]: base vx, vy, yaw rate, arm joint velocity
    phase: Phase


@dataclass
class DemoDataset:
    records: list = field(default_factory=list)

    def __len__(self):
        return len(self.records)

    def domains(self) -> set:
        return {r.domain_style for r in self.records}

    def arrays(self, modality: Modality) -> tuple[np.ndarray, np.ndarray]:
        """Stacked (observations, actions) for one modality."""
        obs = np.stack([r.obs[modality].grid for r in self.records])
        actions = np.stack([r.action for r in self.records])
        return obs, actions


# ---------------------------------------------------------------------------
# world geometry helpers


def _hinge(config: WorldConfig) -> tuple:
    return (4.0, 0.5) if config.door_swing == Swing.LEFT else (4.0, -0.5)


def _door_dir(config: WorldConfig, angle: float) -> tuple:
    # closed door lies across the opening; it rotates into the inner room
    sign = -1.0 if config.door_swing == Swing.LEFT else 1.0
    return (math.sin(angle), sign * math.cos(angle))


def _door_end(config: WorldConfig, angle: float) -> tuple:
    hx, hy = _hinge(config)
    dx, dy = _door_dir(config, angle)
    return (hx + DOOR_LENGTH * dx, hy + DOOR_LENGTH * dy)


def handle_point(state: EnvState, config: WorldConfig) -> tuple:
    hx, hy = _hinge(config)
    dx, dy = _door_dir(config, state.door_angle)
    return (hx + 0.9 * DOOR_LENGTH * dx, hy + 0.9 * DOOR_LENGTH * dy)


def _unlatch_sign(config: WorldConfig) -> float:
    # sweep the handle away from the hinge side
    return -1.0 if config.door_swing == Swing.LEFT else 1.0


def phase_of(state: EnvState, config: WorldConfig) -> Phase:
    if state.door_angle > DOOR_OPEN_SUCCESS:
        return Phase.TRAVERSE
    if not state.latch_engaged or state.base_pose[0] > 3.3:
        return Phase.UNLATCH
    return Phase.APPROACH


def is_success(state: EnvState) -> bool:
    return state.door_angle > DOOR_OPEN_SUCCESS and state.base_pose[0] > SUCCESS_X


# ---------------------------------------------------------------------------
# dynamics


def reset(config: WorldConfig, rng: np.random.Generator) -> EnvState:
    """Base at the corridor start with small jitter; door shut and latched."""
    x = 0.5 + rng.uniform(-0.1, 0.1)
    y = rng.uniform(-0.1, 0.1)
    heading = rng.uniform(-0.05, 0.05)
    return EnvState(base_pose=(x, y, heading), arm_joint=0.0, door_angle=0.0,
                    latch_engaged=True, t=0)


def step(state: EnvState, action: np.ndarray, config: WorldConfig) -> EnvState:
    """First-order kinematics at fixed dt; invalid actions are clipped."""
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (4,):
        raise ShapeError(f"action must have 4 dims, got shape {action.shape}")
    a = np.clip(action, -1.0, 1.0)
    x, y, h = state.base_pose

    vx_world = math.cos(h) * a[0] - math.sin(h) * a[1]
    vy_world = math.sin(h) * a[0] + math.cos(h) * a[1]
    nx = x + MAX_BASE_SPEED * vx_world * DT
    ny = y + MAX_BASE_SPEED * vy_world * DT
    nh = h + MAX_YAW_RATE * a[2] * DT
    nq = float(np.clip(state.arm_joint + MAX_ARM_RATE * a[3] * DT, -1.0, 1.0))

    # walls
    if nx < 4.0:
        ny = float(np.clip(ny, -1.4, 1.4))
    else:
        ny = float(np.clip(ny, -1.9, 1.9))
    nx = float(np.clip(nx, 0.1, 6.9))
    # shut door blocks the doorway
    if state.door_angle <= DOOR_OPEN_SUCCESS and nx > DOOR_BLOCK_X:
        nx = DOOR_BLOCK_X

    new = replace(
        state,
        base_pose=(nx, ny, nh),
        arm_joint=nq,
        t=state.t + 1,
    )

    latch = state.latch_engaged
    if latch:
        tip = new.gripper_tip
        hx, hy = handle_point(new, config)
        in_zone = math.hypot(tip[0] - hx, tip[1] - hy) < HANDLE_RADIUS
        pushing = a[3] * _unlatch_sign(config) > UNLATCH_MIN_RATE
        if in_zone and pushing:
            latch = False

    angle = state.door_angle
    if not latch:
        in_push_zone = 3.0 < nx <= 4.3 and abs(ny) < 0.7
        if in_push_zone and vx_world > 0.0:
            angle = min(math.pi / 2, angle + DOOR_PUSH_GAIN * vx_world * MAX_BASE_SPEED * DT)

    return replace(new, latch_engaged=latch, door_angle=angle)


def scripted_expert(state: EnvState, config: WorldConfig) -> np.ndarray:
    """Deterministic phase-machine expert; all action dims in [-1, 1]."""
    x, y, h = state.base_pose
    phase = phase_of(state, config)
    press = _unlatch_sign(config)
    # stage on the corridor centerline; the arm sweep covers the handle offset
    wx, wy = 4.0 - ARM_REACH, 0.0

    a = np.zeros(4)
    if phase == Phase.APPROACH:
        a[0] = np.clip(4.0 * (wx - x), -1, 1)
        a[1] = np.clip(4.0 * (wy - y), -1, 1)
        a[2] = np.clip(-2.0 * h, -1, 1)
    elif phase == Phase.UNLATCH:
        if state.latch_engaged:
            # hold station and sweep the arm through the handle zone
            a[0] = np.clip(4.0 * (wx - x), -1, 1)
            a[1] = np.clip(4.0 * (wy - y), -1, 1)
            a[2] = np.clip(-2.0 * h, -1, 1)
            a[3] = 0.8 * press
        else:
            # shoulder the door open while recentering on the doorway
            a[0] = 0.8
            a[1] = np.clip(2.0 * (0.0 - y), -1, 1)
            a[2] = np.clip(-2.0 * h, -1, 1)
            a[3] = np.clip(-4.0 * state.arm_joint, -1, 1)
    else:  # TRAVERSE
        a[0] = np.clip(3.0 * (5.5 - x), -1, 1)
        a[1] = np.clip(3.0 * (0.0 - y), -1, 1)
        a[2] = np.clip(-2.0 * h, -1, 1)
    return a


def run_expert_episode(config: WorldConfig, rng: np.random.Generator,
                       noise_sigma: float = 0.0):
    """Roll the expert to success or max_steps; returns (states, actions).

    noise_sigma perturbs the executed action only; the recorded action is
    the expert's clean command for the visited state (state-coverage
    widening for cloning).
    """
    state = reset(config, rng)
    states, actions = [state], []
    while state.t < config.max_steps and not is_success(state):
        action = scripted_expert(state, config)
        executed = action
        if noise_sigma > 0:
            executed = np.clip(action + rng.normal(0, noise_sigma, size=4), -1, 1)
        state = step(state, executed, config)
        states.append(state)
        actions.append(action)
    return states, actions


# ---------------------------------------------------------------------------
# rendering

_SIM_PALETTES = {
    "floor": [(0.20, 0.22, 0.28), (0.18, 0.26, 0.22), (0.26, 0.20, 0.24),
              (0.22, 0.18, 0.30), (0.24, 0.26, 0.18), (0.18, 0.22, 0.32),
              (0.28, 0.24, 0.20), (0.20, 0.28, 0.26), (0.30, 0.22, 0.18),
              (0.22, 0.24, 0.28)],
    "wall": (0.55, 0.55, 0.60),
    "door": (0.85, 0.45, 0.15),
    "handle": (0.95, 0.95, 0.20),
    "robot": (0.15, 0.55, 0.95),
    "arm": (0.90, 0.15, 0.70),
}

_REAL_PALETTES = {
    "floor": [(0.52, 0.44, 0.34), (0.46, 0.50, 0.38), (0.56, 0.40, 0.40),
              (0.44, 0.42, 0.52), (0.54, 0.52, 0.36), (0.40, 0.48, 0.54),
              (0.58, 0.46, 0.34), (0.42, 0.54, 0.46), (0.60, 0.42, 0.36),
              (0.48, 0.46, 0.52)],
    "wall": (0.72, 0.68, 0.60),
    "door": (0.55, 0.30, 0.12),
    "handle": (0.80, 0.78, 0.30),
    "robot": (0.25, 0.40, 0.70),
    "arm": (0.70, 0.25, 0.55),
}


def _world_to_cell(x: float, y: float) -> tuple:
    col = int(np.clip((x - 0.0) / 7.2 * GRID, 0, GRID - 1))
    row = int(np.clip((2.2 - y) / 4.4 * GRID, 0, GRID - 1))
    return row, col


def _splat(img, x: float, y: float, color, weight: float = 1.0):
    """Bilinear marker paint so sub-pixel motion shows as intensity shifts."""
    fc = np.clip(x / 7.2 * GRID - 0.5, 0, GRID - 1)
    fr = np.clip((2.2 - y) / 4.4 * GRID - 0.5, 0, GRID - 1)
    r0, c0 = int(fr), int(fc)
    ar, ac = fr - r0, fc - c0
    color = np.asarray(color)
    for r, wr in ((r0, 1 - ar), (min(r0 + 1, GRID - 1), ar)):
        for c, wc in ((c0, 1 - ac), (min(c0 + 1, GRID - 1), ac)):
            w = weight * wr * wc
            img[r, c] = (1 - w) * img[r, c] + w * color


def _paint_segment(img, p0, p1, color):
    n = 24
    for i in range(n + 1):
        x = p0[0] + (p1[0] - p0[0]) * i / n
        y = p0[1] + (p1[1] - p0[1]) * i / n
        r, c = _world_to_cell(x, y)
        img[r, c] = color


def _wall_segments(state: EnvState, config: WorldConfig) -> list:
    segs = [
        ((0.0, -1.5), (4.0, -1.5)),
        ((0.0, 1.5), (4.0, 1.5)),
        ((0.0, -1.5), (0.0, 1.5)),
        ((4.0, -2.0), (4.0, -0.5)),
        ((4.0, 0.5), (4.0, 2.0)),
        ((4.0, -2.0), (7.0, -2.0)),
        ((4.0, 2.0), (7.0, 2.0)),
        ((7.0, -2.0), (7.0, 2.0)),
    ]
    segs.append((_hinge(config), _door_end(config, state.door_angle)))
    return segs


def _render_rgb(state: EnvState, config: WorldConfig, style: DomainStyle,
                rng: np.random.Generator) -> np.ndarray:
    pal = _SIM_PALETTES if style == DomainStyle.SIM_STYLE else _REAL_PALETTES
    img = np.empty((GRID, GRID, 3))
    img[:] = pal["floor"][config.room_id % 10]
    if style == DomainStyle.REAL_STYLE:
        # coarse texture; frequency keyed to the room
        rr, cc = np.meshgrid(np.arange(GRID), np.arange(GRID), indexing="ij")
        tex = 0.08 * np.sin(0.7 * (config.room_id + 2) * cc + 0.5 * rr)
        img += tex[..., None]
    for p0, p1 in _wall_segments(state, config)[:-1]:
        _paint_segment(img, p0, p1, pal["wall"])
    _paint_segment(img, _hinge(config), _door_end(config, state.door_angle), pal["door"])
    if style == DomainStyle.REAL_STYLE:
        # furniture distractors in the inner room, fixed per room layout
        furn = np.random.default_rng(7 * config.room_id + 1)
        for _ in range(3):
            fr = int(furn.integers(3, GRID - 3))
            fc = int(furn.integers(10, GRID - 1))
            img[fr : fr + 2, fc : fc + 2] = furn.uniform(0.2, 0.8, size=3)
    hp = handle_point(state, config)
    handle_color = np.clip(
        np.asarray(pal["handle"]) * (0.7 + 0.6 * config.handle_height), 0, 1
    )
    if not state.latch_engaged:
        handle_color = 0.35 * handle_color  # released handle sits flush and dim
    _splat(img, hp[0], hp[1], handle_color)
    gx, gy = _hinge(config)
    _splat(img, gx, gy, (0.05, 0.05, 0.05))
    x, y, h = state.base_pose
    _splat(img, x, y, pal["robot"])
    _splat(img, x + 0.45 * math.cos(h), y + 0.45 * math.sin(h), pal["robot"], weight=0.8)
    tip = state.gripper_tip
    for i in range(1, 4):
        f = i / 3.0
        _splat(img, x + (tip[0] - x) * f, y + (tip[1] - y) * f, pal["arm"],
               weight=0.5 + 0.5 * f)
    if style == DomainStyle.REAL_STYLE:
        img += rng.normal(0.0, REAL_NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _ray_hit(px, py, dx, dy, segs, discs) -> float:
    best = DEPTH_MAX_RANGE
    for (x0, y0), (x1, y1) in segs:
        sx, sy = x1 - x0, y1 - y0
        denom = dx * sy - dy * sx
        if abs(denom) < 1e-12:
            continue
        t = ((x0 - px) * sy - (y0 - py) * sx) / denom
        u = ((x0 - px) * dy - (y0 - py) * dx) / denom
        if t > 1e-9 and -1e-9 <= u <= 1.0 + 1e-9:
            best = min(best, t)
    # protruding bodies (arm tip, door handle) occlude as small discs
    for (cx, cy), radius in discs:
        ox, oy = cx - px, cy - py
        proj = ox * dx + oy * dy
        if proj > 1e-9:
            perp2 = (ox * ox + oy * oy) - proj * proj
            if perp2 < radius * radius:
                best = min(best, proj - math.sqrt(max(radius * radius - perp2, 0.0)))
    return best


def _render_depth(state: EnvState, config: WorldConfig, style: DomainStyle,
                  rng: np.random.Generator) -> np.ndarray:
    x, y, h = state.base_pose
    segs = _wall_segments(state, config)
    # the handle protrudes while latched and sits nearly flush once released
    handle_radius = 0.2 if state.latch_engaged else 0.04
    discs = [(state.gripper_tip, 0.08), (handle_point(state, config), handle_radius)]
    angles = h + np.linspace(-0.5 * math.pi, 0.5 * math.pi, GRID)
    img = np.zeros((GRID, GRID, 1))
    # raycaster-style panorama: nearer hits paint taller columns
    for j, ang in enumerate(angles):
        d = _ray_hit(x, y, math.cos(ang), math.sin(ang), segs, discs)
        height = np.clip(GRID * 0.45 / max(d, 1e-6), 0.0, GRID)
        full = int(height)
        if full:
            img[GRID - full :, j, 0] = 1.0
        if full < GRID:
            img[GRID - full - 1, j, 0] = height - full
    if style == DomainStyle.REAL_STYLE:
        img = img + rng.normal(0.0, REAL_NOISE_SIGMA, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def render(state: EnvState, modality: Modality, domain_style: DomainStyle,
           rng: np.random.Generator, config: WorldConfig) -> Observation:
    """Deterministic render of one modality given the injected rng."""
    if modality == Modality.RGB_LIKE:
        grid = _render_rgb(state, config, domain_style, rng)
    else:
        grid = _render_depth(state, config, domain_style, rng)
    return Observation(grid=grid, modality=modality, domain_style=domain_style)


def mirror_obs_grid(grid: np.ndarray, modality: Modality) -> np.ndarray:
    """Observation under the y-reflection of the world.

    Top-down RGB flips its row (y) axis; the depth panorama reverses its
    bearing axis.
    """
    if modality == Modality.RGB_LIKE:
        return grid[::-1, :, :]
    return grid[:, ::-1, :]


def mirror_action(action: np.ndarray) -> np.ndarray:
    """Action under the y-reflection: vy, yaw rate, and arm rate negate."""
    return np.asarray(action, dtype=np.float64) * np.array([1.0, -1.0, -1.0, -1.0])


def obs_shape(modality: Modality) -> tuple:
    return (GRID, GRID, 3) if modality == Modality.RGB_LIKE else (GRID, GRID, 1)


# ---------------------------------------------------------------------------
# data collection, corruption, evaluation


def collect_demos(n_per_domain: int, rooms, rng: np.random.Generator,
                  noise_sigma: float = 0.1) -> DemoDataset:
    """Expert rollouts under both domain styles, both modalities recorded.

    Failed expert episodes (none expected) are excluded.
    """
    if n_per_domain < 1:
        raise VibfuseError("n_per_domain must be >= 1")
    rooms = list(rooms)
    dataset = DemoDataset()
    episode_id = 0
    for style in (DomainStyle.SIM_STYLE, DomainStyle.REAL_STYLE):
        for i in range(n_per_domain):
            room = rooms[i % len(rooms)]
            config = WorldConfig.for_room(room, style)
            # vary the exploration width per episode for broader state coverage
            sigma = noise_sigma * (0.5 + 1.5 * (i % 3) / 2.0)
            states, actions = run_expert_episode(config, rng, noise_sigma=sigma)
            if not is_success(states[-1]):
                continue
            for t, (state, action) in enumerate(zip(states[:-1], actions)):
                obs = {
                    m: render(state, m, style, rng, config)
                    for m in (Modality.RGB_LIKE, Modality.DEPTH_LIKE)
                }
                dataset.records.append(
                    DemoRecord(
                        episode_id=episode_id,
                        t=t,
                        domain_style=style,
                        obs=obs,
                        action=action,
                        phase=phase_of(state, config),
                    )
                )
            episode_id += 1
    return dataset


_HUE_MIX_ROTATION = np.array([[0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 0.0, 0.0]])


def hue_mix_matrix(severity: float) -> np.ndarray:
    return (1.0 - severity) * np.eye(3) + severity * _HUE_MIX_ROTATION


def corrupt(obs: Observation, kind: CorruptionKind, severity: float,
            rng: np.random.Generator) -> Observation:
    """Severity-0 corruption is the identity; outputs stay in [0, 1]."""
    if not 0.0 <= severity <= 1.0:
        raise VibfuseError(f"severity must be in [0, 1], got {severity}")
    if not isinstance(kind, CorruptionKind):
        raise VibfuseError(f"unknown corruption kind: {kind!r}")
    grid = obs.grid.copy()
    if kind == CorruptionKind.HUE_SHIFT:
        if grid.shape[-1] != 3:
            raise VibfuseError("HUE_SHIFT requires a 3-channel observation")
        grid = grid @ hue_mix_matrix(severity).T
    elif kind == CorruptionKind.PATCH_BLACKOUT:
        grid[4:12, 4:12, :] *= 1.0 - severity
    elif kind == CorruptionKind.HEAVY_NOISE:
        grid = grid + rng.normal(0.0, 0.5 * severity, size=grid.shape)
    return Observation(grid=np.clip(grid, 0.0, 1.0), modality=obs.modality,
                       domain_style=obs.domain_style)


def bernoulli_std(p: float, n: int) -> float:
    """sqrt(p (1-p) / (n-1)) for n i.i.d. trials."""
    if n < 2:
        raise VibfuseError(f"need at least 2 trials, got {n}")
    return math.sqrt(p * (1.0 - p) / (n - 1))


@dataclass
class EvalResult:
    success_rate: float
    std: float
    successes: list


def evaluate(controller, rooms, n_trials: int, rng: np.random.Generator,
             domain_style: DomainStyle = DomainStyle.SIM_STYLE,
             obs_transform=None) -> EvalResult:
    """Roll a controller over seeded episodes; success is an open, crossed door.

    controller(obs: dict[Modality, Observation], rng) -> action.
    obs_transform, if given, maps the obs dict before the controller sees it
    (corruption injection hook).
    """
    if n_trials < 2:
        raise VibfuseError(f"n_trials must be >= 2, got {n_trials}")
    rooms = list(rooms)
    successes = []
    for trial in range(n_trials):
        config = WorldConfig.for_room(rooms[trial % len(rooms)], domain_style)
        ep_rng = np.random.default_rng(rng.integers(0, 2**63))
        state = reset(config, ep_rng)
        while state.t < config.max_steps and not is_success(state):
            obs = {
                m: render(state, m, domain_style, ep_rng, config)
                for m in (Modality.RGB_LIKE, Modality.DEPTH_LIKE)
            }
            if obs_transform is not None:
                obs = obs_transform(obs, trial, ep_rng)
            action = controller(obs, ep_rng)
            state = step(state, action, config)
        successes.append(is_success(state))
    p = float(np.mean(successes))
    return EvalResult(success_rate=p, std=bernoulli_std(p, n_trials), successes=successes)
