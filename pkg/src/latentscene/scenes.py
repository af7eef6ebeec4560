"""Procedural toy driving scenes: RGB frames plus car and lane masks.

Every sequence is a straight perspective road scrolling under the ego car.
Dashed lane markings advance by `ego_speed` ground pixels per frame, other
cars are flat-shaded rectangles with constant velocity (plus at most one
scripted lane change per sequence), and the condition tag switches the
palette and backdrop. Rendering is a pure function of the per-frame
kinematic state, so any frame can be re-rendered bit-exactly from the log.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, UsageError

CONDITIONS = ("sunny", "dark", "city", "freeway")
VALID_RESOLUTIONS = (32, 64, 128, 256)

# Flat-shaded palette per condition: sky, ground, road, lane line, car scale.
_PALETTES = {
    "sunny":   {"sky": (0.53, 0.78, 0.95), "ground": (0.42, 0.60, 0.33),
                "road": (0.46, 0.46, 0.48), "line": (0.93, 0.93, 0.88), "car": 1.0},
    "dark":    {"sky": (0.05, 0.06, 0.11), "ground": (0.10, 0.12, 0.10),
                "road": (0.16, 0.16, 0.18), "line": (0.55, 0.55, 0.50), "car": 0.45},
    "city":    {"sky": (0.65, 0.68, 0.72), "ground": (0.35, 0.35, 0.37),
                "road": (0.42, 0.42, 0.44), "line": (0.90, 0.90, 0.85), "car": 1.0},
    "freeway": {"sky": (0.70, 0.80, 0.92), "ground": (0.50, 0.58, 0.42),
                "road": (0.50, 0.50, 0.52), "line": (0.95, 0.95, 0.90), "car": 1.0},
}

_CAR_COLORS = np.array([
    (0.85, 0.15, 0.12), (0.12, 0.35, 0.85), (0.90, 0.80, 0.15),
    (0.88, 0.88, 0.92), (0.13, 0.13, 0.16), (0.55, 0.15, 0.65),
], dtype=np.float32)

_LANE_CHANGE_FRAMES = 8


@dataclass(frozen=True)
class SceneConfig:
    resolution: int = 64
    horizon_y: float = 0.42
    lane_count: int = 3
    dash_period: int = 16
    max_other_cars: int = 3
    condition: str = "sunny"
    seed: int = 0
    sequence_length: int = 16
    ego_speed: int = 4

    def validate(self):
        if self.resolution not in VALID_RESOLUTIONS:
            raise ConfigError(f"resolution must be one of {VALID_RESOLUTIONS},"
                              f" got {self.resolution}")
        if not 0.05 <= self.horizon_y <= 0.9:
            raise ConfigError(f"horizon_y {self.horizon_y} outside [0.05, 0.9]")
        if self.lane_count < 1:
            raise ConfigError(f"lane_count must be >= 1, got {self.lane_count}")
        if self.dash_period < 2:
            raise ConfigError(f"dash_period must be >= 2, got {self.dash_period}")
        if not 0 <= self.max_other_cars <= 3:
            raise ConfigError(f"max_other_cars must be in 0..3, got {self.max_other_cars}")
        if self.condition not in CONDITIONS:
            raise ConfigError(f"condition must be one of {CONDITIONS},"
                              f" got {self.condition!r}")
        if self.sequence_length < 12:
            raise ConfigError(f"sequence_length must be >= 12, got {self.sequence_length}")
        if self.ego_speed < 1:
            raise ConfigError(f"ego_speed must be >= 1, got {self.ego_speed}")
        return self


@dataclass(frozen=True)
class CarState:
    lane_pos: float      # lane-center coordinate, 0 .. lane_count-1
    depth: float         # 0 = nearest; larger is farther away
    v_lane: float        # lane units per frame
    v_depth: float       # depth units per frame
    color: int           # row into the car color table


@dataclass(frozen=True)
class FrameState:
    phase: int           # dash pattern offset in ground pixels
    cars: tuple[CarState, ...] = ()


@dataclass
class SceneSequence:
    config: SceneConfig
    frames: list = field(default_factory=list)       # (3,H,W) float32 in [0,1]
    car_masks: list = field(default_factory=list)    # (H,W) uint8 in {0,1}
    lane_masks: list = field(default_factory=list)   # (H,W) uint8 in {0,1}
    kinematics: list = field(default_factory=list)   # FrameState per frame

    @property
    def condition(self):
        return self.config.condition

    def __len__(self):
        return len(self.frames)


def _horizon_row(config):
    return int(config.horizon_y * config.resolution)


def _skyline(config):
    """Static city backdrop, derived from the sequence seed only."""
    res = config.resolution
    y_h = _horizon_row(config)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**63 - 1), 77]))
    strip = np.zeros((y_h, res, 3), dtype=np.float32)
    strip[:] = _PALETTES["city"]["sky"]
    x = 0
    while x < res:
        w = int(rng.integers(res // 16 + 1, res // 6 + 2))
        h = int(rng.integers(y_h // 3 + 1, max(y_h - 1, y_h // 3 + 2)))
        shade = 0.25 + 0.25 * float(rng.random())
        strip[y_h - h:, x:x + w] = (shade, shade, shade + 0.03)
        x += w
    return strip


def render_frame(config, state):
    """Rasterize one frame from its kinematic state.

    Returns (rgb, car_mask, lane_mask). The lane mask marks the road
    markings on the ground plane irrespective of cars on top of them, so
    it depends on the dash phase only.
    """
    res = config.resolution
    y_h = _horizon_row(config)
    pal = _PALETTES[config.condition]
    rgb = np.empty((res, res, 3), dtype=np.float32)
    rgb[:y_h] = pal["sky"]
    rgb[y_h:] = pal["ground"]
    if config.condition == "city" and y_h > 2:
        rgb[:y_h] = _skyline(config)

    car_mask = np.zeros((res, res), dtype=np.uint8)
    lane_mask = np.zeros((res, res), dtype=np.uint8)

    cx = (res - 1) / 2.0
    ground_rows = res - 1 - y_h
    road_half_bottom = 0.42 * res
    line_w_bottom = max(1, res // 32)
    lane_w = 2.0 * road_half_bottom / config.lane_count
    dash_on = config.dash_period // 2
    depth_scale = 3 * config.dash_period

    for y in range(y_h + 1, res):
        u = (y - y_h) / ground_rows
        half = road_half_bottom * u
        left = int(round(cx - half))
        right = int(round(cx + half))
        rgb[y, max(left, 0):min(right + 1, res)] = pal["road"]
        if config.condition == "freeway":
            rail = max(1, int(round(2 * u)))
            for edge in (left - rail - 1, right + 1):
                lo, hi = max(edge, 0), min(edge + rail, res)
                if lo < hi:
                    rgb[y, lo:hi] = (0.75, 0.75, 0.78)
        ground_coord = int(round(depth_scale / u))
        dash_visible = (ground_coord + state.phase) % config.dash_period < dash_on
        lw = max(1, int(round(line_w_bottom * u)))
        for i in range(config.lane_count + 1):
            solid = i == 0 or i == config.lane_count
            if not solid and not dash_visible:
                continue
            xi = int(round(cx - half + i * lane_w * u))
            lo = max(xi - (lw - 1) // 2, 0)
            hi = min(xi + lw // 2 + 1, res)
            if lo < hi:
                rgb[y, lo:hi] = pal["line"]
                lane_mask[y, lo:hi] = 1

    # Far cars first so nearer ones overdraw them.
    for car in sorted(state.cars, key=lambda c: -c.depth):
        u = 1.0 / (1.0 + max(car.depth, 0.0))
        y_base = y_h + u * ground_rows
        half = road_half_bottom * u
        xc = cx - half + (car.lane_pos + 0.5) * lane_w * u
        w = max(2, int(round(0.20 * res * u)))
        h = max(2, int(round(0.16 * res * u)))
        x0 = int(round(xc - w / 2))
        y1 = int(round(y_base))
        y0 = y1 - h
        sx0, sx1 = max(x0, 0), min(x0 + w, res)
        sy0, sy1 = max(y0, 0), min(y1, res)
        if sx0 >= sx1 or sy0 >= sy1:
            continue
        color = _CAR_COLORS[car.color] * pal["car"]
        rgb[sy0:sy1, sx0:sx1] = color
        car_mask[sy0:sy1, sx0:sx1] = 1
        # cabin: darker upper stripe
        cy1 = min(sy0 + max(1, h // 3), sy1)
        ix0, ix1 = min(sx0 + 1, res), max(sx1 - 1, 0)
        if ix0 < ix1:
            rgb[sy0:cy1, ix0:ix1] = color * 0.55

    return np.ascontiguousarray(rgb.transpose(2, 0, 1)), car_mask, lane_mask


def _spawn_cars(config, rng):
    # Biased toward populated roads; empty roads stay possible.
    count = int(max(rng.integers(0, config.max_other_cars + 1),
                    rng.integers(0, config.max_other_cars + 1)))
    lanes = rng.permutation(config.lane_count)
    cars = []
    for i in range(count):
        lane = float(lanes[i % config.lane_count])
        depth = float(rng.uniform(0.6, 2.0))
        v_depth = float(rng.uniform(-0.5, 0.5)) / config.sequence_length
        cars.append(CarState(lane_pos=lane, depth=depth, v_lane=0.0,
                             v_depth=v_depth, color=int(rng.integers(len(_CAR_COLORS)))))
    return cars


def _lane_change_script(config, cars, rng):
    """Pick at most one car to shift one lane over a fixed frame window."""
    if not cars or config.lane_count < 2 or rng.random() > 0.5:
        return None
    idx = int(rng.integers(len(cars)))
    lane = cars[idx].lane_pos
    direction = 1.0 if lane <= 0 else (-1.0 if lane >= config.lane_count - 1
                                        else float(rng.choice((-1.0, 1.0))))
    latest = config.sequence_length - _LANE_CHANGE_FRAMES - 1
    start = int(rng.integers(1, max(latest, 2)))
    return idx, start, direction / _LANE_CHANGE_FRAMES


def generate_sequence(config):
    """Build a full sequence: kinematics stepped frame by frame, then rendered."""
    config.validate()
    rng = np.random.default_rng(np.random.SeedSequence([config.seed & (2**63 - 1)]))
    cars = _spawn_cars(config, rng)
    script = _lane_change_script(config, cars, rng)

    seq = SceneSequence(config=config)
    for t in range(config.sequence_length):
        if script is not None:
            idx, start, v = script
            active = start <= t < start + _LANE_CHANGE_FRAMES
            cars[idx] = CarState(cars[idx].lane_pos, cars[idx].depth,
                                 v if active else 0.0, cars[idx].v_depth,
                                 cars[idx].color)
        state = FrameState(phase=(t * config.ego_speed) % config.dash_period,
                           cars=tuple(cars))
        rgb, car_mask, lane_mask = render_frame(config, state)
        seq.frames.append(rgb)
        seq.car_masks.append(car_mask)
        seq.lane_masks.append(lane_mask)
        seq.kinematics.append(state)
        cars = [CarState(c.lane_pos + c.v_lane, c.depth + c.v_depth,
                         c.v_lane, c.v_depth, c.color) for c in cars]
    return seq


def generate_dataset(base_config, sequence_count, conditions=CONDITIONS, seed=0):
    """Generate `sequence_count` sequences cycling through `conditions`.

    Per-sequence seeds derive from `seed`, so the dataset is reproducible
    as a whole and sequences stay independent of each other.
    """
    if sequence_count < 1:
        raise ConfigError(f"sequence_count must be >= 1, got {sequence_count}")
    for c in conditions:
        if c not in CONDITIONS:
            raise ConfigError(f"unknown condition {c!r}")
    sequences = []
    for i in range(sequence_count):
        mix = np.random.default_rng(np.random.SeedSequence([seed & (2**63 - 1), i]))
        seq_seed = int(mix.integers(0, 2**62))
        cfg_i = SceneConfig(
            resolution=base_config.resolution,
            horizon_y=base_config.horizon_y,
            lane_count=base_config.lane_count,
            dash_period=base_config.dash_period,
            max_other_cars=base_config.max_other_cars,
            condition=conditions[i % len(conditions)],
            seed=seq_seed,
            sequence_length=base_config.sequence_length,
            ego_speed=base_config.ego_speed,
        )
        sequences.append(generate_sequence(cfg_i))
    return sequences


def class_pixel_ratio(masks, smoothing):
    """Smoothed share of true pixels over a list of binary masks.

    Returns (true_pixels / all_pixels) ** (1 / smoothing).
    """
    if not masks:
        raise UsageError("class_pixel_ratio needs at least one mask")
    if smoothing <= 0:
        raise ConfigError(f"smoothing must be > 0, got {smoothing}")
    true = sum(int(np.count_nonzero(m)) for m in masks)
    total = sum(int(np.asarray(m).size) for m in masks)
    return float((true / total) ** (1.0 / smoothing))
