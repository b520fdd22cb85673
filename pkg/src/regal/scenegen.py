"""Synthetic scene pools: actors with future trajectories and a rasterized
sensor-evidence stand-in for LiDAR.

Each scene draws its own latent character (behavior tilt, speed scale,
parking-lot layout, clutter level) so actors within a scene are correlated
while the pool-wide behavior mix stays at the configured proportions.
Moving actors follow constant-curvature arcs over the whole simulated
window, so the evidence raster's past sweeps carry both velocity and turn
direction.

Scene generation is a pure function of (config, scene id): every scene owns
a counter-based random stream derived from those two values, so parallel
and serial generation produce identical pools.
"""

from __future__ import annotations

import base64
import hashlib
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, InvalidInputError
from .geometry import OrientedBox

BEHAVIORS = ("parked", "straight", "left_turn", "right_turn", "u_turn")

_DEFAULT_MIX = {
    "parked": 0.45,
    "straight": 0.25,
    "left_turn": 0.12,
    "right_turn": 0.12,
    "u_turn": 0.06,
}

# Traffic-state lookup over (crowding, speed band, parked share) terciles:
# -1 braking, 0 steady, +1 speeding up. A fixed quasi-random table, so the
# future speed profile is a scene-context skill that takes many distinct
# scenes to pin down.
_TRAFFIC_TABLE = np.array(
    [[+1, 0, -1], [0, +1, 0], [-1, -1, +1],
     [0, -1, +1], [+1, 0, -1], [0, +1, -1],
     [-1, +1, 0], [-1, 0, +1], [+1, -1, 0]], dtype=float
).reshape(3, 3, 3)

SCHEMA_VERSION = 1


@dataclass
class GenConfig:
    """Knobs for pool generation; defaults give the 100 m reference world."""

    n_scenes: int
    seed: int
    actors_min: int = 10
    actors_max: int = 30
    behavior_mix: dict[str, float] = field(default_factory=lambda: dict(_DEFAULT_MIX))
    sigma_clutter: float = 0.5
    lam_max: float = 60.0
    lam_floor: float = 9.0
    lam_halfdist: float = 40.0
    horizon: int = 10
    dt: float = 0.5
    extent: tuple[float, float] = (100.0, 100.0)
    cell_size: float = 2.5
    n_sweeps: int = 3
    sweep_spacing: float = 0.5
    mix_jitter: float = 0.18
    id_offset: int = 0

    def validate(self) -> None:
        if self.n_scenes < 0:
            raise ConfigError("n_scenes", f"must be >= 0, got {self.n_scenes}")
        if self.seed < 0:
            raise ConfigError("seed", f"must be >= 0, got {self.seed}")
        if self.horizon < 1:
            raise ConfigError("horizon", f"must be >= 1, got {self.horizon}")
        if self.dt <= 0:
            raise ConfigError("dt", f"must be > 0, got {self.dt}")
        if not (0 < self.actors_min <= self.actors_max):
            raise ConfigError("actors_min", f"need 0 < min <= max, got ({self.actors_min}, {self.actors_max})")
        if set(self.behavior_mix) != set(BEHAVIORS):
            raise ConfigError("behavior_mix", f"must cover exactly {BEHAVIORS}")
        total = sum(self.behavior_mix.values())
        if abs(total - 1.0) > 1e-9 or any(p < 0 for p in self.behavior_mix.values()):
            raise ConfigError("behavior_mix", f"proportions must be >= 0 and sum to 1, got sum {total}")
        if self.sigma_clutter < 0:
            raise ConfigError("sigma_clutter", "must be >= 0")
        if self.lam_max < 0 or self.lam_floor < 0 or self.lam_halfdist <= 0:
            raise ConfigError("lam_max", "point-rate parameters must be nonnegative with lam_halfdist > 0")
        ex, ey = self.extent
        if ex <= 0 or ey <= 0:
            raise ConfigError("extent", f"must be positive, got {self.extent}")
        for name, e in (("extent[0]", ex), ("extent[1]", ey)):
            cells = e / self.cell_size
            if abs(cells - round(cells)) > 1e-9:
                raise ConfigError("cell_size", f"{self.cell_size} does not divide {name}={e}")
        if self.n_sweeps < 1:
            raise ConfigError("n_sweeps", "must be >= 1")
        if self.sweep_spacing <= 0:
            raise ConfigError("sweep_spacing", "must be > 0")

    @property
    def raster_shape(self) -> tuple[int, int, int]:
        """(channels, ny, nx)."""
        nx = round(self.extent[0] / self.cell_size)
        ny = round(self.extent[1] / self.cell_size)
        return (self.n_sweeps, ny, nx)


@dataclass
class Actor:
    actor_id: int
    box: OrientedBox
    trajectory: np.ndarray  # (T, 2) future waypoints
    behavior: str
    speed: float
    point_count: int
    turn_rate: float = 0.0
    accel: float = 0.0  # takes effect at t = 0; the observed past is steady

    def position_at(self, t: float) -> tuple[float, float, float]:
        """(x, y, heading) of the motion at time t; t = 0 is the box pose,
        negative t the observed past (constant speed and curvature); from
        t = 0 on the speed ramps by ``accel`` down to a crawl floor."""
        x0, y0, th0 = self.box.cx, self.box.cy, self.box.heading
        if self.speed == 0.0:
            return (x0, y0, th0)
        w = self.turn_rate
        if t <= 0.0 or self.accel == 0.0:
            if w == 0.0:
                return (x0 + self.speed * t * math.cos(th0), y0 + self.speed * t * math.sin(th0), th0)
            r = self.speed / w
            th = th0 + w * t
            return (x0 + r * (math.sin(th) - math.sin(th0)), y0 + r * (math.cos(th0) - math.cos(th)), th)
        # forward integration with a varying speed profile
        n = max(int(t / 0.05), 1)
        step = t / n
        x, y = x0, y0
        for i in range(n):
            tm = (i + 0.5) * step
            v = max(self.speed + self.accel * tm, 0.8)
            th = th0 + w * tm
            x += v * step * math.cos(th)
            y += v * step * math.sin(th)
        return (x, y, th0 + w * t)


@dataclass
class FeatureRaster:
    cell_size: float
    values: np.ndarray  # (channels, ny, nx)

    @property
    def resolution(self) -> tuple[int, int]:
        """(cells_x, cells_y)."""
        return (self.values.shape[2], self.values.shape[1])


@dataclass
class Scene:
    scene_id: int
    extent: tuple[float, float]
    actors: list[Actor]
    features: FeatureRaster
    sdv_position: tuple[float, float]


def _scene_streams(seed: int, scene_id: int) -> tuple[np.random.Generator, np.random.Generator]:
    root = np.random.SeedSequence([seed, scene_id])
    actor_ss, feature_ss = root.spawn(2)
    return (
        np.random.Generator(np.random.Philox(actor_ss)),
        np.random.Generator(np.random.Philox(feature_ss)),
    )


def _point_rate(cfg: GenConfig, dist: float) -> float:
    return cfg.lam_floor + cfg.lam_max / (1.0 + (dist / cfg.lam_halfdist) ** 2)


def _sample_scene_mix(cfg: GenConfig, rng: np.random.Generator) -> np.ndarray:
    """Per-scene behavior proportions: the parked share is jittered while its
    expectation stays at the configured value, non-parked shares rescale."""
    base = np.array([cfg.behavior_mix[b] for b in BEHAVIORS])
    p = base[0]
    if cfg.mix_jitter == 0.0 or p in (0.0, 1.0):
        rng.normal()  # keep the draw count fixed across configs
        return base
    lo, hi = max(0.02, p - 2.2 * cfg.mix_jitter), min(0.98, p + 2.2 * cfg.mix_jitter)
    u = p + cfg.mix_jitter * rng.normal()
    # fold back into [lo, hi]; folding keeps the mean at p for a symmetric window
    while u < lo or u > hi:
        if u < lo:
            u = 2 * lo - u
        if u > hi:
            u = 2 * hi - u
    mix = base.copy()
    mix[0] = u
    rest = base[1:].sum()
    if rest > 0:
        mix[1:] = base[1:] * (1.0 - u) / rest
    return mix


@dataclass
class _SceneLatents:
    """Per-scene character shared by its actors; within-scene redundancy is
    what makes partial labels worth more than whole scenes."""

    mix: np.ndarray
    road_theta: float       # dominant travel axis, two-way
    scene_speed: float      # speed band of the scene's movers
    accel: float            # traffic state from t=0 on, tied to crowding
    lam_gain: float         # scene-wide sensor gain
    lots: list[tuple[float, float, float]]


def _generate_actor(cfg: GenConfig, rng: np.random.Generator, actor_id: int, behavior: str,
                    lat: _SceneLatents, sdv: tuple[float, float],
                    placed: list[tuple[float, float]]) -> Actor:
    ex, ey = cfg.extent
    margin = 2.0
    length = rng.uniform(4.0, 5.2)
    width = rng.uniform(1.8, 2.2)

    if behavior == "parked":
        lx, ly, lth = lat.lots[rng.integers(len(lat.lots))]
        cx = cy = 0.0
        for _ in range(8):  # keep neighbors resolvable on the raster
            cx = float(np.clip(lx + rng.normal(0.0, 8.0), margin, ex - margin))
            cy = float(np.clip(ly + rng.normal(0.0, 8.0), margin, ey - margin))
            if all((cx - px) ** 2 + (cy - py) ** 2 >= 5.0 ** 2 for px, py in placed):
                break
        heading = lth + rng.normal(0.0, 0.15) + (math.pi if rng.random() < 0.5 else 0.0)
        speed = 0.0
        turn_rate = 0.0
    else:
        cx = rng.uniform(margin, ex - margin)
        cy = rng.uniform(margin, ey - margin)
        heading = lat.road_theta + (math.pi if rng.random() < 0.5 else 0.0) + rng.normal(0.0, 0.25)
        horizon_s = cfg.horizon * cfg.dt
        jitter = rng.uniform(0.9, 1.1)
        if behavior == "straight":
            speed = lat.scene_speed * jitter
            turn_rate = 0.0
        elif behavior in ("left_turn", "right_turn"):
            speed = lat.scene_speed * 0.55 * jitter
            total = math.radians(rng.uniform(60.0, 100.0))
            turn_rate = total / horizon_s
            if behavior == "right_turn":
                turn_rate = -turn_rate
        else:  # u_turn
            speed = lat.scene_speed * 0.4 * jitter
            total = math.radians(rng.uniform(160.0, 200.0))
            turn_rate = (total / horizon_s) * (1.0 if rng.random() < 0.5 else -1.0)

    box = OrientedBox(cx, cy, length, width, float(heading))
    accel = lat.accel if speed > 0.0 else 0.0
    actor = Actor(actor_id, box, np.empty((0, 2)), behavior, float(speed), 0,
                  float(turn_rate), float(accel))
    traj = np.array([actor.position_at(k * cfg.dt)[:2] for k in range(1, cfg.horizon + 1)])
    actor.trajectory = traj

    dist = math.hypot(cx - sdv[0], cy - sdv[1])
    actor.point_count = int(rng.poisson(lat.lam_gain * _point_rate(cfg, dist)))
    return actor


def synthesize_features(scene: Scene, cfg: GenConfig, rng: np.random.Generator) -> FeatureRaster:
    """Rasterize distance-attenuated evidence for a scene.

    Each channel is one past sweep (t = 0, -spacing, -2*spacing, ...). Every
    actor deposits ``point_count`` worth of mass as an anisotropic Gaussian
    aligned with its pose at that sweep time, then zero-mean clutter noise
    (scaled by a per-scene draw from ``rng``) is added everywhere.
    """
    n_ch, ny, nx = cfg.raster_shape
    values = np.zeros((n_ch, ny, nx))
    cs = cfg.cell_size
    xs = (np.arange(nx) + 0.5) * cs
    ys = (np.arange(ny) + 0.5) * cs

    clutter_scale = rng.uniform(0.4, 2.0)
    sharpness = rng.uniform(0.8, 1.3)  # scene-wide sensor focus

    for ch in range(n_ch):
        t = -ch * cfg.sweep_spacing
        for actor in scene.actors:
            if actor.point_count == 0:
                continue
            px, py, th = actor.position_at(t)
            sig_l = actor.box.length / (2.2 * sharpness)
            sig_w = actor.box.width / (1.6 * sharpness)
            reach = 3.5 * sig_l
            i0 = max(int((py - reach) / cs), 0)
            i1 = min(int((py + reach) / cs) + 1, ny)
            j0 = max(int((px - reach) / cs), 0)
            j1 = min(int((px + reach) / cs) + 1, nx)
            if i0 >= i1 or j0 >= j1:
                continue
            dx = xs[j0:j1][None, :] - px
            dy = ys[i0:i1][:, None] - py
            c, s = math.cos(th), math.sin(th)
            u = dx * c + dy * s
            v = -dx * s + dy * c
            g = np.exp(-0.5 * ((u / sig_l) ** 2 + (v / sig_w) ** 2))
            total = g.sum()
            if total > 0:
                # normalized so each actor deposits exactly point_count of
                # evidence regardless of how the blob lands on the grid
                values[ch, i0:i1, j0:j1] += actor.point_count * g / total

    if cfg.sigma_clutter > 0:
        values += rng.normal(0.0, cfg.sigma_clutter * clutter_scale, size=values.shape)
    return FeatureRaster(cell_size=cs, values=values)


def generate_scene(cfg: GenConfig, scene_id: int) -> Scene:
    actor_rng, feature_rng = _scene_streams(cfg.seed, scene_id)
    ex, ey = cfg.extent
    sdv = (ex / 2.0, ey / 2.0)

    n_lots = int(actor_rng.integers(1, 3))
    # two speed regimes: fast scenes are the rare, high-error tail
    if actor_rng.random() < 0.2:
        scene_speed = actor_rng.uniform(8.0, 13.0)
    else:
        scene_speed = actor_rng.uniform(3.5, 7.0)
    n_actors = int(actor_rng.integers(cfg.actors_min, cfg.actors_max + 1))
    mix = _sample_scene_mix(cfg, actor_rng)
    # Traffic state is a fixed lookup over (crowding, speed band, parked
    # share). The observed past is steady, so the future speed profile can
    # only be inferred from scene context, and pinning down the table takes
    # many distinct scenes.
    crowd_bin = min(int(3 * (n_actors - cfg.actors_min) /
                        max(cfg.actors_max - cfg.actors_min + 1, 1)), 2)
    speed_bin = 0 if scene_speed < 5.0 else (1 if scene_speed < 8.0 else 2)
    parked_bin = 0 if mix[0] < 0.35 else (1 if mix[0] < 0.55 else 2)
    sign = _TRAFFIC_TABLE[crowd_bin, speed_bin, parked_bin]
    accel = sign * actor_rng.uniform(0.45, 0.9)
    lat = _SceneLatents(
        mix=mix,
        road_theta=actor_rng.uniform(0.0, math.pi),
        scene_speed=scene_speed,
        accel=accel,
        lam_gain=actor_rng.uniform(0.6, 1.5),
        lots=[(actor_rng.uniform(10.0, ex - 10.0), actor_rng.uniform(10.0, ey - 10.0),
               actor_rng.uniform(0.0, math.pi)) for _ in range(n_lots)],
    )
    behaviors = actor_rng.choice(len(BEHAVIORS), size=n_actors, p=lat.mix)

    actors = []
    placed: list[tuple[float, float]] = []
    for i, b in enumerate(behaviors):
        actor = _generate_actor(cfg, actor_rng, i, BEHAVIORS[int(b)], lat, sdv, placed)
        actors.append(actor)
        placed.append((actor.box.cx, actor.box.cy))
    scene = Scene(scene_id=scene_id + cfg.id_offset, extent=cfg.extent, actors=actors,
                  features=FeatureRaster(cfg.cell_size, np.zeros(cfg.raster_shape)),
                  sdv_position=sdv)
    scene.features = synthesize_features(scene, cfg, feature_rng)
    return scene


def generate_pool(cfg: GenConfig) -> list[Scene]:
    """Generate ``cfg.n_scenes`` scenes; a pure function of the config."""
    cfg.validate()
    return [generate_scene(cfg, i) for i in range(cfg.n_scenes)]


def classify_action(trajectory: np.ndarray, dt: float) -> str:
    """High-level action of a future trajectory.

    Stationary means net displacement under 1 m; otherwise the signed heading
    change between the first and last velocity directions decides straight
    (|change| < 15 deg), left (>= +15 deg) or right (<= -15 deg).
    """
    traj = np.asarray(trajectory, dtype=float)
    if traj.ndim != 2 or traj.shape[0] < 2 or traj.shape[1] != 2:
        raise InvalidInputError(f"trajectory must have shape (>=2, 2), got {traj.shape}")
    if dt <= 0:
        raise InvalidInputError(f"dt must be > 0, got {dt}")
    if float(np.hypot(*(traj[-1] - traj[0]))) < 1.0:
        return "stationary"
    steps = np.diff(traj, axis=0)
    norms = np.hypot(steps[:, 0], steps[:, 1])
    moving = np.nonzero(norms > 1e-9)[0]
    if len(moving) == 0:
        return "stationary"
    v_first = steps[moving[0]]
    v_last = steps[moving[-1]]
    dth = math.atan2(v_last[1], v_last[0]) - math.atan2(v_first[1], v_first[0])
    dth = (dth + math.pi) % (2.0 * math.pi) - math.pi
    if abs(dth) < math.radians(15.0):
        return "straight"
    return "left" if dth > 0 else "right"


# ---------------------------------------------------------------------------
# Pool persistence: JSON-lines plus a manifest with config and content hash.

def _actor_to_json(a: Actor) -> dict:
    return {
        "actor_id": a.actor_id,
        "box": [a.box.cx, a.box.cy, a.box.length, a.box.width, a.box.heading],
        "trajectory": a.trajectory.tolist(),
        "behavior": a.behavior,
        "speed": a.speed,
        "point_count": a.point_count,
        "turn_rate": a.turn_rate,
        "accel": a.accel,
    }


def _actor_from_json(d: dict) -> Actor:
    return Actor(
        actor_id=int(d["actor_id"]),
        box=OrientedBox(*[float(v) for v in d["box"]]),
        trajectory=np.array(d["trajectory"], dtype=float),
        behavior=d["behavior"],
        speed=float(d["speed"]),
        point_count=int(d["point_count"]),
        turn_rate=float(d["turn_rate"]),
        accel=float(d.get("accel", 0.0)),
    )


def scene_to_json_line(scene: Scene) -> str:
    r = scene.features
    raw = np.ascontiguousarray(r.values, dtype=np.float32)
    return json.dumps({
        "scene_id": scene.scene_id,
        "extent": list(scene.extent),
        "sdv_position": list(scene.sdv_position),
        "actors": [_actor_to_json(a) for a in scene.actors],
        "raster": {
            "cell_size": r.cell_size,
            "shape": list(raw.shape),
            "dtype": "float32",
            "data": base64.b64encode(raw.tobytes()).decode("ascii"),
        },
    })


def scene_from_json_line(line: str) -> Scene:
    d = json.loads(line)
    r = d["raster"]
    values = np.frombuffer(base64.b64decode(r["data"]), dtype=np.float32)
    values = values.reshape(r["shape"]).astype(float)
    return Scene(
        scene_id=int(d["scene_id"]),
        extent=tuple(d["extent"]),
        actors=[_actor_from_json(a) for a in d["actors"]],
        features=FeatureRaster(cell_size=float(r["cell_size"]), values=values),
        sdv_position=tuple(d["sdv_position"]),
    )


def save_pool(scenes: list[Scene], cfg: GenConfig, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = [scene_to_json_line(s) for s in scenes]
    payload = ("\n".join(lines) + "\n") if lines else ""
    pool_path = out / "pool.jsonl"
    pool_path.write_text(payload, encoding="utf-8")
    cfg_dict = {k: (list(v) if isinstance(v, tuple) else v) for k, v in vars(cfg).items()}
    manifest = {
        "schema_version": SCHEMA_VERSION,
        "config": cfg_dict,
        "n_scenes": len(scenes),
        "content_sha256": hashlib.sha256(payload.encode("utf-8")).hexdigest(),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n", encoding="utf-8")
    return pool_path


def load_pool(pool_dir: str | Path) -> tuple[list[Scene], dict]:
    pool_dir = Path(pool_dir)
    manifest = json.loads((pool_dir / "manifest.json").read_text(encoding="utf-8"))
    text = (pool_dir / "pool.jsonl").read_text(encoding="utf-8")
    scenes = [scene_from_json_line(line) for line in text.splitlines() if line]
    return scenes, manifest


def load_gen_config(d: dict) -> GenConfig:
    kwargs = dict(d)
    for key in ("extent",):
        if key in kwargs and isinstance(kwargs[key], list):
            kwargs[key] = tuple(kwargs[key])
    cfg = GenConfig(**kwargs)
    cfg.validate()
    return cfg


def with_overrides(cfg: GenConfig, **kwargs) -> GenConfig:
    return replace(cfg, **kwargs)
