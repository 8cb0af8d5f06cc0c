"""Training loop, synthetic datasets, checkpoints, and evaluation.

One optimization step samples a posed frame, deforms the canonical splats to
its timestamp (encode -> latent -> fields -> offsets/force -> Verlet ->
equilibrium masks -> blends -> rotation clamp), rasterizes, and applies one
Adam update per parameter group.  Everything is seeded and deterministic:
identical config + dataset + seed produce byte-identical checkpoints.

Dataset directories hold ``frames/NNNN.ppm`` images, ``frames/NNNN.cam``
text files (16 view floats, fx fy cx cy, width height, timestamp), optional
``frames/NNNN.traj`` ground-truth positions, and an ``init.ply`` canonical
scene.  Checkpoints are single little-endian binary files (see README).
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field, fields as dc_fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import bed as bed_mod
from . import hexplane, hnn, physics
from . import render as render_mod
from .gauss import Scene, Aabb, ARRAY_FIELDS, load_ply, save_ply
from .render import Camera, ImageBuffer, LossConfig, RasterConfig

log = logging.getLogger("hamsplat")

CHECKPOINT_MAGIC = b"HSPLATCK"
CHECKPOINT_VERSION = 1


class ConfigError(ValueError):
    pass


class TrainDivergedError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 20000
    batch_size: int = 1
    seed: int = 0
    frame_order: str = "random"         # or "sequential" for the literal loop
    encoder_lr: float = 0.0016
    encoder_lr_final: float = 0.00016
    decoder_lr: float = 0.001
    position_lr: float = 0.0002
    eq_lr: float = -1.0                 # < 0: follow position_lr
    scale_lr: float = 0.005
    rotation_lr: float = 0.001
    opacity_lr: float = 0.05
    color_lr: float = 0.0025
    base_resolution: int = 64
    upsampling: tuple = (2, 4)
    plane_channels: int = 8
    decoder_depth: int = 2
    decoder_width: int = 64
    decoder_kind: str = "hnn"           # or "linear" (ablation baseline)
    use_bed: bool = True
    dt: float = 0.0                     # <= 0: one frame step, 1/(T-1)
    phi_max: float = 0.35
    sigma_s: float = 0.0                # <= 0: 0.1 * scene diagonal
    sigma_t: float = 0.2
    coupling_lambda: float = 0.1
    bed_beta: float = 1.0
    bed_gamma: float = 0.05
    lambda_dssim: float = 0.2
    background: str = "white"
    prune_interval: int = 8000          # recorded for fidelity; no-op here
    log_every: int = 100

    def __post_init__(self):
        if self.iterations < 0 or self.batch_size < 1:
            raise ConfigError("iterations must be >= 0 and batch_size >= 1")
        for name in ("encoder_lr", "encoder_lr_final", "decoder_lr", "position_lr",
                     "scale_lr", "rotation_lr", "opacity_lr", "color_lr"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.frame_order not in ("random", "sequential"):
            raise ConfigError(f"unknown frame_order {self.frame_order!r}")
        if self.decoder_kind not in ("hnn", "linear"):
            raise ConfigError(f"unknown decoder_kind {self.decoder_kind!r}")
        if self.background not in render_mod.BACKGROUNDS:
            raise ConfigError(f"unknown background {self.background!r}")
        self.upsampling = tuple(int(u) for u in self.upsampling)

    @property
    def eq_lr_effective(self) -> float:
        return self.position_lr if self.eq_lr < 0 else self.eq_lr


_CONFIG_TYPES = {f.name: f.type for f in dc_fields(TrainConfig)}


def config_to_text(cfg: TrainConfig) -> str:
    lines = []
    for f in dc_fields(TrainConfig):
        v = getattr(cfg, f.name)
        if isinstance(v, tuple):
            v = ",".join(str(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = f"{v:.17g}"
        lines.append(f"{f.name}={v}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> TrainConfig:
    kwargs = {}
    known = {f.name: f for f in dc_fields(TrainConfig)}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in known:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        default = known[key].default
        if key == "upsampling":
            kwargs[key] = tuple(int(x) for x in value.split(",") if x.strip() != "")
        elif isinstance(default, bool):
            if value.lower() not in ("true", "false"):
                raise ConfigError(f"line {lineno}: {key} must be true or false")
            kwargs[key] = value.lower() == "true"
        elif isinstance(default, int):
            kwargs[key] = int(value)
        elif isinstance(default, float):
            kwargs[key] = float(value)
        else:
            kwargs[key] = value
    return TrainConfig(**kwargs)


def load_config(path) -> TrainConfig:
    return config_from_text(Path(path).read_text(encoding="utf-8"))


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Frame:
    t: float
    camera: Camera
    image: ImageBuffer
    gt_positions: np.ndarray | None = None


@dataclass
class FrameDataset:
    frames: list
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        ts = [f.t for f in self.frames]
        if sorted(ts) != ts or len(set(ts)) != len(ts):
            raise ValueError("frame timestamps must be sorted and unique")

    def __len__(self):
        return len(self.frames)


def save_dataset(ds: FrameDataset, out_dir, init_scene: Scene | None = None) -> None:
    out = Path(out_dir)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, fr in enumerate(ds.frames):
        stem = out / "frames" / f"{i:04d}"
        render_mod.write_ppm(fr.image, stem.with_suffix(".ppm"))
        cam = fr.camera
        lines = [" ".join(f"{v:.17g}" for v in cam.view.ravel()),
                 f"{cam.fx:.17g} {cam.fy:.17g} {cam.cx:.17g} {cam.cy:.17g}",
                 f"{cam.width} {cam.height}",
                 f"{fr.t:.17g}"]
        stem.with_suffix(".cam").write_text("\n".join(lines) + "\n", encoding="ascii")
        if fr.gt_positions is not None:
            np.savetxt(stem.with_suffix(".traj"), fr.gt_positions, fmt="%.17g")
    if init_scene is not None:
        save_ply(init_scene, out / "init.ply")


def load_dataset(in_dir) -> FrameDataset:
    src = Path(in_dir) / "frames"
    frames = []
    for cam_path in sorted(src.glob("*.cam")):
        tokens = cam_path.read_text(encoding="ascii").split()
        if len(tokens) != 23:
            raise ValueError(f"{cam_path}: expected 23 numbers, got {len(tokens)}")
        vals = [float(v) for v in tokens]
        camera = Camera(view=np.array(vals[:16]).reshape(4, 4),
                        fx=vals[16], fy=vals[17], cx=vals[18], cy=vals[19],
                        width=int(vals[20]), height=int(vals[21]))
        image = render_mod.read_ppm(cam_path.with_suffix(".ppm"))
        traj_path = cam_path.with_suffix(".traj")
        gt_positions = None
        if traj_path.exists():
            gt_positions = np.loadtxt(traj_path).reshape(-1, 3)
        frames.append(Frame(t=vals[22], camera=camera, image=image,
                            gt_positions=gt_positions))
    return FrameDataset(frames)


def load_init_scene(in_dir) -> Scene:
    return load_ply(Path(in_dir) / "init.ply")


# ---------------------------------------------------------------------------
# deformation decoders (shared interface)
# ---------------------------------------------------------------------------

class LinearDecoder:
    """Ablation baseline: one bias-free linear head from features to offsets."""

    def __init__(self, in_dim: int, seed: int = 0):
        self.in_dim = in_dim
        self.weight = ad.leaf(np.zeros((in_dim, 10)))

    def params(self):
        return [("linear.w", self.weight)]

    def set_param(self, name, tensor):
        if name != "linear.w":
            raise KeyError(name)
        self.weight = tensor

    def predict(self, f: ad.Tensor, trace=None):
        if trace is not None:
            trace.append("linear")
        out = ad.matmul(f, self.weight)
        dmu, ds, dr = out[:, 0:3], out[:, 3:6], out[:, 6:10]
        force = ad.zeros(dmu.shape)
        return dmu, ds, dr, force


def _hnn_predict(decoder: hnn.DeformDecoder, f: ad.Tensor, trace=None):
    if trace is not None:
        trace.append("latent")
    h = decoder.latent(f)
    if trace is not None:
        trace.append("vector_fields")
    v_c, v_s, v = decoder.vector_fields(h)
    if trace is not None:
        trace.append("deform")
    dmu, ds, dr = decoder.deform(v)
    if trace is not None:
        trace.append("force")
    force = decoder.force_from(v_c)
    return dmu, ds, dr, force


def decoder_predict(decoder, f, trace=None):
    if isinstance(decoder, hnn.DeformDecoder):
        return _hnn_predict(decoder, f, trace)
    return decoder.predict(f, trace)


# ---------------------------------------------------------------------------
# deformation
# ---------------------------------------------------------------------------

def _deform_attrs(arrays: dict, t: float, bounds: Aabb, encoder, decoder,
                  bed_cfg: bed_mod.BedConfig, phys_cfg: physics.IntegratorConfig,
                  use_bed: bool = True, trace=None) -> dict:
    """Differentiable per-timestamp deformation of attribute tensors."""
    mu = arrays["mu"]
    n = mu.shape[0]
    lo = ad.constant(bounds.lo)
    inv_span = ad.constant(1.0 / (bounds.hi - bounds.lo))
    if trace is not None:
        trace.append("encode")
    u = ad.concat([(mu - lo) * inv_span, ad.full((n, 1), t)], axis=1)
    feats = encoder.encode(u)
    dmu, ds, dr, force = decoder_predict(decoder, feats, trace)

    if trace is not None:
        trace.append("verlet")
    mu_tilde = physics.verlet_position(mu, dmu, force, phys_cfg.dt)

    if use_bed:
        if trace is not None:
            trace.append("masks")
        dd, dtau = bed_mod.deviations(mu, arrays["mu_eq"], t, arrays["t_eq_pos"], bed_cfg)
        e_st = bed_mod.spatial_temporal_energy(dd, dtau, bed_cfg)
        m_pos = bed_mod.boltzmann_mask(e_st, bed_cfg)
        e_t = bed_mod.temporal_energy(t, arrays["t_eq_scale"], bed_cfg)
        m_scale = bed_mod.boltzmann_mask(e_t, bed_cfg)
        if trace is not None:
            trace.append("blend_position")
        mu_out = bed_mod.blend_position(mu, mu_tilde, m_pos)
        if trace is not None:
            trace.append("blend_scale")
        scale_out = bed_mod.blend_scale(ad.exp(arrays["log_scale"]), ds, m_scale)
    else:
        mu_out = mu_tilde
        scale_out = ad.exp(arrays["log_scale"]) + ds

    if trace is not None:
        trace.append("clamp_rotation")
    dr_clamped = physics.clamp_rotation_batch(dr, phys_cfg.phi_max)
    if trace is not None:
        trace.append("apply_rotation")
    from .gauss import quat_normalize_batch
    rot_out = physics.apply_rotation_batch(quat_normalize_batch(arrays["rot"]), dr_clamped)

    return {"mu": mu_out, "scale": scale_out, "rot": rot_out,
            "opacity_logit": arrays["opacity_logit"], "color": arrays["color"]}


def deform_scene(scene: Scene, t: float, encoder, decoder,
                 bed_cfg: bed_mod.BedConfig, phys_cfg: physics.IntegratorConfig) -> Scene:
    """Deform a scene to timestamp t; opacity and color pass through unchanged."""
    if not (0.0 <= t <= 1.0):
        raise ValueError(f"timestamp {t} outside [0, 1]")
    raw = scene.as_arrays()
    arrays = {k: ad.constant(v) for k, v in raw.items()}
    try:
        with ad.no_grad():
            out = _deform_attrs(arrays, t, scene.bounds, encoder, decoder,
                                bed_cfg, phys_cfg)
    except Exception as exc:
        raise type(exc)(f"{exc} (while deforming {len(scene)} primitives at t={t})") from exc
    mu = out["mu"].data
    scale = out["scale"].data
    bad = ~(np.isfinite(mu).all(axis=1) & np.isfinite(scale).all(axis=1))
    if np.any(bad):
        raise ArithmeticError(
            f"deformation produced non-finite attributes for primitive {int(np.argmax(bad))} at t={t}")
    new = {
        "mu": mu,
        "log_scale": np.log(np.maximum(scale, 1e-12)),
        "rot": out["rot"].data,
        "opacity_logit": raw["opacity_logit"].copy(),
        "color": raw["color"].copy(),
        "mu_eq": raw["mu_eq"].copy(),
        "t_eq_pos": raw["t_eq_pos"].copy(),
        "t_eq_scale": raw["t_eq_scale"].copy(),
    }
    return Scene.from_arrays(new, scene.bounds)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

@dataclass
class Checkpoint:
    version: int
    iteration: int
    cfg: TrainConfig
    bounds: Aabb
    arrays: dict            # name -> np.ndarray (scene.*, enc.*, dec.*, adam.*)

    def scene(self) -> Scene:
        data = {k[len("scene."):]: v for k, v in self.arrays.items()
                if k.startswith("scene.")}
        return Scene.from_arrays(data, self.bounds)


def save_checkpoint(ck: Checkpoint, path) -> None:
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<IQ", ck.version, ck.iteration))
        cfg_text = config_to_text(ck.cfg).encode("utf-8")
        f.write(struct.pack("<I", len(cfg_text)))
        f.write(cfg_text)
        f.write(np.concatenate([ck.bounds.lo, ck.bounds.hi]).astype("<f8").tobytes())
        f.write(struct.pack("<I", len(ck.arrays)))
        for name, arr in ck.arrays.items():
            nb = name.encode("utf-8")
            arr = np.asarray(arr, dtype=np.float64)
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            for d in arr.shape:
                f.write(struct.pack("<I", d))
            f.write(arr.astype("<f8").tobytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, iteration = struct.unpack("<IQ", f.read(12))
        (cfg_len,) = struct.unpack("<I", f.read(4))
        cfg = config_from_text(f.read(cfg_len).decode("utf-8"))
        b = np.frombuffer(f.read(48), dtype="<f8")
        bounds = Aabb(b[:3].copy(), b[3:].copy())
        (count,) = struct.unpack("<I", f.read(4))
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            shape = tuple(struct.unpack("<I", f.read(4))[0] for _ in range(ndim))
            size = int(np.prod(shape)) if shape else 1
            arrays[name] = np.frombuffer(f.read(8 * size), dtype="<f8").reshape(shape).copy()
    return Checkpoint(version=version, iteration=iteration, cfg=cfg,
                      bounds=bounds, arrays=arrays)


def build_model(cfg: TrainConfig, bounds: Aabb):
    """Fresh encoder/decoder pair per the config (seeded)."""
    encoder = hexplane.HexPlaneEncoder(
        base_resolution=cfg.base_resolution, upsampling=cfg.upsampling,
        channels=cfg.plane_channels, seed=cfg.seed)
    in_dim = encoder.out_dim
    if cfg.decoder_kind == "hnn":
        decoder = hnn.DeformDecoder(hnn.DecoderConfig(
            in_dim=in_dim, depth=cfg.decoder_depth, width=cfg.decoder_width,
            seed=cfg.seed + 1))
    else:
        decoder = LinearDecoder(in_dim, seed=cfg.seed + 1)
    return encoder, decoder


def model_from_checkpoint(ck: Checkpoint):
    """Rebuild (scene, encoder, decoder, bed_cfg, phys_cfg) from a checkpoint."""
    encoder, decoder = build_model(ck.cfg, ck.bounds)
    for name, tensor in encoder.params():
        encoder.set_param(name, ad.leaf(ck.arrays["enc." + name]))
    for name, tensor in decoder.params():
        decoder.set_param(name, ad.leaf(ck.arrays["dec." + name]))
    scene = ck.scene()
    bed_cfg = _resolve_bed(ck.cfg, ck.bounds)
    phys_cfg = physics.IntegratorConfig(dt=ck.arrays["meta.dt"].item(),
                                        phi_max=ck.cfg.phi_max)
    return scene, encoder, decoder, bed_cfg, phys_cfg


def _resolve_bed(cfg: TrainConfig, bounds: Aabb) -> bed_mod.BedConfig:
    sigma_s = cfg.sigma_s if cfg.sigma_s > 0 else 0.1 * bounds.diagonal
    return bed_mod.BedConfig(sigma_s=sigma_s, sigma_t=cfg.sigma_t,
                             coupling_lambda=cfg.coupling_lambda,
                             beta=cfg.bed_beta, gamma=cfg.bed_gamma)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

_SCENE_LR_GROUPS = {
    "mu": "position_lr", "mu_eq": "eq", "t_eq_pos": "eq", "t_eq_scale": "eq",
    "log_scale": "scale_lr", "rot": "rotation_lr",
    "opacity_logit": "opacity_lr", "color": "color_lr",
}


def train(cfg: TrainConfig, dataset: FrameDataset, init_scene: Scene,
          out_path=None, on_log=None) -> Checkpoint:
    """Optimize canonical splats + deformation model on a posed frame set."""
    if len(dataset) == 0:
        raise ValueError("dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    bounds = init_scene.bounds
    n_frames = len(dataset)
    dt = cfg.dt if cfg.dt > 0 else (1.0 / (n_frames - 1) if n_frames > 1 else 1.0)
    phys_cfg = physics.IntegratorConfig(dt=dt, phi_max=cfg.phi_max)
    bed_cfg = _resolve_bed(cfg, bounds)
    loss_cfg = LossConfig(lambda_dssim=cfg.lambda_dssim)
    background = render_mod.BACKGROUNDS[cfg.background]
    encoder, decoder = build_model(cfg, bounds)

    arrays = {k: ad.leaf(v) for k, v in init_scene.as_arrays().items()}
    adam_states: dict = {}
    params: dict = {}

    def register(name, tensor):
        params[name] = tensor
        adam_states[name] = ad.AdamState.for_param(tensor)

    for k in ARRAY_FIELDS:
        register("scene." + k, arrays[k])
    for name, tensor in encoder.params():
        register("enc." + name, tensor)
    for name, tensor in decoder.params():
        register("dec." + name, tensor)

    def lr_for(name: str, it: int) -> float:
        if name.startswith("enc."):
            if cfg.iterations <= 1:
                return cfg.encoder_lr
            frac = it / (cfg.iterations - 1)
            return cfg.encoder_lr * (cfg.encoder_lr_final / cfg.encoder_lr) ** frac
        if name.startswith("dec."):
            return cfg.decoder_lr
        group = _SCENE_LR_GROUPS[name[len("scene."):]]
        if group == "eq":
            return cfg.eq_lr_effective
        return getattr(cfg, group)

    def snapshot(iteration: int) -> Checkpoint:
        out = {}
        for k in ARRAY_FIELDS:
            out["scene." + k] = params["scene." + k].data.copy()
        for name, _ in encoder.params():
            out["enc." + name] = params["enc." + name].data.copy()
        for name, _ in decoder.params():
            out["dec." + name] = params["dec." + name].data.copy()
        for name, st in adam_states.items():
            out["adam." + name + ".m"] = st.m.copy()
            out["adam." + name + ".v"] = st.v.copy()
            out["adam." + name + ".step"] = np.array(float(st.step))
        out["meta.dt"] = np.array(dt)
        return Checkpoint(version=CHECKPOINT_VERSION, iteration=iteration,
                          cfg=cfg, bounds=bounds, arrays=out)

    def scene_arrays():
        return {k: params["scene." + k] for k in ARRAY_FIELDS}

    old_debug = ad.set_debug_checks(False)
    try:
        for it in range(cfg.iterations):
            if cfg.frame_order == "random":
                picks = [int(rng.integers(n_frames)) for _ in range(cfg.batch_size)]
            else:
                picks = [(it * cfg.batch_size + j) % n_frames for j in range(cfg.batch_size)]

            loss = None
            last_render = None
            last_frame = None
            for fi in picks:
                frame = dataset.frames[fi]
                out = _deform_attrs(scene_arrays(), frame.t, bounds, encoder, decoder,
                                    bed_cfg, phys_cfg, use_bed=cfg.use_bed)
                img = render_mod.rasterize_attrs(
                    out["mu"], out["scale"], out["rot"],
                    ad.sigmoid(out["opacity_logit"]), ad.clip(out["color"], 0.0, 1.0),
                    frame.camera, background)
                img = ad.reshape(img, (frame.camera.height, frame.camera.width, 3))
                frame_loss = render_mod.total_loss(img, ad.constant(frame.image.rgb),
                                                   encoder, loss_cfg)
                loss = frame_loss if loss is None else loss + frame_loss
                last_render, last_frame = img, frame
            if cfg.batch_size > 1:
                loss = loss * (1.0 / cfg.batch_size)

            if not np.isfinite(loss.data):
                ck = snapshot(it)
                if out_path is not None:
                    save_checkpoint(ck, out_path)
                raise TrainDivergedError(
                    f"non-finite loss at iteration {it}"
                    + (f"; checkpoint dumped to {out_path}" if out_path else ""))

            grads = ad.grad(loss, list(params.values()))
            for name, tensor in params.items():
                new_t = ad.adam_step(tensor, grads[tensor], adam_states[name],
                                     lr_for(name, it))
                params[name] = new_t
            rot = params["scene.rot"].data
            params["scene.rot"] = ad.leaf(rot / np.linalg.norm(rot, axis=1, keepdims=True))
            for name, tensor in params.items():
                if name.startswith("enc."):
                    encoder.set_param(name[4:], tensor)
                elif name.startswith("dec."):
                    decoder.set_param(name[4:], tensor)

            if (it + 1) % cfg.log_every == 0 or it + 1 == cfg.iterations:
                with ad.no_grad():
                    cur_psnr = render_mod.psnr(
                        np.clip(last_render.data, 0.0, 1.0), last_frame.image.rgb)
                log.info("iter %d loss %.6f psnr %.2f", it + 1, loss.item(), cur_psnr)
                if on_log is not None:
                    on_log(it + 1, loss.item(), cur_psnr)
    finally:
        ad.set_debug_checks(old_debug)

    ck = snapshot(cfg.iterations)
    if out_path is not None:
        save_checkpoint(ck, out_path)
    return ck


# ---------------------------------------------------------------------------
# synthetic datasets
# ---------------------------------------------------------------------------

def _cluster(rng, center, n, spread, color, scale_range=(0.07, 0.11)):
    prims = []
    from .gauss import GaussianPrimitive
    for _ in range(n):
        prims.append(GaussianPrimitive(
            mu=np.asarray(center) + rng.normal(scale=spread, size=3),
            log_scale=np.log(np.full(3, float(rng.uniform(*scale_range)))),
            rot=np.array([1.0, 0.0, 0.0, 0.0]),
            opacity_logit=2.5,
            color=np.clip(color + rng.normal(scale=0.08, size=3), 0.05, 0.95)))
    return prims


def _rotate_z(points, pivot, angle):
    c, s = np.cos(angle), np.sin(angle)
    rel = points - pivot
    out = rel.copy()
    out[:, 0] = c * rel[:, 0] - s * rel[:, 1]
    out[:, 1] = s * rel[:, 0] + c * rel[:, 1]
    return out + pivot


def synth_scene(kind: str, n_frames: int, n_gaussians: int, resolution: int,
                seed: int = 0):
    """Analytic toy sequences rendered by this repo's own rasterizer.

    pendulum: a rigid rod cluster in harmonic angular motion (exact solution,
    energy constant to machine precision); orbit: two clusters on circles;
    mixed: half static, half on smooth translation loops.  Returns
    (FrameDataset, canonical Scene at t = 0); per-frame ground-truth
    positions ride along in the dataset.
    """
    rng = np.random.default_rng(seed)
    ts = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.0])
    camera = Camera.look_at(eye=(0.0, 0.0, 4.0), target=(0.0, 0.0, 0.0),
                            fov_x=0.8, width=resolution, height=resolution)
    meta = {"kind": kind}

    if kind == "pendulum":
        pivot = np.array([0.0, 0.9, 0.0])
        omega = 2.0 * np.pi
        theta0 = 0.7
        rest = np.zeros((n_gaussians, 3))
        rest[:, 1] = np.linspace(-0.2, -1.4, n_gaussians)
        rest += rng.normal(scale=0.03, size=rest.shape)
        rest += pivot
        colors = np.clip(np.tile([0.85, 0.3, 0.2], (n_gaussians, 1))
                         + rng.normal(scale=0.1, size=(n_gaussians, 3)), 0.05, 0.95)
        base = _cluster(rng, [0, 0, 0], n_gaussians, 0.0, np.zeros(3))
        for p, pos, col in zip(base, rest, colors):
            p.mu = pos
            p.color = col

        def positions_at(t):
            theta = theta0 * np.cos(omega * t)
            return _rotate_z(rest, pivot, theta - 0.0)

        meta.update(omega=omega, theta0=theta0, span=1.0)
        meta["energy"] = lambda t: 0.5 * (theta0 * omega * np.sin(omega * t)) ** 2 \
            + 0.5 * omega ** 2 * (theta0 * np.cos(omega * t)) ** 2
        prims = base
    elif kind == "orbit":
        half = n_gaussians // 2
        c1 = _cluster(rng, [0.0, 0.0, 0.0], half, 0.12, np.array([0.2, 0.4, 0.85]))
        c2 = _cluster(rng, [0.0, 0.0, 0.0], n_gaussians - half, 0.12,
                      np.array([0.9, 0.6, 0.1]))
        prims = c1 + c2
        radius = 0.7
        rel = np.stack([p.mu for p in prims])

        def positions_at(t):
            out = rel.copy()
            a1 = 2.0 * np.pi * t
            a2 = a1 + np.pi
            out[:half] += radius * np.array([np.cos(a1), np.sin(a1), 0.0])
            out[half:] += radius * np.array([np.cos(a2), np.sin(a2), 0.0])
            return out

        meta.update(radius=radius)
    elif kind == "mixed":
        half = n_gaussians // 2
        static = []
        srng = rng
        for _ in range(half):
            static.append(_cluster(srng, srng.uniform(-0.9, 0.9, size=3) * np.array([1, 1, 0.3]),
                                   1, 0.0, srng.uniform(0.15, 0.85, size=3))[0])
        n_dyn = n_gaussians - half
        n_clusters = 3
        centers = np.array([[-0.55, -0.5, 0.2], [0.55, -0.45, -0.2], [0.0, 0.55, 0.0]])
        dirs = np.array([[0.9, 0.25, 0.0], [-0.1, 0.95, 0.0], [0.7, -0.7, 0.0]])
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
        cols = np.array([[0.85, 0.2, 0.2], [0.2, 0.7, 0.25], [0.2, 0.3, 0.9]])
        dyn = []
        which = []
        for ci in range(n_clusters):
            k = n_dyn // n_clusters if ci < n_clusters - 1 else n_dyn - 2 * (n_dyn // n_clusters)
            dyn += _cluster(rng, centers[ci], k, 0.08, cols[ci])
            which += [ci] * k
        prims = static + dyn
        which = np.array(which)
        amp = 0.25
        rel = np.stack([p.mu for p in prims])

        def positions_at(t):
            out = rel.copy()
            # 3/4 period over the sequence so the end state differs from the start
            off = amp * np.sin(1.5 * np.pi * t)
            out[half:] += off * dirs[which]
            return out

        meta.update(n_static=half, amplitude=amp)
    else:
        raise ValueError(f"unknown synth kind {kind!r}")

    all_pos = np.concatenate([positions_at(t) for t in ts], axis=0)
    span = np.maximum(all_pos.max(axis=0) - all_pos.min(axis=0), 1e-6)
    bounds = Aabb(all_pos.min(axis=0) - 0.05 * span, all_pos.max(axis=0) + 0.05 * span)

    canonical = Scene([p for p in prims], bounds=bounds)
    base_pos = positions_at(ts[0])
    for p, pos in zip(canonical.primitives, base_pos):
        p.mu = pos.copy()
        p.mu_eq = pos.copy()

    frames = []
    for t in ts:
        pos = positions_at(t)
        arrays = canonical.as_arrays()
        arrays = {k: v.copy() for k, v in arrays.items()}
        arrays["mu"] = pos
        frame_scene = Scene.from_arrays(arrays, bounds)
        img = render_mod.rasterize(frame_scene, camera, background="white")
        frames.append(Frame(t=float(t), camera=camera, image=img, gt_positions=pos))
    return FrameDataset(frames, meta=meta), canonical


# ---------------------------------------------------------------------------
# evaluation and rendering
# ---------------------------------------------------------------------------

def evaluate(ck: Checkpoint, dataset: FrameDataset):
    """Per-frame PSNR/SSIM of the deformed render against ground truth."""
    scene, encoder, decoder, bed_cfg, phys_cfg = model_from_checkpoint(ck)
    rows = []
    for i, frame in enumerate(dataset.frames):
        deformed = deform_scene(scene, frame.t, encoder, decoder, bed_cfg, phys_cfg)
        img = render_mod.rasterize(deformed, frame.camera, background=ck.cfg.background)
        with ad.no_grad():
            s = render_mod.ssim(img.rgb, frame.image.rgb).item()
        rows.append((i, frame.t, render_mod.psnr(img, frame.image), s))
    return rows


def eval_to_csv(rows) -> str:
    lines = ["frame,t,psnr,ssim"]
    for (i, t, p, s) in rows:
        lines.append(f"{i},{t:.17g},{p:.17g},{s:.17g}")
    mean_p = float(np.mean([r[2] for r in rows]))
    mean_s = float(np.mean([r[3] for r in rows]))
    lines.append(f"mean,,{mean_p:.17g},{mean_s:.17g}")
    return "\n".join(lines) + "\n"


def render_sequence(ck: Checkpoint, cameras, timestamps, out_dir=None):
    """Render timestamps along a camera path; returns (frames, trajectory rows).

    Trajectory rows are (t, primitive id, x, y, z) of the deformed positions.
    When ``out_dir`` is given, frames land there as NNNN.ppm.
    """
    scene, encoder, decoder, bed_cfg, phys_cfg = model_from_checkpoint(ck)
    cameras = list(cameras)
    images = []
    traj = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(timestamps):
        cam = cameras[min(i, len(cameras) - 1)]
        deformed = deform_scene(scene, float(t), encoder, decoder, bed_cfg, phys_cfg)
        img = render_mod.rasterize(deformed, cam, background=ck.cfg.background)
        images.append(img)
        for pid, p in enumerate(deformed.primitives):
            traj.append((float(t), pid, p.mu[0], p.mu[1], p.mu[2]))
        if out_dir is not None:
            render_mod.write_ppm(img, Path(out_dir) / f"{i:04d}.ppm")
    return images, traj


def trajectory_to_csv(traj) -> str:
    lines = ["t,id,x,y,z"]
    for (t, pid, x, y, z) in traj:
        lines.append(f"{t:.17g},{pid},{x:.17g},{y:.17g},{z:.17g}")
    return "\n".join(lines) + "\n"
