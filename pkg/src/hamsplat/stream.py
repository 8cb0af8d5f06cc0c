"""Streaming support: anisotropic mip selection, mip chains, layered LOD.

Mip level selection follows the printed recipe: the scale is clamped into
[s/2, (s/2) * r], per-axis levels are l = log2(2 s~ / s), the anisotropy
rho = max(l)/min(l) feeds

    beta(rho) = tanh(rho/3 - 1) / (1 + tanh(rho/3 - 1))

clamped into [0, 0.5] (the raw formula is negative below rho = 3 and tops
out at 1/2), and the fused level is l^ = L - beta (L - Lbar 1) on the
4-vector of per-axis levels plus the dominant axis.

Layered scenes are a base splat set plus additive residual layers: attribute
offsets for existing primitives and newly appended primitives.  Progressive
training starts at quarter resolution and doubles per layer, freezing
earlier layers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import render as render_mod
from .gauss import Scene, Aabb, ARRAY_FIELDS, save_ply, load_ply, ply_bytes
from .render import Camera, ImageBuffer


# ---------------------------------------------------------------------------
# mip chains and trilinear sampling
# ---------------------------------------------------------------------------

@dataclass
class MipChain:
    """Image pyramid, level 0 full resolution, each level half the previous."""

    levels: list

    def __post_init__(self):
        self.clamp_count = 0

    @property
    def max_level(self) -> int:
        return len(self.levels) - 1


def build_mipchain(image) -> MipChain:
    """2x2 box-filter pyramid down to 1x1 (floor halving, odd edges dropped)."""
    img = image.rgb if isinstance(image, ImageBuffer) else np.asarray(image, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    levels = [img]
    cur = img
    while cur.shape[0] > 1 or cur.shape[1] > 1:
        h2, w2 = max(cur.shape[0] // 2, 1), max(cur.shape[1] // 2, 1)
        trimmed = cur[:h2 * 2, :w2 * 2, :] if (cur.shape[0] > 1 and cur.shape[1] > 1) else cur
        if cur.shape[0] == 1:
            nxt = 0.5 * (cur[:, 0:w2 * 2:2, :] + cur[:, 1:w2 * 2:2, :])
        elif cur.shape[1] == 1:
            nxt = 0.5 * (cur[0:h2 * 2:2, :, :] + cur[1:h2 * 2:2, :, :])
        else:
            nxt = 0.25 * (trimmed[0::2, 0::2, :] + trimmed[0::2, 1::2, :]
                          + trimmed[1::2, 0::2, :] + trimmed[1::2, 1::2, :])
        levels.append(nxt)
        cur = nxt
    return MipChain(levels)


def _bilinear(img: np.ndarray, uv) -> np.ndarray:
    """Clamp-to-edge bilinear lookup; texel centers at (i + 0.5) / size."""
    h, w, _ = img.shape
    x = uv[0] * w - 0.5
    y = uv[1] * h - 0.5
    j0 = int(np.floor(x))
    i0 = int(np.floor(y))
    fx = x - j0
    fy = y - i0
    j0c, j1c = np.clip([j0, j0 + 1], 0, w - 1)
    i0c, i1c = np.clip([i0, i0 + 1], 0, h - 1)
    return ((1 - fx) * (1 - fy) * img[i0c, j0c]
            + fx * (1 - fy) * img[i0c, j1c]
            + (1 - fx) * fy * img[i1c, j0c]
            + fx * fy * img[i1c, j1c])


def trilinear_sample(chain: MipChain, uv, level: float) -> np.ndarray:
    """Bilinear within the two bracketing levels, linear blend across them."""
    if level < 0.0 or level > chain.max_level:
        chain.clamp_count += 1
        level = float(np.clip(level, 0.0, chain.max_level))
    lo = int(np.floor(level))
    hi = min(lo + 1, chain.max_level)
    frac = level - lo
    a = _bilinear(chain.levels[lo], uv)
    if frac == 0.0:
        return a
    b = _bilinear(chain.levels[hi], uv)
    return (1.0 - frac) * a + frac * b


# ---------------------------------------------------------------------------
# scale-aware mip level selection
# ---------------------------------------------------------------------------

@dataclass
class MipSelectConfig:
    r: np.ndarray = field(default_factory=lambda: np.array([4, 4, 4]))

    def __post_init__(self):
        self.r = np.asarray(self.r, dtype=np.int64)
        if self.r.shape != (3,) or np.any(self.r < 1):
            raise ValueError("resolution ratios must be three integers >= 1")


@dataclass
class MipLevelSelection:
    s_tilde: np.ndarray    # clamped scale (3,)
    levels: np.ndarray     # per-axis l (3,)
    principal: np.ndarray  # 4-vector L (per-axis levels + dominant axis)
    level_mean: float      # Lbar over the spatial axes
    rho: float
    beta: float
    l_hat: np.ndarray      # fused 4-vector


def normalized_levels(s, cfg: MipSelectConfig) -> np.ndarray:
    """Per-axis levels l = log2(2 s~ / s) with s~ = clamp(s, s/2, (s/2) r)."""
    s = np.asarray(s, dtype=np.float64)
    if np.any(s <= 0):
        raise ValueError("scales must be positive")
    s_tilde = np.clip(s, s / 2.0, (s / 2.0) * cfg.r)
    return np.log2(2.0 * s_tilde / s), s_tilde


def anisotropy(levels: np.ndarray) -> float:
    """rho = max(l) / min(l); infinite when one axis needs no refinement."""
    lmax = float(np.max(levels))
    lmin = float(np.min(levels))
    if lmin == 0.0:
        return 1.0 if lmax == 0.0 else float("inf")
    return lmax / lmin


def beta_factor(rho: float) -> float:
    """tanh(rho/3 - 1) / (1 + tanh(rho/3 - 1)), clamped into [0, 0.5]."""
    if np.isinf(rho):
        return 0.5
    t = np.tanh(rho / 3.0 - 1.0)
    return float(np.clip(t / (1.0 + t), 0.0, 0.5))


def fuse_levels(principal: np.ndarray, level_mean: float, beta: float) -> np.ndarray:
    """l^ = L - beta (L - Lbar 1); componentwise between L and Lbar."""
    principal = np.asarray(principal, dtype=np.float64)
    return principal - beta * (principal - level_mean)


def mip_level_detail(s, cfg: MipSelectConfig) -> MipLevelSelection:
    levels, s_tilde = normalized_levels(s, cfg)
    dominant = int(np.argmax(levels / max(float(np.max(levels)), 1e-300)))
    principal = np.concatenate([levels, [levels[dominant]]])
    level_mean = float(np.mean(levels))
    rho = anisotropy(levels)
    beta = beta_factor(rho)
    return MipLevelSelection(s_tilde=s_tilde, levels=levels, principal=principal,
                             level_mean=level_mean, rho=rho, beta=beta,
                             l_hat=fuse_levels(principal, level_mean, beta))


def mip_level(s, cfg: MipSelectConfig) -> np.ndarray:
    """Adaptive 4-vector mip level for a positive 3-vector scale."""
    return mip_level_detail(s, cfg).l_hat


# ---------------------------------------------------------------------------
# layered progressive scenes
# ---------------------------------------------------------------------------

@dataclass
class SceneDelta:
    """Additive residual: per-primitive offsets plus appended primitives."""

    offsets: dict      # field -> array shaped like the previous level's arrays
    new: dict          # field -> appended rows (possibly zero rows)

    def n_new(self) -> int:
        return self.new["mu"].shape[0]


@dataclass
class LayeredScene:
    base: Scene
    residuals: list
    thresholds: list = None   # opacity threshold per level (len = n_residuals + 1)

    def __post_init__(self):
        if self.thresholds is None:
            self.thresholds = [0.0] * (len(self.residuals) + 1)

    @property
    def n_levels(self) -> int:
        return len(self.residuals)


def compose(layered: LayeredScene, i: int) -> Scene:
    """G_i = G_0 + sum_{j<=i} dG_j; offsets add fieldwise, new rows append."""
    if not (0 <= i <= layered.n_levels):
        raise ValueError(f"level {i} outside [0, {layered.n_levels}]")
    arrays = {k: v.copy() for k, v in layered.base.as_arrays().items()}
    for j in range(i):
        delta = layered.residuals[j]
        n_prev = arrays["mu"].shape[0]
        for k in ARRAY_FIELDS:
            off = delta.offsets[k]
            if off.shape[0] != n_prev:
                raise ValueError(
                    f"layer {j + 1} offsets for {k} cover {off.shape[0]} primitives, expected {n_prev}")
            arrays[k] = arrays[k] + off
            arrays[k] = np.concatenate([arrays[k], delta.new[k]], axis=0)
    return Scene.from_arrays(arrays, layered.base.bounds)


def opacity_prune(scene: Scene, threshold: float) -> Scene:
    """Keep primitives with activated opacity >= threshold, order preserved."""
    kept = [p for p in scene.primitives if p.opacity >= threshold]
    return Scene(list(kept), scene.bounds)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def _delta_to_scenes(delta: SceneDelta, bounds: Aabb):
    off_scene = Scene.from_arrays(delta.offsets, bounds)
    new_scene = Scene.from_arrays(delta.new, bounds)
    return off_scene, new_scene


def _scene_to_arrays(scene: Scene) -> dict:
    return scene.as_arrays()


def save_layered(layered: LayeredScene, out_dir) -> None:
    """Write base + numbered residual PLYs with a plain-text manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_ply(layered.base, out / "base.ply")
    lines = [f"layers {layered.n_levels}",
             f"base base.ply {layered.thresholds[0]:.17g}"]
    for j, delta in enumerate(layered.residuals, start=1):
        off_scene, new_scene = _delta_to_scenes(delta, layered.base.bounds)
        off_name, new_name = f"layer{j}_offsets.ply", f"layer{j}_new.ply"
        save_ply(off_scene, out / off_name)
        save_ply(new_scene, out / new_name)
        lines.append(f"layer {off_name} {new_name} {layered.thresholds[j]:.17g}")
    (out / "manifest.txt").write_text("\n".join(lines) + "\n", encoding="ascii")


def load_layered(in_dir) -> LayeredScene:
    src = Path(in_dir)
    lines = (src / "manifest.txt").read_text(encoding="ascii").splitlines()
    base = None
    residuals = []
    thresholds = []
    for line in lines:
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "base":
            base = load_ply(src / parts[1])
            thresholds.append(float(parts[2]))
        elif parts[0] == "layer":
            off_scene = load_ply(src / parts[1])
            new_scene = load_ply(src / parts[2])
            residuals.append(SceneDelta(offsets=_scene_to_arrays(off_scene),
                                        new=_scene_to_arrays(new_scene)))
            thresholds.append(float(parts[3]))
    if base is None:
        raise ValueError(f"{src}/manifest.txt has no base entry")
    return LayeredScene(base=base, residuals=residuals, thresholds=thresholds)


def _ply_nbytes(scene: Scene) -> int:
    return len(ply_bytes(scene))


def layer_nbytes(layered: LayeredScene, i: int) -> int:
    """Serialized size of everything needed to reconstruct level i."""
    total = _ply_nbytes(layered.base)
    for j in range(i):
        off_scene, new_scene = _delta_to_scenes(layered.residuals[j], layered.base.bounds)
        total += _ply_nbytes(off_scene) + _ply_nbytes(new_scene)
    return total


# ---------------------------------------------------------------------------
# rate/quality sweep
# ---------------------------------------------------------------------------

def rate_quality_sweep(layered: LayeredScene, frames) -> list:
    """Rows (level, primitive count, cumulative bytes, mean PSNR) per LOD level.

    ``frames`` is a sequence of (Camera, ImageBuffer) ground-truth pairs.
    """
    rows = []
    for i in range(layered.n_levels + 1):
        scene = opacity_prune(compose(layered, i), layered.thresholds[i])
        vals = []
        for cam, gt in frames:
            img = render_mod.rasterize(scene, cam, background="white")
            vals.append(render_mod.psnr(img, gt))
        rows.append((i, len(scene), layer_nbytes(layered, i), float(np.mean(vals))))
    return rows


def sweep_to_csv(rows) -> str:
    out = ["level,count,bytes,psnr"]
    for (level, count, nbytes, val) in rows:
        out.append(f"{level},{count},{nbytes},{val}")
    return "\n".join(out) + "\n"


# ---------------------------------------------------------------------------
# layered progressive optimization
# ---------------------------------------------------------------------------

def _downsample_frame(cam: Camera, img: ImageBuffer, factor: int):
    """Camera intrinsics and GT image at resolution / factor."""
    if factor == 1:
        return cam, img
    chain = build_mipchain(img)
    level = int(np.log2(factor))
    small = np.clip(chain.levels[level], 0.0, 1.0)
    cam2 = Camera(view=cam.view.copy(), fx=cam.fx / factor, fy=cam.fy / factor,
                  cx=cam.cx / factor, cy=cam.cy / factor,
                  width=cam.width // factor, height=cam.height // factor, znear=cam.znear)
    return cam2, ImageBuffer(small)


def _activate(arrays):
    mu = arrays["mu"]
    scale = ad.exp(arrays["log_scale"])
    from .gauss import quat_normalize_batch
    rot = quat_normalize_batch(arrays["rot"])
    opacity = ad.sigmoid(arrays["opacity_logit"])
    color = ad.clip(arrays["color"], 0.0, 1.0)
    return mu, scale, rot, opacity, color


def _fit_static(base_arrays: dict, train_names: list, frames, iters: int, lr: float,
                seed: int, background):
    """L1-fit selected attribute leaves against posed frames; returns the leaves."""
    leaves = {k: (ad.leaf(v) if k in train_names else ad.constant(v))
              for k, v in base_arrays.items()}
    states = {k: ad.AdamState.for_param(leaves[k]) for k in train_names}
    rng = np.random.default_rng(seed)
    lr_map = {"mu": lr * 0.1, "log_scale": lr, "rot": lr * 0.5,
              "opacity_logit": lr * 5.0, "color": lr * 2.0,
              "mu_eq": lr * 0.1, "t_eq_pos": lr * 0.1, "t_eq_scale": lr * 0.1}
    old_debug = ad.set_debug_checks(False)
    try:
        for _ in range(iters):
            cam, gt = frames[rng.integers(len(frames))]
            mu, scale, rot, opacity, color = _activate(leaves)
            img = render_mod.rasterize_attrs(mu, scale, rot, opacity, color, cam, background)
            loss = render_mod.loss_l1(ad.reshape(img, (cam.height, cam.width, 3)),
                                      ad.constant(gt.rgb))
            params = [leaves[k] for k in train_names]
            grads = ad.grad(loss, params)
            for k in train_names:
                leaves[k] = ad.adam_step(leaves[k], grads[leaves[k]], states[k],
                                         lr_map.get(k, lr))
    finally:
        ad.set_debug_checks(old_debug)
    return leaves


def _spawn_primitives(scene: Scene, cam: Camera, gt: ImageBuffer, n_new: int,
                      background, rng) -> dict:
    """Seed new primitives at the worst pixels, back-projected to scene depth."""
    img = render_mod.rasterize(scene, cam, background=background)
    err = np.sum(np.abs(img.rgb - gt.rgb), axis=2)
    flat = np.argsort(err.ravel())[::-1][:n_new]
    arrays = scene.as_arrays()
    rotm = cam.view[:3, :3]
    cam_pos = -rotm.T @ cam.view[:3, 3]
    depths = (arrays["mu"] @ rotm.T + cam.view[:3, 3])[:, 2]
    depth = float(np.median(depths[depths > cam.znear])) if np.any(depths > cam.znear) else 4.0
    mus, colors = [], []
    for p in flat:
        iy, ix = divmod(int(p), cam.width)
        xn = (ix + 0.5 - cam.cx) / cam.fx
        yn = (iy + 0.5 - cam.cy) / cam.fy
        pos = cam_pos + rotm.T @ (np.array([xn, yn, 1.0]) * depth)
        mus.append(pos + rng.normal(scale=1e-3, size=3))
        colors.append(gt.rgb[iy, ix])
    mus = np.asarray(mus, dtype=np.float64).reshape(n_new, 3)
    return {
        "mu": mus,
        "log_scale": np.tile(np.log(np.full(3, 1.5 * depth / cam.fx)), (n_new, 1)),
        "rot": np.tile([1.0, 0.0, 0.0, 0.0], (n_new, 1)),
        "opacity_logit": np.full(n_new, 0.5),
        "color": np.asarray(colors, dtype=np.float64).reshape(n_new, 3),
        "mu_eq": mus.copy(),
        "t_eq_pos": np.full(n_new, 0.5),
        "t_eq_scale": np.full(n_new, 0.5),
    }


def train_layered(frames, init_scene: Scene, n_layers: int = 2, iters_per_layer: int = 300,
                  n_new_per_layer: int = 32, lr: float = 5e-3, seed: int = 0,
                  background=np.ones(3)) -> LayeredScene:
    """Progressive LOD training: quarter resolution first, doubling per layer.

    ``frames`` is a list of (Camera, ImageBuffer) pairs at full resolution.
    Earlier layers are frozen while each residual (offsets + spawned
    primitives) trains against the next resolution.
    """
    rng = np.random.default_rng(seed)
    factors = [2 ** (n_layers - j) for j in range(n_layers + 1)]   # e.g. 4, 2, 1

    # base level at the coarsest resolution
    frames0 = [_downsample_frame(c, g, factors[0]) for (c, g) in frames]
    base_arrays = {k: v.copy() for k, v in init_scene.as_arrays().items()}
    train_names = ["mu", "log_scale", "rot", "opacity_logit", "color"]
    fitted = _fit_static(base_arrays, train_names, frames0, iters_per_layer, lr,
                         seed, background)
    base = Scene.from_arrays({k: fitted[k].data for k in ARRAY_FIELDS}, init_scene.bounds)
    layered = LayeredScene(base=base, residuals=[])

    for j in range(1, n_layers + 1):
        frames_j = [_downsample_frame(c, g, factors[j]) for (c, g) in frames]
        prev = compose(layered, j - 1)
        prev_arrays = prev.as_arrays()
        n_prev = len(prev)
        cam_spawn, gt_spawn = frames_j[0]
        new = _spawn_primitives(prev, cam_spawn, gt_spawn, n_new_per_layer, background, rng)

        # leaves: offsets for existing primitives + raw attributes for new ones
        off_leaves = {k: ad.leaf(np.zeros_like(prev_arrays[k])) for k in ARRAY_FIELDS}
        new_leaves = {k: ad.leaf(new[k]) for k in ARRAY_FIELDS}
        states = {("off", k): ad.AdamState.for_param(off_leaves[k]) for k in ARRAY_FIELDS}
        states.update({("new", k): ad.AdamState.for_param(new_leaves[k]) for k in ARRAY_FIELDS})
        lr_map = {"mu": lr * 0.1, "log_scale": lr, "rot": lr * 0.5,
                  "opacity_logit": lr * 5.0, "color": lr * 2.0}
        rng_j = np.random.default_rng(seed + j)
        old_debug = ad.set_debug_checks(False)
        try:
            for _ in range(iters_per_layer):
                cam, gt = frames_j[rng_j.integers(len(frames_j))]
                combined = {k: ad.concat([ad.constant(prev_arrays[k]) + off_leaves[k],
                                          new_leaves[k]], axis=0)
                            for k in ARRAY_FIELDS}
                mu, scale, rot, opacity, color = _activate(combined)
                img = render_mod.rasterize_attrs(mu, scale, rot, opacity, color, cam, background)
                loss = render_mod.loss_l1(ad.reshape(img, (cam.height, cam.width, 3)),
                                          ad.constant(gt.rgb))
                params = []
                keys = []
                for k in ("mu", "log_scale", "rot", "opacity_logit", "color"):
                    params += [off_leaves[k], new_leaves[k]]
                    keys += [("off", k), ("new", k)]
                grads = ad.grad(loss, params)
                for (kind, k), p in zip(keys, params):
                    step_lr = lr_map.get(k, lr)
                    nt = ad.adam_step(p, grads[p], states[(kind, k)], step_lr)
                    if kind == "off":
                        off_leaves[k] = nt
                    else:
                        new_leaves[k] = nt
        finally:
            ad.set_debug_checks(old_debug)

        layered.residuals.append(SceneDelta(
            offsets={k: off_leaves[k].data.copy() for k in ARRAY_FIELDS},
            new={k: new_leaves[k].data.copy() for k in ARRAY_FIELDS}))
        layered.thresholds.append(0.0)
    return layered
