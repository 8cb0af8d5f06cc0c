"""Differentiable 2D splat rasterizer, loss stack, and image metrics.

Primitives are projected through a pinhole camera with the EWA Jacobian,
culled to 3-sigma screen bounding boxes, and composited front-to-back per
pixel.  The whole forward pass is built from tape operations over flat
(primitive, pixel) pair arrays, so one backward pass yields gradients for
every primitive attribute.

Images travel as binary PPM (P6, maxval 255) on disk.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import hexplane
from .gauss import Scene, rotmat_from_quat_batch


@dataclass
class Camera:
    """Pinhole camera: 4x4 world-to-camera view matrix plus intrinsics."""

    view: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    znear: float = 0.05

    def __post_init__(self):
        self.view = np.asarray(self.view, dtype=np.float64)
        if self.view.shape != (4, 4):
            raise ValueError(f"view matrix must be 4x4, got {self.view.shape}")
        r = self.view[:3, :3]
        if not np.allclose(r @ r.T, np.eye(3), atol=1e-6):
            raise ValueError("view matrix upper-left 3x3 is not a rotation")
        if self.znear <= 0:
            raise ValueError("znear must be positive")

    @classmethod
    def look_at(cls, eye, target, up=(0.0, 1.0, 0.0), fov_x: float = 0.8,
                width: int = 64, height: int = 64, znear: float = 0.05) -> "Camera":
        eye = np.asarray(eye, dtype=np.float64)
        fwd = np.asarray(target, dtype=np.float64) - eye
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, np.asarray(up, dtype=np.float64))
        right = right / np.linalg.norm(right)
        down = np.cross(fwd, right)
        rot = np.stack([right, down, fwd])
        view = np.eye(4)
        view[:3, :3] = rot
        view[:3, 3] = -rot @ eye
        fx = width / (2.0 * np.tan(fov_x / 2.0))
        return cls(view=view, fx=fx, fy=fx, cx=width / 2.0, cy=height / 2.0,
                   width=width, height=height, znear=znear)


@dataclass
class ImageBuffer:
    """Per-pixel RGB in [0, 1]."""

    rgb: np.ndarray

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        if self.rgb.ndim != 3 or self.rgb.shape[2] != 3:
            raise ValueError(f"rgb must be (H, W, 3), got {self.rgb.shape}")
        if np.min(self.rgb) < -1e-9 or np.max(self.rgb) > 1.0 + 1e-9:
            raise ValueError("rgb channels must lie in [0, 1]")
        self.rgb = np.clip(self.rgb, 0.0, 1.0)

    @property
    def width(self) -> int:
        return self.rgb.shape[1]

    @property
    def height(self) -> int:
        return self.rgb.shape[0]


@dataclass
class LossConfig:
    lambda_dssim: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5

    def __post_init__(self):
        if not (0.0 <= self.lambda_dssim <= 1.0):
            raise ValueError("lambda_dssim must lie in [0, 1]")


@dataclass
class RasterConfig:
    dilation: float = 0.3        # low-pass added to cov2d diagonals (px^2)
    alpha_clamp: float = 0.99
    bbox_sigma: float = 3.0
    max_condition: float = 1e12


BACKGROUNDS = {"white": np.ones(3), "black": np.zeros(3)}


# ---------------------------------------------------------------------------
# projection
# ---------------------------------------------------------------------------

def project(primitive, camera: Camera, dilation: float = 0.3):
    """EWA projection of one primitive: (mean2d, cov2d, depth) or None if culled."""
    from .gauss import covariance

    mu = np.asarray(primitive.mu, dtype=np.float64)
    rotm = camera.view[:3, :3]
    x_cam = rotm @ mu + camera.view[:3, 3]
    depth = x_cam[2]
    if depth <= camera.znear:
        return None
    x, y, z = x_cam
    mean2d = np.array([camera.fx * x / z + camera.cx, camera.fy * y / z + camera.cy])
    jac = np.array([[camera.fx / z, 0.0, -camera.fx * x / z ** 2],
                    [0.0, camera.fy / z, -camera.fy * y / z ** 2]])
    cov3d = covariance(primitive.scale, primitive.rot)
    cov2d = jac @ rotm @ cov3d @ rotm.T @ jac.T + dilation * np.eye(2)
    return mean2d, cov2d, depth


# ---------------------------------------------------------------------------
# differentiable rasterization over attribute tensors
# ---------------------------------------------------------------------------

def rasterize_attrs(mu, scale, rot, opacity, color, camera: Camera, background,
                    cfg: RasterConfig = RasterConfig(), stats: dict | None = None) -> ad.Tensor:
    """Rasterize activated attribute tensors into a flat (H*W, 3) image tensor.

    ``mu`` (N,3), ``scale`` (N,3), ``rot`` (N,4) unit rows, ``opacity`` (N,)
    in (0,1), ``color`` (N,3) in [0,1].  Culling, bounding boxes, and the
    depth order come from detached values; everything else stays on the tape.
    """
    h, w = camera.height, camera.width
    npix = h * w
    bg = ad.as_tensor(np.asarray(background, dtype=np.float64))
    mu, scale, rot = ad.as_tensor(mu), ad.as_tensor(scale), ad.as_tensor(rot)
    opacity, color = ad.as_tensor(opacity), ad.as_tensor(color)
    if stats is None:
        stats = {}
    stats.setdefault("culled", 0)
    stats.setdefault("skipped_singular", 0)

    def flat_background():
        return ad.mul(ad.ones((npix, 3)), ad.reshape(bg, (1, 3)))

    n = mu.shape[0]
    if n == 0:
        return flat_background()

    rot_w2c = ad.constant(camera.view[:3, :3])
    t_w2c = ad.constant(camera.view[:3, 3])
    x_cam = ad.matmul(mu, ad.transpose(rot_w2c)) + t_w2c
    zs = x_cam[:, 2]

    keep = np.flatnonzero(zs.data > camera.znear)
    stats["culled"] += int(n - keep.size)
    if keep.size == 0:
        return flat_background()

    x_cam = ad.gather(x_cam, keep)
    scale = ad.gather(scale, keep)
    rot = ad.gather(rot, keep)
    opacity = ad.gather(opacity, keep)
    color = ad.gather(color, keep)

    x, y, z = x_cam[:, 0], x_cam[:, 1], x_cam[:, 2]
    inv_z = 1.0 / z
    mx = camera.fx * x * inv_z + camera.cx
    my = camera.fy * y * inv_z + camera.cy

    # cov2d = J W Sigma W^T J^T + dilation * I
    rmat = rotmat_from_quat_batch(rot)
    rs = rmat * ad.reshape(scale, (-1, 1, 3))
    sigma = ad.matmul(rs, ad.transpose(rs, (0, 2, 1)))
    zero = ad.zeros(z.shape)
    jrow = [camera.fx * inv_z, zero, ad.neg(camera.fx * x * inv_z * inv_z),
            zero, camera.fy * inv_z, ad.neg(camera.fy * y * inv_z * inv_z)]
    jac = ad.reshape(ad.concat([ad.reshape(c, (-1, 1)) for c in jrow], axis=1), (-1, 2, 3))
    jw = ad.matmul(jac, rot_w2c)
    cov = ad.matmul(ad.matmul(jw, sigma), ad.transpose(jw, (0, 2, 1)))
    ca = cov[:, 0, 0] + cfg.dilation
    cb = cov[:, 0, 1]
    cc = cov[:, 1, 1] + cfg.dilation
    det = ca * cc - cb * cb

    # detached screening: drop numerically singular footprints
    av, bv, cv = ca.data, cb.data, cc.data
    tr_half = 0.5 * (av + cv)
    disc = np.sqrt(np.maximum(tr_half * tr_half - (av * cv - bv * bv), 0.0))
    lam_max = tr_half + disc
    lam_min = tr_half - disc
    good = (av * cv - bv * bv > 0) & (lam_min > 0) & (lam_max / np.maximum(lam_min, 1e-300) < cfg.max_condition)
    stats["skipped_singular"] += int(np.count_nonzero(~good))

    # bounding boxes from detached means and radii
    radius = cfg.bbox_sigma * np.sqrt(np.maximum(lam_max, 0.0))
    mxv, myv = mx.data, my.data
    order = np.argsort(z.data, kind="stable")
    rank = np.empty(keep.size, dtype=np.int64)
    rank[order] = np.arange(keep.size)

    x0 = np.maximum(np.floor(mxv - radius - 0.5).astype(np.int64), 0)
    x1 = np.minimum(np.ceil(mxv + radius - 0.5).astype(np.int64), w - 1)
    y0 = np.maximum(np.floor(myv - radius - 0.5).astype(np.int64), 0)
    y1 = np.minimum(np.ceil(myv + radius - 0.5).astype(np.int64), h - 1)
    bw = np.where(good, x1 - x0 + 1, 0).clip(min=0)
    bh = np.where(good, y1 - y0 + 1, 0).clip(min=0)
    counts = bw * bh
    s = int(counts.sum())
    if s == 0:
        return flat_background()

    prim_id = np.repeat(np.arange(keep.size), counts)
    starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
    within = np.arange(s) - starts[prim_id]
    row = within // bw[prim_id]
    col = within - row * bw[prim_id]
    pix_id = (y0[prim_id] + row) * w + (x0[prim_id] + col)
    # group by pixel, front-to-back inside each pixel, ties by primitive index
    perm = np.lexsort((rank[prim_id], pix_id))
    prim_id = prim_id[perm]
    pix_id = pix_id[perm]
    seg_start = np.zeros(s, dtype=np.int64)
    new_seg = np.flatnonzero(np.diff(pix_id)) + 1
    starts = np.concatenate([[0], new_seg])
    seg_start[starts] = starts
    seg_start = np.maximum.accumulate(seg_start)

    pxc = ad.constant(pix_id % w + 0.5)
    pyc = ad.constant(pix_id // w + 0.5)
    dx = pxc - ad.gather(mx, prim_id)
    dy = pyc - ad.gather(my, prim_id)
    ap = ad.gather(ca, prim_id)
    bp = ad.gather(cb, prim_id)
    cp = ad.gather(cc, prim_id)
    dp = ad.gather(det, prim_id)
    quad = (cp * dx * dx - 2.0 * bp * dx * dy + ap * dy * dy) / dp
    alpha = ad.gather(opacity, prim_id) * ad.exp(-0.5 * quad)
    alpha = ad.minimum_const(alpha, cfg.alpha_clamp)

    log_om = ad.log(1.0 - alpha)
    incl = ad.cumsum(log_om, axis=0)
    excl_prev = ad.concat([ad.zeros((1,)), incl[:-1]], axis=0)
    transmit = ad.exp(excl_prev - ad.gather(excl_prev, seg_start))
    weight = alpha * transmit

    contrib = ad.reshape(weight, (-1, 1)) * ad.gather(color, prim_id)
    image = ad.scatter_rows(pix_id, contrib, npix)
    total_log = ad.scatter_rows(pix_id, log_om, npix)
    t_bg = ad.exp(total_log)
    image = image + ad.reshape(t_bg, (-1, 1)) * ad.reshape(bg, (1, 3))
    stats["pairs"] = int(s)
    return image


def rasterize(scene: Scene, camera: Camera, background="white",
              cfg: RasterConfig = RasterConfig(), stats: dict | None = None) -> ImageBuffer:
    """Render a scene to an image buffer (no gradients retained)."""
    bg = BACKGROUNDS[background] if isinstance(background, str) else np.asarray(background)
    arrays = scene.as_arrays()
    with ad.no_grad():
        img = rasterize_attrs(
            ad.constant(arrays["mu"]),
            ad.constant(np.exp(arrays["log_scale"])),
            ad.constant(arrays["rot"] / np.linalg.norm(arrays["rot"], axis=1, keepdims=True))
            if len(scene) else ad.constant(arrays["rot"]),
            ad.constant(1.0 / (1.0 + np.exp(-arrays["opacity_logit"]))),
            ad.constant(np.clip(arrays["color"], 0.0, 1.0)),
            camera, bg, cfg, stats=stats)
    rgb = np.clip(img.data.reshape(camera.height, camera.width, 3), 0.0, 1.0)
    return ImageBuffer(rgb)


# ---------------------------------------------------------------------------
# losses and metrics
# ---------------------------------------------------------------------------

def _as_image_tensor(a) -> ad.Tensor:
    if isinstance(a, ImageBuffer):
        return ad.constant(a.rgb)
    if isinstance(a, ad.Tensor):
        return a
    return ad.constant(np.asarray(a, dtype=np.float64))


def loss_l1(a, b) -> ad.Tensor:
    """Mean absolute difference."""
    a, b = _as_image_tensor(a), _as_image_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError("loss_l1", a.shape, b.shape)
    return ad.mean(ad.absolute(a - b))


def _gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    half = (size - 1) / 2.0
    g = np.exp(-((np.arange(size) - half) ** 2) / (2.0 * sigma * sigma))
    k = np.outer(g, g)
    return k / k.sum()


def ssim(a, b, cfg: LossConfig = LossConfig()) -> ad.Tensor:
    """Structural similarity with an 11x11 Gaussian window (sigma 1.5).

    Valid windows only, dynamic range 1, K1 = 0.01, K2 = 0.03; channels are
    averaged.  Differentiable in both images.
    """
    a, b = _as_image_tensor(a), _as_image_tensor(b)
    if a.shape != b.shape:
        raise ad.ShapeError("ssim", a.shape, b.shape)
    if a.ndim != 3:
        raise ad.ShapeError("ssim", a.shape)
    hgt, wid, _ = a.shape
    win = cfg.ssim_window
    if hgt < win or wid < win:
        raise ValueError(f"ssim needs images at least {win}x{win}, got {hgt}x{wid}")
    half = (win - 1) / 2.0
    kern1d = np.exp(-((np.arange(win) - half) ** 2) / (2.0 * cfg.ssim_sigma ** 2))
    kern1d /= kern1d.sum()
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2

    mu1 = ad.conv2d_sep(a, kern1d)
    mu2 = ad.conv2d_sep(b, kern1d)
    s11 = ad.conv2d_sep(a * a, kern1d) - mu1 * mu1
    s22 = ad.conv2d_sep(b * b, kern1d) - mu2 * mu2
    s12 = ad.conv2d_sep(a * b, kern1d) - mu1 * mu2
    num = (2.0 * mu1 * mu2 + c1) * (2.0 * s12 + c2)
    den = (mu1 * mu1 + mu2 * mu2 + c1) * (s11 + s22 + c2)
    return ad.mean(num / den)


def dssim(a, b, cfg: LossConfig = LossConfig()) -> ad.Tensor:
    return 0.5 * (1.0 - ssim(a, b, cfg))


def total_loss(render_img, gt, encoder: hexplane.HexPlaneEncoder,
               cfg: LossConfig = LossConfig()) -> ad.Tensor:
    """(1 - lambda) L1 + lambda DSSIM + grid total variation."""
    lam = cfg.lambda_dssim
    out = (1.0 - lam) * loss_l1(render_img, gt)
    if lam > 0.0:
        out = out + lam * dssim(render_img, gt, cfg)
    return out + hexplane.tv_loss(encoder)


def psnr(a, b) -> float:
    """10 log10(1 / MSE) in dB; identical images give float('inf')."""
    av = a.rgb if isinstance(a, ImageBuffer) else np.asarray(a, dtype=np.float64)
    bv = b.rgb if isinstance(b, ImageBuffer) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ValueError(f"psnr shape mismatch {av.shape} vs {bv.shape}")
    mse = float(np.mean((av - bv) ** 2))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------------------
# PPM I/O
# ---------------------------------------------------------------------------

def write_ppm(img: ImageBuffer, path) -> None:
    data = np.clip(np.rint(img.rgb * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.width} {img.height}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> ImageBuffer:
    with open(path, "rb") as f:
        raw = f.read()
    if not raw.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 supported, got {maxval}")
    expect = width * height * 3
    body = raw[pos:pos + expect]
    if len(body) != expect:
        raise ValueError(f"{path}: truncated pixel data ({len(body)} of {expect} bytes)")
    rgb = np.frombuffer(body, dtype=np.uint8).reshape(height, width, 3) / 255.0
    return ImageBuffer(rgb)
