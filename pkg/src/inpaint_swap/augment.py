"""Face-shape (thin-plate-spline) mask deformation and reference augmentation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

TRAIN_SCALE_RANGE = (0.5, 1.0)
BASE_AMPLITUDE = 0.05  # fraction of the mask bounding-box diagonal


class DegenerateLatticeError(ValueError):
    pass


def _tps_kernel(r: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        out = r**2 * np.log(r)
    return np.where(r > 0, out, 0.0)


@dataclass
class ThinPlateSpline:
    """2-D thin-plate spline f with f(src[i]) = dst[i].

    Coordinates are (x, y) pairs; fitting happens in coordinates divided by
    ``scale`` for conditioning.
    """

    src: np.ndarray
    weights: np.ndarray  # (n, 2) radial weights
    affine: np.ndarray  # (3, 2): constant, x, y rows
    scale: float

    @classmethod
    def fit(cls, src: np.ndarray, dst: np.ndarray, scale: float = 1.0) -> "ThinPlateSpline":
        src = np.asarray(src, dtype=np.float64) / scale
        dst = np.asarray(dst, dtype=np.float64) / scale
        n = src.shape[0]
        K = _tps_kernel(np.linalg.norm(src[:, None] - src[None], axis=-1))
        P = np.hstack([np.ones((n, 1)), src])
        A = np.zeros((n + 3, n + 3))
        A[:n, :n] = K
        A[:n, n:] = P
        A[n:, :n] = P.T
        b = np.zeros((n + 3, 2))
        b[:n] = dst
        sol = np.linalg.solve(A, b)
        return cls(src=src, weights=sol[:n], affine=sol[n:], scale=float(scale))

    def __call__(self, pts: np.ndarray) -> np.ndarray:
        p = np.asarray(pts, dtype=np.float64) / self.scale
        flat = p.reshape(-1, 2)
        U = _tps_kernel(np.linalg.norm(flat[:, None] - self.src[None], axis=-1))
        out = self.affine[0] + flat @ self.affine[1:] + U @ self.weights
        return (out * self.scale).reshape(p.shape)


@dataclass(frozen=True)
class TPSControl:
    """Control lattice ``O`` and its perturbation ``P = O + s * base * noise``."""

    lattice: np.ndarray  # (n, 2) in pixel (x, y)
    perturbed: np.ndarray
    scale: float
    base_amplitude: float  # pixels


def make_tps_control(
    mask: np.ndarray, s: float, rng: np.random.Generator, grid: int = 4, base: float = BASE_AMPLITUDE
) -> TPSControl:
    if grid < 3:
        raise DegenerateLatticeError(f"control lattice must be at least 3x3, got {grid}x{grid}")
    ys, xs = np.nonzero(mask)
    if xs.size == 0:
        raise ValueError("cannot deform an empty mask")
    x0, x1 = xs.min() - 0.5, xs.max() + 0.5
    y0, y1 = ys.min() - 0.5, ys.max() + 0.5
    gx, gy = np.meshgrid(np.linspace(x0, x1, grid), np.linspace(y0, y1, grid))
    lattice = np.stack([gx.ravel(), gy.ravel()], axis=1)
    amp = base * float(np.hypot(x1 - x0, y1 - y0))
    radius = rng.uniform(0.0, 1.0, size=len(lattice))
    theta = rng.uniform(0.0, 2 * np.pi, size=len(lattice))
    noise = np.stack([radius * np.cos(theta), radius * np.sin(theta)], axis=1)
    return TPSControl(lattice, lattice + s * amp * noise, float(s), amp)


def tps_warp_field(control: TPSControl, shape: tuple[int, int]) -> np.ndarray:
    """Sampling position f(q) for every output pixel q, shape (H, W, 2) as (x, y)."""
    h, w = shape
    spline = ThinPlateSpline.fit(control.lattice, control.perturbed, scale=max(h, w))
    gx, gy = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    return spline(np.stack([gx, gy], axis=-1))


def tps_deform_mask(
    mask: np.ndarray, s: float, rng: np.random.Generator, grid: int = 4, base: float = BASE_AMPLITUDE
) -> np.ndarray:
    """Mildly deform a binary mask with a random thin-plate spline.

    The spline maps the control lattice to its perturbed copy; the output is
    sampled backwards, ``out[q] = mask[nearest(f(q))]``, then thresholded.
    Samples falling outside the image take the nearest border pixel.
    """
    if not 0.0 <= s <= 1.0:
        raise ValueError(f"deformation scale s must be in [0, 1], got {s}")
    mask = np.asarray(mask)
    control = make_tps_control(mask, s, rng, grid=grid, base=base)
    field = tps_warp_field(control, mask.shape)
    h, w = mask.shape
    xi = np.clip(np.rint(field[..., 0]).astype(np.int64), 0, w - 1)
    yi = np.clip(np.rint(field[..., 1]).astype(np.int64), 0, h - 1)
    out = mask[yi, xi].astype(np.float64)
    return (out >= 0.5).astype(mask.dtype)


def sample_train_scale(rng: np.random.Generator) -> float:
    return float(rng.uniform(*TRAIN_SCALE_RANGE))


def make_inpaint_image(
    x_tar,
    m_tar: np.ndarray,
    rng: np.random.Generator,
    s: float | None = None,
    return_mask: bool = False,
):
    """Target image with its (shape-augmented) region blanked: x ⊙ (1 - FA(m)).

    ``s=None`` draws the training scale from U(0.5, 1). Empty masks are left
    undeformed. With ``return_mask`` the blanked mask is returned as well.
    """
    m_tar = np.asarray(m_tar)
    if tuple(x_tar.shape[-2:]) != m_tar.shape:
        raise ValueError(f"shape mismatch: image {tuple(x_tar.shape)} vs mask {m_tar.shape}")
    if s is None:
        s = sample_train_scale(rng)
    deformed = tps_deform_mask(m_tar, s, rng) if m_tar.any() else m_tar.copy()
    if isinstance(x_tar, torch.Tensor):
        keep = torch.from_numpy(1.0 - deformed.astype(np.float64)).to(x_tar.dtype)
    else:
        keep = 1.0 - deformed.astype(np.asarray(x_tar).dtype)
    out = x_tar * keep
    return (out, deformed) if return_mask else out


@dataclass(frozen=True)
class AugmentConfig:
    """Activation probabilities and magnitudes of the reference augmentation."""

    p_resize: float = 0.5
    p_flip: float = 0.5
    p_rotate: float = 0.5
    p_blur: float = 0.5
    p_elastic: float = 0.5
    resize_range: tuple[float, float] = (0.85, 1.15)
    max_rotation: float = 15.0
    blur_sigma: tuple[float, float] = (0.3, 0.9)
    elastic_amplitude: float = 1.0  # pixels
    elastic_grid: int = 4


NO_AUGMENT = AugmentConfig(0.0, 0.0, 0.0, 0.0, 0.0)


def _affine(img: torch.Tensor, theta: torch.Tensor) -> torch.Tensor:
    grid = F.affine_grid(theta[None], [1, *img.shape], align_corners=False)
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def _gaussian_blur(img: torch.Tensor, sigma: float) -> torch.Tensor:
    radius = max(1, int(np.ceil(3 * sigma)))
    x = torch.arange(-radius, radius + 1, dtype=img.dtype)
    k = torch.exp(-(x**2) / (2 * sigma**2))
    k = k / k.sum()
    c = img.shape[0]
    out = F.conv2d(F.pad(img[None], (radius, radius, 0, 0), mode="replicate"), k.view(1, 1, 1, -1).repeat(c, 1, 1, 1), groups=c)
    out = F.conv2d(F.pad(out, (0, 0, radius, radius), mode="replicate"), k.view(1, 1, -1, 1).repeat(c, 1, 1, 1), groups=c)
    return out[0]


def _elastic(img: torch.Tensor, rng: np.random.Generator, cfg: AugmentConfig) -> torch.Tensor:
    _, h, w = img.shape
    coarse = rng.uniform(-1.0, 1.0, size=(1, 2, cfg.elastic_grid, cfg.elastic_grid))
    disp = F.interpolate(torch.from_numpy(coarse).to(img.dtype), size=(h, w), mode="bicubic", align_corners=True)[0]
    # pixels -> normalised grid units
    disp = disp * cfg.elastic_amplitude * torch.tensor([2.0 / w, 2.0 / h], dtype=img.dtype).view(2, 1, 1)
    ys = torch.linspace(-1 + 1 / h, 1 - 1 / h, h, dtype=img.dtype)
    xs = torch.linspace(-1 + 1 / w, 1 - 1 / w, w, dtype=img.dtype)
    gy, gx = torch.meshgrid(ys, xs, indexing="ij")
    grid = torch.stack([gx + disp[0], gy + disp[1]], dim=-1)[None]
    return F.grid_sample(img[None], grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]


def reference_augment(image, rng: np.random.Generator, cfg: AugmentConfig = AugmentConfig()):
    """Random resize, horizontal flip, rotation, blur and elastic transform.

    Each transform fires independently with its own probability. Every random
    number is drawn whether or not its transform fires, so the stream
    consumption is fixed per call.
    """
    as_numpy = not isinstance(image, torch.Tensor)
    img = torch.as_tensor(np.asarray(image)) if as_numpy else image
    if img.ndim != 3:
        raise ValueError(f"expected a (C, H, W) image, got shape {tuple(img.shape)}")
    fire = rng.uniform(size=5) < np.array([cfg.p_resize, cfg.p_flip, cfg.p_rotate, cfg.p_blur, cfg.p_elastic])
    scale = rng.uniform(*cfg.resize_range)
    angle = np.deg2rad(rng.uniform(-cfg.max_rotation, cfg.max_rotation))
    sigma = rng.uniform(*cfg.blur_sigma)
    elastic_rng = np.random.default_rng(rng.integers(0, 2**63 - 1))

    out = img
    if fire[0]:
        theta = torch.tensor([[1 / scale, 0.0, 0.0], [0.0, 1 / scale, 0.0]], dtype=img.dtype)
        out = _affine(out, theta)
    if fire[1]:
        out = torch.flip(out, dims=[-1])
    if fire[2]:
        c, s = np.cos(angle), np.sin(angle)
        theta = torch.tensor([[c, -s, 0.0], [s, c, 0.0]], dtype=img.dtype)
        out = _affine(out, theta)
    if fire[3]:
        out = _gaussian_blur(out, sigma)
    if fire[4]:
        out = _elastic(out, elastic_rng, cfg)
    if fire.any():
        out = out.clamp(0.0, 1.0)
    return out.numpy() if as_numpy else out
