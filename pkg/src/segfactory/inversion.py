"""Recovering scenes from images, and editing them in place.

Both inversions minimize a rendering loss over the scene latent and the
camera's (azimuth, elevation) with plain Adam; gradients come from central
finite differences — 2 renders per optimized coordinate per step — because
the backbone is an analytic function of the latent that we deliberately
never differentiate by hand.  Editing reuses the same loop over the latent
alone, under a composite loss that pins the semantic output to an edited
mask while anchoring appearance outside a region of interest.

Everything returns best-so-far iterates with full loss histories, stops
early on convergence or stall, and is deterministic given seeds (probe
evaluations may run on a thread pool; results are gathered by index, so the
trajectory is byte-identical for any thread count).
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import backbone as bb
from . import cameras, nnops, optim
from . import scene as sc
from . import semantic as sem

_ELEVATION_LIMIT = 1.3      # keep probe poses clear of the camera pole
_INIT_POLICIES = ("zero", "random", "warm")


# ===========================================================================
# Configuration and results
# ===========================================================================

@dataclass(frozen=True)
class InversionConfig:
    """Knobs shared by RGB inversion, mask inversion, and editing.

    ``eps_fd`` is the central-difference probe step in latent/pose units.
    ``tol`` is an absolute loss under which the run declares convergence;
    ``patience`` counts consecutive evaluations without a new best before
    the run is declared stalled.  ``resolution`` is the image the loss is
    computed on: RGB renders at it directly, semantic losses render at
    ``resolution / sr_factor`` and refine back up to it.
    """
    steps: int = 300
    lr: float = 0.05
    beta1: float = 0.9
    beta2: float = 0.999
    eps_fd: float = 1e-2
    init: str = "zero"                          # zero | random | warm
    warm_z: np.ndarray | None = None
    pose_init: tuple[float, float] = (0.0, 0.12)
    radius: float = 2.5
    optimize_z: bool = True
    optimize_pose: bool = True
    resolution: int = 32
    samples_per_ray: int = 48
    multiscale: bool = True
    tol: float = 1e-8
    patience: int = 30
    restarts: int = 4
    seed: int = 0
    threads: int = 1

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("steps must be >= 1")
        if not 1e-4 <= self.eps_fd <= 1e-1:
            raise ValueError("eps_fd must lie in [1e-4, 1e-1]")
        if self.init not in _INIT_POLICIES:
            raise ValueError(f"init must be one of {_INIT_POLICIES}")
        if self.init == "warm" and self.warm_z is None:
            raise ValueError("warm init requires warm_z")
        if not (self.optimize_z or self.optimize_pose):
            raise ValueError("nothing to optimize")
        if self.lr <= 0 or self.tol < 0 or self.patience < 1 \
                or self.restarts < 1 or self.threads < 1:
            raise ValueError("lr, tol, patience, restarts, threads "
                             "must be positive")


@dataclass
class OptimRun:
    """Raw outcome of one finite-difference Adam run."""
    x: np.ndarray            # best-so-far iterate
    best_loss: float
    history: np.ndarray      # loss at each visited iterate, history[0] = init
    stalled: bool
    converged: bool


@dataclass
class InversionResult:
    z: np.ndarray
    pose: cameras.CameraPose
    history: np.ndarray
    best_loss: float
    stalled: bool = False
    converged: bool = False
    degenerate: bool = False
    restart: int = 0
    restart_losses: np.ndarray | None = None


# ===========================================================================
# Finite-difference Adam
# ===========================================================================

def fd_adam(loss_fn, x0: np.ndarray, cfg: InversionConfig,
            lo: np.ndarray | None = None, hi: np.ndarray | None = None,
            active: np.ndarray | None = None, center_fn=None) -> OptimRun:
    """Adam over a parameter vector with central-difference gradients.

    ``loss_fn(x) -> float`` must be deterministic.  ``active`` masks out
    coordinates that receive no probes (their gradient is zero, so Adam
    leaves them untouched).  ``center_fn``, if given, replaces ``loss_fn``
    for the once-per-step evaluation at the current iterate — callers use
    it to log per-term breakdowns without paying for them on probes.

    The run stops when the current loss drops to ``cfg.tol`` (converged),
    when ``cfg.patience`` consecutive evaluations fail to improve the best
    (stalled), or after ``cfg.steps`` Adam steps.  The best iterate is
    returned regardless of where the run ended.
    """
    x = np.asarray(x0, dtype=np.float64).copy()
    dims = np.nonzero(np.ones(x.size, bool) if active is None else
                      np.asarray(active, bool))[0]
    eval_center = center_fn if center_fn is not None else loss_fn
    adam = optim.Adam({"x": x}, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    def probe(i):
        xp = x.copy()
        xp[i] += cfg.eps_fd
        lp = loss_fn(xp)
        xp[i] = x[i] - cfg.eps_fd
        lm = loss_fn(xp)
        return (lp - lm) / (2.0 * cfg.eps_fd)

    pool = ThreadPoolExecutor(cfg.threads) if cfg.threads > 1 else None
    best_x, best_loss = x.copy(), np.inf
    history, stall = [], 0
    stalled = converged = False
    try:
        for it in range(cfg.steps + 1):
            cur = float(eval_center(x))
            history.append(cur)
            if cur < best_loss:
                best_loss, best_x, stall = cur, x.copy(), 0
            else:
                stall += 1
            if best_loss <= cfg.tol:
                converged = True
                break
            if stall >= cfg.patience:
                stalled = True
                break
            if it == cfg.steps:
                break
            grad = np.zeros_like(x)
            if pool is not None:
                grad[dims] = list(pool.map(probe, dims))
            else:
                grad[dims] = [probe(i) for i in dims]
            adam.step({"x": x}, {"x": grad})
            if lo is not None:
                np.clip(x, lo, hi, out=x)
    finally:
        if pool is not None:
            pool.shutdown()
    return OptimRun(x=best_x, best_loss=best_loss,
                    history=np.array(history), stalled=stalled,
                    converged=converged)


# ===========================================================================
# RGB and segmentation inversion
# ===========================================================================

def _vector_setup(cfg: InversionConfig, restart: int):
    """Initial iterate [z(16), azimuth, elevation] with bounds and probe
    mask.  Restart 0 honors the init policy; later restarts draw seeded
    random latents regardless, since their whole point is diversity."""
    if cfg.init == "random" or restart > 0:
        rng = np.random.Generator(
            np.random.Philox(key=np.uint64(cfg.seed + restart)))
        z = rng.uniform(-1.0, 1.0, sc.LATENT_DIM)
    elif cfg.init == "warm":
        z = sc.validate_latent(cfg.warm_z)
    else:
        z = np.zeros(sc.LATENT_DIM)
    x0 = np.concatenate([z, cfg.pose_init])
    n = sc.LATENT_DIM
    lo = np.concatenate([np.full(n, -1.0), [-np.inf, -_ELEVATION_LIMIT]])
    hi = np.concatenate([np.full(n, 1.0), [np.inf, _ELEVATION_LIMIT]])
    active = np.concatenate([np.full(n, cfg.optimize_z),
                             np.full(2, cfg.optimize_pose)])
    return x0, lo, hi, active


def _unpack(x: np.ndarray, cfg: InversionConfig
            ) -> tuple[np.ndarray, cameras.CameraPose]:
    z = x[:sc.LATENT_DIM]
    pose = cameras.CameraPose(azimuth=float(x[-2]), elevation=float(x[-1]),
                              radius=cfg.radius)
    return z, pose


def invert_rgb(target: np.ndarray, cfg: InversionConfig = InversionConfig()
               ) -> InversionResult:
    """Recover (z, pose) whose render matches an RGB image in mean-squared
    error.  The target must be at ``cfg.resolution``."""
    target = np.asarray(target, dtype=np.float64)
    want = (cfg.resolution, cfg.resolution, 3)
    if target.shape != want:
        raise ValueError(f"target shape {target.shape}, expected {want}")
    rcfg = bb.RenderConfig(resolution=cfg.resolution,
                           samples_per_ray=cfg.samples_per_ray,
                           stratified=False)

    def loss(x):
        z, pose = _unpack(x, cfg)
        d = bb.render(z, pose, rcfg).rgb - target
        return float(np.mean(d * d))

    x0, lo, hi, active = _vector_setup(cfg, restart=0)
    run = fd_adam(loss, x0, cfg, lo, hi, active)
    z, pose = _unpack(run.x, cfg)
    return InversionResult(z=z, pose=pose, history=run.history,
                           best_loss=run.best_loss, stalled=run.stalled,
                           converged=run.converged)


def invert_seg(target: np.ndarray, decoder: sem.SemanticDecoder,
               sr: sem.SRModule, cfg: InversionConfig = InversionConfig()
               ) -> InversionResult:
    """Recover (z, pose) whose refined semantic rendering matches a class
    mask in cross-entropy.

    Runs ``cfg.restarts`` seeded initializations and returns the lowest
    final loss (ties broken by restart index): a 2D mask underdetermines
    the 3D scene, so distinct restarts may legitimately land on different
    scenes with equally matching masks.  An all-background target is
    degenerate — any empty view is optimal — and returns the initial
    iterate immediately, flagged.
    """
    target = np.asarray(target)
    if cfg.resolution % sr.factor:
        raise ValueError(f"resolution {cfg.resolution} not divisible by "
                         f"the refinement factor {sr.factor}")
    raw = cfg.resolution // sr.factor
    want = (cfg.resolution, cfg.resolution)
    if target.shape != want:
        raise ValueError(f"target shape {target.shape}, expected {want}")
    if target.max() >= decoder.num_classes:
        raise ValueError("target labels exceed the decoder's classes")
    rcfg = bb.RenderConfig(resolution=raw,
                           samples_per_ray=cfg.samples_per_ray,
                           stratified=False, cache_samples=True)

    def loss(x):
        z, pose = _unpack(x, cfg)
        rend = sem.render_semantic(z, pose, decoder, rcfg,
                                   multiscale=cfg.multiscale)
        logits = sem.super_resolve(sr, rend)
        return nnops.softmax_ce(logits, target)[0]

    if not target.any():
        x0, _, _, _ = _vector_setup(cfg, restart=0)
        z, pose = _unpack(x0, cfg)
        l0 = loss(x0)
        return InversionResult(z=z, pose=pose, history=np.array([l0]),
                               best_loss=l0, degenerate=True)

    runs = []
    for k in range(cfg.restarts):
        x0, lo, hi, active = _vector_setup(cfg, restart=k)
        runs.append(fd_adam(loss, x0, cfg, lo, hi, active))
    losses = np.array([r.best_loss for r in runs])
    k = int(np.argmin(losses))          # argmin takes the first = lowest index
    z, pose = _unpack(runs[k].x, cfg)
    return InversionResult(z=z, pose=pose, history=runs[k].history,
                           best_loss=runs[k].best_loss,
                           stalled=runs[k].stalled,
                           converged=runs[k].converged,
                           restart=k, restart_losses=losses)


# ===========================================================================
# Perceptual proxy and image comparison
# ===========================================================================

def _blur121(x: np.ndarray) -> np.ndarray:
    """Separable [1,2,1]/4 blur with edge-clamped borders."""
    p = np.pad(x, ((1, 1), (0, 0), (0, 0)), mode="edge")
    x = 0.25 * (p[:-2] + 2.0 * p[1:-1] + p[2:])
    p = np.pad(x, ((0, 0), (1, 1), (0, 0)), mode="edge")
    return 0.25 * (p[:, :-2] + 2.0 * p[:, 1:-1] + p[:, 2:])


def _grad_mag(x: np.ndarray) -> np.ndarray:
    """Forward-difference gradient magnitude on the common (h-1, w-1) grid."""
    gx = x[:, 1:] - x[:, :-1]
    gy = x[1:, :] - x[:-1, :]
    return np.hypot(gx[:-1], gy[:, :-1])


def perceptual_proxy(a: np.ndarray, b: np.ndarray) -> float:
    """Structure dissimilarity without a pretrained network.

    Sum over three dyadic scales of the MSE between finite-difference
    gradient magnitudes of blurred images.  Exactly invariant to a constant
    intensity offset at every scale; grows with texture rearrangement more
    than with sub-pixel shifts, which is all the editing loss needs from a
    perceptual term.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 3:
        raise ValueError("inputs must be two (h, w, c) images of one shape")
    total = 0.0
    for _ in range(3):
        ab, bb_ = _blur121(a), _blur121(b)
        d = _grad_mag(ab) - _grad_mag(bb_)
        total += float(np.mean(d * d))
        a, b = ab[::2, ::2], bb_[::2, ::2]
        if min(a.shape[0], a.shape[1]) < 2:
            break
    return total


def psnr(a: np.ndarray, b: np.ndarray, mask: np.ndarray | None = None,
         peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, optionally over masked pixels only.

    Identical inputs give ``inf``; an empty mask gives ``nan`` (undefined,
    not perfect)."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("shape mismatch")
    d = (a - b) ** 2
    if mask is not None:
        sel = np.asarray(mask, bool)
        if not sel.any():
            return float("nan")
        d = d[sel]
    mse = float(np.mean(d))
    if mse == 0.0:
        return float("inf")
    return float(10.0 * np.log10(peak * peak / mse))


# ===========================================================================
# Region-constrained editing
# ===========================================================================

@dataclass
class EditSpec:
    """An edit: the mask the scene should produce, the region the edit may
    change, and the source appearance that must survive outside it."""
    m_edit: np.ndarray       # (R, R) target class image
    roi: np.ndarray          # (R, R) bool region of interest
    i_rgb: np.ndarray        # (R, R, 3) source appearance, [0, 1]
    z0: np.ndarray           # (16,) starting latent (from a prior inversion)
    pose: cameras.CameraPose
    lambdas: tuple[float, float, float] = (1.0, 10.0, 1.0)

    def __post_init__(self):
        self.m_edit = np.asarray(self.m_edit)
        self.roi = np.asarray(self.roi, dtype=bool)
        self.i_rgb = np.asarray(self.i_rgb, dtype=np.float64)
        self.z0 = sc.validate_latent(self.z0)
        r = self.m_edit.shape[0]
        if self.m_edit.shape != (r, r) or self.roi.shape != (r, r) \
                or self.i_rgb.shape != (r, r, 3):
            raise ValueError("m_edit, roi, i_rgb disagree on resolution")
        if self.m_edit.max() >= sc.NUM_CLASSES:
            raise ValueError("m_edit labels exceed the class count")
        lam = self.lambdas
        if len(lam) != 3 or any(v < 0 for v in lam) or not any(lam):
            raise ValueError("lambdas must be >= 0 with at least one > 0")

    @property
    def resolution(self) -> int:
        return self.m_edit.shape[0]


@dataclass
class EditView:
    pose: cameras.CameraPose
    before_rgb: np.ndarray
    before_mask: np.ndarray
    after_rgb: np.ndarray
    after_mask: np.ndarray


@dataclass
class EditReport:
    z0: np.ndarray
    z: np.ndarray
    pose: cameras.CameraPose
    lambdas: tuple[float, float, float]
    history: np.ndarray           # (n,) total loss per visited iterate
    term_history: np.ndarray      # (n, 3) label / rgb / perceptual terms
    before_rgb: np.ndarray
    before_mask: np.ndarray
    after_rgb: np.ndarray
    after_mask: np.ndarray
    views: list[EditView]         # the same scene from extra poses
    region_agreement: float
    outside_psnr_before: float
    outside_psnr_after: float
    stalled: bool
    converged: bool

    @property
    def outside_psnr_drop(self) -> float:
        """How much fidelity to the source was lost outside the region."""
        if np.isinf(self.outside_psnr_before) \
                and np.isinf(self.outside_psnr_after):
            return 0.0
        return self.outside_psnr_before - self.outside_psnr_after


_EXTRA_VIEW_OFFSETS = (-0.6, 0.6, 1.5)   # azimuth offsets for report renders


def region_agreement(mask: np.ndarray, m_edit: np.ndarray,
                     roi: np.ndarray) -> float:
    """Fraction of region pixels whose label matches the edited mask; 1.0
    for an empty region (nothing was asked to change)."""
    roi = np.asarray(roi, bool)
    if not roi.any():
        return 1.0
    return float((np.asarray(mask)[roi] == np.asarray(m_edit)[roi]).mean())


def edit(spec: EditSpec, decoder: sem.SemanticDecoder, sr: sem.SRModule,
         cfg: InversionConfig = InversionConfig()
         ) -> tuple[np.ndarray, EditReport]:
    """Optimize the latent until the scene wears the edited mask, without
    disturbing appearance outside the region of interest.

    Total loss: lambda1 * cross-entropy(refined semantics, m_edit on the
    full image) + lambda2 * MSE(masked renders vs masked source, complement
    of roi) + lambda3 * perceptual proxy on the same masked pair.  The pose
    stays frozen at the spec's pose; only z moves.  Raises if the region
    fails to cover every pixel where m_edit already disagrees with the
    starting render — such an edit is unsatisfiable outside its own region.
    """
    res = spec.resolution
    if res != cfg.resolution:
        raise ValueError(f"spec resolution {res} != cfg.resolution "
                         f"{cfg.resolution}")
    if res % sr.factor:
        raise ValueError(f"resolution {res} not divisible by the "
                         f"refinement factor {sr.factor}")
    raw = res // sr.factor
    rcfg_sem = bb.RenderConfig(resolution=raw,
                               samples_per_ray=cfg.samples_per_ray,
                               stratified=False, cache_samples=True)
    rcfg_rgb = bb.RenderConfig(resolution=res,
                               samples_per_ray=cfg.samples_per_ray,
                               stratified=False)
    rbar = (~spec.roi)[..., None].astype(np.float64)
    source_masked = spec.i_rgb * rbar
    lam = spec.lambdas

    def render_pair(z, pose):
        rend = sem.render_semantic(z, pose, decoder, rcfg_sem,
                                   multiscale=cfg.multiscale)
        logits = sem.super_resolve(sr, rend)
        rgb = bb.render(z, pose, rcfg_rgb).rgb
        return logits, rgb

    def terms(z):
        logits, rgb = render_pair(z, spec.pose)
        l_label = nnops.softmax_ce(logits, spec.m_edit)[0]
        masked = rgb * rbar
        d = masked - source_masked
        l_rgb = float(np.mean(d * d))
        l_perc = perceptual_proxy(masked, source_masked) if lam[2] else 0.0
        return l_label, l_rgb, l_perc

    def total(t):
        return lam[0] * t[0] + lam[1] * t[1] + lam[2] * t[2]

    logits0, rgb0 = render_pair(spec.z0, spec.pose)
    mask0 = logits0.argmax(axis=-1).astype(np.uint8)
    diff = spec.m_edit != mask0
    if diff.any() and not spec.roi[diff].all():
        raise ValueError("region of interest misses pixels where m_edit "
                         "differs from the starting render")

    term_log: list[tuple[float, float, float]] = []

    def center(x):
        t = terms(x[:sc.LATENT_DIM])
        term_log.append(t)
        return total(t)

    def loss(x):
        return total(terms(x[:sc.LATENT_DIM]))

    # Optimize z only; the two pose slots ride along frozen.
    x0 = np.concatenate([spec.z0, [spec.pose.azimuth, spec.pose.elevation]])
    n = sc.LATENT_DIM
    lo = np.concatenate([np.full(n, -1.0), [-np.inf, -np.inf]])
    hi = -lo
    active = np.concatenate([np.ones(n, bool), np.zeros(2, bool)])
    run = fd_adam(loss, x0, cfg, lo, hi, active, center_fn=center)
    z_star = run.x[:n]

    logits1, rgb1 = render_pair(z_star, spec.pose)
    mask1 = logits1.argmax(axis=-1).astype(np.uint8)
    views = []
    for off in _EXTRA_VIEW_OFFSETS:
        p = cameras.CameraPose(azimuth=spec.pose.azimuth + off,
                               elevation=spec.pose.elevation,
                               radius=spec.pose.radius)
        lg0, rg0 = render_pair(spec.z0, p)
        lg1, rg1 = render_pair(z_star, p)
        views.append(EditView(pose=p,
                              before_rgb=rg0,
                              before_mask=lg0.argmax(-1).astype(np.uint8),
                              after_rgb=rg1,
                              after_mask=lg1.argmax(-1).astype(np.uint8)))
    outside = ~spec.roi
    report = EditReport(
        z0=spec.z0.copy(), z=z_star, pose=spec.pose, lambdas=lam,
        history=run.history, term_history=np.array(term_log),
        before_rgb=rgb0, before_mask=mask0,
        after_rgb=rgb1, after_mask=mask1, views=views,
        region_agreement=region_agreement(mask1, spec.m_edit, spec.roi),
        outside_psnr_before=psnr(rgb0, spec.i_rgb, outside),
        outside_psnr_after=psnr(rgb1, spec.i_rgb, outside),
        stalled=run.stalled, converged=run.converged)
    return z_star, report
