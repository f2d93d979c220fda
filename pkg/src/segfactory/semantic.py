"""Trainable semantic branch: pointwise decoder over tri-plane features,
semantic volumetric rendering that reuses the frozen density, a learned
super-resolution stage, and few-shot cross-entropy training.

There is no autodiff anywhere: every gradient below is written out by hand
and pinned against central finite differences in the tests.  The frozen
backbone contributes per-sample tri-plane features and compositing weights;
the graph stops there — nothing upstream of the decoder is trainable.

Two supervision modes share one forward:

* ray steps — a subset of rays is composited to per-ray logits and compared
  against the downsampled ground-truth classes at raw scale;
* full-image steps (every ``sr_every``-th) — the complete raw feature map
  runs through the super-resolution module and the cross-entropy is taken at
  the upsampled resolution, the only place Eq.-style supervision of the
  final output happens.

By default the compositing weights are the backbone's, bit for bit (the
density prior).  A decoder built with ``density_head=True`` instead predicts
its own density from the shared trunk and recomputes the weights — the
"independent density" ablation — in which case the gradient also flows
through the volumetric weights.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from dataclasses import dataclass, field, replace, asdict

import numpy as np
from scipy.special import expit

from . import backbone as bb
from . import cameras, imageops, nnops, oracle, scene as sc, volume
from .optim import Adam

FEATURE_DIM = 32           # decoder output width; first num_classes are logits
HIDDEN_DIM = 64
CHECKPOINT_VERSION = 1

_GRAD_CHUNK = 16384        # rows per chunk in fixed-order gradient reductions


class TrainingDiverged(RuntimeError):
    """Raised when the loss stays above the divergence threshold too long."""


# ===========================================================================
# Trainable modules
# ===========================================================================


@dataclass
class SemanticDecoder:
    """Pointwise 32 -> 64 -> 64 -> 32 network over aggregated tri-plane
    features.  The full 32-channel output is the semantic feature; its first
    ``num_classes`` channels double as the raw class logits.

    With the optional density head (``wd``/``bd``) the shared trunk also
    predicts a per-sample raw density — used only by the independent-density
    ablation.
    """

    params: dict[str, np.ndarray]
    num_classes: int = sc.NUM_CLASSES

    _SHAPES = {
        "w1": (FEATURE_DIM, HIDDEN_DIM), "b1": (HIDDEN_DIM,),
        "w2": (HIDDEN_DIM, HIDDEN_DIM), "b2": (HIDDEN_DIM,),
        "w3": (HIDDEN_DIM, FEATURE_DIM), "b3": (FEATURE_DIM,),
    }

    def __post_init__(self):
        if not 0 < self.num_classes <= FEATURE_DIM:
            raise ValueError(f"num_classes {self.num_classes} not in (0, {FEATURE_DIM}]")
        for k, shape in self._SHAPES.items():
            if k not in self.params or self.params[k].shape != shape:
                raise ValueError(f"decoder parameter {k} missing or not {shape}")
        if ("wd" in self.params) != ("bd" in self.params):
            raise ValueError("density head needs both wd and bd")
        if "wd" in self.params:
            if self.params["wd"].shape != (HIDDEN_DIM, 1) or self.params["bd"].shape != (1,):
                raise ValueError("density head shapes must be (64, 1) and (1,)")
        for k, v in self.params.items():
            if not np.isfinite(v).all():
                raise ValueError(f"decoder parameter {k} contains non-finite values")

    @property
    def has_density_head(self) -> bool:
        return "wd" in self.params


@dataclass
class SRModule:
    """Super-resolution stage: bilinear x``factor`` upsample of the
    concatenated (logits, feature) maps, two 3x3 convolutions with a leaky
    rectifier between, plus an additive skip of the upsampled logits.

    With both convolutions zeroed the output is exactly the bilinearly
    upsampled raw logits.
    """

    params: dict[str, np.ndarray]
    factor: int = 4
    num_classes: int = sc.NUM_CLASSES

    def __post_init__(self):
        cin = self.num_classes + FEATURE_DIM
        shapes = {"c1_w": (3, 3, cin, FEATURE_DIM), "c1_b": (FEATURE_DIM,),
                  "c2_w": (3, 3, FEATURE_DIM, self.num_classes),
                  "c2_b": (self.num_classes,)}
        for k, shape in shapes.items():
            if k not in self.params or self.params[k].shape != shape:
                raise ValueError(f"sr parameter {k} missing or not {shape}")
        if self.factor < 1:
            raise ValueError("upsample factor must be >= 1")
        for k, v in self.params.items():
            if not np.isfinite(v).all():
                raise ValueError(f"sr parameter {k} contains non-finite values")


def init_decoder(seed: int, num_classes: int = sc.NUM_CLASSES,
                 density_head: bool = False) -> SemanticDecoder:
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    p = {
        "w1": nnops.he_normal(rng, (FEATURE_DIM, HIDDEN_DIM), FEATURE_DIM),
        "b1": np.zeros(HIDDEN_DIM),
        "w2": nnops.he_normal(rng, (HIDDEN_DIM, HIDDEN_DIM), HIDDEN_DIM),
        "b2": np.zeros(HIDDEN_DIM),
        "w3": nnops.he_normal(rng, (HIDDEN_DIM, FEATURE_DIM), HIDDEN_DIM),
        "b3": np.zeros(FEATURE_DIM),
    }
    if density_head:
        p["wd"] = nnops.he_normal(rng, (HIDDEN_DIM, 1), HIDDEN_DIM)
        p["bd"] = np.zeros(1)
    return SemanticDecoder(params=p, num_classes=num_classes)


def init_sr(seed: int, factor: int = 4, num_classes: int = sc.NUM_CLASSES) -> SRModule:
    """First conv small He-normal, second conv zero.

    Fully zero convs are a stationary trap (both weight gradients vanish
    because the first activation is zero); zeroing only the second conv
    keeps the init output exactly equal to the bilinear skip baseline while
    letting gradients reach both layers.
    """
    rng = np.random.Generator(np.random.Philox(key=np.uint64(seed)))
    cin = num_classes + FEATURE_DIM
    p = {
        "c1_w": nnops.he_normal(rng, (3, 3, cin, FEATURE_DIM), 9 * cin, scale=0.1),
        "c1_b": np.zeros(FEATURE_DIM),
        "c2_w": np.zeros((3, 3, FEATURE_DIM, num_classes)),
        "c2_b": np.zeros(num_classes),
    }
    return SRModule(params=p, factor=factor, num_classes=num_classes)


# ===========================================================================
# Forward / backward
# ===========================================================================


@dataclass
class DecoderCache:
    feats: np.ndarray
    h1: np.ndarray
    a1: np.ndarray
    h2: np.ndarray
    a2: np.ndarray
    out: np.ndarray
    raw_density: np.ndarray | None


def decoder_forward(decoder: SemanticDecoder, feats: np.ndarray) -> DecoderCache:
    """Pointwise forward over (n, 32) features; cache retains activations."""
    p = decoder.params
    h1 = feats @ p["w1"] + p["b1"]
    a1 = nnops.leaky_relu(h1)
    h2 = a1 @ p["w2"] + p["b2"]
    a2 = nnops.leaky_relu(h2)
    out = a2 @ p["w3"] + p["b3"]
    raw_d = (a2 @ p["wd"] + p["bd"])[:, 0] if decoder.has_density_head else None
    return DecoderCache(feats, h1, a1, h2, a2, out, raw_d)


def _chunked_outer(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """a.T @ b accumulated over fixed-size row chunks in a fixed order, so
    the reduction is independent of how any BLAS partitions the big GEMM."""
    out = np.zeros((a.shape[1], b.shape[1]))
    for lo in range(0, a.shape[0], _GRAD_CHUNK):
        out += a[lo:lo + _GRAD_CHUNK].T @ b[lo:lo + _GRAD_CHUNK]
    return out


def decoder_backward(decoder: SemanticDecoder, cache: DecoderCache,
                     grad_out: np.ndarray,
                     grad_raw_density: np.ndarray | None = None
                     ) -> dict[str, np.ndarray]:
    p = decoder.params
    g: dict[str, np.ndarray] = {}
    g["w3"] = _chunked_outer(cache.a2, grad_out)
    g["b3"] = grad_out.sum(axis=0)
    ga2 = grad_out @ p["w3"].T
    if decoder.has_density_head:
        gd = (np.zeros_like(cache.raw_density) if grad_raw_density is None
              else grad_raw_density).reshape(-1, 1)
        g["wd"] = _chunked_outer(cache.a2, gd)
        g["bd"] = gd.sum(axis=0)
        ga2 = ga2 + gd @ p["wd"].T
    gh2 = nnops.leaky_relu_grad(cache.h2, ga2)
    g["w2"] = _chunked_outer(cache.a1, gh2)
    g["b2"] = gh2.sum(axis=0)
    ga1 = gh2 @ p["w2"].T
    gh1 = nnops.leaky_relu_grad(cache.h1, ga1)
    g["w1"] = _chunked_outer(cache.feats, gh1)
    g["b1"] = gh1.sum(axis=0)
    return g


@dataclass
class SRCache:
    up: np.ndarray             # (uh, uh, C+32) upsampled concat input
    h1: np.ndarray
    a1: np.ndarray
    axis_matrix: np.ndarray    # (uh, h) shared row/column upsample matrix


def sr_forward(sr: SRModule, logits: np.ndarray, phi: np.ndarray
               ) -> tuple[np.ndarray, SRCache]:
    """(h,h,C) logits + (h,h,32) features -> (uh,uh,C) refined logits."""
    x = np.concatenate([logits, phi], axis=-1)
    h = x.shape[0]
    a = imageops.resample_matrix(h, h * sr.factor, half_pixel=True)
    up = imageops.apply_separable(x, a, a)
    h1 = nnops.conv3x3(up, sr.params["c1_w"], sr.params["c1_b"])
    a1 = nnops.leaky_relu(h1)
    out = nnops.conv3x3(a1, sr.params["c2_w"], sr.params["c2_b"])
    out = out + up[..., :sr.num_classes]
    return out, SRCache(up, h1, a1, a)


def sr_backward(sr: SRModule, cache: SRCache, grad_out: np.ndarray
                ) -> tuple[dict[str, np.ndarray], np.ndarray, np.ndarray]:
    """Returns (sr grads, grad wrt raw logits, grad wrt feature map)."""
    c = sr.num_classes
    da1, dc2w, dc2b = nnops.conv3x3_backward(cache.a1, sr.params["c2_w"], grad_out)
    dh1 = nnops.leaky_relu_grad(cache.h1, da1)
    dup, dc1w, dc1b = nnops.conv3x3_backward(cache.up, sr.params["c1_w"], dh1)
    dup = dup.copy()
    dup[..., :c] += grad_out                      # additive logit skip
    dx = imageops.apply_separable_transpose(dup, cache.axis_matrix,
                                            cache.axis_matrix)
    grads = {"c1_w": dc1w, "c1_b": dc1b, "c2_w": dc2w, "c2_b": dc2b}
    return grads, dx[..., :c], dx[..., c:]


def ce_loss(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean cross-entropy and its per-pixel logit gradient."""
    return nnops.softmax_ce(logits, labels)


@dataclass
class ForwardState:
    """Everything backward needs; produced by semantic_forward."""
    dec_cache: DecoderCache
    weights: np.ndarray                 # (rays, n) weights actually used
    sr_cache: SRCache | None = None
    trans: np.ndarray | None = None     # only when the density head is live
    deltas: np.ndarray | None = None


def semantic_forward(decoder: SemanticDecoder, feats: np.ndarray,
                     frozen_weights: np.ndarray, deltas: np.ndarray | None = None
                     ) -> tuple[np.ndarray, ForwardState]:
    """Composite decoder outputs into per-ray features.

    feats: (rays*n, 32) tri-plane samples; frozen_weights: (rays, n).
    Returns (phi (rays, 32), state).  With a density head, weights are
    recomputed from the head's density instead of the frozen ones (which
    then only define the ray geometry).
    """
    dc = decoder_forward(decoder, feats)
    n_rays, ns = frozen_weights.shape
    f = dc.out.reshape(n_rays, ns, FEATURE_DIM)
    if decoder.has_density_head:
        if deltas is None:
            raise ValueError("density head requires per-sample deltas")
        sigma = sc.DENSITY_SCALE * nnops.softplus(dc.raw_density).reshape(n_rays, ns)
        w, trans = volume.compute_weights(sigma, deltas)
    else:
        w, trans = frozen_weights, None
    phi = (w[..., None] * f).sum(axis=1)
    return phi, ForwardState(dec_cache=dc, weights=w, trans=trans, deltas=deltas)


def backward(decoder: SemanticDecoder, sr: SRModule | None, state: ForwardState,
             grad_logits: np.ndarray
             ) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Exact reverse-mode gradients for all trainable weights.

    grad_logits: (rays, C) for ray-mode batches, or the (uh, uh, C) gradient
    of the super-resolved output when ``state`` carries an SR cache.  SR
    weights receive zero gradients on ray-mode batches (the module did not
    participate in the forward).
    """
    if state is None or state.dec_cache is None:
        raise ValueError("missing forward cache; retain ForwardState from semantic_forward")
    c = decoder.num_classes
    n_rays, ns = state.weights.shape
    if state.sr_cache is not None:
        if sr is None:
            raise ValueError("forward used an SR module but none was passed")
        sr_grads, glog, gphi_map = sr_backward(sr, state.sr_cache, grad_logits)
        gphi = gphi_map.reshape(-1, FEATURE_DIM).copy()
        gphi[:, :c] += glog.reshape(-1, c)
    else:
        sr_grads = ({k: np.zeros_like(v) for k, v in sr.params.items()}
                    if sr is not None else {})
        gphi = np.zeros((n_rays, FEATURE_DIM))
        gphi[:, :c] = grad_logits

    w = state.weights
    gf = w[..., None] * gphi[:, None, :]                      # (rays, n, 32)
    grad_raw = None
    if decoder.has_density_head:
        f = state.dec_cache.out.reshape(n_rays, ns, FEATURE_DIM)
        g_w = (f * gphi[:, None, :]).sum(axis=-1)             # dL/dw_i
        wg = w * g_w
        prefix = np.cumsum(wg, axis=-1)
        suffix = prefix[:, -1:] - prefix                      # sum over i > j
        t_next = state.trans - w                              # T entering j+1
        dsigma = state.deltas * (t_next * g_w - suffix)
        raw = state.dec_cache.raw_density.reshape(n_rays, ns)
        grad_raw = (sc.DENSITY_SCALE * dsigma * expit(raw)).reshape(-1)
    dec_grads = decoder_backward(decoder, state.dec_cache,
                                 gf.reshape(-1, FEATURE_DIM), grad_raw)
    return dec_grads, sr_grads


# ===========================================================================
# Rendering API
# ===========================================================================


@dataclass
class SemanticRender:
    """Raw semantic rendering plus (after super_resolve) the refined output.

    The raw logit map is by construction the first ``num_classes`` channels
    of the feature map; it is exposed as a view, not stored twice.
    """

    feature_map: np.ndarray                # (h, h, 32)
    depth: np.ndarray                      # (h, h), shared-weight depth
    cache: bb.SampleCache
    num_classes: int = sc.NUM_CLASSES
    sr_logits: np.ndarray | None = None    # (u*h, u*h, C) once super-resolved

    @property
    def raw_logits(self) -> np.ndarray:
        return self.feature_map[..., :self.num_classes]


def default_render_config(resolution: int = 32) -> bb.RenderConfig:
    """Deterministic raw-render settings used by the semantic branch."""
    return bb.RenderConfig(resolution=resolution, stratified=False,
                           cache_samples=True)


def render_semantic(z: np.ndarray, pose: cameras.CameraPose,
                    decoder: SemanticDecoder,
                    cfg: bb.RenderConfig | None = None,
                    cache: bb.SampleCache | None = None,
                    triplane: bb.TriPlane | None = None,
                    multiscale: bool = True) -> SemanticRender:
    """Semantic volumetric rendering reusing the frozen backbone state.

    The per-sample compositing weights come from the backbone render cache —
    never re-derived — so density and depth are shared bit for bit.  A cache
    rendered at a different resolution than requested is an error.
    """
    if cfg is None:
        cfg = default_render_config()
    if cache is None:
        cache = bb.render(z, pose, replace(cfg, cache_samples=True)).cache
    if cache.resolution != cfg.resolution:
        raise ValueError(f"cached weights are for resolution {cache.resolution}, "
                         f"requested {cfg.resolution}")
    if triplane is None:
        triplane = bb.build_semantic_triplane(bb.synthesize_pyramid(z),
                                              multiscale=multiscale)
    feats = bb.sample_triplane(triplane, cache.points.reshape(-1, 3))
    phi, state = semantic_forward(decoder, feats, cache.weights, cache.deltas)
    h = cache.resolution
    depth = volume.depth_from_weights(state.weights, cache.t, pose.depth_sentinel)
    return SemanticRender(feature_map=phi.reshape(h, h, FEATURE_DIM),
                          depth=depth.reshape(h, h), cache=cache,
                          num_classes=decoder.num_classes)


def super_resolve(sr: SRModule, render: SemanticRender) -> np.ndarray:
    """Refine the raw semantic map; fills and returns render.sr_logits."""
    if sr.num_classes != render.num_classes:
        raise ValueError("class count mismatch between SR module and render")
    out, _ = sr_forward(sr, render.raw_logits, render.feature_map)
    render.sr_logits = out
    return out


# ===========================================================================
# Training
# ===========================================================================


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    rays_per_step: int = 1024
    sr_every: int = 8                  # every k-th step is a full-image pass
    seed: int = 0
    raw_resolution: int = 32
    sr_factor: int = 4
    samples_per_ray: int = 48
    multiscale: bool = True
    density_prior: bool = True         # False: decoder trains its own density
    divergence_factor: float = 10.0
    divergence_patience: int = 100

    def __post_init__(self):
        if self.steps < 1 or self.rays_per_step < 1 or self.sr_every < 1:
            raise ValueError("steps, rays_per_step and sr_every must be >= 1")

    def config_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class _AnnBuffers:
    """Compact per-annotation state precomputed once (the backbone is frozen)."""
    points: np.ndarray        # (rays, n, 3) float32
    weights: np.ndarray       # (rays, n) float64
    deltas: np.ndarray        # (rays, n) float64
    gt_raw: np.ndarray        # (rays,) uint8 classes at raw resolution
    gt_full: np.ndarray       # (uh, uh) uint8 classes at SR resolution
    triplane: bb.TriPlane


def _prepare_annotation(a: oracle.Annotation, cfg: TrainConfig,
                        triplanes: dict[bytes, bb.TriPlane]) -> _AnnBuffers:
    key = np.ascontiguousarray(a.latent).tobytes()
    if key not in triplanes:
        triplanes[key] = bb.build_semantic_triplane(
            bb.synthesize_pyramid(a.latent), multiscale=cfg.multiscale)
    rcfg = bb.RenderConfig(resolution=cfg.raw_resolution,
                           samples_per_ray=cfg.samples_per_ray,
                           stratified=False, cache_samples=True)
    cache = bb.render(a.latent, a.pose, rcfg).cache
    down = imageops.downsample_nearest(a.mask, cfg.sr_factor)
    return _AnnBuffers(points=cache.points.astype(np.float32),
                       weights=cache.weights,
                       deltas=cache.deltas,
                       gt_raw=down.reshape(-1),
                       gt_full=a.mask,
                       triplane=triplanes[key])


def train(ann: oracle.AnnotationSet, cfg: TrainConfig = TrainConfig(),
          log_path: str | None = None
          ) -> tuple[SemanticDecoder, SRModule, list[tuple[int, float, float]]]:
    """Few-shot training loop.

    Per step: one annotation, ``rays_per_step`` rays without replacement,
    cross-entropy at raw scale; every ``sr_every``-th step instead runs the
    full image through the SR module and supervises the upsampled output.
    Returns (decoder, sr, log) where log rows are (step, loss, wall_time).
    Raises TrainingDiverged if the loss exceeds ``divergence_factor`` x the
    initial loss for ``divergence_patience`` consecutive steps.
    """
    if len(ann) < 1:
        raise ValueError("need at least one annotation")
    if ann.resolution != cfg.raw_resolution * cfg.sr_factor:
        raise ValueError(f"annotations at {ann.resolution} but training expects "
                         f"{cfg.raw_resolution * cfg.sr_factor}"
                         f" (= raw {cfg.raw_resolution} x factor {cfg.sr_factor})")

    decoder = init_decoder(cfg.seed, density_head=not cfg.density_prior)
    sr = init_sr(cfg.seed + 1, factor=cfg.sr_factor)
    dec_opt = Adam(decoder.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)
    sr_opt = Adam(sr.params, lr=cfg.lr, beta1=cfg.beta1, beta2=cfg.beta2)

    triplanes: dict[bytes, bb.TriPlane] = {}
    buffers = [_prepare_annotation(a, cfg, triplanes) for a in ann.annotations]

    rng = np.random.Generator(np.random.Philox(key=np.uint64(cfg.seed)))
    n_rays = cfg.raw_resolution ** 2
    log: list[tuple[int, float, float]] = []
    initial = None
    bad_streak = 0
    t0 = time.perf_counter()

    for step in range(cfg.steps):
        buf = buffers[rng.integers(len(buffers))]
        sr_step = (step + 1) % cfg.sr_every == 0
        if sr_step:
            feats = bb.sample_triplane(buf.triplane,
                                       buf.points.reshape(-1, 3).astype(np.float64))
            phi, state = semantic_forward(decoder, feats, buf.weights, buf.deltas)
            h = cfg.raw_resolution
            phi_map = phi.reshape(h, h, FEATURE_DIM)
            out, state.sr_cache = sr_forward(sr, phi_map[..., :decoder.num_classes],
                                             phi_map)
            loss, grad = ce_loss(out, buf.gt_full)
        else:
            sel = rng.choice(n_rays, size=min(cfg.rays_per_step, n_rays),
                             replace=False)
            pts = buf.points[sel].reshape(-1, 3).astype(np.float64)
            feats = bb.sample_triplane(buf.triplane, pts)
            phi, state = semantic_forward(decoder, feats, buf.weights[sel],
                                          buf.deltas[sel])
            loss, grad = ce_loss(phi[:, :decoder.num_classes], buf.gt_raw[sel])

        dec_grads, sr_grads = backward(decoder, sr, state, grad)
        dec_opt.step(decoder.params, dec_grads)
        if sr_step:
            sr_opt.step(sr.params, sr_grads)
        log.append((step, loss, time.perf_counter() - t0))

        if initial is None:
            initial = max(loss, 1e-12)
        if not np.isfinite(loss) or loss > cfg.divergence_factor * initial:
            bad_streak += 1
        else:
            bad_streak = 0
        if bad_streak >= cfg.divergence_patience:
            raise TrainingDiverged(
                f"loss {loss:.4g} stayed above {cfg.divergence_factor:g} x initial "
                f"({initial:.4g}) for {bad_streak} consecutive steps, aborted at "
                f"step {step}")

    if log_path is not None:
        write_log_csv(log_path, log)
    return decoder, sr, log


def write_log_csv(path: str, log: list[tuple[int, float, float]]) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["step", "loss", "wall_time"])
        for step, loss, wall in log:
            w.writerow([step, repr(float(loss)), f"{wall:.3f}"])


# ===========================================================================
# Checkpoints: one-line JSON header + little-endian float32 blob
# ===========================================================================

_DEC_ORDER = ("w1", "b1", "w2", "b2", "w3", "b3", "wd", "bd")
_SR_ORDER = ("c1_w", "c1_b", "c2_w", "c2_b")


def save_checkpoint(path: str, decoder: SemanticDecoder, sr: SRModule,
                    seed: int = 0, config_hash: str = "",
                    extra: dict | None = None) -> None:
    """``extra`` holds JSON-serializable training facts the weights alone
    cannot recover (e.g. whether the tri-plane was multiscale)."""
    entries = [(f"dec.{k}", decoder.params[k]) for k in _DEC_ORDER
               if k in decoder.params]
    entries += [(f"sr.{k}", sr.params[k]) for k in _SR_ORDER]
    header = {
        "format_version": CHECKPOINT_VERSION,
        "seed": int(seed),
        "config_hash": config_hash,
        "num_classes": int(decoder.num_classes),
        "sr_factor": int(sr.factor),
        "extra": extra or {},
        "arrays": [{"name": n, "shape": list(a.shape)} for n, a in entries],
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes()
                    for _, a in entries)
    with open(path, "wb") as f:
        f.write(json.dumps(header, sort_keys=True).encode() + b"\n" + blob)


def load_checkpoint(path: str) -> tuple[SemanticDecoder, SRModule, dict]:
    with open(path, "rb") as f:
        data = f.read()
    head, blob = data.split(b"\n", 1)
    header = json.loads(head)
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {header.get('format_version')}")
    total = sum(int(np.prod(e["shape"])) for e in header["arrays"])
    if 4 * total != len(blob):
        raise ValueError(f"checkpoint blob length {len(blob)} does not match "
                         f"header ({4 * total} bytes expected)")
    arrays = {}
    off = 0
    for entry in header["arrays"]:
        n = int(np.prod(entry["shape"]))
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=off)
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(np.float64)
        off += 4 * n
    dec_params = {k.split(".", 1)[1]: v for k, v in arrays.items()
                  if k.startswith("dec.")}
    sr_params = {k.split(".", 1)[1]: v for k, v in arrays.items()
                 if k.startswith("sr.")}
    decoder = SemanticDecoder(params=dec_params,
                              num_classes=header["num_classes"])
    sr = SRModule(params=sr_params, factor=header["sr_factor"],
                  num_classes=header["num_classes"])
    return decoder, sr, header
