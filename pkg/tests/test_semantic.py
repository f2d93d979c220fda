"""Semantic branch tests.

The gradient tests are the heart: every hand-derived backward path (decoder
ray mode, decoder through the super-resolution stage, and the learned-density
variant) is pinned against central finite differences computed from nothing
but repeated forward evaluations.  The SR forward itself is checked against a
naive per-pixel loop oracle written independently below.
"""

import json

import numpy as np
import pytest

from segfactory import backbone as bb
from segfactory import cameras, imageops, oracle
from segfactory import scene as sc
from segfactory import semantic as sem

C = sc.NUM_CLASSES


def _rng(seed):
    return np.random.Generator(np.random.Philox(key=np.uint64(seed)))


# ---------------------------------------------------------------------------
# independent oracles
# ---------------------------------------------------------------------------


def _oracle_upsample(x, factor):
    """Half-pixel bilinear upsample, scalar loop, taps clamped to the border."""
    h, w, c = x.shape
    out = np.zeros((h * factor, w * factor, c))
    for i in range(h * factor):
        for j in range(w * factor):
            si = (i + 0.5) / factor - 0.5
            sj = (j + 0.5) / factor - 0.5
            i0, j0 = int(np.floor(si)), int(np.floor(sj))
            fi, fj = si - i0, sj - j0
            for ii, wi in ((i0, 1 - fi), (i0 + 1, fi)):
                for jj, wj in ((j0, 1 - fj), (j0 + 1, fj)):
                    out[i, j] += wi * wj * x[min(max(ii, 0), h - 1),
                                             min(max(jj, 0), w - 1)]
    return out


def _oracle_conv3x3(x, weight, bias):
    h, w, cin = x.shape
    cout = weight.shape[-1]
    pad = np.zeros((h + 2, w + 2, cin))
    pad[1:-1, 1:-1] = x
    out = np.zeros((h, w, cout))
    for i in range(h):
        for j in range(w):
            for u in range(3):
                for v in range(3):
                    out[i, j] += pad[i + u, j + v] @ weight[u, v]
    return out + bias


def _oracle_sr(sr, logits, phi):
    up = _oracle_upsample(np.concatenate([logits, phi], axis=-1), sr.factor)
    h1 = _oracle_conv3x3(up, sr.params["c1_w"], sr.params["c1_b"])
    a1 = np.where(h1 > 0, h1, 0.01 * h1)
    out = _oracle_conv3x3(a1, sr.params["c2_w"], sr.params["c2_b"])
    return out + up[..., :sr.num_classes]


def _fd_grad(loss_fn, arr, indices, h=1e-5):
    """Central finite differences of loss_fn at the given flat indices."""
    flat = arr.reshape(-1)
    out = np.zeros(len(indices))
    for k, i in enumerate(indices):
        old = flat[i]
        flat[i] = old + h
        lp = loss_fn()
        flat[i] = old - h
        lm = loss_fn()
        flat[i] = old
        out[k] = (lp - lm) / (2 * h)
    return out


def _check_grads(analytic, fd, label, rtol=1e-4):
    """Scale-aware agreement: relative where above FD noise, absolute below."""
    a, f = np.asarray(analytic), np.asarray(fd)
    scale = np.maximum(np.abs(a), np.abs(f))
    big = scale > 1e-6
    rel = np.abs(a - f)[big] / scale[big]
    assert rel.size == 0 or rel.max() < rtol, \
        f"{label}: max relative error {rel.max():.3g}"
    small = np.abs(a - f)[~big]
    assert small.size == 0 or small.max() < 1e-9, \
        f"{label}: tiny-gradient mismatch {small.max():.3g}"


def _ray_batch(seed, res=8, ns=16, n_rays=3):
    """Real tri-plane samples and frozen weights for a seeded instance."""
    z = sc.sample_latents(_rng(seed), 1)[0]
    pose = cameras.CameraPose(azimuth=float(_rng(seed + 1000).uniform(-np.pi, np.pi)),
                              elevation=0.3)
    cfg = bb.RenderConfig(resolution=res, samples_per_ray=ns,
                          stratified=False, cache_samples=True)
    cache = bb.render(z, pose, cfg).cache
    if n_rays is None:
        sel = np.arange(cache.weights.shape[0])
    else:
        sel = np.argsort(-cache.weights.sum(axis=-1))[:n_rays]  # rays that hit
    tp = bb.build_semantic_triplane(bb.synthesize_pyramid(z))
    feats = bb.sample_triplane(tp, cache.points[sel].reshape(-1, 3))
    return feats, cache.weights[sel], cache.deltas[sel]


# ---------------------------------------------------------------------------
# construction and validation
# ---------------------------------------------------------------------------


def test_init_decoder_shapes_and_determinism():
    d1 = sem.init_decoder(7)
    d2 = sem.init_decoder(7)
    assert not d1.has_density_head
    for k in d1.params:
        np.testing.assert_array_equal(d1.params[k], d2.params[k])
    assert set(d1.params) == {"w1", "b1", "w2", "b2", "w3", "b3"}
    dh = sem.init_decoder(7, density_head=True)
    assert dh.has_density_head
    assert dh.params["wd"].shape == (64, 1)


def test_decoder_validation():
    d = sem.init_decoder(0)
    bad = dict(d.params)
    bad["w2"] = np.zeros((64, 63))
    with pytest.raises(ValueError, match="w2"):
        sem.SemanticDecoder(params=bad)
    halfhead = dict(sem.init_decoder(0).params)
    halfhead["wd"] = np.zeros((64, 1))
    with pytest.raises(ValueError, match="density head"):
        sem.SemanticDecoder(params=halfhead)


def test_init_sr_is_bilinear_at_init():
    sr = sem.init_sr(3)
    assert np.array_equal(sr.params["c2_w"], 0 * sr.params["c2_w"])
    assert np.abs(sr.params["c1_w"]).max() > 0  # first conv must not be zero


def test_sr_validation():
    sr = sem.init_sr(0)
    bad = dict(sr.params)
    bad["c1_w"] = np.zeros((3, 3, 5, 32))
    with pytest.raises(ValueError, match="c1_w"):
        sem.SRModule(params=bad)


# ---------------------------------------------------------------------------
# SR forward vs naive oracle
# ---------------------------------------------------------------------------


def test_sr_forward_matches_loop_oracle():
    rng = _rng(11)
    sr = sem.SRModule(params={
        "c1_w": rng.normal(size=(3, 3, C + 32, 32)) * 0.2,
        "c1_b": rng.normal(size=32) * 0.1,
        "c2_w": rng.normal(size=(3, 3, 32, C)) * 0.2,
        "c2_b": rng.normal(size=C) * 0.1,
    }, factor=2)
    logits = rng.normal(size=(3, 3, C))
    phi = rng.normal(size=(3, 3, 32))
    out, cache = sem.sr_forward(sr, logits, phi)
    assert out.shape == (6, 6, C)
    np.testing.assert_allclose(
        cache.up, _oracle_upsample(np.concatenate([logits, phi], -1), 2),
        atol=1e-12)
    np.testing.assert_allclose(out, _oracle_sr(sr, logits, phi), atol=1e-9)


def test_zero_second_conv_is_exact_bilinear_baseline():
    rng = _rng(5)
    sr = sem.init_sr(5)          # c2 zeroed, c1 small random
    logits = rng.normal(size=(4, 4, C))
    phi = rng.normal(size=(4, 4, 32))
    out, _ = sem.sr_forward(sr, logits, phi)
    np.testing.assert_array_equal(
        out, imageops.resample_bilinear(logits, 16, half_pixel=True))


def test_sr_factor_one_is_identity_at_init():
    rng = _rng(6)
    sr = sem.init_sr(6, factor=1)
    logits = rng.normal(size=(5, 5, C))
    phi = rng.normal(size=(5, 5, 32))
    out, _ = sem.sr_forward(sr, logits, phi)
    np.testing.assert_array_equal(out, logits)


# ---------------------------------------------------------------------------
# gradients vs finite differences
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("density_head", [False, True])
def test_ray_mode_gradients_match_fd(density_head):
    feats, w, d = _ray_batch(20 + density_head, res=8, ns=16, n_rays=3)
    dec = sem.init_decoder(41, density_head=density_head)
    sr = sem.init_sr(42)
    labels = _rng(43).integers(0, C, size=3)

    def loss_fn():
        phi, _ = sem.semantic_forward(dec, feats, w, d)
        return sem.ce_loss(phi[:, :C], labels)[0]

    phi, state = sem.semantic_forward(dec, feats, w, d)
    loss, grad = sem.ce_loss(phi[:, :C], labels)
    dec_g, sr_g = sem.backward(dec, sr, state, grad)

    for k, g in sr_g.items():            # SR never ran: identically zero
        assert not g.any(), k
    assert set(dec_g) == set(dec.params)
    rng = _rng(44)
    for k, arr in dec.params.items():
        n = arr.size
        idx = np.arange(n) if n <= 128 else np.sort(rng.choice(n, 128, replace=False))
        fd = _fd_grad(loss_fn, arr, idx)
        _check_grads(dec_g[k].reshape(-1)[idx], fd, f"decoder {k}")


@pytest.mark.parametrize("density_head", [False, True])
def test_sr_mode_gradients_match_fd(density_head):
    h, factor = 4, 2
    feats, w, d = _ray_batch(30 + density_head, res=h, ns=16, n_rays=None)
    dec = sem.init_decoder(51, density_head=density_head)
    rng = _rng(52)
    sr = sem.SRModule(params={     # random weights: exercise both convs
        "c1_w": rng.normal(size=(3, 3, C + 32, 32)) * 0.1,
        "c1_b": rng.normal(size=32) * 0.05,
        "c2_w": rng.normal(size=(3, 3, 32, C)) * 0.1,
        "c2_b": rng.normal(size=C) * 0.05,
    }, factor=factor)
    labels = rng.integers(0, C, size=(h * factor, h * factor))

    def forward():
        phi, state = sem.semantic_forward(dec, feats, w, d)
        pm = phi.reshape(h, h, sem.FEATURE_DIM)
        out, state.sr_cache = sem.sr_forward(sr, pm[..., :C], pm)
        return out, state

    out, state = forward()
    loss, grad = sem.ce_loss(out, labels)
    dec_g, sr_g = sem.backward(dec, sr, state, grad)

    def loss_fn():
        return sem.ce_loss(forward()[0], labels)[0]

    for name, params, grads in (("decoder", dec.params, dec_g),
                                ("sr", sr.params, sr_g)):
        for k, arr in params.items():
            n = arr.size
            idx = np.arange(n) if n <= 40 else np.sort(rng.choice(n, 40, replace=False))
            fd = _fd_grad(loss_fn, arr, idx)
            _check_grads(grads[k].reshape(-1)[idx], fd, f"{name} {k}")


def test_backward_equals_direct_upsampled_ce_when_convs_silent():
    """With the second conv zeroed the SR path must reproduce, bit for bit,
    the gradient of cross-entropy on the plain bilinearly upsampled logits."""
    h, factor = 4, 4
    feats, w, d = _ray_batch(60, res=h, ns=16, n_rays=None)
    dec = sem.init_decoder(61)
    sr = sem.init_sr(62, factor=factor)
    labels = _rng(63).integers(0, C, size=(h * factor, h * factor))

    phi, state = sem.semantic_forward(dec, feats, w, d)
    pm = phi.reshape(h, h, sem.FEATURE_DIM)
    out, state.sr_cache = sem.sr_forward(sr, pm[..., :C], pm)
    loss_sr, grad = sem.ce_loss(out, labels)
    dec_sr, _ = sem.backward(dec, sr, state, grad)

    a = imageops.resample_matrix(h, h * factor, half_pixel=True)
    up_logits = imageops.apply_separable(pm[..., :C], a, a)
    loss_dir, gdir = sem.ce_loss(up_logits, labels)
    assert loss_sr == loss_dir
    glog = imageops.apply_separable_transpose(gdir, a, a).reshape(-1, C)
    phi2, state2 = sem.semantic_forward(dec, feats, w, d)
    dec_dir, _ = sem.backward(dec, None, state2, glog)

    for k in dec.params:
        np.testing.assert_array_equal(dec_sr[k], dec_dir[k])


# ---------------------------------------------------------------------------
# frozen-density consequences
# ---------------------------------------------------------------------------


def test_semantic_render_superposition():
    """phi is linear in the decoder output under frozen weights: a decoder
    whose final affine layer is the sum of two others renders the sum."""
    cfg = bb.RenderConfig(resolution=8, samples_per_ray=16,
                          stratified=False, cache_samples=True)
    for seed in range(3):
        z = sc.sample_latents(_rng(100 + seed), 1)[0]
        pose = cameras.CameraPose(azimuth=0.4 * seed - 0.3, elevation=0.25)
        cache = bb.render(z, pose, cfg).cache
        tp = bb.build_semantic_triplane(bb.synthesize_pyramid(z))
        trunk = sem.init_decoder(200 + seed)
        pa, pb = dict(trunk.params), dict(trunk.params)
        other = sem.init_decoder(300 + seed)
        pb["w3"], pb["b3"] = other.params["w3"], other.params["b3"]
        pc = dict(trunk.params)
        pc["w3"] = pa["w3"] + pb["w3"]
        pc["b3"] = pa["b3"] + pb["b3"]
        rends = [sem.render_semantic(z, pose, sem.SemanticDecoder(params=p),
                                     cfg, cache=cache, triplane=tp)
                 for p in (pa, pb, pc)]
        err = np.abs(rends[2].feature_map
                     - (rends[0].feature_map + rends[1].feature_map)).max()
        assert err < 1e-6


def test_constant_decoder_renders_accumulation():
    feats, w, d = _ray_batch(70, res=8, ns=16, n_rays=None)
    const = np.linspace(-1.0, 1.0, sem.FEATURE_DIM)
    params = {k: np.zeros_like(v) for k, v in sem.init_decoder(0).params.items()}
    params["b3"] = const.copy()
    dec = sem.SemanticDecoder(params=params)
    phi, _ = sem.semantic_forward(dec, feats, w, d)
    np.testing.assert_allclose(phi, w.sum(axis=-1)[:, None] * const,
                               rtol=1e-12, atol=1e-15)


def test_empty_view_renders_zero_features():
    z = sc.sample_latents(_rng(71), 1)[0]
    pose = cameras.CameraPose(azimuth=0.3, elevation=0.2, look_at=(40.0, 0.0, 0.0))
    rend = sem.render_semantic(z, pose, sem.init_decoder(4),
                               bb.RenderConfig(resolution=8, samples_per_ray=16,
                                               stratified=False, cache_samples=True))
    np.testing.assert_array_equal(rend.feature_map, np.zeros_like(rend.feature_map))
    np.testing.assert_array_equal(rend.depth,
                                  np.full_like(rend.depth, pose.depth_sentinel))


def test_depth_and_weights_shared_with_backbone():
    z = sc.sample_latents(_rng(72), 1)[0]
    pose = cameras.CameraPose(azimuth=-0.5, elevation=0.3)
    cfg = bb.RenderConfig(resolution=16, samples_per_ray=32,
                          stratified=False, cache_samples=True)
    out = bb.render(z, pose, cfg)
    rend = sem.render_semantic(z, pose, sem.init_decoder(1), cfg, cache=out.cache)
    assert rend.cache.weights is out.cache.weights
    np.testing.assert_array_equal(rend.depth, out.depth)


def test_render_semantic_rejects_mismatched_cache():
    z = sc.sample_latents(_rng(73), 1)[0]
    pose = cameras.CameraPose()
    cache = bb.render(z, pose, bb.RenderConfig(resolution=8, samples_per_ray=16,
                                               stratified=False,
                                               cache_samples=True)).cache
    with pytest.raises(ValueError, match="resolution"):
        sem.render_semantic(z, pose, sem.init_decoder(0),
                            bb.RenderConfig(resolution=16, samples_per_ray=16),
                            cache=cache)


def test_backward_requires_matching_state():
    feats, w, d = _ray_batch(74, res=8, ns=16, n_rays=2)
    dec = sem.init_decoder(2)
    phi, state = sem.semantic_forward(dec, feats, w, d)
    _, grad = sem.ce_loss(phi[:, :C], np.zeros(2, dtype=int))
    with pytest.raises(ValueError, match="cache"):
        sem.backward(dec, None, None, grad)
    pm = phi.reshape(-1, sem.FEATURE_DIM)  # fake an SR forward without a module
    state.sr_cache = sem.SRCache(up=pm, h1=pm, a1=pm, axis_matrix=np.eye(2))
    with pytest.raises(ValueError, match="SR module"):
        sem.backward(dec, None, state, grad)


def test_super_resolve_fills_render():
    z = sc.sample_latents(_rng(75), 1)[0]
    pose = cameras.CameraPose(azimuth=0.2, elevation=0.3)
    rend = sem.render_semantic(z, pose, sem.init_decoder(3),
                               bb.RenderConfig(resolution=8, samples_per_ray=16,
                                               stratified=False, cache_samples=True))
    sr = sem.init_sr(9, factor=2)
    out = sem.super_resolve(sr, rend)
    assert out.shape == (16, 16, C)
    assert rend.sr_logits is out
    np.testing.assert_array_equal(rend.raw_logits, rend.feature_map[..., :C])


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def _tiny_annotations():
    return oracle.make_annotations(seed=5, n_scenes=1, views_per_scene=1,
                                   resolution=64)


_TINY_CFG = dict(raw_resolution=16, sr_factor=4, samples_per_ray=16,
                 rays_per_step=128, sr_every=8, seed=3)


def test_train_loss_drops_on_single_annotation():
    """Far-empty rays composite to zero features, so their softmax stays
    uniform and the ray-mode loss floors near (bg fraction)*ln(C); progress
    shows up in the full-image passes and in the predicted mask instead."""
    ann = _tiny_annotations()
    cfg = sem.TrainConfig(steps=400, **_TINY_CFG)
    dec, sr, log = sem.train(ann, cfg)
    losses = np.array([l for _, l, _ in log])
    assert len(log) == 400
    assert np.isfinite(losses).all()
    sr_losses = losses[(np.arange(len(losses)) + 1) % cfg.sr_every == 0]
    assert sr_losses[-3:].mean() < 0.5 * sr_losses[:3].mean()

    a = ann.annotations[0]
    rend = sem.render_semantic(
        a.latent, a.pose, dec,
        bb.RenderConfig(resolution=16, samples_per_ray=16,
                        stratified=False, cache_samples=True))
    pred = sem.super_resolve(sr, rend).argmax(-1).astype(np.uint8)
    assert (pred == a.mask).mean() > 0.95


def test_train_is_deterministic():
    ann = _tiny_annotations()
    cfg = sem.TrainConfig(steps=30, **_TINY_CFG)
    d1, s1, log1 = sem.train(ann, cfg)
    d2, s2, log2 = sem.train(ann, cfg)
    for k in d1.params:
        np.testing.assert_array_equal(d1.params[k], d2.params[k])
    for k in s1.params:
        np.testing.assert_array_equal(s1.params[k], s2.params[k])
    assert [l for _, l, _ in log1] == [l for _, l, _ in log2]


def test_train_density_ablation_runs():
    ann = _tiny_annotations()
    cfg = sem.TrainConfig(steps=24, density_prior=False, **_TINY_CFG)
    dec, _, log = sem.train(ann, cfg)
    assert dec.has_density_head
    assert np.isfinite([l for _, l, _ in log]).all()


def test_train_divergence_aborts():
    ann = _tiny_annotations()
    cfg = sem.TrainConfig(steps=400, lr=50.0, divergence_patience=5, **_TINY_CFG)
    with pytest.raises(sem.TrainingDiverged, match="consecutive"):
        sem.train(ann, cfg)


def test_train_rejects_mismatched_resolution():
    ann = _tiny_annotations()           # rendered at 64
    cfg = sem.TrainConfig(steps=1, raw_resolution=32, sr_factor=4)
    with pytest.raises(ValueError, match="64"):
        sem.train(ann, cfg)


def test_train_writes_csv_log(tmp_path):
    ann = _tiny_annotations()
    cfg = sem.TrainConfig(steps=9, **_TINY_CFG)
    path = tmp_path / "train.csv"
    _, _, log = sem.train(ann, cfg, log_path=str(path))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "step,loss,wall_time"
    assert len(lines) == 10
    for row, (step, loss, _) in zip(lines[1:], log):
        cells = row.split(",")
        assert int(cells[0]) == step
        assert float(cells[1]) == loss


def test_train_config_hash_tracks_fields():
    a = sem.TrainConfig()
    b = sem.TrainConfig(lr=2e-3)
    assert a.config_hash() == sem.TrainConfig().config_hash()
    assert a.config_hash() != b.config_hash()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("density_head", [False, True])
def test_checkpoint_roundtrip(tmp_path, density_head):
    dec = sem.init_decoder(8, density_head=density_head)
    sr = sem.init_sr(9)
    path = str(tmp_path / "ckpt.bin")
    sem.save_checkpoint(path, dec, sr, seed=8, config_hash="abc123",
                        extra={"multiscale": False})
    dec2, sr2, header = sem.load_checkpoint(path)
    assert header["seed"] == 8
    assert header["config_hash"] == "abc123"
    assert header["num_classes"] == C
    assert header["sr_factor"] == sr.factor
    assert header["extra"] == {"multiscale": False}
    assert dec2.has_density_head == density_head
    for k, v in dec.params.items():     # float32 storage, exactly
        np.testing.assert_array_equal(dec2.params[k],
                                      v.astype("<f4").astype(np.float64))
    for k, v in sr.params.items():
        np.testing.assert_array_equal(sr2.params[k],
                                      v.astype("<f4").astype(np.float64))


def test_checkpoint_resave_is_byte_identical(tmp_path):
    p1, p2 = str(tmp_path / "a.bin"), str(tmp_path / "b.bin")
    dec, sr = sem.init_decoder(10), sem.init_sr(11)
    sem.save_checkpoint(p1, dec, sr, seed=1, config_hash="x")
    dec2, sr2, _ = sem.load_checkpoint(p1)
    sem.save_checkpoint(p2, dec2, sr2, seed=1, config_hash="x")
    assert open(p1, "rb").read() == open(p2, "rb").read()


def test_checkpoint_header_is_single_json_line(tmp_path):
    path = str(tmp_path / "c.bin")
    sem.save_checkpoint(path, sem.init_decoder(1), sem.init_sr(2))
    head = open(path, "rb").read().split(b"\n", 1)[0]
    meta = json.loads(head)
    assert meta["format_version"] == sem.CHECKPOINT_VERSION
    assert [a["name"] for a in meta["arrays"]][:2] == ["dec.w1", "dec.b1"]


def test_checkpoint_rejects_truncated_blob(tmp_path):
    path = str(tmp_path / "d.bin")
    sem.save_checkpoint(path, sem.init_decoder(1), sem.init_sr(2))
    data = open(path, "rb").read()
    open(path, "wb").write(data[:-8])
    with pytest.raises(ValueError, match="length"):
        sem.load_checkpoint(path)
