import math

import numpy as np
import pytest
import torch

from attnflow import losses as L
from attnflow.data.keypoints import KEYPOINT_INDEX, KeypointSet
from attnflow.errors import DegeneracyError, DimensionError, ValidationError
from attnflow.warp_ops import identity_correlation

from conftest import grad_rel_err
from oracles import affine_flow, brute_sampling_correctness, pinv_regularization, tie_free_flow

E1 = math.exp(-1)


@pytest.fixture(scope="module")
def fx():
    return L.FeatureExtractor()


@pytest.fixture(scope="module")
def fx64():
    return L.FeatureExtractor().double()


# -- attention loss ------------------------------------------------------------


def test_attention_loss_zero_cases():
    x = torch.randn(2, 3, 4, 4)
    assert float(L.attention_loss(identity_correlation(2, 4, 4), x, x)) == 0.0
    corr = torch.softmax(torch.randn(2, 16, 16), dim=1)
    from attnflow.warp_ops import attention_warp

    assert float(L.attention_loss(corr, x, attention_warp(x, corr))) == 0.0


def test_attention_loss_hand_computed_2x2():
    # single channel 2x2: sources [1, 2, 3, 4]
    x_r = torch.tensor([[[[1.0, 2.0], [3.0, 4.0]]]])
    x_t = torch.tensor([[[[2.0, 2.0], [0.0, 1.0]]]])
    corr = torch.tensor([[[0.5, 0.0, 0.0, 0.0],
                          [0.5, 1.0, 0.0, 0.0],
                          [0.0, 0.0, 0.25, 0.0],
                          [0.0, 0.0, 0.75, 1.0]]])
    # warped: [1.5, 2, 3.75, 4]; |diff| = [0.5, 0, 3.75, 3]
    assert abs(float(L.attention_loss(corr, x_r, x_t)) - 7.25 / 4) < 1e-6


def test_attention_loss_shape_mismatch():
    with pytest.raises(DimensionError):
        L.attention_loss(identity_correlation(1, 2, 2), torch.randn(1, 1, 2, 2), torch.randn(1, 2, 2, 2))


# -- sampling correctness --------------------------------------------------------


def test_sampling_correctness_identity_configuration():
    v = torch.randn(1, 8, 5, 5)
    loss = L.sampling_correctness_from_features(torch.zeros(1, 2, 5, 5), v, v)
    assert abs(float(loss) - E1) <= 1e-6


def test_sampling_correctness_exact_lmax_gather():
    g = torch.Generator().manual_seed(5)
    v_r = torch.randn(1, 6, 4, 4, generator=g)
    perm = torch.randperm(16, generator=g)
    v_t = v_r.reshape(1, 6, 16)[:, :, perm].reshape(1, 6, 4, 4) * 2.0
    flow = torch.zeros(1, 2, 4, 4)
    for j in range(16):
        i = int(perm[j])
        flow[0, 0, j // 4, j % 4] = i % 4 - j % 4
        flow[0, 1, j // 4, j % 4] = i // 4 - j // 4
    loss = L.sampling_correctness_from_features(flow, v_r, v_t)
    assert abs(float(loss) - E1) <= 1e-6


def test_sampling_correctness_brute_force_2x2():
    vecs = torch.tensor([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [0.6, 0.8, 0.0]])
    v_r = vecs.T.reshape(1, 3, 2, 2)
    v_t = vecs[[2, 0, 3, 1]].T.reshape(1, 3, 2, 2)
    flow = torch.full((1, 2, 2, 2), 0.5)
    flow[0, 1, 1, :] = -0.5
    got = float(L.sampling_correctness_from_features(flow, v_r, v_t))
    assert abs(got - brute_sampling_correctness(flow, v_r, v_t)) <= 1e-6


def test_sampling_correctness_random_brute_force():
    g = torch.Generator().manual_seed(6)
    v_r = torch.randn(1, 4, 3, 3, generator=g)
    v_t = torch.randn(1, 4, 3, 3, generator=g)
    flow = torch.randn(1, 2, 3, 3, generator=g)
    got = float(L.sampling_correctness_from_features(flow, v_r, v_t))
    assert abs(got - brute_sampling_correctness(flow, v_r, v_t)) <= 1e-6


def test_sampling_correctness_rejects_nonfinite():
    v = torch.randn(1, 2, 3, 3)
    bad = v.clone()
    bad[0, 0, 0, 0] = float("inf")
    with pytest.raises(ValidationError):
        L.sampling_correctness_from_features(torch.zeros(1, 2, 3, 3), bad, v)


def test_sampling_correctness_uses_tap_at_flow_resolution(fx):
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    loss = L.sampling_correctness_loss(torch.zeros(1, 2, 8, 8), x, x, fx)
    assert abs(float(loss) - E1) <= 1e-6
    with pytest.raises(DimensionError):
        L.sampling_correctness_loss(torch.zeros(1, 2, 5, 5), x, x, fx)


# -- affine regularizer -------------------------------------------------------------


def test_least_squares_identity():
    R = L.patch_coordinates(3, torch.float64)
    A = L.least_squares_affine(R, R)
    assert torch.allclose(A, torch.eye(3, dtype=torch.float64), atol=1e-5)


def test_least_squares_recovers_known_affine():
    g = torch.Generator().manual_seed(7)
    R = L.patch_coordinates(3, torch.float64)
    A_true = torch.eye(3, dtype=torch.float64)
    A_true[:2] = A_true[:2] + 0.3 * torch.randn(2, 3, generator=g, dtype=torch.float64)
    S = torch.linalg.solve(A_true, R)
    A = L.least_squares_affine(R, S)
    assert (A - A_true).abs().max() < 1e-4


def test_least_squares_normal_equations():
    g = torch.Generator().manual_seed(8)
    R = L.patch_coordinates(3, torch.float64)
    S = R.clone()
    S[:2] = S[:2] + torch.randn(2, 9, generator=g, dtype=torch.float64)
    A = L.least_squares_affine(R, S)
    # (R - A S) S^T = eps * A for the ridge solution
    resid = (R - A @ S) @ S.T - 1e-6 * A
    assert resid.norm() < 1e-4
    assert torch.allclose(A, torch.as_tensor(R.numpy() @ np.linalg.pinv(S.numpy())), atol=1e-4)


def test_least_squares_degenerate():
    R = L.patch_coordinates(3, torch.float64)
    S = torch.ones(3, 9, dtype=torch.float64)
    with pytest.raises(DegeneracyError):
        L.least_squares_affine(R, S)
    with pytest.raises(DimensionError):
        L.least_squares_affine(R[:, :2], S[:, :2])


def test_regularization_zero_and_translation():
    assert float(L.regularization_loss(torch.zeros(1, 2, 8, 8))) < 1e-5
    flow = torch.zeros(1, 2, 8, 8)
    flow[:, 0], flow[:, 1] = 3.7, -2.1
    assert float(L.regularization_loss(flow)) < 1e-5


def test_regularization_vanishes_on_affine_family():
    rng = np.random.default_rng(9)
    for k in range(20):
        if k == 0:
            A, t = np.eye(2), np.zeros(2)
        elif k < 4:
            A, t = np.eye(2), rng.uniform(-4, 4, 2)
        else:
            A, t = np.eye(2) + rng.uniform(-0.4, 0.4, (2, 2)), rng.uniform(-4, 4, 2)
        assert float(L.regularization_loss(affine_flow(A, t, 8, 8))) < 1e-4


def test_regularization_noise_against_pinv_oracle():
    g = torch.Generator().manual_seed(10)
    flow = (torch.rand(1, 2, 8, 8, generator=g, dtype=torch.float64) * 10) - 5
    got = float(L.regularization_loss(flow))
    want = pinv_regularization(flow)
    assert want > 0.01
    assert got > 0.01
    assert abs(got - want) < 1e-4 * max(1.0, want)


def test_regularization_errors():
    with pytest.raises(ValidationError):
        L.regularization_loss(torch.zeros(1, 2, 2, 2))
    with pytest.raises(ValidationError):
        L.regularization_loss(torch.zeros(1, 2, 8, 8), n=2)


# -- image losses ---------------------------------------------------------------------


def test_perceptual_zero_symmetric_and_hand_looped(fx):
    g = torch.Generator().manual_seed(11)
    x = torch.rand(1, 3, 8, 8, generator=g) * 2 - 1
    y = torch.rand(1, 3, 8, 8, generator=g) * 2 - 1
    assert float(L.perceptual_loss(x, x, fx)) == 0.0
    assert abs(float(L.perceptual_loss(x, y, fx)) - float(L.perceptual_loss(y, x, fx))) < 1e-7
    fa, fb = fx(x), fx(y)
    want = 0.0
    for tap in fx.TAPS:
        a, b = fa[tap].double().numpy().ravel(), fb[tap].double().numpy().ravel()
        want += sum(abs(p - q) for p, q in zip(a, b)) / a.size
    assert abs(float(L.perceptual_loss(x, y, fx)) - want) < 1e-6
    with pytest.raises(DimensionError):
        L.perceptual_loss(x, torch.zeros(1, 3, 8, 4), fx)


def test_face_loss_cases(fx):
    g = torch.Generator().manual_seed(12)
    x = torch.rand(2, 3, 32, 32, generator=g) * 2 - 1
    faces = [L.FaceRegion(4, 6, 10, 10, True), L.FaceRegion(10, 2, 8, 8, True)]
    loss, skipped = L.face_loss(x, x, faces, fx)
    assert float(loss) == 0.0 and not skipped
    loss, skipped = L.face_loss(x, torch.zeros_like(x), [L.FaceRegion(), L.FaceRegion()], fx)
    assert float(loss) == 0.0 and skipped
    y = torch.rand(2, 3, 32, 32, generator=g) * 2 - 1
    for i, f in enumerate(faces):
        y[i, :, f.top:f.top + f.height, f.left:f.left + f.width] = x[i, :, f.top:f.top + f.height, f.left:f.left + f.width]
    loss, _ = L.face_loss(x, y, faces, fx)
    assert abs(float(loss)) <= 1e-6
    with pytest.raises(ValidationError):
        L.face_loss(x, y, [L.FaceRegion(28, 0, 8, 8, True), faces[1]], fx)


def test_face_region_from_keypoints():
    pts = np.zeros((18, 3))
    for name, xy in {"nose": (20, 12), "r_eye": (18, 10), "l_eye": (22, 10)}.items():
        pts[KEYPOINT_INDEX[name]] = (*xy, 1.0)
    face = L.face_region_from_keypoints(KeypointSet(pts, 64, 64))
    assert face.valid and face.height == face.width
    face.check(64, 64)
    assert face.left <= 18 and face.left + face.width > 22
    assert face.top <= 10 and face.top + face.height > 12
    assert not L.face_region_from_keypoints(KeypointSet(np.zeros((18, 3)), 64, 64)).valid


def test_gram_symmetric_psd_and_permutation_invariant():
    g = torch.Generator().manual_seed(13)
    phi = torch.randn(2, 5, 6, 7, generator=g, dtype=torch.float64)
    G = L.gram_matrix(phi)
    assert torch.allclose(G, G.transpose(1, 2))
    assert (torch.linalg.eigvalsh(G) > -1e-10).all()
    perm = torch.randperm(42, generator=g)
    shuffled = phi.reshape(2, 5, 42)[:, :, perm].reshape(2, 5, 6, 7)
    assert torch.allclose(L.gram_matrix(shuffled), G, atol=1e-12)
    assert torch.allclose(G[0], phi[0].reshape(5, -1) @ phi[0].reshape(5, -1).T / 42)


def test_style_loss_zero_and_positive(fx):
    x = torch.rand(1, 3, 16, 16) * 2 - 1
    assert float(L.style_loss(x, x, fx)) == 0.0
    assert float(L.style_loss(x, -x, fx)) > 0.0


def test_adversarial_cases():
    ones = torch.ones(2, 1, 4, 4)
    g_loss, d_loss = L.adversarial_losses(ones, -ones)
    assert float(d_loss) == 0.0
    g_loss, _ = L.adversarial_losses(ones, torch.zeros(2, 1, 4, 4))
    assert float(g_loss) == 0.0
    gen = torch.Generator().manual_seed(14)
    real = torch.randn(2, 1, 4, 4, generator=gen) * 2
    fake = torch.randn(2, 1, 4, 4, generator=gen) * 2
    g_loss, d_loss = L.adversarial_losses(real, fake)
    r, f = real.double().numpy().ravel(), fake.double().numpy().ravel()
    want_d = np.mean([max(0.0, 1 - v) for v in r]) + np.mean([max(0.0, 1 + v) for v in f])
    assert abs(float(d_loss) - want_d) < 1e-6
    assert abs(float(g_loss) + f.mean()) < 1e-6
    bad = real.clone()
    bad[0, 0, 0, 0] = float("nan")
    with pytest.raises(ValidationError):
        L.adversarial_losses(bad, fake)


def test_total_loss_cases():
    comps = {"attn": 0.3, "flow": 0.4, "regu": 2.0, "perc": 1.5, "face": 0.25, "style": 0.002, "adv": -0.1}
    zero = {k: 0.0 for k in comps}
    for k in comps:
        w = dict(zero, **{k: 1.0})
        assert L.total_loss(comps, w) == comps[k]
    assert L.total_loss(comps, zero) == 0.0
    want = 5 * 0.3 + 2 * 0.4 + 0.001 * 2.0 + 0.5 * 1.5 + 1 * 0.25 + 500 * 0.002 + 2 * -0.1
    assert abs(L.total_loss(comps, L.LossWeights()) - want) < 1e-12
    with pytest.raises(ValidationError):
        L.LossWeights(perc=-1.0)
    with pytest.raises(ValidationError):
        L.total_loss({"attn": float("nan")}, L.LossWeights())


# -- gradients (double precision, 8x8) ------------------------------------------------


def test_gradient_attention_loss():
    g = torch.Generator().manual_seed(20)
    logits = torch.randn(1, 64, 64, generator=g, dtype=torch.float64)
    x_r = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)
    x_t = torch.randn(1, 3, 8, 8, generator=g, dtype=torch.float64)

    def fn(z, a):
        return L.attention_loss(torch.softmax(z, dim=1), a, x_t)

    assert grad_rel_err(fn, [logits, x_r], 0) < 1e-4
    assert grad_rel_err(fn, [logits, x_r], 1) < 1e-4


def test_gradient_sampling_correctness():
    g = torch.Generator().manual_seed(21)
    v_r = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    v_t = torch.randn(1, 4, 8, 8, generator=g, dtype=torch.float64)
    flow = tie_free_flow(g, (1, 2, 8, 8))

    def fn(w_, a, b):
        return L.sampling_correctness_from_features(w_, a, b, eps=-1.0)

    # eps below any cosine keeps the clamps inactive (no kinks); argmax is
    # tie-free for continuous random features
    for i in range(3):
        assert grad_rel_err(fn, [flow, v_r, v_t], i) < 1e-4


def test_gradient_regularization():
    g = torch.Generator().manual_seed(22)
    flow = torch.randn(1, 2, 8, 8, generator=g, dtype=torch.float64)
    assert grad_rel_err(L.regularization_loss, [flow], 0) < 1e-4


def test_gradient_perceptual_and_style(fx64):
    g = torch.Generator().manual_seed(23)
    x_t = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x_hat = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    assert grad_rel_err(lambda a: L.perceptual_loss(x_t, a, fx64), [x_hat], 0) < 1e-4
    assert grad_rel_err(lambda a: L.style_loss(x_t, a, fx64), [x_hat], 0) < 1e-4


def test_gradient_face(fx64):
    g = torch.Generator().manual_seed(24)
    x_t = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    x_hat = torch.rand(1, 3, 8, 8, generator=g, dtype=torch.float64) * 2 - 1
    face = [L.FaceRegion(1, 2, 5, 5, True)]
    assert grad_rel_err(lambda a: L.face_loss(x_t, a, face, fx64)[0], [x_hat], 0) < 1e-4


def test_gradient_adversarial():
    g = torch.Generator().manual_seed(25)
    real = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64) * 2
    fake = torch.randn(1, 1, 8, 8, generator=g, dtype=torch.float64) * 2
    assert grad_rel_err(lambda r, f: L.adversarial_losses(r, f)[1], [real, fake], 0) < 1e-4
    assert grad_rel_err(lambda r, f: L.adversarial_losses(r, f)[1], [real, fake], 1) < 1e-4
    assert grad_rel_err(lambda r, f: L.adversarial_losses(r, f)[0], [real, fake], 1) < 1e-4


def test_vgg19_wrapper_taps_match_torchvision_slices(tmp_path):
    models = pytest.importorskip("torchvision.models")
    torch.manual_seed(0)
    net = models.vgg19()
    torch.save(net.state_dict(), tmp_path / "vgg19.pth")
    fx = L.FeatureExtractor.from_vgg19(tmp_path / "vgg19.pth")
    x = torch.rand(1, 3, 32, 32) * 2 - 1
    norm = ((x + 1) / 2 - torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1)) / torch.tensor(
        [0.229, 0.224, 0.225]).view(1, 3, 1, 1)
    got = fx(x)
    with torch.no_grad():
        for tap, end, size in (("relu1", 2, 32), ("relu2", 7, 16), ("relu3", 12, 8), ("relu4", 21, 4)):
            want = net.features[:end](norm)
            assert got[tap].shape[-1] == size
            assert torch.allclose(got[tap], want, atol=1e-5)
    assert fx.tap_for_resolution(64, 16) == "relu3"
    assert not any(p.requires_grad for p in fx.parameters())


def test_extractor_calibration_centres_every_unit():
    fx = L.FeatureExtractor()
    images = L._calibration_images()
    h = images
    for block in fx.blocks:
        for layer in block:
            h = layer(h)
            if isinstance(layer, torch.nn.Conv2d):
                # zero is a median of every channel; flat background makes ties common
                above = (h > 1e-4).float().mean(dim=(0, 2, 3))
                at_least = (h >= -1e-4).float().mean(dim=(0, 2, 3))
                assert (above <= 0.5 + 1e-3).all() and (at_least >= 0.5 - 1e-3).all()
    again = L.FeatureExtractor()
    assert all(torch.equal(a, b) for a, b in zip(fx.parameters(), again.parameters()))
    raw = L.FeatureExtractor(calibrate=False)
    assert torch.equal(raw.blocks[0][0].weight, fx.blocks[0][0].weight)
    assert not torch.equal(raw.blocks[0][0].bias, fx.blocks[0][0].bias)
