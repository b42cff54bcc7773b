import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from radioloc import autodiff as ad
from radioloc.autodiff import checkpoint
from radioloc.autodiff.ops import DegenerateHeatmapError

from oracles import fd_check

SEEDS = range(20)


def T(a, grad=True):
    return ad.Tensor(np.asarray(a, float), requires_grad=grad)


def weighted_sum(y, rng):
    c = ad.Tensor(rng.normal(size=y.shape))
    return (y * c).sum()


# ---------------------------------------------------------------- gradients

@pytest.mark.parametrize("k", [1, 3, 4, 5, 6])
def test_conv_grad(k):
    worst = 0.0
    for s in SEEDS:
        rng = np.random.default_rng(s)
        x = T(rng.normal(size=(1, 3, 8, 8)))
        w = T(rng.normal(size=(2, 3, k, k)))
        b = T(rng.normal(size=2))
        c = ad.Tensor(rng.normal(size=(1, 2, 8, 8)))
        worst = max(worst, fd_check(lambda: (ad.conv2d(x, w, b) * c).sum(), [x, w, b], eps=1e-3))
    assert worst < 1e-4


@pytest.mark.parametrize("op", ["avgpool2", "upsample2"])
def test_resample_grad(op):
    f = getattr(ad, op)
    for s in SEEDS:
        rng = np.random.default_rng(s)
        x = T(rng.normal(size=(2, 2, 4, 6)))
        c = ad.Tensor(rng.normal(size=f(x).shape))
        assert fd_check(lambda: (f(x) * c).sum(), [x]) < 1e-4


@pytest.mark.parametrize("name", sorted(ad.ACTIVATIONS))
def test_activation_grad(name):
    f = ad.ACTIVATIONS[name]
    for s in SEEDS:
        rng = np.random.default_rng(s)
        x = T(rng.normal(size=(2, 1, 5, 5)))
        # keep entries away from the ReLU kink so central differences are valid
        x.data[np.abs(x.data) < 1e-3] += 1e-2
        c = ad.Tensor(rng.normal(size=x.shape))
        assert fd_check(lambda: (f(x) * c).sum(), [x]) < 1e-4


def test_concat_grad():
    for s in SEEDS:
        rng = np.random.default_rng(s)
        a, b = T(rng.normal(size=(1, 2, 3, 3))), T(rng.normal(size=(1, 3, 3, 3)))
        c = ad.Tensor(rng.normal(size=(1, 5, 3, 3)))
        assert fd_check(lambda: (ad.concat([a, b]) * c).sum(), [a, b]) < 1e-4


@pytest.mark.parametrize("loss", ["aed_loss", "ased_loss"])
def test_com_and_loss_grad(loss):
    f = getattr(ad, loss)
    for s in SEEDS:
        rng = np.random.default_rng(s)
        h = T(rng.uniform(-0.3, 1.0, size=(3, 1, 6, 7)))
        t = rng.uniform(1, 7, (3, 2))
        assert fd_check(lambda: f(ad.com_readout(h), t), [h]) < 1e-4


def test_mse_grad():
    for s in SEEDS:
        rng = np.random.default_rng(s)
        p = T(rng.normal(size=(2, 1, 4, 4)))
        t = rng.normal(size=(2, 1, 4, 4))
        assert fd_check(lambda: ad.mse_loss(p, t), [p]) < 1e-4


def toy_net(rng, final="leaky-relu"):
    convs = [ad.Conv2d(2, 3, 3, rng), ad.Conv2d(3, 3, 3, rng), ad.Conv2d(5, 1, 3, rng)]
    convs[2].bias.data[:] = 1.0  # keep the heatmap mass away from zero

    def forward(x):
        h = ad.leaky_relu(convs[0](x))
        h = ad.upsample2(ad.avgpool2(ad.leaky_relu(convs[1](h))))
        h = convs[2](ad.concat([h, x]))
        return ad.com_readout(ad.ACTIVATIONS[final](h))

    params = [p for c in convs for p in c.parameters()]
    return forward, params


def test_end_to_end_net_grad():
    for s in SEEDS:
        rng = np.random.default_rng(s)
        fwd, params = toy_net(rng)
        x = ad.Tensor(rng.normal(size=(2, 2, 8, 8)))
        t = rng.uniform(1, 8, (2, 2))
        assert fd_check(lambda: ad.aed_loss(fwd(x), t), params, eps=1e-5) < 1e-3


# ---------------------------------------------------------------- forward contracts

def test_conv_1x1_and_identity():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.normal(size=(1, 3, 8, 8)))
    w = rng.normal(size=(2, 3, 1, 1))
    b = rng.normal(size=2)
    y = ad.conv2d(x, ad.Tensor(w), ad.Tensor(b)).data
    np.testing.assert_allclose(y, np.einsum("oi,nihw->nohw", w[:, :, 0, 0], x.data) + b[None, :, None, None],
                               atol=1e-12)
    for k in (3, 5):
        wi = np.zeros((3, 3, k, k))
        for i in range(3):
            wi[i, i, k // 2, k // 2] = 1.0
        y = ad.conv2d(x, ad.Tensor(wi), ad.Tensor(np.full(3, 0.5))).data
        assert np.array_equal(y, x.data + 0.5)


def test_conv_matches_direct_correlation():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(1, 2, 6, 6))
    w = rng.normal(size=(1, 2, 3, 3))
    y = ad.conv2d(ad.Tensor(x), ad.Tensor(w)).data
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((6, 6))
    for r in range(6):
        for c in range(6):
            ref[r, c] = np.sum(xp[0, :, r:r + 3, c:c + 3] * w[0])
    np.testing.assert_allclose(y[0, 0], ref, atol=1e-12)


def test_conv_shape_mismatch():
    with pytest.raises(ValueError):
        ad.conv2d(ad.Tensor(np.zeros((1, 2, 4, 4))), ad.Tensor(np.zeros((1, 3, 3, 3))))


def test_pool_upsample_contracts():
    c = ad.Tensor(np.full((1, 2, 8, 8), 3.25))
    assert np.all(ad.avgpool2(c).data == 3.25)
    assert np.allclose(ad.upsample2(ad.avgpool2(c)).data, c.data, atol=0)
    with pytest.raises(ValueError):
        ad.avgpool2(ad.Tensor(np.zeros((1, 1, 5, 4))))


def test_bilinear_weights_fixture():
    U = ad.bilinear_up2_matrix(3)
    expected = np.array([
        [1.0, 0.0, 0.0],
        [0.75, 0.25, 0.0],
        [0.25, 0.75, 0.0],
        [0.0, 0.75, 0.25],
        [0.0, 0.25, 0.75],
        [0.0, 0.0, 1.0],
    ])
    np.testing.assert_allclose(U, expected, atol=0)


def test_softmax_normalized():
    x = ad.Tensor(np.random.default_rng(2).normal(size=(3, 1, 9, 9)) * 20)
    assert np.allclose(ad.softmax2d(x).data.sum(axis=(2, 3)), 1.0, atol=1e-9)


def test_com_cases():
    H = np.zeros((1, 1, 256, 256))
    H[0, 0, 19, 9] = 1.0
    assert tuple(ad.com_readout(ad.Tensor(H)).data[0]) == (10.0, 20.0)
    assert tuple(ad.com_readout(ad.Tensor(np.ones((1, 1, 256, 256)))).data[0]) == (128.5, 128.5)
    H = np.zeros((1, 1, 4, 4))
    H[0, 0, 0, 0], H[0, 0, 0, 2] = 1.0, 3.0
    assert tuple(ad.com_readout(ad.Tensor(H)).data[0]) == (2.5, 1.0)


def test_com_degenerate():
    H = ad.Tensor(np.zeros((2, 1, 4, 4)))
    with pytest.raises(DegenerateHeatmapError):
        ad.com_readout(H)
    H.data[1, 0, 1, 1] = 2.0
    out, valid = ad.com_readout(H, skip_degenerate=True)
    assert list(valid) == [False, True] and tuple(out.data[1]) == (2.0, 2.0)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([-1.0, 0.5, 3.0]))
def test_com_scale_invariance(seed, c):
    H = np.random.default_rng(seed).uniform(0.1, 1.0, size=(1, 1, 7, 5))
    a = ad.com_readout(ad.Tensor(H)).data
    b = ad.com_readout(ad.Tensor(c * H)).data
    assert np.allclose(a, b, rtol=0, atol=1e-9)


def test_losses():
    p = ad.Tensor(np.array([[0.0, 0.0], [1.0, 1.0]]), requires_grad=True)
    t = np.array([[3.0, 4.0], [1.0, 1.0]])
    assert float(ad.aed_loss(p, t).data) == 2.5
    assert float(ad.aed_loss(ad.Tensor(p.data[:1]), t[:1]).data) == 5.0
    assert float(ad.ased_loss(ad.Tensor(p.data[:1]), t[:1]).data) == 25.0
    same = ad.Tensor(t.copy(), requires_grad=True)
    l1 = ad.aed_loss(same, t)
    l1.backward()
    assert float(l1.data) == 0 and np.all(same.grad == 0)
    same.grad = None
    l2 = ad.ased_loss(same, t)
    l2.backward()
    assert float(l2.data) == 0 and np.all(same.grad == 0)
    with pytest.raises(ValueError):
        ad.aed_loss(ad.Tensor(np.zeros((0, 2))), np.zeros((0, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.integers(1, 8))
def test_ased_at_least_aed_squared(seed, n):
    rng = np.random.default_rng(seed)
    p, t = rng.normal(size=(n, 2)) * 10, rng.normal(size=(n, 2)) * 10
    aed = float(ad.aed_loss(ad.Tensor(p), t).data)
    ased = float(ad.ased_loss(ad.Tensor(p), t).data)
    assert ased >= aed ** 2 - 1e-9


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_stack_translation_equivariance(seed):
    rng = np.random.default_rng(seed)
    x = np.zeros((1, 1, 32, 32))
    x[0, 0, 12:18, 12:18] = rng.normal(size=(6, 6))
    w = ad.Tensor(rng.normal(size=(2, 1, 3, 3)))

    def stack(a):
        return ad.upsample2(ad.avgpool2(ad.leaky_relu(ad.conv2d(ad.Tensor(a), w)))).data

    y0 = stack(x)
    y1 = stack(np.roll(x, (2, 2), axis=(2, 3)))
    np.testing.assert_allclose(y1[..., 6:28, 6:28], y0[..., 4:26, 4:26], atol=1e-12)


# ---------------------------------------------------------------- optimizer

def test_adam_zero_grad_keeps_params():
    p = [np.array([1.0, -2.0])]
    adam = ad.AdamState()
    ad.adam_step(p, [np.zeros(2)], adam, lr=0.1)
    assert np.array_equal(p[0], [1.0, -2.0])


def test_adam_hand_computed_steps():
    g = np.array([0.5, -2.0])
    p = [np.array([1.0, 1.0])]
    st_ = ad.AdamState()
    lr, b1, b2, eps = 0.01, 0.9, 0.999, 1e-8
    ad.adam_step(p, [g], st_, lr, b1, b2, eps)
    # step 1: m_hat = g, v_hat = g^2 -> update = lr * g / (|g| + eps)
    np.testing.assert_allclose(p[0], 1.0 - lr * g / (np.abs(g) + eps), rtol=0, atol=1e-15)
    ad.adam_step(p, [g], st_, lr, b1, b2, eps)
    m = (1 - b1) * g * (1 + b1)
    v = (1 - b2) * g * g * (1 + b2)
    upd = lr * (m / (1 - b1 ** 2)) / (np.sqrt(v / (1 - b2 ** 2)) + eps)
    np.testing.assert_allclose(p[0], 1.0 - lr * g / (np.abs(g) + eps) - upd, rtol=0, atol=1e-15)


def test_adam_shape_mismatch_and_determinism():
    with pytest.raises(ValueError):
        ad.adam_step([np.zeros(2)], [np.zeros(3)], ad.AdamState(), 0.1)

    def run():
        rng = np.random.default_rng(3)
        fwd, params = toy_net(rng)
        opt = ad.Adam(params, lr=1e-2)
        x = ad.Tensor(rng.normal(size=(2, 2, 8, 8)))
        t = rng.uniform(1, 8, (2, 2))
        for _ in range(5):
            opt.zero_grad()
            ad.aed_loss(fwd(x), t).backward()
            opt.step()
        return [p.data.copy() for p in params]

    assert all(np.array_equal(a, b) for a, b in zip(run(), run()))


# ---------------------------------------------------------------- checkpoints

def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(4)
    named = {"a.weight": rng.normal(size=(2, 3, 3, 3)), "a.bias": rng.normal(size=2), "s": np.array(1.5)}
    checkpoint.save(tmp_path / "m.ckpt", named)
    back = checkpoint.load(tmp_path / "m.ckpt")
    assert list(back) == list(named)
    assert all(np.array_equal(back[k], named[k]) for k in named)
    assert checkpoint.dumps(named) == checkpoint.dumps(back)


def test_checkpoint_errors():
    blob = checkpoint.dumps({"w": np.arange(6.0).reshape(2, 3)})
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(b"XXXXXXXX" + blob[8:])
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:-40] + blob[-32:])
    bad = bytearray(blob)
    bad[30] ^= 0xFF
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(bytes(bad))
    import hashlib
    import struct
    body = bytearray(blob[:-32])
    body[8:12] = struct.pack("<I", 2)
    with pytest.raises(checkpoint.CheckpointError, match="version"):
        checkpoint.loads(bytes(body) + hashlib.sha256(bytes(body)).digest())
    with pytest.raises(checkpoint.CheckpointError):
        checkpoint.loads(blob[:20])
