import numpy as np
import pytest
import torch

from oracles import nearest_brute
from pcvq2.tensor_core import ShapeError
from pcvq2.train import TrainConfig, load_vqvae, train_vqvae
from pcvq2.vqvae import (Codebook, ConfigError, HierarchicalVQVAE, VQConfig, ema_statistics,
                         images_to_tensor, load_latents, quantize, save_latents, straight_through,
                         vq_loss)

DT = torch.float64


# quantize

def test_quantize_small_example():
    cb = torch.tensor([[0.0, 0.0], [1.0, 1.0]], dtype=DT)
    idx, zq = quantize(torch.tensor([[0.2, 0.1]], dtype=DT), cb)
    assert idx.tolist() == [0]
    assert torch.equal(zq, torch.zeros(1, 2, dtype=DT))


def test_quantize_exact_member():
    g = torch.Generator().manual_seed(0)
    cb = torch.randn(10, 4, generator=g, dtype=DT)
    idx, zq = quantize(cb[7:8].clone(), cb)
    assert idx.item() == 7 and torch.equal(zq, cb[7:8])


def test_quantize_matches_brute_force():
    g = torch.Generator().manual_seed(1)
    z = torch.randn(500, 8, generator=g, dtype=DT)
    cb = torch.randn(16, 8, generator=g, dtype=DT)
    idx, _ = quantize(z, cb)
    assert np.array_equal(idx.numpy(), nearest_brute(z.numpy(), cb.numpy()))


def test_quantize_ties_go_to_lowest_index():
    g = torch.Generator().manual_seed(2)
    base = torch.randn(4, 3, generator=g, dtype=DT)
    cb = torch.cat([base, base])  # rows k and k + 4 coincide
    z = torch.randn(200, 3, generator=g, dtype=DT)
    idx, _ = quantize(z, cb)
    assert idx.max() < 4


def test_quantize_keeps_leading_dims_and_is_optimal():
    g = torch.Generator().manual_seed(3)
    z = torch.randn(2, 5, 5, 6, generator=g)
    cb = torch.randn(32, 6, generator=g)
    idx, zq = quantize(z, cb)
    assert idx.shape == (2, 5, 5) and zq.shape == z.shape
    d = ((z[..., None, :] - cb) ** 2).sum(-1)
    chosen = d.gather(-1, idx[..., None])[..., 0]
    assert torch.all(chosen <= d.min(-1).values)


def test_quantize_errors():
    with pytest.raises(ConfigError):
        quantize(torch.zeros(3, 2), torch.zeros(0, 2))
    with pytest.raises(ShapeError):
        quantize(torch.zeros(3, 2), torch.zeros(4, 3))


# loss

def test_vq_loss_zero():
    x = torch.rand(2, 3, 4, 4, dtype=DT)
    z = torch.randn(2, 5, dtype=DT)
    assert vq_loss(x, x, z, z, 0.25).item() == 0.0


def test_vq_loss_commitment_arithmetic():
    x = torch.rand(1, 3, 2, 2, dtype=DT)
    z_e, z_q = torch.tensor([2.0], dtype=DT), torch.tensor([0.0], dtype=DT)
    assert vq_loss(x, x, z_e, z_q, 0.25).item() == 1.0


def test_vq_loss_scalar_oracle():
    gen = np.random.default_rng(0)
    x, r = gen.random((2, 3, 4, 4)), gen.random((2, 3, 4, 4))
    ze = [gen.normal(size=(2, 4, 2, 2)), gen.normal(size=(2, 4, 4, 4))]
    zq = [gen.normal(size=(2, 4, 2, 2)), gen.normal(size=(2, 4, 4, 4))]
    ref = sum((a - b) ** 2 for a, b in zip(x.ravel(), r.ravel())) / x.size
    for e, q in zip(ze, zq):
        ref += 0.3 * sum((a - b) ** 2 for a, b in zip(e.ravel(), q.ravel())) / e.size
    t = lambda a: torch.from_numpy(a)  # noqa: E731
    got = vq_loss(t(x), t(r), [t(a) for a in ze], [t(a) for a in zq], 0.3).item()
    assert abs(got - ref) <= 1e-12


def test_vq_loss_shape_errors():
    with pytest.raises(ShapeError):
        vq_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 3, 4, 5), torch.zeros(2), torch.zeros(2), 0.25)
    with pytest.raises(ShapeError):
        vq_loss(torch.zeros(2), torch.zeros(2), torch.zeros(2), torch.zeros(3), 0.25)


def test_commitment_gradient_skips_codebook():
    z_e = torch.randn(4, 3, dtype=DT, requires_grad=True)
    z_q = torch.randn(4, 3, dtype=DT, requires_grad=True)
    vq_loss(torch.zeros(1), torch.zeros(1), z_e, z_q, 0.25).backward()
    assert z_q.grad is None
    assert torch.allclose(z_e.grad, 0.25 * 2 * (z_e - z_q).detach() / 12)


# straight-through

def test_straight_through_value_and_gradient():
    z_e = torch.randn(2, 3, 4, 4, dtype=DT, requires_grad=True)
    z_q = torch.randn(2, 3, 4, 4, dtype=DT)
    out = straight_through(z_e, z_q)
    assert torch.equal(out, z_q)
    g = torch.randn_like(out)
    out.backward(g)
    assert torch.equal(z_e.grad, g)
    with pytest.raises(ShapeError):
        straight_through(z_e, z_q[:, :2])


def test_reconstruction_gradient_at_z_e_equals_gradient_at_z_q():
    cfg = VQConfig(resolution=8, top_grid=2, bottom_grid=4, num_codes=5, code_dim=3, hidden=4,
                   res_blocks=1)
    model = HierarchicalVQVAE(cfg, torch.Generator().manual_seed(0)).to(DT)
    x = torch.rand(2, 3, 8, 8, dtype=DT)
    enc = model.encode(x)
    for t in (*enc["z_e"], *enc["z_q"]):
        t.retain_grad()
    recon = model.decode_quantized(*enc["z_q"], enc["top_feat"])
    ((x - recon) ** 2).mean().backward()
    z_e_top, z_e_bottom = enc["z_e"]
    q_top, q_bottom = enc["z_q"]
    assert torch.equal(z_e_bottom.grad, q_bottom.grad)
    # the top level also receives the bottom encoder's pull through top_feat
    assert z_e_top.grad is not None and q_top.grad is not None


# EMA

def test_ema_gamma_zero_gives_batch_mean():
    g = torch.Generator().manual_seed(0)
    z = torch.randn(10, 3, generator=g, dtype=DT)
    idx = torch.full((10,), 2)
    _, _, e = ema_statistics(torch.zeros(4, dtype=DT), torch.zeros(4, 3, dtype=DT), z, idx,
                             0.0, 1e-5, 0, torch.randn(4, 3, dtype=DT))
    assert torch.allclose(e[2], z.mean(0), rtol=0, atol=1e-4)


def test_ema_unassigned_codes():
    g = torch.Generator().manual_seed(1)
    book = Codebook(3, 2, gamma=0.9, eps=1e-5, generator=g).to(DT)
    e0 = book.embed.clone()
    z = torch.randn(6, 2, generator=g, dtype=DT)
    book.ema_update(z, torch.tensor([0, 0, 0, 1, 1, 1]))
    assert torch.equal(book.embed[2], e0[2])  # never assigned: untouched
    before = book.embed.clone()
    counts, sums = book.ema_counts.clone(), book.ema_sums.clone()
    book.ema_update(z[:3], torch.tensor([0, 0, 0]))
    # code 1 had assignments before, none now: counts and sums decay together,
    # so its vector moves only through the smoothing renormalization
    t = int(book.ema_steps)
    n_hat = (0.9 * counts + 0.1 * torch.tensor([3.0, 0, 0], dtype=DT)) / (1 - 0.9 ** t)
    n = n_hat.sum()
    smooth = (n_hat + 1e-5) / (n + 3e-5) * n
    expected = 0.9 * sums[1] / (1 - 0.9 ** t) / smooth[1]
    assert torch.allclose(book.embed[1], expected, rtol=1e-12, atol=0)
    assert (book.embed[1] - before[1]).abs().max() < 1e-4


def test_ema_closed_form_convergence():
    g = torch.Generator().manual_seed(2)
    K, D, gamma, eps = 8, 4, 0.99, 1e-5
    means = 2 * torch.randn(K, D, generator=g, dtype=DT)
    idx = torch.arange(K).repeat_interleave(3)
    z = means[idx] + 0.3 * torch.randn(len(idx), D, generator=g, dtype=DT)
    counts, sums, e = torch.zeros(K, dtype=DT), torch.zeros(K, D, dtype=DT), torch.randn(K, D, dtype=DT)
    for t in range(500):
        counts, sums, e = ema_statistics(counts, sums, z, idx, gamma, eps, t, e)
    # geometric series: accumulators hold (1 - gamma^n) times the batch statistics
    c = torch.bincount(idx, minlength=K).to(DT)
    s = torch.zeros(K, D, dtype=DT).index_add_(0, idx, z)
    geo = 1 - gamma ** 500
    assert torch.allclose(counts, geo * c, rtol=1e-12, atol=0)
    assert torch.allclose(sums, geo * s, rtol=1e-10, atol=1e-12)
    n = c.sum()
    closed = s / ((c + eps) / (n + K * eps) * n)[:, None]
    assert (e - closed).abs().max() < 1e-10
    assert (e - s / c[:, None]).abs().max() < 1e-3


# model

def test_desk_grid_sizes():
    model = HierarchicalVQVAE(VQConfig(), torch.Generator().manual_seed(0))
    top, bottom = model.encode_hierarchy(torch.rand(2, 3, 32, 32))
    assert top.shape == (2, 4, 4) and bottom.shape == (2, 8, 8)


@pytest.mark.parametrize("latents, top_side", [("16-8", 8), ("32-16", 16)])
def test_full_scale_config_shapes(latents, top_side):
    cfg = VQConfig.full_scale(latents)
    model = HierarchicalVQVAE(cfg, torch.Generator().manual_seed(0)).eval()
    top, bottom = model.encode_hierarchy(torch.rand(1, 3, 256, 256))
    assert top.shape == (1, top_side, top_side) and bottom.shape == (1, 2 * top_side, 2 * top_side)
    assert 0 <= int(top.min()) and int(top.max()) < 256 and int(bottom.max()) < 256
    img = model.decode_hierarchy(top, bottom)
    assert img.shape == (1, 3, 256, 256)
    assert 0.0 <= float(img.min()) and float(img.max()) <= 1.0


def test_resolution_mismatch():
    model = HierarchicalVQVAE(VQConfig())
    with pytest.raises(ShapeError):
        model.encode(torch.rand(1, 3, 64, 64))


def test_config_validation():
    with pytest.raises(ConfigError):
        VQConfig(top_grid=4, bottom_grid=6)
    with pytest.raises(ConfigError):
        VQConfig(gamma=1.0)
    with pytest.raises(ConfigError):
        VQConfig(resolution=24)


def test_decode_is_deterministic_and_validates_indices():
    model = HierarchicalVQVAE(VQConfig(num_codes=16), torch.Generator().manual_seed(0)).eval()
    g = torch.Generator().manual_seed(1)
    top = torch.randint(0, 16, (2, 4, 4), generator=g)
    bottom = torch.randint(0, 16, (2, 8, 8), generator=g)
    assert torch.equal(model.decode_hierarchy(top, bottom), model.decode_hierarchy(top, bottom))
    with pytest.raises(IndexError):
        model.decode_hierarchy(top, bottom + 16)
    with pytest.raises(ShapeError):
        model.decode_hierarchy(top, bottom[:, :4])


@pytest.fixture(scope="module")
def toy_vqvae(images):
    cfg = TrainConfig(scale=0.05, batch_size=16)  # 200 iterations
    return train_vqvae(images[:16], cfg)


def test_training_loss_descends(toy_vqvae):
    losses = [r["loss"] for r in toy_vqvae.metrics]
    assert len(losses) == 200
    assert np.mean(losses[-10:]) < 0.5 * losses[0]


def test_reconstruction_beats_random_codes(toy_vqvae, images):
    model = load_vqvae(toy_vqvae)
    x = images_to_tensor(images)
    top, bottom = model.encode_hierarchy(x)
    mse = ((model.decode_hierarchy(top, bottom) - x) ** 2).mean()
    g = torch.Generator().manual_seed(0)
    K = model.config.num_codes
    rand = model.decode_hierarchy(torch.randint(0, K, top.shape, generator=g),
                                  torch.randint(0, K, bottom.shape, generator=g))
    assert mse < ((rand - x) ** 2).mean()


def test_latent_file_round_trip(tmp_path):
    grid = np.arange(64).reshape(8, 8) % 17
    save_latents(tmp_path / "b.lat", "bottom", grid, 256)
    level, back, K = load_latents(tmp_path / "b.lat")
    assert level == "bottom" and K == 256 and np.array_equal(back, grid)
    raw = (tmp_path / "b.lat").read_bytes()
    (tmp_path / "t.lat").write_bytes(raw[:-4])
    with pytest.raises(ValueError):
        load_latents(tmp_path / "t.lat")
