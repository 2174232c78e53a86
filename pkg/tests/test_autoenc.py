from __future__ import annotations

import numpy as np
import pytest
import torch

from autoenc import (
    AutoencoderConfig,
    AutoencoderError,
    Codebook,
    LatentGrid,
    LossWeights,
    build_autoencoder,
    codebook_usage,
    decode,
    encode,
    freeze,
    nearest_indices,
    perceptual_loss,
    plane_slices,
    quantize,
    reconstruct,
    train_autoencoder,
    vq_losses,
)
from tests._helpers import tiny_ae_config, tiny_ae_train


def _brute_nearest(vectors: np.ndarray, entries: np.ndarray) -> np.ndarray:
    out = np.empty(len(vectors), dtype=np.int64)
    for i, v in enumerate(vectors):
        best, best_d = 0, None
        for k, e in enumerate(entries):
            d = float(((v - e) ** 2).sum())
            if best_d is None or d < best_d:
                best, best_d = k, d
        out[i] = best
    return out


@pytest.mark.parametrize("k", [1, 7, 64])
def test_nearest_indices_matches_brute_force(k):
    rng = np.random.default_rng(k)
    vectors = rng.normal(size=(1000, 3)).astype(np.float32)
    entries = rng.normal(size=(k, 3)).astype(np.float32)
    got = nearest_indices(torch.from_numpy(vectors), torch.from_numpy(entries)).numpy()
    assert np.array_equal(got, _brute_nearest(vectors, entries))


def test_nearest_indices_ties_go_to_lowest_index():
    entries = torch.tensor([[1.0, 0.0], [-1.0, 0.0], [1.0, 0.0]])
    vectors = torch.tensor([[0.0, 0.0], [0.0, 5.0], [1.0, 0.0]])
    assert nearest_indices(vectors, entries).tolist() == [0, 0, 0]


def test_quantize_returns_codebook_entries():
    cb = Codebook(8, 3)
    latent = torch.randn(2, 3, 2, 2, 2)
    grid = quantize(latent, cb)
    assert grid.indices.shape == (2, 2, 2, 2)
    assert grid.spatial_shape == (2, 2, 2)
    flat = grid.embedded.permute(0, 2, 3, 4, 1).reshape(-1, 3)
    assert torch.equal(flat, cb.entries[grid.indices.reshape(-1)])
    assert torch.allclose(grid.quantized, grid.embedded)
    again = LatentGrid.from_indices(grid.indices, cb)
    assert torch.equal(again.quantized, grid.embedded)


def test_quantize_rejects_wrong_channels():
    with pytest.raises(AutoencoderError, match="latent channel dim"):
        quantize(torch.zeros(1, 4, 2, 2, 2), Codebook(8, 3))


def test_straight_through_routes_gradient_to_encoder_only():
    cb = Codebook(8, 3)
    latent = torch.randn(1, 3, 2, 2, 2, requires_grad=True)
    grid = quantize(latent, cb)
    grid.quantized.sum().backward()
    assert torch.allclose(latent.grad, torch.ones_like(latent))
    assert cb.entries.grad is None


def test_codebook_and_commit_terms_use_stop_gradient():
    cb = Codebook(8, 3)
    latent = torch.randn(1, 3, 2, 2, 2, requires_grad=True)
    grid = quantize(latent, cb)
    x = torch.zeros(1, 1, 4, 4, 4)
    w = LossWeights(alpha=0.25)

    losses = vq_losses(x, x, grid.continuous, grid.embedded, w)
    losses.codebook.backward(retain_graph=True)
    assert latent.grad is None
    assert cb.entries.grad is not None and cb.entries.grad.abs().sum() > 0

    cb.entries.grad = None
    losses.commit.backward()
    assert latent.grad is not None
    assert cb.entries.grad is None
    expected = 0.25 * 2.0 * (latent - grid.embedded).detach() / latent.numel()
    assert torch.allclose(latent.grad, expected, atol=1e-6)


def test_commit_gradient_matches_finite_differences():
    torch.manual_seed(0)
    cont = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64, requires_grad=True)
    emb = torch.randn(1, 2, 2, 2, 2, dtype=torch.float64)
    x = torch.zeros(1, 1, 2, 2, 2, dtype=torch.float64)
    w = LossWeights(alpha=0.5)
    assert torch.autograd.gradcheck(lambda c: vq_losses(x, x, c, emb, w).commit, (cont,))


def test_recon_term_is_mean_absolute_error():
    x = torch.zeros(1, 1, 2, 2, 2)
    x_hat = torch.full_like(x, 0.5)
    z = torch.zeros(1, 2, 1, 1, 1)
    losses = vq_losses(x, x_hat, z, z, LossWeights())
    assert float(losses.recon) == pytest.approx(0.5)
    assert float(losses.total) == pytest.approx(0.5)


def test_plane_slices_shapes():
    v = torch.zeros(2, 1, 4, 5, 6)
    assert plane_slices(v, "hw").shape == (12, 1, 4, 5)
    assert plane_slices(v, "hd").shape == (10, 1, 4, 6)
    assert plane_slices(v, "wd").shape == (8, 1, 5, 6)
    assert plane_slices(v, "hw", "mid").shape == (2, 1, 4, 5)


def test_perceptual_loss_zero_on_identical_inputs():
    model = build_autoencoder(tiny_ae_config())
    x = torch.randn(1, 1, 8, 8, 8)
    assert float(perceptual_loss(x, x, model.perceptual)) == pytest.approx(0.0)
    assert float(perceptual_loss(x, x + 1.0, model.perceptual)) > 0.0


def test_encode_decode_shapes_and_errors():
    model = build_autoencoder(tiny_ae_config()).eval()
    x = torch.zeros(1, 1, 16, 16, 16)
    z = encode(model, x)
    assert z.shape == (1, 2, 4, 4, 4)
    out = reconstruct(model, x)
    assert out.shape == x.shape
    assert float(out.abs().max()) <= 1.0
    with pytest.raises(AutoencoderError, match="non-divisible dims"):
        encode(model, torch.zeros(1, 1, 16, 16, 10))
    with pytest.raises(AutoencoderError, match="expected"):
        encode(model, torch.zeros(1, 16, 16, 16))
    with pytest.raises(AutoencoderError, match="shape mismatch"):
        decode(model, torch.zeros(1, 3, 4, 4, 4))


def test_config_validation():
    with pytest.raises(AutoencoderError, match="power of 2"):
        AutoencoderConfig(compression=3, patch_size=12)
    with pytest.raises(AutoencoderError, match="not divisible"):
        AutoencoderConfig(patch_size=30)


def test_build_is_seeded():
    a = build_autoencoder(tiny_ae_config(), seed=3)
    b = build_autoencoder(tiny_ae_config(), seed=3)
    for pa, pb in zip(a.parameters(), b.parameters()):
        assert torch.equal(pa, pb)


def test_train_smoke_and_freeze():
    torch.manual_seed(0)
    data = [torch.rand(1, 1, 16, 16, 16) * 2 - 1 for _ in range(2)]
    model, history = train_autoencoder(data, tiny_ae_train(), tiny_ae_config())
    assert len(history) == 2
    assert history[0]["disc"] == 0.0  # before warmup
    assert all(np.isfinite(list(h.values())).all() for h in history)

    snap = freeze(model)
    assert not any(p.requires_grad for p in snap.parameters())
    with torch.no_grad():
        next(model.parameters()).add_(1.0)
    assert not torch.equal(next(model.parameters()), next(snap.parameters()))

    usage = codebook_usage(snap, data)
    assert usage.shape == (16,)
    assert usage.sum() == 2 * 4 * 4 * 4


def test_train_rejects_empty_dataset():
    with pytest.raises(AutoencoderError, match="empty dataset"):
        train_autoencoder([], tiny_ae_train(), tiny_ae_config())
