"""Trainer tests: objective arithmetic, Adam behavior, the decay schedule,
batch sampling contracts, and gradient flow through the unrolled sequence."""

import numpy as np
import pytest

from streamdeblur.frameio import PairSequence
from streamdeblur.model import ModelConfig, ModelParams, init_params, init_state, step, window_indices
from streamdeblur.synth import SynthConfig, generate_synthetic_highspeed, synthesize_video
from streamdeblur.tensor import ShapeError, Tensor, backward, finite_diff_grad, tsum
from streamdeblur.training import (
    LossConfig,
    OptimState,
    adam_step,
    init_optimizer,
    lr_schedule,
    run_training,
    sample_batch,
    sequence_loss,
    sequence_mse,
    train_sequence_step,
    weight_norm,
)


def frame_tensors(rng, count, shape=(1, 3, 8, 8)):
    return [Tensor(rng.uniform(0, 1, shape).astype(np.float32)) for _ in range(count)]


def toy_dataset(rng, sequences=3, frames=30, hw=(24, 24), tau=7):
    """Synthetic blurred sequences in trainer layout."""
    out = []
    for _ in range(sequences):
        seq = generate_synthetic_highspeed(
            "shifting-texture",
            {"frame_count": frames, "height": hw[0], "width": hw[1], "velocity": (1.0, 0.0)},
            rng,
        )
        video = synthesize_video(seq, SynthConfig(tau=tau, interval=tau))
        blurry = np.stack([np.moveaxis(p.blurry, -1, 0) for p in video.pairs])
        sharp = np.stack([np.moveaxis(p.sharp, -1, 0) for p in video.pairs])
        out.append(PairSequence(blurry=blurry, sharp=sharp, fps=video.fps))
    return out


# ---------------------------------------------------------------------------
# objective
# ---------------------------------------------------------------------------


def test_zero_error_zero_decay_gives_zero_loss():
    rng = np.random.default_rng(0)
    frames = frame_tensors(rng, 3)
    params = ModelParams({})
    loss = sequence_loss(frames, [Tensor(f.data.copy()) for f in frames], params, LossConfig(0.0))
    assert loss.item() == 0.0


def test_single_pixel_pair_normalizes_by_elements():
    latent = Tensor(np.full((1, 3, 1, 1), 0.5, dtype=np.float32))
    sharp = Tensor(np.zeros((1, 3, 1, 1), dtype=np.float32))
    loss = sequence_loss([latent], [sharp], ModelParams({}), LossConfig(0.0))
    assert loss.item() == pytest.approx(0.25, abs=1e-7)


def test_weight_decay_term_is_squared_norm():
    params = ModelParams({"x.w": Tensor(np.array([2.0], dtype=np.float32), requires_grad=True)})
    zero = Tensor(np.zeros((1, 3, 2, 2), dtype=np.float32))
    loss = sequence_loss([zero], [Tensor(zero.data.copy())], params, LossConfig(1.0))
    assert loss.item() == pytest.approx(4.0, abs=1e-6)


def test_loss_is_nonnegative_and_reduces_to_reg_at_match():
    rng = np.random.default_rng(1)
    params = ModelParams(
        {"a.w": Tensor(rng.normal(size=(2, 2)).astype(np.float32), requires_grad=True)}
    )
    frames = frame_tensors(rng, 4)
    same = [Tensor(f.data.copy()) for f in frames]
    lam = 1e-3
    loss = sequence_loss(frames, same, params, LossConfig(lam))
    assert loss.item() == pytest.approx(lam * weight_norm(params).item(), rel=1e-6)
    other = frame_tensors(rng, 4)
    assert sequence_loss(frames, other, params, LossConfig(lam)).item() >= 0.0


def test_loss_is_linear_in_weight_decay():
    rng = np.random.default_rng(2)
    params = ModelParams(
        {"a.w": Tensor(rng.normal(size=(3, 3)).astype(np.float32), requires_grad=True)}
    )
    frames = frame_tensors(rng, 2)
    other = frame_tensors(rng, 2)
    lam = 2e-4
    e0 = sequence_loss(frames, other, params, LossConfig(0.0)).item()
    e1 = sequence_loss(frames, other, params, LossConfig(lam)).item()
    e2 = sequence_loss(frames, other, params, LossConfig(2 * lam)).item()
    reg = weight_norm(params).item()
    assert e1 - e0 == pytest.approx(lam * reg, rel=1e-5)
    assert e2 - e0 == pytest.approx(2 * lam * reg, rel=1e-5)


def test_loss_length_mismatch_rejected():
    rng = np.random.default_rng(3)
    with pytest.raises(ShapeError):
        sequence_mse(frame_tensors(rng, 2), frame_tensors(rng, 3))


# ---------------------------------------------------------------------------
# Adam and the schedule
# ---------------------------------------------------------------------------


def one_param(value=1.0):
    params = ModelParams(
        {"p.w": Tensor(np.array([value], dtype=np.float32), requires_grad=True)}
    )
    return params, init_optimizer(params)


def test_zero_gradients_leave_parameters_unchanged():
    params, opt = one_param(0.7)
    before = params["p.w"].data.copy()
    params["p.w"].grad = np.zeros(1, dtype=np.float32)
    adam_step(params, opt)
    np.testing.assert_array_equal(params["p.w"].data, before)


def test_first_adam_step_moves_by_learning_rate():
    params, opt = one_param(0.0)
    params["p.w"].grad = np.ones(1, dtype=np.float32)
    adam_step(params, opt)
    # bias-corrected first step is -lr * g / (|g| + eps)
    assert params["p.w"].data[0] == pytest.approx(-1e-4, rel=1e-4)


def test_beta_is_projected_into_unit_interval():
    params = ModelParams(
        {"dtb.beta": Tensor(np.asarray(0.999999, dtype=np.float32), requires_grad=True)}
    )
    opt = init_optimizer(params, base_lr=1.0)
    params["dtb.beta"].grad = np.asarray(-5.0, dtype=np.float32)
    adam_step(params, opt)
    assert params["dtb.beta"].data == 1.0
    params["dtb.beta"].grad = np.asarray(5.0, dtype=np.float32)
    for _ in range(10):
        adam_step(params, opt)
    assert params["dtb.beta"].data == 0.0


def test_missing_gradient_rejected():
    params, opt = one_param()
    with pytest.raises(ValueError, match="no gradient"):
        adam_step(params, opt)


def test_lr_schedule_staircase():
    assert lr_schedule(0) == pytest.approx(1e-4)
    assert lr_schedule(999) == pytest.approx(1e-4)
    assert lr_schedule(1000) == pytest.approx(9.6e-5)
    assert lr_schedule(500, decay_every=100) == pytest.approx(1e-4 * 0.96**5)
    rates = [lr_schedule(i, decay_every=50) for i in range(0, 1000, 7)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


# ---------------------------------------------------------------------------
# batch sampling
# ---------------------------------------------------------------------------


def coordinate_coded_dataset(frames=40, hw=(32, 40)):
    """Pixel values encode (frame, row, col) so crops reveal their origin."""
    h, w = hw
    t_idx = np.arange(frames, dtype=np.float32)[:, None, None, None]
    y_idx = np.arange(h, dtype=np.float32)[None, None, :, None]
    x_idx = np.arange(w, dtype=np.float32)[None, None, None, :]
    code = t_idx + y_idx / 100.0 + x_idx / 10000.0
    blurry = np.broadcast_to(code, (frames, 3, h, w)).astype(np.float32)
    return PairSequence(blurry=blurry.copy(), sharp=(blurry + 0.5).copy(), fps=16.0)


def test_batch_crops_share_one_origin_and_stay_in_bounds():
    dataset = [coordinate_coded_dataset()]
    batch = sample_batch(dataset, np.random.default_rng(5), batch_size=3, seq_len=13, crop=16)
    assert batch.blurry.shape == (3, 13, 3, 16, 16)
    assert batch.sharp.shape == (3, 13, 3, 16, 16)
    for b in range(3):
        codes = batch.blurry[b, :, 0, 0, 0]  # encodes (start+n, y0, x0)
        starts = np.floor(codes).astype(int)
        y0 = np.round((codes - starts) * 100).astype(int)
        x0 = np.round(((codes - starts) * 100 - y0) * 100).astype(int)
        assert list(starts) == list(range(starts[0], starts[0] + 13))
        assert len(set(y0)) == 1 and len(set(x0)) == 1
        assert 0 <= y0[0] <= 32 - 16 and 0 <= x0[0] <= 40 - 16
        # sharp crops come from the same location of the same source
        np.testing.assert_array_equal(batch.sharp[b], batch.blurry[b] + 0.5)


def test_batch_sampling_is_seed_reproducible():
    rng = np.random.default_rng(6)
    dataset = toy_dataset(rng, sequences=2, frames=120, hw=(32, 32))
    a = sample_batch(dataset, np.random.default_rng(7), 4, seq_len=13, crop=16)
    b = sample_batch(dataset, np.random.default_rng(7), 4, seq_len=13, crop=16)
    assert a.blurry.tobytes() == b.blurry.tobytes()
    assert a.sharp.tobytes() == b.sharp.tobytes()


def test_batch_rejects_short_dataset_or_big_crop():
    rng = np.random.default_rng(8)
    dataset = toy_dataset(rng, sequences=1, frames=30, hw=(24, 24))
    with pytest.raises(ValueError):
        sample_batch(dataset, rng, 2, seq_len=99, crop=16)
    with pytest.raises(ValueError):
        sample_batch(dataset, rng, 2, seq_len=2, crop=64)
    with pytest.raises(ValueError):
        sample_batch([], rng, 2)


# ---------------------------------------------------------------------------
# training steps
# ---------------------------------------------------------------------------


def test_training_is_deterministic_under_fixed_seed():
    rng = np.random.default_rng(9)
    dataset = toy_dataset(rng, sequences=2, frames=60, hw=(24, 24))
    cfg = ModelConfig(
        variant="strcnn-dtb", window_m=1, encoder_blocks=1, decoder_blocks=1, channels=8, feature_channels=4
    )
    kw = dict(iterations=4, batch_size=2, seed=123, seq_len=5, crop=16, log_every=1)
    a = run_training(dataset, cfg, **kw)
    b = run_training(dataset, cfg, **kw)
    assert [r["loss"] for r in a.log] == [r["loss"] for r in b.log]
    for name, t in a.params.items():
        assert t.data.tobytes() == b.params[name].data.tobytes(), name


def test_unrolled_sequence_gradient_matches_fd_for_sampled_weights():
    rng = np.random.default_rng(10)
    cfg = ModelConfig(
        variant="strcnn-dtb", window_m=1, encoder_blocks=1, decoder_blocks=1, channels=4, feature_channels=2
    )
    params = init_params(cfg, rng).astype(np.float64)
    seq_len = 13
    hw = (8, 8)
    blurry = rng.uniform(0, 1, (seq_len, 1, 3, *hw))
    sharp = rng.uniform(0, 1, (seq_len, 1, 3, *hw))

    def loss_with(p):
        state = init_state(cfg, hw, batch=1, dtype=np.float64)
        latents, sharps = [], []
        for n in range(seq_len):
            window = [Tensor(blurry[i]) for i in window_indices(n, cfg.window_m, seq_len)]
            latent, state = step(window, state, p, cfg)
            latents.append(latent)
            sharps.append(Tensor(sharp[n]))
        return sequence_loss(latents, sharps, p, LossConfig(1e-5))

    params.zero_grad()
    backward(loss_with(params))

    key = "enc_in.w"
    flat_idx = [0, 7, 50, 101, 149]
    base = params[key].data.copy()
    eps = 1e-4
    for i in flat_idx:
        coord = np.unravel_index(i, base.shape)

        def f_scalar(v):
            p = params.astype(np.float64)
            d = p[key].data.copy()
            d[coord] = v
            p.tensors[key] = Tensor(d, requires_grad=True)
            from streamdeblur.tensor import no_grad

            with no_grad():
                return loss_with(p).item()

        v0 = base[coord]
        fd = (f_scalar(v0 + eps) - f_scalar(v0 - eps)) / (2 * eps)
        got = params[key].grad[coord]
        # relative agreement where the gradient has meaningful magnitude,
        # absolute agreement below (relative error is ill-conditioned there)
        if max(abs(fd), abs(got)) >= 1e-5:
            assert abs(fd - got) / max(abs(fd), abs(got)) < 1e-4, (i, fd, got)
        else:
            assert abs(fd - got) < 1e-8, (i, fd, got)


def test_training_reduces_loss_on_fixed_tiny_batch():
    rng = np.random.default_rng(11)
    dataset = toy_dataset(rng, sequences=1, frames=40, hw=(16, 16))
    cfg = ModelConfig(
        variant="strcnn", window_m=1, encoder_blocks=1, decoder_blocks=1, channels=8, feature_channels=4
    )
    result = run_training(
        dataset,
        cfg,
        iterations=100,
        batch_size=2,
        seed=3,
        seq_len=4,
        crop=16,
        base_lr=2e-3,
        log_every=1,
    )
    first = result.log[0]["e_mse"]
    last = result.log[-1]["e_mse"]
    assert last < first
