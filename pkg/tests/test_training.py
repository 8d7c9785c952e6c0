"""Training orchestration: DAT mechanics, determinism, the noisy classifier."""

import numpy as np
import pytest

import melworld as mw
from melworld import autodiff as ad
from melworld.autodiff import Tensor
from melworld.training import (
    EmotionProbeHead,
    TrainingError,
    dat_step,
    noisy_classifier_accuracy,
    sgd_update,
)
from melworld.world import WorldConfig, sample_utterance_batch


@pytest.fixture(scope="module")
def world():
    return mw.make_world(WorldConfig(), seed=7)


@pytest.fixture(scope="module")
def split(world):
    return mw.split_speakers(world, 6, seed=0)


def small_config(**kw):
    base = dict(steps=50, batch_size=8, dat_probe_steps=2, clf_steps=50, utt_len=4)
    base.update(kw)
    return mw.TrainConfig(**base)


# ---------------------------------------------------------------------------
# dat_step


def test_dat_step_alpha_scaling(world):
    encoder = mw.StyleEncoder(world.frame_dim, seed=1)
    probe = EmotionProbeHead(16, world.n_emotions, seed=2)
    rng = np.random.default_rng(0)
    frames = rng.standard_normal((6, 4, world.frame_dim))
    labels = rng.integers(0, world.n_emotions, size=6)
    tiny = dat_step(encoder, probe, frames, labels, alpha=1e-9, lr=0.0,
                    apply_update=False)
    unit = dat_step(encoder, probe, frames, labels, alpha=1.0, lr=0.0,
                    apply_update=False)
    assert tiny["encoder_grad_norm"] < 1e-6 * unit["encoder_grad_norm"]
    # probe gradient is unaffected by alpha
    assert tiny["probe_grad_norm"] == pytest.approx(unit["probe_grad_norm"], rel=1e-12)


def test_dat_step_encoder_grad_is_minus_alpha_times_plain(world):
    # hand-checkable single-layer instance
    encoder = mw.StyleEncoder(world.frame_dim, style_dim=4, hidden=8, n_hidden=0, seed=3)
    probe = EmotionProbeHead(4, world.n_emotions, seed=4)
    rng = np.random.default_rng(1)
    frames = rng.standard_normal((3, 2, world.frame_dim))
    labels = np.array([0, 1, 2])

    def plain_encoder_grads():
        style = encoder.encode_t(Tensor(frames))
        loss = ad.softmax_cross_entropy(probe.logits_t(style), labels)
        encoder.params.zero_grad()
        probe.params.zero_grad()
        loss.backward()
        return {k: t.grad.copy() for k, t in encoder.params.tensors().items()}

    plain = plain_encoder_grads()
    for alpha in (0.25, 1.0, 4.0):
        dat_step(encoder, probe, frames, labels, alpha=alpha, lr=0.0,
                 apply_update=False)
        for name, tensor in encoder.params.tensors().items():
            assert np.array_equal(tensor.grad, -alpha * plain[name])


def test_dat_step_probe_descends(world):
    encoder = mw.StyleEncoder(world.frame_dim, seed=5)
    probe = EmotionProbeHead(16, world.n_emotions, seed=6)
    rng = np.random.default_rng(2)
    frames = rng.standard_normal((8, 3, world.frame_dim))
    labels = rng.integers(0, world.n_emotions, size=8)
    style = encoder.encode(frames)
    first = None
    for _ in range(5):
        loss = ad.softmax_cross_entropy(probe.logits_t(Tensor(style)), labels)
        if first is None:
            first = float(loss.data)
        probe.params.zero_grad()
        loss.backward()
        sgd_update([probe.params], 0.05)
    final = float(ad.softmax_cross_entropy(probe.logits_t(Tensor(style)), labels).data)
    assert final < first


def test_dat_step_requires_labels(world):
    encoder = mw.StyleEncoder(world.frame_dim, seed=1)
    probe = EmotionProbeHead(16, world.n_emotions, seed=2)
    with pytest.raises(TrainingError):
        dat_step(encoder, probe, np.zeros((0, 2, world.frame_dim)), np.zeros(0),
                 alpha=1.0, lr=0.1)


def test_dat_sign_property(world):
    # a step on L_e alone moves the encoder uphill and the probe downhill
    encoder = mw.StyleEncoder(world.frame_dim, seed=7)
    probe = EmotionProbeHead(16, world.n_emotions, seed=8)
    rng = np.random.default_rng(3)
    frames = rng.standard_normal((16, 4, world.frame_dim))
    labels = rng.integers(0, world.n_emotions, size=16)

    def loss_value():
        style = encoder.encode_t(Tensor(frames))
        return float(ad.softmax_cross_entropy(
            probe.logits_t(ad.grad_reverse(style, 1.0)), labels).data)

    before = loss_value()
    # encoder-only update from the reversed loss
    record = dat_step(encoder, probe, frames, labels, alpha=1.0, lr=0.0,
                      apply_update=False)
    assert record["loss_e"] == pytest.approx(before)
    for tensor in encoder.params.tensors().values():
        tensor.data = tensor.data - 0.01 * tensor.grad
    after_encoder_step = loss_value()
    assert after_encoder_step > before  # encoder ascends

    probe.params.zero_grad()
    encoder.params.zero_grad()
    style = encoder.encode_t(Tensor(frames))
    loss = ad.softmax_cross_entropy(probe.logits_t(ad.grad_reverse(style, 1.0)), labels)
    loss.backward()
    for tensor in probe.params.tensors().values():
        tensor.data = tensor.data - 0.01 * tensor.grad
    assert loss_value() < after_encoder_step  # probe descends


# ---------------------------------------------------------------------------
# train_model


def test_train_zero_steps_equals_init(world, split):
    config = small_config(steps=0)
    ckpt = mw.train_model(world, split, config)
    fresh = mw.build_model(world, mw.ModelConfig())
    for name, store in ckpt.model.stores().items():
        for pname, tensor in store.tensors().items():
            assert np.array_equal(tensor.data, fresh.stores()[name][pname].data)


def test_train_deterministic(world, split):
    config = small_config(steps=30)
    a = mw.train_model(world, split, config)
    b = mw.train_model(world, split, config)
    assert a.to_bytes() == b.to_bytes()


def test_train_records_trace(world, split):
    trace = []
    mw.train_model(world, split, small_config(steps=10), trace=trace)
    assert len(trace) == 10
    assert {"step", "total", "recon", "dsm", "dat", "grad_norm"} <= set(trace[0])


def test_train_rejects_empty_split(world):
    empty = mw.SpeakerSplit(seen=(), unseen=tuple(range(world.n_speakers)))
    with pytest.raises(TrainingError):
        mw.train_model(world, empty, small_config())


def test_null_row_gradient_tracks_dropout(world, split):
    # with p_null > 0 the null row moves over training; with p_null = 0 it
    # stays bitwise at initialization
    moved = mw.train_model(world, split, small_config(steps=60, p_null=0.5, seed=3))
    frozen = mw.train_model(world, split, small_config(steps=60, p_null=0.0, seed=3))
    init = mw.build_model(world, mw.ModelConfig())
    null_idx = init.table.null_index
    init_row = init.table.params["emb"].data[null_idx]
    assert not np.array_equal(moved.model.table.params["emb"].data[null_idx], init_row)
    assert np.array_equal(frozen.model.table.params["emb"].data[null_idx], init_row)


def test_config_validation():
    with pytest.raises(TrainingError):
        mw.TrainConfig(p_null=1.0)
    with pytest.raises(TrainingError):
        mw.TrainConfig(alpha=0.0)
    with pytest.raises(TrainingError):
        mw.TrainConfig(w_dat=-0.1)


# ---------------------------------------------------------------------------
# noisy classifier


@pytest.fixture(scope="module")
def clf_setup(world, split):
    model = mw.build_model(world, mw.ModelConfig())
    config = mw.TrainConfig(clf_steps=1500, clf_batch=32, utt_len=8)
    mw.train_noisy_classifier(world, split, model, config)
    return model


def test_noisy_classifier_accurate_near_clean_data(world, split, clf_setup):
    acc = noisy_classifier_accuracy(world, clf_setup, split.seen, t=0.05,
                                    n=500, utt_len=8, seed=1)
    assert acc > 0.9


def test_noisy_classifier_chance_at_terminal_time(world, split, clf_setup):
    acc = noisy_classifier_accuracy(world, clf_setup, split.seen, t=0.999,
                                    n=1000, utt_len=8, seed=2)
    assert abs(acc - 1.0 / world.n_emotions) < 0.05


def test_noisy_classifier_outputs_distribution(world, clf_setup):
    rng = np.random.default_rng(4)
    y = rng.standard_normal((50, 8, world.frame_dim))
    post = clf_setup.noisy_clf.posterior(y, np.full(50, 0.3))
    assert np.abs(post.sum(axis=1) - 1.0).max() < 1e-12
    assert np.all(post >= 0)


def test_noisy_classifier_rejects_single_class(world, split):
    model = mw.build_model(world, mw.ModelConfig())
    with pytest.raises(TrainingError):
        mw.train_noisy_classifier(world, split, model, small_config(), emotions=[1])


def test_noisy_classifier_grad_matches_finite_differences(world, clf_setup):
    clf = clf_setup.noisy_clf
    rng = np.random.default_rng(5)
    y = rng.standard_normal((4, world.frame_dim))
    t = 0.4
    grad = clf.grad_log_prob(y, t, 2)
    eps = 1e-6
    num = np.zeros_like(y)
    for idx in np.ndindex(y.shape):
        yp, ym = y.copy(), y.copy()
        yp[idx] += eps
        ym[idx] -= eps
        num[idx] = (np.log(clf.posterior(yp, t)[2]) - np.log(clf.posterior(ym, t)[2])) / (2 * eps)
    assert np.abs(grad - num).max() < 1e-6
