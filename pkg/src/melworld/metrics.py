"""Quantitative evaluation: oracle emotion accuracy, speaker similarity,
content fidelity, disentanglement probing, and guidance-scale sweeps.

All metrics are pure functions of (inputs, seed). The emotion accuracy
oracle is the world's exact Bayes classifier over emotions given the target
speaker and tokens, evaluated on clean generated frames; no learned
classifier can beat it on world-generated data beyond Monte-Carlo noise.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.special import softmax as np_softmax

from . import autodiff as ad
from .autodiff import Tensor
from .diffusion import sample_cfg, sample_cg, sample_reverse
from .training import Checkpoint, EmotionProbeHead, Model, sgd_update
from .world import NEUTRAL, World, sample_utterance_batch


class EvalError(Exception):
    """Raised for malformed metric inputs."""


@dataclass(frozen=True)
class EvalSample:
    """One generated sample plus the condition it was generated under."""

    frames: np.ndarray
    target_emotion: int
    speaker: int
    tokens: np.ndarray


@dataclass
class EvalReport:
    metric: str
    value: float
    n: int
    fingerprint: dict = field(default_factory=dict)

    def to_json(self) -> str:
        payload = {"metric": self.metric, "value": self.value, "n": self.n,
                   "fingerprint": self.fingerprint}
        return json.dumps(payload, sort_keys=True, separators=(",", ":"))


def checkpoint_hash(checkpoint: Checkpoint) -> str:
    return hashlib.sha256(checkpoint.to_bytes()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# core metrics


def bayes_emotion_posterior(world: World, frames, speaker: int, tokens) -> np.ndarray:
    """Exact posterior over emotions for clean frames, uniform prior.

    Likelihoods are spherical Gaussians around base + offset + token effect;
    rows combine by summing log-likelihoods.
    """
    frames = np.asarray(frames, dtype=np.float64)
    spk = world.check_speaker(speaker)
    toks = world.check_tokens(tokens)
    means = (world.speaker_base[spk] + world.emotion_offset)[:, None, :] \
        + world.token_effect[toks][None, :, :]
    diff = frames[None, :, :] - means
    loglik = -0.5 * (diff * diff).sum(axis=(1, 2)) / world.tau ** 2
    return np_softmax(loglik)


def eca_oracle(world: World, samples: list[EvalSample]) -> float:
    """Percentage of samples whose Bayes-optimal emotion equals the target."""
    if not samples:
        raise EvalError("eca_oracle requires at least one sample")
    hits = 0
    for sample in samples:
        post = bayes_emotion_posterior(world, sample.frames, sample.speaker, sample.tokens)
        hits += int(post.argmax()) == int(sample.target_emotion)
    return 100.0 * hits / len(samples)


def secs_analog(sample_embedding, reference_embedding) -> float:
    """Cosine similarity between two speaker embeddings; symmetric."""
    a = np.asarray(sample_embedding, dtype=np.float64).ravel()
    b = np.asarray(reference_embedding, dtype=np.float64).ravel()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise EvalError("cosine similarity undefined for zero vectors")
    return float(np.dot(a, b) / (na * nb))


def content_error(samples: list[EvalSample], world: World,
                  return_per_sample: bool = False):
    """Mean squared per-row deviation from the analytic condition mean.

    Each row contributes its squared L2 distance to the world's mean for
    (speaker, target emotion, token); samples drawn from the true
    distribution average to frame_dim * tau^2.
    """
    if not samples:
        raise EvalError("content_error requires at least one sample")
    per_sample = []
    for sample in samples:
        toks = world.check_tokens(sample.tokens)
        frames = np.asarray(sample.frames, dtype=np.float64)
        if frames.shape != (toks.size, world.frame_dim):
            raise EvalError(f"frames shape {frames.shape} does not match "
                            f"{toks.size} tokens x {world.frame_dim} dims")
        mean = (world.speaker_base[world.check_speaker(sample.speaker)]
                + world.emotion_offset[world.check_emotion(sample.target_emotion)])[None, :] \
            + world.token_effect[toks]
        per_sample.append(float(((frames - mean) ** 2).sum(axis=1).mean()))
    value = float(np.mean(per_sample))
    return (value, per_sample) if return_per_sample else value


def probe_disentanglement(style_vectors, labels, budget: int = 2000,
                          seed: int = 0, lr: float = 0.05,
                          batch_size: int = 32) -> float:
    """Held-out accuracy (percent) of a freshly initialized softmax probe.

    Trains on a deterministic 80% split of the vectors. High accuracy means
    the style vectors still carry emotion; chance-level accuracy means the
    information was disentangled away.
    """
    vectors = np.asarray(style_vectors, dtype=np.float64)
    labels_arr = np.asarray(labels, dtype=np.int64)
    if vectors.ndim != 2 or vectors.shape[0] != labels_arr.size:
        raise EvalError("style vectors and labels must align")
    classes, counts = np.unique(labels_arr, return_counts=True)
    if counts.min() < 10:
        raise EvalError(f"every class needs at least 10 vectors, got {counts.min()}")
    n_classes = int(classes.max()) + 1
    rng = np.random.default_rng(seed)
    order = rng.permutation(vectors.shape[0])
    n_train = int(round(0.8 * vectors.shape[0]))
    train_idx, test_idx = order[:n_train], order[n_train:]
    probe = EmotionProbeHead(vectors.shape[1], n_classes, seed=seed)
    for _ in range(budget):
        pick = rng.integers(0, train_idx.size, size=batch_size)
        xb = vectors[train_idx[pick]]
        yb = labels_arr[train_idx[pick]]
        loss = ad.softmax_cross_entropy(probe.logits_t(Tensor(xb)), yb)
        probe.params.zero_grad()
        loss.backward()
        sgd_update([probe.params], lr)
    pred = probe.posterior(vectors[test_idx]).argmax(axis=-1)
    return float(100.0 * (pred == labels_arr[test_idx]).mean())


def speaker_id_accuracy(world: World, samples: list[EvalSample]) -> float:
    """Nearest-speaker-mean identification of generated samples (percent).

    The known emotion offset and token effects are subtracted first, so the
    pooled residual estimates the speaker base directly.
    """
    if not samples:
        raise EvalError("speaker_id_accuracy requires at least one sample")
    hits = 0
    for sample in samples:
        toks = world.check_tokens(sample.tokens)
        residual = sample.frames \
            - world.emotion_offset[world.check_emotion(sample.target_emotion)][None, :] \
            - world.token_effect[toks]
        estimate = residual.mean(axis=0)
        nearest = np.linalg.norm(world.speaker_base - estimate, axis=1).argmin()
        hits += int(nearest) == int(sample.speaker)
    return 100.0 * hits / len(samples)


# ---------------------------------------------------------------------------
# evaluation protocol: condition grid, generation, per-cell metrics


def make_scripts(world: World, n_scripts: int, length: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng([seed, 0x5C12])
    return rng.integers(0, world.vocab, size=(n_scripts, length))


def generate_eval_samples(model: Model, world: World, speakers, mode: str,
                          gamma: float, n_samples: int, seed: int,
                          steps: int = 100, n_scripts: int = 10,
                          script_len: int = 8, stochastic: bool = True,
                          ) -> tuple[list[EvalSample], np.ndarray, np.ndarray]:
    """Generate samples under the zero-shot evaluation protocol; returns
    (samples, reference frames, reference style vectors).

    Conditions cycle over the given speakers, all emotions, and a fixed set
    of scripts. References are always freshly sampled *Neutral* utterances
    of the target speaker: the unseen-speaker path never reads emotional
    reference material.
    """
    if mode not in ("none", "cfg", "cg"):
        raise EvalError(f"unknown sampling mode '{mode}'")
    speakers = np.asarray(list(speakers), dtype=np.int64)
    scripts = make_scripts(world, n_scripts, script_len, seed)
    rng = np.random.default_rng([seed, 0xE7A1])
    spk = speakers[np.arange(n_samples) % speakers.size]
    targets = np.arange(n_samples) % world.n_emotions
    tokens = scripts[np.arange(n_samples) % n_scripts]
    ref_tokens = rng.integers(0, world.vocab, size=(n_samples, script_len))
    refs = sample_utterance_batch(world, spk, np.full(n_samples, NEUTRAL, dtype=np.int64),
                                  ref_tokens, rng)
    styles = model.encoder.encode(refs)
    sampler_seed = rng.integers(0, 2 ** 63 - 1)
    if mode == "none":
        e_cond = model.table.params["emb"].data[targets]
        mu = model.generator.generate(tokens, styles, e_cond)
        frames = sample_reverse(model.scorenet, mu, styles, e_cond, model.schedule,
                                steps, sampler_seed, stochastic=stochastic)
    elif mode == "cfg":
        frames = sample_cfg(model.scorenet, model.generator, model.table, tokens,
                            styles, targets, model.schedule, steps, gamma,
                            sampler_seed, stochastic=stochastic)
    else:
        frames = sample_cg(model.scorenet, model.noisy_clf, model.generator,
                           model.table, tokens, styles, targets, model.schedule,
                           steps, gamma, sampler_seed, stochastic=stochastic)
    return [
        EvalSample(frames=frames[i], target_emotion=int(targets[i]),
                   speaker=int(spk[i]), tokens=tokens[i])
        for i in range(n_samples)
    ], refs, styles


def _speaker_embeddings(world: World, samples: list[EvalSample],
                        refs: np.ndarray, styles: np.ndarray, model: Model):
    """Both SECS embedding candidates: mean frame minus the predicted
    emotion offset, and the style vector."""
    secs_frame = []
    secs_style = []
    ref_styles = styles
    for i, sample in enumerate(samples):
        emb_sample = sample.frames.mean(axis=0) - world.emotion_offset[sample.target_emotion]
        emb_ref = refs[i].mean(axis=0)
        secs_frame.append(secs_analog(emb_sample, emb_ref))
        style_sample = model.encoder.encode(sample.frames)
        secs_style.append(secs_analog(style_sample, ref_styles[i]))
    return float(np.mean(secs_frame)), float(np.mean(secs_style))


@dataclass
class SweepRow:
    gamma: float
    mode: str
    eca: float
    content_error: float
    secs_mean_frame: float
    secs_style: float
    n: int


@dataclass
class SweepResult:
    rows: list[SweepRow]
    fingerprint: dict

    def to_csv(self) -> str:
        lines = ["gamma,mode,eca,content_error,secs_mean_frame,secs_style,n"]
        for row in self.rows:
            lines.append(f"{row.gamma:g},{row.mode},{row.eca:.4f},"
                         f"{row.content_error:.6f},{row.secs_mean_frame:.6f},"
                         f"{row.secs_style:.6f},{row.n}")
        return "\n".join(lines) + "\n"


def evaluate_cell(model: Model, world: World, speakers, mode: str, gamma: float,
                  n_samples: int, seed: int, steps: int = 100,
                  n_scripts: int = 10, script_len: int = 8,
                  stochastic: bool = True) -> SweepRow:
    samples, refs, styles = generate_eval_samples(
        model, world, speakers, mode, gamma, n_samples, seed, steps,
        n_scripts, script_len, stochastic)
    secs_frame, secs_style = _speaker_embeddings(world, samples, refs, styles, model)
    return SweepRow(
        gamma=float(gamma),
        mode=mode,
        eca=eca_oracle(world, samples),
        content_error=content_error(samples, world),
        secs_mean_frame=secs_frame,
        secs_style=secs_style,
        n=n_samples,
    )


def guidance_sweep(checkpoint: Checkpoint, world: World, speakers, gammas,
                   mode: str, n_samples: int, seed: int, steps: int = 100,
                   n_scripts: int = 10, script_len: int = 8,
                   stochastic: bool = True) -> SweepResult:
    """One metrics row per gamma, each from fresh samples; emits CSV."""
    gammas = list(gammas)
    if not gammas:
        raise EvalError("gammas must be nonempty")
    if any(b < a for a, b in zip(gammas, gammas[1:])):
        raise EvalError("gammas must be ascending")
    rows = [
        evaluate_cell(checkpoint.model, world, speakers, mode, gamma,
                      n_samples, seed, steps, n_scripts, script_len, stochastic)
        for gamma in gammas
    ]
    fingerprint = {
        "world_hash": checkpoint.world_hash,
        "checkpoint_hash": checkpoint_hash(checkpoint),
        "mode": mode,
        "seed": seed,
        "gammas": [float(g) for g in gammas],
    }
    return SweepResult(rows=rows, fingerprint=fingerprint)


# ---------------------------------------------------------------------------
# style-vector export for external projection tools


def collect_style_vectors(world: World, model: Model, speakers, per_emotion: int,
                          utt_len: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Style vectors of fresh utterances for every (speaker-cycled, emotion)
    cell, used both by the disentanglement probe and the TSV export."""
    speakers = np.asarray(list(speakers), dtype=np.int64)
    rng = np.random.default_rng([seed, 0x57FE])
    all_vectors = []
    all_labels = []
    for emotion in range(world.n_emotions):
        spk = speakers[np.arange(per_emotion) % speakers.size]
        tokens = rng.integers(0, world.vocab, size=(per_emotion, utt_len))
        frames = sample_utterance_batch(
            world, spk, np.full(per_emotion, emotion, dtype=np.int64), tokens, rng)
        all_vectors.append(model.encoder.encode(frames))
        all_labels.append(np.full(per_emotion, emotion, dtype=np.int64))
    return np.concatenate(all_vectors), np.concatenate(all_labels)


def styles_tsv(vectors: np.ndarray, labels: np.ndarray) -> str:
    lines = ["\t".join(["emotion"] + [f"s{i}" for i in range(vectors.shape[1])])]
    for label, vec in zip(labels, vectors):
        lines.append("\t".join([str(int(label))] + [f"{v:.10g}" for v in vec]))
    return "\n".join(lines) + "\n"
