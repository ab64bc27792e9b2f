"""Discrete skill extraction from offline trajectories.

A transformer encoder maps fixed-length state-action windows to continuous
embeddings, a learnable codebook snaps them to the nearest of K skill
vectors, and the diffusion decoder is trained to reconstruct the window's
actions conditioned on (skill, state).  All three are optimized jointly.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import read_arrays, read_sidecar, write_arrays, write_sidecar
from .diffusion import NoiseNet, NoiseSchedule, build_schedule, noise_pred_loss
from .nn import Dropout, Linear, Module, ModuleList, Parameter, TransformerEncoderLayer
from .optim import Adam
from .tensor import NumericFault, Tensor


@dataclass
class TrajectoryWindow:
    """One H-step snippet of an episode; never spans an episode boundary."""

    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    episode_id: int
    start_index: int

    def __post_init__(self):
        h = self.states.shape[0]
        if self.actions.shape[0] != h or self.rewards.shape[0] != h:
            raise T.ShapeError("TrajectoryWindow", self.states.shape, self.actions.shape)


def iter_windows(states, actions, rewards, horizon, episode_id=0):
    """Non-overlapping H-windows at offsets 0, H, 2H, ...; remainder dropped."""
    if horizon < 1:
        raise ValueError(f"horizon must be >= 1, got {horizon}")
    length = states.shape[0]
    out = []
    for start in range(0, length - horizon + 1, horizon):
        stop = start + horizon
        out.append(TrajectoryWindow(
            states=states[start:stop],
            actions=actions[start:stop],
            rewards=rewards[start:stop],
            episode_id=episode_id,
            start_index=start,
        ))
    return out


@dataclass
class EncoderConfig:
    skill_dim: int
    horizon: int
    layers: int = 4
    heads: int = 8
    hidden: int = 256
    dropout: float = 0.1

    def __post_init__(self):
        if self.hidden % self.heads != 0:
            raise ValueError(f"hidden ({self.hidden}) not divisible by heads ({self.heads})")

    def to_dict(self):
        return {
            "skill_dim": self.skill_dim, "horizon": self.horizon, "layers": self.layers,
            "heads": self.heads, "hidden": self.hidden, "dropout": self.dropout,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class SkillEncoder(Module):
    """state-action window (H steps) -> continuous skill embedding (D_z)."""

    def __init__(self, state_dim, action_dim, cfg: EncoderConfig, rng):
        super().__init__()
        self.cfg = cfg
        self.embed = Linear(state_dim + action_dim, cfg.hidden, rng)
        self.positional = Parameter(rng.normal(0.0, 0.02, size=(cfg.horizon, cfg.hidden)))
        self.blocks = ModuleList(
            TransformerEncoderLayer(cfg.hidden, cfg.heads, cfg.dropout, rng)
            for _ in range(cfg.layers)
        )
        self.drop = Dropout(cfg.dropout, rng)
        self.proj1 = Linear(cfg.hidden, cfg.hidden, rng)
        self.proj2 = Linear(cfg.hidden, cfg.skill_dim, rng)

    def forward(self, states, actions):
        states = T.as_tensor(states)
        actions = T.as_tensor(actions)
        if states.shape[1] != self.cfg.horizon:
            raise T.ShapeError("encoder horizon", states.shape, (self.cfg.horizon,))
        x = T.concat([states, actions], axis=2)
        x = self.embed(x)
        x = self.drop(T.add(x, self.positional))
        for block in self.blocks:
            x = block(x)
        pooled = T.mean_pool(x, axis=1)
        return self.proj2(T.relu(self.proj1(pooled)))


class Codebook(Module):
    """K learnable skill vectors with per-epoch usage statistics."""

    def __init__(self, num_skills, skill_dim, rng):
        super().__init__()
        if num_skills < 1:
            raise ValueError(f"need at least one skill vector, got {num_skills}")
        self.num_skills = num_skills
        self.skill_dim = skill_dim
        self.vectors = Parameter(
            rng.normal(0.0, 1.0, size=(num_skills, skill_dim)) / np.sqrt(skill_dim)
        )
        self.usage_counts = np.zeros(num_skills, dtype=np.int64)

    def reset_usage(self):
        self.usage_counts[:] = 0


def nearest_code(embeddings, vectors):
    """Indices of the closest codebook row per embedding; ties -> lowest index."""
    emb = np.atleast_2d(embeddings)
    if vectors.shape[0] == 0:
        raise ValueError("empty codebook")
    if emb.shape[1] != vectors.shape[1]:
        raise T.ShapeError("nearest_code", emb.shape, vectors.shape)
    d2 = (
        (emb * emb).sum(axis=1, keepdims=True)
        - 2.0 * emb @ vectors.T
        + (vectors * vectors).sum(axis=1)
    )
    return np.argmin(d2, axis=1)


def quantize(embedding, codebook: Codebook):
    """Snap one embedding to its nearest skill vector; counts the usage."""
    emb = embedding.data if isinstance(embedding, Tensor) else np.asarray(embedding)
    idx = int(nearest_code(emb.reshape(1, -1), codebook.vectors.data)[0])
    codebook.usage_counts[idx] += 1
    return idx, codebook.vectors.data[idx].copy()


def quantize_batch(embeddings, codebook: Codebook):
    """Vectorized quantize; returns indices and updates usage counts."""
    emb = embeddings.data if isinstance(embeddings, Tensor) else np.asarray(embeddings)
    idx = nearest_code(emb, codebook.vectors.data)
    np.add.at(codebook.usage_counts, idx, 1)
    return idx


def straight_through(embedding, quantized):
    """Forward the quantized value; pass the gradient to the embedding unchanged."""
    embedding = T.as_tensor(embedding)
    quantized = T.as_tensor(quantized)
    if embedding.shape != quantized.shape:
        raise T.ShapeError("straight_through", embedding.shape, quantized.shape)

    def backward(g):
        return ((embedding, g),)

    return T._make(quantized.data, (embedding,), backward)


def perplexity(codebook: Codebook):
    """exp(entropy) of the empirical code-usage distribution; in [1, K]."""
    total = codebook.usage_counts.sum()
    if total == 0:
        raise ValueError("perplexity undefined: no recorded codebook usage")
    p = codebook.usage_counts / total
    nz = p[p > 0]
    return float(np.exp(-(nz * np.log(nz)).sum()))


@dataclass
class SkillLossReport:
    reconstruction: float
    codebook: float
    commitment: float
    beta: float
    total: float
    loss: Tensor = field(default=None, repr=False, compare=False)


def skill_loss(states, actions, encoder, codebook, decoder, schedule, beta,
               t=None, eps=None, rng=None):
    """Joint objective for one batch of windows.

    Reconstruction is the diffusion noise-prediction loss averaged over every
    step of every window, each step with its own (t, eps) draw; the codebook
    term pulls chosen codes toward embeddings, the commitment term (weight
    beta) pulls embeddings toward their codes.
    """
    states = np.asarray(states)
    actions = np.asarray(actions)
    if states.ndim == 2:
        states = states[None]
        actions = actions[None]
    b, h, _ = states.shape

    emb = encoder(states, actions)
    idx = quantize_batch(emb.data, codebook)
    z = T.take_rows(codebook.vectors, idx)
    decoder_input = straight_through(emb, z)

    flat = np.repeat(np.arange(b), h)
    z_flat = T.take_rows(decoder_input, flat)
    s_flat = states.reshape(b * h, -1)
    a_flat = actions.reshape(b * h, -1)
    if t is None:
        t = rng.integers(1, schedule.T + 1, size=b * h)
    if eps is None:
        eps = rng.standard_normal(a_flat.shape)
    recon = noise_pred_loss(a_flat, s_flat, z_flat, t, eps, decoder, schedule)

    code_diff = T.sub(emb.detach(), z)
    code_term = T.reduce_mean(T.mul(code_diff, code_diff))
    commit_diff = T.sub(z.detach(), emb)
    commit_term = T.reduce_mean(T.mul(commit_diff, commit_diff))

    total = T.add(T.add(recon, code_term), T.mul(commit_term, beta))
    return SkillLossReport(
        reconstruction=recon.item(),
        codebook=code_term.item(),
        commitment=commit_term.item(),
        beta=beta,
        total=total.item(),
        loss=total,
    )


@dataclass
class SkillTrainConfig:
    num_skills: int = 16
    skill_dim: int = 128
    horizon: int = 10
    beta: float = 0.25
    learning_rate: float = 5e-5
    batch_size: int = 128
    gradient_steps: int = 500_000
    steps_per_epoch: int = 0          # 0 -> one pass over the windows
    diffusion_steps: int = 5
    beta_min: float = 0.1
    beta_max: float = 10.0
    encoder_layers: int = 4
    encoder_heads: int = 8
    encoder_hidden: int = 256
    dropout: float = 0.1
    decoder_hidden: int = 256
    decoder_blocks: int = 4
    time_embedding_dim: int = 16

    def encoder_config(self):
        return EncoderConfig(
            skill_dim=self.skill_dim, horizon=self.horizon, layers=self.encoder_layers,
            heads=self.encoder_heads, hidden=self.encoder_hidden, dropout=self.dropout,
        )


@dataclass
class Normalization:
    """Zero-mean / unit-variance statistics from the training dataset."""

    state_mean: np.ndarray
    state_std: np.ndarray
    action_mean: np.ndarray
    action_std: np.ndarray

    @classmethod
    def fit(cls, states, actions):
        eps = 1e-6
        return cls(
            state_mean=states.mean(axis=0),
            state_std=states.std(axis=0) + eps,
            action_mean=actions.mean(axis=0),
            action_std=actions.std(axis=0) + eps,
        )

    def norm_states(self, s):
        return (s - self.state_mean) / self.state_std

    def norm_actions(self, a):
        return (a - self.action_mean) / self.action_std

    def denorm_actions(self, a):
        return a * self.action_std + self.action_mean

    def to_dict(self):
        return {
            "state_mean": self.state_mean.tolist(), "state_std": self.state_std.tolist(),
            "action_mean": self.action_mean.tolist(), "action_std": self.action_std.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(*(np.asarray(d[k], dtype=np.float64)
                     for k in ("state_mean", "state_std", "action_mean", "action_std")))


class SkillModel:
    """Trained encoder + codebook + decoder bundle with its normalization."""

    def __init__(self, encoder, codebook, decoder, schedule, norm, config: SkillTrainConfig):
        self.encoder = encoder
        self.codebook = codebook
        self.decoder = decoder
        self.schedule = schedule
        self.norm = norm
        self.config = config

    def eval(self):
        self.encoder.eval()
        self.decoder.eval()
        return self

    def train(self):
        self.encoder.train()
        self.decoder.train()
        return self

    @property
    def horizon(self):
        return self.config.horizon

    @property
    def state_dim(self):
        return self.decoder.state_dim

    @property
    def action_dim(self):
        return self.decoder.action_dim

    def encode(self, window: TrajectoryWindow):
        """Deterministic eval-mode embedding of one raw (unnormalized) window."""
        return self.encode_batch(window.states[None], window.actions[None])[0]

    def encode_batch(self, states, actions):
        """Eval-mode embeddings for raw windows stacked as (B, H, dim)."""
        was_training = self.encoder.training
        self.encoder.eval()
        with T.no_grad():
            s = self.norm.norm_states(states).astype(T.DEFAULT_DTYPE)
            a = self.norm.norm_actions(actions).astype(T.DEFAULT_DTYPE)
            emb = self.encoder(s, a).data
        if was_training:
            self.encoder.train()
        return emb

    def sidecar_payload(self):
        return {
            "kind": "skill-checkpoint",
            "encoder": self.config.encoder_config().to_dict(),
            "num_skills": self.config.num_skills,
            "skill_dim": self.config.skill_dim,
            "horizon": self.config.horizon,
            "beta": self.config.beta,
            "normalization": self.norm.to_dict(),
            "schedule": self.schedule.to_dict(),
            "train_config": {
                k: getattr(self.config, k)
                for k in ("learning_rate", "batch_size", "gradient_steps", "decoder_hidden",
                          "decoder_blocks", "time_embedding_dim", "dropout")
            },
            "dims": {
                "state": self.encoder.embed.weight.shape[0] - self.decoder.action_dim,
                "action": self.decoder.action_dim,
            },
        }

    def fingerprint(self):
        payload = json.dumps(self.sidecar_payload(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def save(self, path):
        path = str(path)
        arrays = {}
        for prefix, module in (("encoder", self.encoder), ("decoder", self.decoder)):
            for name, p in module.named_parameters():
                arrays[f"{prefix}.{name}"] = p.data
        arrays["codebook.vectors"] = self.codebook.vectors.data
        write_arrays(path, arrays)
        write_sidecar(path + ".json", self.sidecar_payload())

    @classmethod
    def load(cls, path, rng):
        path = str(path)
        # Init rng is irrelevant here: every parameter is overwritten below.
        if hasattr(rng, "stream"):
            rng = rng.stream("checkpoint-init")
        side = read_sidecar(path + ".json")
        enc_cfg = EncoderConfig.from_dict(side["encoder"])
        dims = side["dims"]
        tc = side["train_config"]
        config = SkillTrainConfig(
            num_skills=side["num_skills"], skill_dim=side["skill_dim"],
            horizon=side["horizon"], beta=side["beta"],
            learning_rate=tc["learning_rate"], batch_size=tc["batch_size"],
            gradient_steps=tc["gradient_steps"],
            encoder_layers=enc_cfg.layers, encoder_heads=enc_cfg.heads,
            encoder_hidden=enc_cfg.hidden, dropout=tc["dropout"],
            decoder_hidden=tc["decoder_hidden"], decoder_blocks=tc["decoder_blocks"],
            time_embedding_dim=tc["time_embedding_dim"],
        )
        encoder = SkillEncoder(dims["state"], dims["action"], enc_cfg, rng)
        decoder = NoiseNet(
            dims["action"], dims["state"], side["skill_dim"], rng,
            hidden=tc["decoder_hidden"], time_dim=tc["time_embedding_dim"],
            blocks=tc["decoder_blocks"], dropout=tc["dropout"],
        )
        codebook = Codebook(side["num_skills"], side["skill_dim"], rng)
        arrays = read_arrays(path)
        encoder.load_state_dict(
            {k[len("encoder."):]: v for k, v in arrays.items() if k.startswith("encoder.")}
        )
        decoder.load_state_dict(
            {k[len("decoder."):]: v for k, v in arrays.items() if k.startswith("decoder.")}
        )
        codebook.vectors.data = np.ascontiguousarray(
            arrays["codebook.vectors"].astype(codebook.vectors.data.dtype)
        )
        schedule = NoiseSchedule.from_dict(side["schedule"])
        norm = Normalization.from_dict(side["normalization"])
        model = cls(encoder, codebook, decoder, schedule, norm, config)
        model.eval()
        return model, side


def collect_windows(episodes, horizon):
    """All episode-respecting windows of the dataset, with script labels kept."""
    windows = []
    labels = []
    for ep_id, ep in enumerate(episodes):
        for w in iter_windows(ep.states, ep.actions, ep.rewards, horizon, episode_id=ep_id):
            windows.append(w)
            labels.append(getattr(ep, "script", ""))
    return windows, labels


def train_skills(episodes, config: SkillTrainConfig, run_rng, log=None):
    """Joint training of encoder, codebook, and diffusion decoder.

    `episodes` is a sequence of objects with .states/.actions/.rewards arrays.
    Returns the trained SkillModel; per-epoch reports go through `log`.
    """
    windows, _ = collect_windows(episodes, config.horizon)
    if not windows:
        raise ValueError(
            f"dataset yields no window of length {config.horizon}; "
            "every episode is shorter than the horizon"
        )
    state_dim = windows[0].states.shape[1]
    action_dim = windows[0].actions.shape[1]

    all_states = np.concatenate([w.states for w in windows], axis=0)
    all_actions = np.concatenate([w.actions for w in windows], axis=0)
    norm = Normalization.fit(all_states, all_actions)

    states = np.stack([norm.norm_states(w.states) for w in windows]).astype(T.DEFAULT_DTYPE)
    actions = np.stack([norm.norm_actions(w.actions) for w in windows]).astype(T.DEFAULT_DTYPE)

    init_rng = run_rng.stream("skill-init")
    encoder = SkillEncoder(state_dim, action_dim, config.encoder_config(), init_rng)
    decoder = NoiseNet(
        action_dim, state_dim, config.skill_dim, init_rng,
        hidden=config.decoder_hidden, time_dim=config.time_embedding_dim,
        blocks=config.decoder_blocks, dropout=config.dropout,
    )
    codebook = Codebook(config.num_skills, config.skill_dim, init_rng)
    schedule = build_schedule(config.diffusion_steps, config.beta_min, config.beta_max)

    params = (
        [(f"encoder.{n}", p) for n, p in encoder.named_parameters()]
        + [(f"decoder.{n}", p) for n, p in decoder.named_parameters()]
        + [("codebook.vectors", codebook.vectors)]
    )
    opt = Adam(params, lr=config.learning_rate)
    batch_rng = run_rng.stream("skill-batch")
    noise_rng = run_rng.stream("skill-noise")

    n = len(windows)
    per_epoch = config.steps_per_epoch or max(1, n // max(config.batch_size, 1))
    encoder.train()
    decoder.train()
    codebook.reset_usage()
    epoch_acc = []

    for step in range(1, config.gradient_steps + 1):
        take = min(config.batch_size, n)
        batch = batch_rng.choice(n, size=take, replace=n < config.batch_size)
        report = skill_loss(
            states[batch], actions[batch], encoder, codebook, decoder,
            schedule, config.beta, rng=noise_rng,
        )
        if not np.isfinite(report.total):
            raise NumericFault(
                f"skill training diverged at step {step}: "
                f"recon={report.reconstruction} codebook={report.codebook} "
                f"commitment={report.commitment}"
            )
        opt.zero_grad()
        report.loss.backward()
        opt.step()
        epoch_acc.append(report)

        if step % per_epoch == 0 or step == config.gradient_steps:
            mean = lambda key: float(np.mean([getattr(r, key) for r in epoch_acc]))
            summary = SkillLossReport(
                reconstruction=mean("reconstruction"), codebook=mean("codebook"),
                commitment=mean("commitment"), beta=config.beta, total=mean("total"),
            )
            if log is not None:
                log(step, summary, perplexity(codebook))
            epoch_acc = []
            if step != config.gradient_steps:
                codebook.reset_usage()

    model = SkillModel(encoder, codebook, decoder, schedule, norm, config)
    model.eval()
    return model
