"""Offline Q-learning over discrete skills with expectile value regression.

The value net regresses toward an upper expectile of the twin target
critics, the critics chase one-step targets bootstrapped through the value
net, and the policy is extracted by advantage-weighted regression.  Every
update touches only its own network's parameters.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .checkpoint import read_arrays, read_sidecar, write_arrays, write_sidecar
from .nn import MLP
from .optim import Adam, ema_update
from .skills import Normalization
from .tensor import NumericFault


def expectile_loss(u, tau):
    """Asymmetric squared loss |tau - 1(u < 0)| * u^2."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must be in (0, 1), got {tau}")
    u = np.asarray(u, dtype=np.float64)
    weight = np.where(u < 0.0, 1.0 - tau, tau)
    return weight * u * u


@dataclass
class IQLConfig:
    num_skills: int
    tau: float = 0.7
    learning_rate: float = 1e-4
    batch_size: int = 256
    q_steps: int = 1_000_000
    awr_steps: int = 500_000
    ema_alpha: float = 0.005
    gamma_high: float | None = None   # None -> gamma ** horizon from the dataset
    awr_temperature: float = 3.0
    advantage_clip: float = 100.0
    hidden: int = 256

    def __post_init__(self):
        if not 0.0 < self.tau < 1.0:
            raise ValueError(f"tau must be in (0, 1), got {self.tau}")
        if self.advantage_clip <= 0.0:
            raise ValueError(f"advantage clip must be positive, got {self.advantage_clip}")

    def to_dict(self):
        return {
            "num_skills": self.num_skills, "tau": self.tau,
            "learning_rate": self.learning_rate, "batch_size": self.batch_size,
            "q_steps": self.q_steps, "awr_steps": self.awr_steps,
            "ema_alpha": self.ema_alpha, "gamma_high": self.gamma_high,
            "awr_temperature": self.awr_temperature,
            "advantage_clip": self.advantage_clip, "hidden": self.hidden,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


class HighLevelModel:
    """Twin critics with EMA targets, value net, and skill policy over K skills."""

    def __init__(self, state_dim, config: IQLConfig, rng, norm: Normalization):
        self.state_dim = state_dim
        self.config = config
        self.norm = norm
        k, h = config.num_skills, config.hidden
        self.q1 = MLP([state_dim, h, h, k], rng)
        self.q2 = MLP([state_dim, h, h, k], rng)
        self.q1_target = MLP([state_dim, h, h, k], rng)
        self.q2_target = MLP([state_dim, h, h, k], rng)
        self.q1_target.load_state_dict(self.q1.state_dict())
        self.q2_target.load_state_dict(self.q2.state_dict())
        self.value = MLP([state_dim, h, h, 1], rng)
        self.policy = MLP([state_dim, h, h, k], rng)

    def norm_states(self, s):
        return self.norm.norm_states(np.asarray(s)).astype(T.DEFAULT_DTYPE)

    def target_q_min(self, states_norm, skills):
        """min over the two EMA target heads at (s, k); plain array, no graph."""
        with T.no_grad():
            q1 = self.q1_target(states_norm).data
            q2 = self.q2_target(states_norm).data
        k = self.config.num_skills
        if np.any(skills < 0) or np.any(skills >= k):
            raise IndexError(f"skill index out of range [0, {k})")
        rows = np.arange(len(skills))
        return np.minimum(q1, q2)[rows, skills]

    def value_of(self, states_norm):
        with T.no_grad():
            return self.value(states_norm).data[:, 0]

    def policy_logits(self, state):
        with T.no_grad():
            return self.policy(self.norm_states(np.atleast_2d(state))).data

    def sidecar_payload(self, extra=None):
        payload = {
            "kind": "highlevel-checkpoint",
            "state_dim": self.state_dim,
            "config": self.config.to_dict(),
            "normalization": self.norm.to_dict(),
        }
        if extra:
            payload.update(extra)
        return payload

    def fingerprint(self):
        payload = json.dumps(self.sidecar_payload(), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def save(self, path, extra=None):
        path = str(path)
        arrays = {}
        for prefix, module in self._modules():
            for name, p in module.named_parameters():
                arrays[f"{prefix}.{name}"] = p.data
        write_arrays(path, arrays)
        write_sidecar(path + ".json", self.sidecar_payload(extra))

    def _modules(self):
        return (
            ("q1", self.q1), ("q2", self.q2),
            ("q1_target", self.q1_target), ("q2_target", self.q2_target),
            ("value", self.value), ("policy", self.policy),
        )

    @classmethod
    def load(cls, path, rng):
        path = str(path)
        if hasattr(rng, "stream"):
            rng = rng.stream("checkpoint-init")
        side = read_sidecar(path + ".json")
        config = IQLConfig.from_dict(side["config"])
        norm = Normalization.from_dict(side["normalization"])
        model = cls(side["state_dim"], config, rng, norm)
        arrays = read_arrays(path)
        for prefix, module in model._modules():
            module.load_state_dict(
                {k[len(prefix) + 1:]: v for k, v in arrays.items() if k.startswith(prefix + ".")}
            )
        return model, side


class IQLTrainer:
    """Owns the optimizers; each update zeroes and steps only its own net."""

    def __init__(self, model: HighLevelModel):
        self.model = model
        cfg = model.config
        self.opt_value = Adam(list(model.value.named_parameters()), lr=cfg.learning_rate)
        self.opt_q = Adam(
            [(f"q1.{n}", p) for n, p in model.q1.named_parameters()]
            + [(f"q2.{n}", p) for n, p in model.q2.named_parameters()],
            lr=cfg.learning_rate,
        )
        self.opt_policy = Adam(list(model.policy.named_parameters()), lr=cfg.learning_rate)

    def value_update(self, states, skills):
        """Expectile regression of V toward min target-Q at the batch's skills."""
        m = self.model
        s = m.norm_states(states)
        target = m.target_q_min(s, skills)
        v = m.value(s)
        u = T.sub(T.constant(target[:, None].astype(v.dtype)), v)
        weight = np.where(u.data < 0.0, 1.0 - m.config.tau, m.config.tau)
        loss = T.reduce_mean(T.mul(T.constant(weight.astype(v.dtype)), T.mul(u, u)))
        self.opt_value.zero_grad()
        loss.backward()
        self.opt_value.step()
        return loss.item()

    def q_update(self, states, skills, rewards, next_states, terminals, gamma_high):
        """Regress both online heads to r + gamma_high * V(s') and EMA the targets."""
        m = self.model
        s = m.norm_states(states)
        sp = m.norm_states(next_states)
        not_done = 1.0 - np.asarray(terminals, dtype=np.float64)
        y = np.asarray(rewards, dtype=np.float64) + gamma_high * m.value_of(sp) * not_done
        y_t = T.constant(y[:, None].astype(T.DEFAULT_DTYPE))

        skills = np.asarray(skills, dtype=np.int64)
        if np.any(skills < 0) or np.any(skills >= m.config.num_skills):
            raise IndexError(f"skill index out of range [0, {m.config.num_skills})")

        def head_loss(net):
            q = T.gather_columns(net(s), skills)
            d = T.sub(T.reshape(q, (len(skills), 1)), y_t)
            return T.reduce_mean(T.mul(d, d))

        loss = T.add(head_loss(m.q1), head_loss(m.q2))
        self.opt_q.zero_grad()
        loss.backward()
        self.opt_q.step()
        ema_update(
            list(m.q1_target.named_parameters()), list(m.q1.named_parameters()),
            m.config.ema_alpha,
        )
        ema_update(
            list(m.q2_target.named_parameters()), list(m.q2.named_parameters()),
            m.config.ema_alpha,
        )
        return loss.item()

    def awr_update(self, states, skills):
        """Weighted negative log-likelihood with exponentiated clipped advantages."""
        m = self.model
        cfg = m.config
        s = m.norm_states(states)
        skills = np.asarray(skills, dtype=np.int64)
        adv = m.target_q_min(s, skills) - m.value_of(s)
        w = np.minimum(np.exp(cfg.awr_temperature * adv), cfg.advantage_clip)

        logits = m.policy(s)
        logp = log_softmax(logits)
        chosen = T.gather_columns(logp, skills)
        loss = T.mul(T.reduce_mean(T.mul(T.constant(w.astype(chosen.dtype)), chosen)), -1.0)
        self.opt_policy.zero_grad()
        loss.backward()
        self.opt_policy.step()
        return loss.item(), float(adv.mean())


def log_softmax(logits):
    """Numerically stable log softmax over the last axis."""
    shift = T.sub(logits, T.constant(logits.data.max(axis=-1, keepdims=True)))
    lse = T.log(T.reduce_sum(T.exp(shift), axis=-1, keepdims=True))
    return T.sub(shift, lse)


def select_skill(state, model: HighLevelModel, mode="greedy", rng=None):
    """Pick a skill index for one state: argmax logits or a softmax draw."""
    logits = model.policy_logits(state)[0]
    if mode == "greedy":
        return int(np.argmax(logits))
    if mode == "sample":
        if rng is None:
            raise ValueError("sample mode needs an rng")
        shifted = logits - logits.max()
        p = np.exp(shifted)
        p /= p.sum()
        return int(rng.choice(len(p), p=p))
    raise ValueError(f"unknown skill-selection mode: {mode}")


def policy_entropy(model: HighLevelModel, states):
    s = model.norm_states(states)
    with T.no_grad():
        logits = model.policy(s).data
    shifted = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(shifted)
    p /= p.sum(axis=1, keepdims=True)
    logp = np.log(np.maximum(p, 1e-12))
    return float(-(p * logp).sum(axis=1).mean())


def train_highlevel(dataset, config: IQLConfig, run_rng, norm=None, log=None,
                    log_every=1000):
    """Interleaved value/Q training then AWR policy extraction on D^H.

    `dataset` is a RelabeledDataset; `norm` defaults to statistics of its
    states.  Emits (step, phase, metrics) through `log`.
    """
    states, skills, rewards, next_states, terminals = dataset.arrays()
    if config.num_skills <= int(skills.max()):
        raise IndexError(
            f"dataset contains skill index {int(skills.max())} "
            f">= configured num_skills {config.num_skills}"
        )
    if norm is None:
        norm = Normalization.fit(states, np.zeros((len(states), 1)))
    gamma_high = config.gamma_high
    if gamma_high is None:
        gamma_high = dataset.gamma ** dataset.horizon

    model = HighLevelModel(states.shape[1], config, run_rng.stream("iql-init"), norm)
    trainer = IQLTrainer(model)
    batch_rng = run_rng.stream("iql-batch")
    n = len(states)

    def sample():
        idx = batch_rng.choice(n, size=min(config.batch_size, n), replace=n < config.batch_size)
        return idx

    for step in range(1, config.q_steps + 1):
        idx = sample()
        v_loss = trainer.value_update(states[idx], skills[idx])
        q_loss = trainer.q_update(
            states[idx], skills[idx], rewards[idx], next_states[idx],
            terminals[idx], gamma_high,
        )
        if not (np.isfinite(v_loss) and np.isfinite(q_loss)):
            raise NumericFault(f"IQL diverged at q step {step}: value={v_loss} q={q_loss}")
        if log is not None and (step % log_every == 0 or step == config.q_steps):
            log(step, "q", {"value_loss": v_loss, "q_loss": q_loss})

    for step in range(1, config.awr_steps + 1):
        idx = sample()
        awr_loss, mean_adv = trainer.awr_update(states[idx], skills[idx])
        if not np.isfinite(awr_loss):
            raise NumericFault(f"AWR diverged at step {step}: loss={awr_loss}")
        if log is not None and (step % log_every == 0 or step == config.awr_steps):
            log(step, "awr", {
                "awr_loss": awr_loss, "mean_advantage": mean_adv,
                "policy_entropy": policy_entropy(model, states[idx]),
            })

    return model, gamma_high
