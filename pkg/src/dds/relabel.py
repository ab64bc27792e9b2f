"""Convert raw episodes into skill-level transitions for the high-level learner.

Each non-overlapping H-step window becomes one transition: first state,
inferred skill index as the action, H-step discounted reward sum, and the
state reached after the window.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .skills import SkillModel, iter_windows, nearest_code


@dataclass
class RelabeledTransition:
    state: np.ndarray
    skill_index: int
    reward: float
    next_state: np.ndarray
    terminal: bool
    gamma_used: float


@dataclass
class RelabeledDataset:
    transitions: list
    horizon: int
    gamma: float
    skill_fingerprint: str

    def __len__(self):
        return len(self.transitions)

    def arrays(self):
        """Columnar view: states, skill indices, rewards, next states, terminals."""
        return (
            np.stack([t.state for t in self.transitions]),
            np.array([t.skill_index for t in self.transitions], dtype=np.int64),
            np.array([t.reward for t in self.transitions]),
            np.stack([t.next_state for t in self.transitions]),
            np.array([t.terminal for t in self.transitions], dtype=bool),
        )


def split_windows(episode, horizon):
    """Non-overlapping windows at offsets 0, H, 2H, ...; trailing remainder dropped."""
    return iter_windows(
        episode.states, episode.actions, episode.rewards, horizon,
        episode_id=getattr(episode, "episode_id", 0),
    )


def discounted_window_reward(rewards, gamma):
    """sum_{i=1..H} gamma^(i-1) * r_i."""
    weights = gamma ** np.arange(len(rewards), dtype=np.float64)
    return float(np.dot(weights, rewards))


def relabel(episodes, skill_model: SkillModel, horizon, gamma, encode_batch_size=512):
    """Build the high-level dataset from raw episodes and a trained skill model."""
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if horizon != skill_model.config.horizon:
        raise ValueError(
            f"relabel horizon {horizon} does not match the skill checkpoint "
            f"horizon {skill_model.config.horizon}"
        )

    windows = []
    extras = []   # (next_state, terminal) per window
    for ep in episodes:
        length = ep.states.shape[0]
        for w in split_windows(ep, horizon):
            end = w.start_index + horizon
            next_state = ep.states[end] if end < length else ep.final_state
            terminal = bool(ep.terminals[end - 1])
            windows.append(w)
            extras.append((next_state, terminal))
    if not windows:
        raise ValueError(f"no episode is at least {horizon} steps long; nothing to relabel")

    transitions = []
    vectors = skill_model.codebook.vectors.data
    for lo in range(0, len(windows), encode_batch_size):
        chunk = windows[lo:lo + encode_batch_size]
        states = np.stack([w.states for w in chunk])
        actions = np.stack([w.actions for w in chunk])
        emb = skill_model.encode_batch(states, actions)
        idx = nearest_code(emb, vectors)
        for w, (next_state, terminal), k in zip(chunk, extras[lo:lo + encode_batch_size], idx):
            transitions.append(RelabeledTransition(
                state=np.asarray(w.states[0], dtype=np.float64),
                skill_index=int(k),
                reward=discounted_window_reward(w.rewards, gamma),
                next_state=np.asarray(next_state, dtype=np.float64),
                terminal=terminal,
                gamma_used=gamma,
            ))
    return RelabeledDataset(
        transitions=transitions, horizon=horizon, gamma=gamma,
        skill_fingerprint=skill_model.fingerprint(),
    )
