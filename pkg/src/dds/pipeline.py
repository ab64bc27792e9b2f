"""Pipeline stages and hierarchical inference.

Each stage is a pure function of (config, files under out_dir, seed): the
same inputs always produce byte-identical outputs.  File layout under the
output directory:

    dataset.dds        raw scripted episodes
    skills.ckpt(.json) skill encoder/decoder/codebook
    skill_metrics.csv  step, loss, reconstruction, codebook, commitment, perplexity
    relabeled.dds      skill-level transitions D^H
    highlevel.ckpt(.json) critics, value net, skill policy
    hl_metrics.csv     step, phase, value_loss, q_loss, awr_loss,
                       mean_advantage, policy_entropy
    eval_episodes.csv  seed, episode, steps, success, return
    eval_summary.json  aggregate success mean/std
    replay_endpoints.csv  skill, start_row, start_col, repeat, end_x, end_y,
                          steps, return
    sweep_results.csv / sweep_table.csv / sweep_hcurve.csv
"""

from __future__ import annotations

import json
import os
from contextlib import contextmanager
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConfigError, check_skill_compat, iql_config, skill_config
from .datastore import (
    read_episode_dataset,
    read_relabeled_dataset,
    write_csv,
    write_episode_dataset,
    write_relabeled_dataset,
)
from .diffusion import sample_action
from .envs import PointMazeEnv, STITCH_SCRIPTS, generate_dataset, make_env
from .iql import HighLevelModel, select_skill, train_highlevel
from .relabel import relabel
from .rng import RunRNG
from .skills import SkillModel, train_skills

DATASET_FILE = "dataset.dds"
SKILL_CKPT = "skills.ckpt"
SKILL_METRICS = "skill_metrics.csv"
RELABELED_FILE = "relabeled.dds"
HL_CKPT = "highlevel.ckpt"
HL_METRICS = "hl_metrics.csv"
EVAL_EPISODES = "eval_episodes.csv"
EVAL_SUMMARY = "eval_summary.json"
REPLAY_ENDPOINTS = "replay_endpoints.csv"
SWEEP_RESULTS = "sweep_results.csv"
SWEEP_TABLE = "sweep_table.csv"
SWEEP_HCURVE = "sweep_hcurve.csv"

_DTYPES = {"float32": np.float32, "float64": np.float64}


@contextmanager
def compute_dtype(config):
    name = config.get("dtype", "float32")
    if name not in _DTYPES:
        raise ConfigError(f"dtype must be one of {sorted(_DTYPES)}, got {name!r}")
    old = T.get_default_dtype()
    T.set_default_dtype(_DTYPES[name])
    try:
        yield
    finally:
        T.set_default_dtype(old)


def _path(out_dir, name):
    return os.path.join(out_dir, name)


# ---------------------------------------------------------------------------
# hierarchical inference


@dataclass
class SkillTrace:
    """Step-level record of one hierarchical rollout."""

    states: np.ndarray        # (N, dim_s) state at each step
    skill_indices: np.ndarray  # (N,) constant within each H-block
    actions: np.ndarray       # (N, dim_a)
    rewards: np.ndarray       # (N,)
    final_state: np.ndarray
    success: bool
    seed: int

    def __len__(self):
        return len(self.states)

    def total_return(self):
        return float(self.rewards.sum())


def decode_action(skill_model: SkillModel, state, z, rng, action_low, action_high):
    """Sample one raw-space action from the decoder for a raw-space state."""
    norm = skill_model.norm
    s = norm.norm_states(np.asarray(state, dtype=np.float64)[None])
    low_n = norm.norm_actions(np.asarray(action_low, dtype=np.float64)[None])[0]
    high_n = norm.norm_actions(np.asarray(action_high, dtype=np.float64)[None])[0]
    a_norm = sample_action(
        s.astype(T.DEFAULT_DTYPE), np.asarray(z)[None].astype(T.DEFAULT_DTYPE),
        skill_model.decoder, skill_model.schedule, rng, low_n, high_n,
    )
    a = norm.denorm_actions(a_norm)[0]
    return np.clip(a, action_low, action_high)


def run_hierarchical_episode(env, skill_model: SkillModel, hl_model, seed,
                             mode="greedy", fixed_skill=None, start_cell=None):
    """Roll one episode, re-selecting a skill every H steps.

    `fixed_skill` replays a single codebook entry for the whole episode and
    does not consult the high-level policy.
    """
    if env.spec.dim_s != skill_model.state_dim or env.spec.dim_a != skill_model.action_dim:
        raise ConfigError(
            f"env dims (s={env.spec.dim_s}, a={env.spec.dim_a}) do not match "
            f"skill checkpoint (s={skill_model.state_dim}, a={skill_model.action_dim})"
        )
    if fixed_skill is None and hl_model is None:
        raise ValueError("need a high-level model unless fixed_skill is given")
    if fixed_skill is not None and not 0 <= fixed_skill < skill_model.codebook.num_skills:
        raise ValueError(f"fixed_skill {fixed_skill} out of range")

    run = RunRNG(seed)
    noise_rng = run.stream("episode-noise")
    select_rng = run.stream("episode-select")
    horizon = skill_model.horizon
    low, high = env.spec.action_low, env.spec.action_high

    if isinstance(env, PointMazeEnv):
        s = env.reset(start_cell=start_cell)
    else:
        s = env.reset()
    states, skills, actions, rewards = [], [], [], []
    done = False
    skill = None
    while not done and len(states) < env.spec.max_steps:
        if len(states) % horizon == 0:
            if fixed_skill is not None:
                skill = int(fixed_skill)
            else:
                skill = select_skill(s, hl_model, mode=mode, rng=select_rng)
        z = skill_model.codebook.vectors.data[skill]
        a = decode_action(skill_model, s, z, noise_rng, low, high)
        states.append(np.asarray(s, dtype=np.float64))
        skills.append(skill)
        actions.append(a)
        s, r, done = env.step(a)
        rewards.append(r)
    rewards = np.asarray(rewards, dtype=np.float64)
    return SkillTrace(
        states=np.asarray(states), skill_indices=np.asarray(skills, dtype=np.int64),
        actions=np.asarray(actions), rewards=rewards,
        final_state=np.asarray(s, dtype=np.float64),
        success=bool(rewards.sum() > 0.0), seed=seed,
    )


def replay_trace_rewards(env, trace: SkillTrace):
    """Re-run a trace's actions from its first state; returns the reward sequence."""
    env.reset_to(trace.states[0])
    out = []
    for a in trace.actions:
        _, r, done = env.step(a)
        out.append(r)
        if done:
            break
    return np.asarray(out, dtype=np.float64)


# ---------------------------------------------------------------------------
# stages


def stage_gen_data(config, out_dir):
    env = make_env(config["env"])
    episodes = generate_dataset(
        env, STITCH_SCRIPTS, config["num_episodes"], config["seed"]
    )
    path = _path(out_dir, DATASET_FILE)
    write_episode_dataset(path, episodes, env.spec, config["seed"])
    return path


def stage_train_skills(config, out_dir, log_quiet=False):
    episodes, _ = read_episode_dataset(_path(out_dir, DATASET_FILE))
    cfg = skill_config(config)
    rows = []

    def log(step, summary, perplexity):
        rows.append([step, summary.total, summary.reconstruction,
                     summary.codebook, summary.commitment, perplexity])
        if not log_quiet:
            print(f"[skills] step {step} loss {summary.total:.4f} "
                  f"perplexity {perplexity:.2f}", flush=True)

    with compute_dtype(config):
        model = train_skills(episodes, cfg, RunRNG(config["seed"]), log=log)
        model.save(_path(out_dir, SKILL_CKPT))
    write_csv(
        _path(out_dir, SKILL_METRICS),
        ["step", "loss", "reconstruction", "codebook", "commitment", "perplexity"],
        rows,
    )
    return _path(out_dir, SKILL_CKPT)


def stage_relabel(config, out_dir):
    episodes, _ = read_episode_dataset(_path(out_dir, DATASET_FILE))
    with compute_dtype(config):
        model, sidecar = SkillModel.load(_path(out_dir, SKILL_CKPT), RunRNG(config["seed"]))
        check_skill_compat(config, sidecar)
        dataset = relabel(episodes, model, model.horizon, config["gamma"])
    write_relabeled_dataset(_path(out_dir, RELABELED_FILE), dataset)
    return _path(out_dir, RELABELED_FILE)


def stage_train_hl(config, out_dir, log_quiet=False):
    dataset, _ = read_relabeled_dataset(_path(out_dir, RELABELED_FILE))
    rows = []

    def log(step, phase, metrics):
        rows.append([
            step, phase,
            metrics.get("value_loss", ""), metrics.get("q_loss", ""),
            metrics.get("awr_loss", ""), metrics.get("mean_advantage", ""),
            metrics.get("policy_entropy", ""),
        ])
        if not log_quiet:
            shown = " ".join(f"{k} {v:.4f}" for k, v in metrics.items())
            print(f"[hl] {phase} step {step} {shown}", flush=True)

    with compute_dtype(config):
        skill_model, sidecar = SkillModel.load(
            _path(out_dir, SKILL_CKPT), RunRNG(config["seed"])
        )
        check_skill_compat(config, sidecar)
        if dataset.skill_fingerprint != skill_model.fingerprint():
            raise ConfigError(
                "relabeled dataset was built with a different skill checkpoint "
                f"({dataset.skill_fingerprint} != {skill_model.fingerprint()})"
            )
        cfg = iql_config(config, skill_model.codebook.num_skills)
        model, gamma_high = train_highlevel(
            dataset, cfg, RunRNG(config["seed"]), norm=skill_model.norm, log=log,
        )
        model.save(_path(out_dir, HL_CKPT), extra={
            "skill_fingerprint": skill_model.fingerprint(),
            "gamma_high": gamma_high,
            "horizon": skill_model.horizon,
        })
    write_csv(
        _path(out_dir, HL_METRICS),
        ["step", "phase", "value_loss", "q_loss", "awr_loss",
         "mean_advantage", "policy_entropy"],
        rows,
    )
    return _path(out_dir, HL_CKPT)


def _load_models(config, out_dir):
    skill_model, sidecar = SkillModel.load(
        _path(out_dir, SKILL_CKPT), RunRNG(config["seed"])
    )
    check_skill_compat(config, sidecar)
    hl_model, hl_side = HighLevelModel.load(_path(out_dir, HL_CKPT), RunRNG(config["seed"]))
    if hl_side.get("skill_fingerprint") != skill_model.fingerprint():
        raise ConfigError("high-level checkpoint was trained against a different skill model")
    return skill_model, hl_model


def stage_eval(config, out_dir, log_quiet=False):
    eval_cfg = config["eval"]
    mode = eval_cfg.get("selection", "greedy")
    rows = []
    per_seed = {}
    with compute_dtype(config):
        skill_model, hl_model = _load_models(config, out_dir)
        env = make_env(config["env"])
        for seed in eval_cfg["seeds"]:
            successes = []
            for ep in range(eval_cfg["episodes"]):
                trace = run_hierarchical_episode(
                    env, skill_model, hl_model, seed=seed * 10_000 + ep, mode=mode,
                )
                successes.append(trace.success)
                rows.append([seed, ep, len(trace), int(trace.success),
                             trace.total_return()])
            per_seed[str(seed)] = float(np.mean(successes))
            if not log_quiet:
                print(f"[eval] seed {seed}: success {per_seed[str(seed)]:.2f}", flush=True)
    rates = np.array([per_seed[str(s)] for s in eval_cfg["seeds"]])
    summary = {
        "env": config["env"],
        "episodes_per_seed": eval_cfg["episodes"],
        "selection": mode,
        "per_seed_success": per_seed,
        "success_mean": float(rates.mean()),
        "success_std": float(rates.std()),
    }
    write_csv(_path(out_dir, EVAL_EPISODES),
              ["seed", "episode", "steps", "success", "return"], rows)
    with open(_path(out_dir, EVAL_SUMMARY), "w") as f:
        json.dump(summary, f, indent=2, sort_keys=True)
    return summary


def default_replay_starts(env, n=3):
    """Deterministic spread of free start cells: eval start plus far corners."""
    free = env.free_cells()
    picks = [env.start_cell]
    for _ in range(n - 1):
        best, best_d = None, -1.0
        for cell in free:
            if cell == env.goal_cell or cell in picks:
                continue
            d = min(
                abs(cell[0] - p[0]) + abs(cell[1] - p[1]) for p in picks
            )
            if d > best_d:
                best, best_d = cell, d
        picks.append(best)
    return picks


def stage_replay_skill(config, out_dir, skills=None, starts=None, repeats=3):
    """Roll fixed-skill episodes from several start cells; record endpoints."""
    rows = []
    results = {}
    with compute_dtype(config):
        skill_model, _ = SkillModel.load(_path(out_dir, SKILL_CKPT), RunRNG(config["seed"]))
        env = make_env(config["env"])
        if skills is None:
            skills = range(skill_model.codebook.num_skills)
        if starts is None:
            starts = (
                default_replay_starts(env) if isinstance(env, PointMazeEnv) else [None]
            )
        for k in skills:
            for start in starts:
                for rep in range(repeats):
                    seed = config["seed"] * 1_000_000 + k * 1_000 + hash_cell(start) * 10 + rep
                    trace = run_hierarchical_episode(
                        env, skill_model, None, seed=seed, fixed_skill=k,
                        start_cell=start,
                    )
                    end = trace.final_state
                    srow, scol = (start if start is not None else ("", ""))
                    rows.append([k, srow, scol, rep, float(end[0]), float(end[1]),
                                 len(trace), trace.total_return()])
                    results.setdefault(k, []).append(trace)
    write_csv(_path(out_dir, REPLAY_ENDPOINTS),
              ["skill", "start_row", "start_col", "repeat", "end_x", "end_y",
               "steps", "return"], rows)
    return results


def hash_cell(cell):
    if cell is None:
        return 0
    return (cell[0] * 31 + cell[1]) % 97


# ---------------------------------------------------------------------------
# sweep


SWEEP_DEFAULTS = {
    "num_skills": [4, 8, 16],
    "skill_dims": [64, 128],
    "horizons": [],
    "skill_steps": None,    # None -> config skill.train_steps
    "q_steps": None,
    "awr_steps": None,
    "eval_seeds": None,     # None -> config eval.seeds
    "eval_episodes": None,
}


def _cell_config(config, **skill_overrides):
    cell = json.loads(json.dumps(config))
    sweep = {**SWEEP_DEFAULTS, **config.get("sweep", {})}
    cell["skill"] = {**cell.get("skill", {}), **skill_overrides}
    if sweep["skill_steps"] is not None:
        cell["skill"]["gradient_steps"] = sweep["skill_steps"]
    iql = dict(cell.get("iql", {}))
    if sweep["q_steps"] is not None:
        iql["q_steps"] = sweep["q_steps"]
    if sweep["awr_steps"] is not None:
        iql["awr_steps"] = sweep["awr_steps"]
    iql.pop("num_skills", None)
    cell["iql"] = iql
    ev = dict(cell.get("eval", {}))
    if sweep["eval_seeds"] is not None:
        ev["seeds"] = sweep["eval_seeds"]
    if sweep["eval_episodes"] is not None:
        ev["episodes"] = sweep["eval_episodes"]
    cell["eval"] = ev
    return cell


def run_cell(config, out_dir, log_quiet=True):
    """Full pipeline in one directory; dataset is generated if absent."""
    os.makedirs(out_dir, exist_ok=True)
    if not os.path.exists(_path(out_dir, DATASET_FILE)):
        stage_gen_data(config, out_dir)
    stage_train_skills(config, out_dir, log_quiet=log_quiet)
    stage_relabel(config, out_dir)
    stage_train_hl(config, out_dir, log_quiet=log_quiet)
    return stage_eval(config, out_dir, log_quiet=log_quiet)


def stage_sweep(config, out_dir, log_quiet=False):
    """Grid over (K, D_z) and optionally H; cells fail independently."""
    sweep = {**SWEEP_DEFAULTS, **config.get("sweep", {})}
    rows = []
    by_cell = {}
    base_dataset = _path(out_dir, DATASET_FILE)
    if not os.path.exists(base_dataset):
        stage_gen_data(config, out_dir)

    def run_one(label, **overrides):
        cell_dir = _path(out_dir, label)
        cell_cfg = _cell_config(config, **overrides)
        os.makedirs(cell_dir, exist_ok=True)
        link = _path(cell_dir, DATASET_FILE)
        if not os.path.exists(link):
            with open(base_dataset, "rb") as src, open(link, "wb") as dst:
                dst.write(src.read())
        try:
            summary = run_cell(cell_cfg, cell_dir, log_quiet=True)
            return summary["success_mean"], summary["success_std"], "ok", ""
        except Exception as e:   # cell failures are recorded, sweep continues
            return "", "", "error", f"{type(e).__name__}: {e}"

    for dz in sweep["skill_dims"]:
        for k in sweep["num_skills"]:
            label = f"cell_k{k}_dz{dz}"
            if not log_quiet:
                print(f"[sweep] {label} ...", flush=True)
            mean, std, status, note = run_one(label, num_skills=k, skill_dim=dz)
            h = _cell_config(config)["skill"].get("horizon", 10)
            rows.append([k, dz, h, mean, std, status, note])
            by_cell[(k, dz)] = (mean, std, status)
            if not log_quiet and status == "ok":
                print(f"[sweep] {label}: {mean:.2f} +- {std:.2f}", flush=True)

    write_csv(_path(out_dir, SWEEP_RESULTS),
              ["num_skills", "skill_dim", "horizon", "success_mean",
               "success_std", "status", "note"], rows)

    # Table-shaped view: one row per D_z, one column per K.
    ks = sweep["num_skills"]
    table_rows = []
    for dz in sweep["skill_dims"]:
        row = [dz]
        for k in ks:
            mean, std, status = by_cell[(k, dz)]
            row.append(f"{mean:.2f}+-{std:.2f}" if status == "ok" else status)
        table_rows.append(row)
    write_csv(_path(out_dir, SWEEP_TABLE),
              ["skill_dim"] + [f"K={k}" for k in ks], table_rows)

    if sweep["horizons"]:
        hrows = []
        for h in sweep["horizons"]:
            label = f"cell_h{h}"
            if not log_quiet:
                print(f"[sweep] {label} ...", flush=True)
            mean, std, status, note = run_one(label, horizon=h)
            hrows.append([h, mean, std, status, note])
        write_csv(_path(out_dir, SWEEP_HCURVE),
                  ["horizon", "success_mean", "success_std", "status", "note"],
                  hrows)
    return rows
