"""JSON/JSONL/CSV persistence for MDPs, policies, datasets and counts."""
from __future__ import annotations

import csv
import json
from pathlib import Path

import numpy as np

from .estimation import TransitionCounts
from .mdp import Dataset, Policy, SamplePath, TabularMdp, check_mdp


def mdp_to_dict(mdp: TabularMdp) -> dict:
    return {
        "gamma": mdp.gamma,
        "num_states": mdp.num_states,
        "num_actions": mdp.num_actions,
        "transitions": mdp.transitions.tolist(),
        "rewards": mdp.rewards.tolist(),
        "initial_state": mdp.initial_state,
    }


def mdp_from_dict(d: dict) -> TabularMdp:
    try:
        mdp = TabularMdp(float(d["gamma"]), d["transitions"], d["rewards"], int(d.get("initial_state", 0)))
    except KeyError as e:
        raise ValueError(f"MDP document missing field {e}") from None
    if "num_states" in d and d["num_states"] != mdp.num_states:
        raise ValueError("num_states does not match the transition tensor")
    if "num_actions" in d and d["num_actions"] != mdp.num_actions:
        raise ValueError("num_actions does not match the transition tensor")
    return check_mdp(mdp)


def save_mdp(mdp: TabularMdp, path) -> None:
    Path(path).write_text(json.dumps(mdp_to_dict(mdp), indent=1))


def load_mdp(path) -> TabularMdp:
    return mdp_from_dict(json.loads(Path(path).read_text()))


def save_policy(policy: Policy, path) -> None:
    Path(path).write_text(json.dumps({"probs": policy.probs.tolist()}))


def load_policy(path) -> Policy:
    d = json.loads(Path(path).read_text())
    if "probs" not in d:
        raise ValueError("policy document needs a 'probs' matrix")
    return Policy(d["probs"])


def save_dataset(dataset: Dataset, path) -> None:
    with open(path, "w") as fh:
        for p in dataset:
            fh.write(json.dumps({"steps": [list(step) for step in p.steps]}) + "\n")


def load_dataset(path, num_states: int, num_actions: int) -> Dataset:
    paths = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            rec = json.loads(line)
            try:
                steps = [(int(s), int(a), float(r)) for s, a, r in rec["steps"]]
            except (KeyError, ValueError, TypeError) as e:
                raise ValueError(f"{path}:{lineno}: malformed path record ({e})") from None
            paths.append(SamplePath(steps))
    return Dataset.from_paths(paths, num_states, num_actions)


def save_counts_csv(counts: TransitionCounts, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["s", "a", "q", "n"])
        for s, a, q in zip(*np.nonzero(counts.n)):
            w.writerow([s, a, q, counts.n[s, a, q]])


def load_counts_csv(path, num_states: int, num_actions: int) -> TransitionCounts:
    n = np.zeros((num_states, num_actions, num_states), dtype=np.int64)
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            n[int(row["s"]), int(row["a"]), int(row["q"])] = int(row["n"])
    return TransitionCounts(n)
