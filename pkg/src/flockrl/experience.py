"""Replay and demonstration buffers, minibatch sampling, demo files."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContractViolationError, CorruptFileError, EmptyBufferError

DEMO_FORMAT = "flockrl-demos"
DEMO_VERSION = 1


@dataclass
class Transition:
    obs: np.ndarray        # (n, obs_dim)
    act: np.ndarray        # (n, act_dim), applied Cartesian forces
    rew: np.ndarray        # (n,)
    next_obs: np.ndarray   # (n, obs_dim)
    done: bool

    def __eq__(self, other):
        return (isinstance(other, Transition)
                and np.array_equal(self.obs, other.obs)
                and np.array_equal(self.act, other.act)
                and np.array_equal(self.rew, other.rew)
                and np.array_equal(self.next_obs, other.next_obs)
                and bool(self.done) == bool(other.done))


@dataclass
class Batch:
    """Stacked minibatch; leading axis is the sample index."""
    obs: np.ndarray        # (M, n, obs_dim)
    act: np.ndarray        # (M, n, act_dim)
    rew: np.ndarray        # (M, n)
    next_obs: np.ndarray   # (M, n, obs_dim)
    done: np.ndarray       # (M,) float 0/1

    def __len__(self):
        return len(self.rew)

    def __getitem__(self, k):
        return Transition(self.obs[k], self.act[k], self.rew[k], self.next_obs[k], bool(self.done[k]))

    def transitions(self):
        return [self[k] for k in range(len(self))]

    @classmethod
    def concat(cls, *batches):
        return cls(*(np.concatenate([getattr(b, f) for b in batches])
                     for f in ("obs", "act", "rew", "next_obs", "done")))

    @classmethod
    def from_transitions(cls, transitions):
        return cls(np.stack([t.obs for t in transitions]),
                   np.stack([t.act for t in transitions]),
                   np.stack([t.rew for t in transitions]),
                   np.stack([t.next_obs for t in transitions]),
                   np.array([float(t.done) for t in transitions]))


class ReplayBuffer:
    """Fixed-capacity FIFO ring of joint transitions.

    A buffer can be write-locked (the demonstration buffer is locked once
    loaded). ``sample_count`` counts minibatch draws so callers can assert
    which buffers an algorithm consulted.
    """

    def __init__(self, capacity, n, obs_dim, act_dim=2):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.n = n
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self._obs = np.zeros((capacity, n, obs_dim))
        self._act = np.zeros((capacity, n, act_dim))
        self._rew = np.zeros((capacity, n))
        self._next = np.zeros((capacity, n, obs_dim))
        self._done = np.zeros(capacity)
        self._cursor = 0
        self.size = 0
        self.locked = False
        self.sample_count = 0
        self.meta = {}

    def __len__(self):
        return self.size

    def lock(self):
        self.locked = True
        return self

    def push(self, tr):
        if self.locked:
            raise ContractViolationError("buffer is write-locked")
        obs = np.asarray(tr.obs, dtype=np.float64)
        act = np.asarray(tr.act, dtype=np.float64)
        rew = np.asarray(tr.rew, dtype=np.float64)
        nxt = np.asarray(tr.next_obs, dtype=np.float64)
        if (obs.shape != (self.n, self.obs_dim) or nxt.shape != obs.shape
                or act.shape != (self.n, self.act_dim) or rew.shape != (self.n,)):
            raise ContractViolationError(
                f"transition shapes {obs.shape}/{act.shape}/{rew.shape}/{nxt.shape} do not match buffer "
                f"(n={self.n}, obs_dim={self.obs_dim}, act_dim={self.act_dim})")
        k = self._cursor
        self._obs[k] = obs
        self._act[k] = act
        self._rew[k] = rew
        self._next[k] = nxt
        self._done[k] = float(bool(tr.done))
        self._cursor = (k + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def _order(self):
        """Physical slot indices from oldest to newest."""
        start = self._cursor if self.size == self.capacity else 0
        return (start + np.arange(self.size)) % self.capacity

    def gather(self, idx):
        return Batch(self._obs[idx], self._act[idx], self._rew[idx], self._next[idx], self._done[idx])

    def transitions(self):
        return self.gather(self._order()).transitions()

    def prefix(self, count):
        """New unlocked buffer holding the oldest ``count`` transitions."""
        out = ReplayBuffer(max(count, 1), self.n, self.obs_dim, self.act_dim)
        for tr in self.transitions()[:count]:
            out.push(tr)
        out.meta = dict(self.meta)
        return out

    def sample_minibatch(self, M, rng):
        return sample_minibatch(self, M, rng)


def sample_minibatch(buf, M, rng):
    """``M`` uniform draws with replacement over the current contents."""
    if buf.size == 0:
        raise EmptyBufferError("cannot sample from an empty buffer")
    buf.sample_count += 1
    idx = rng.integers(0, buf.size, size=M)
    if buf.size == buf.capacity:
        idx = (buf._cursor + idx) % buf.capacity
    return buf.gather(idx)


# -- demonstration files ----------------------------------------------------

def save_demos(buf, path, meta=None):
    """Write a JSON-Lines demo file: header line, then one transition per line."""
    meta = dict(buf.meta if meta is None else meta)
    header = {"format": DEMO_FORMAT, "version": DEMO_VERSION, "n": buf.n, "obs_dim": buf.obs_dim,
              "act_dim": buf.act_dim, "count": buf.size, "meta": meta}
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for tr in buf.transitions():
            rec = {"obs": tr.obs.tolist(), "act": tr.act.tolist(), "rew": tr.rew.tolist(),
                   "next_obs": tr.next_obs.tolist(), "done": bool(tr.done)}
            fh.write(json.dumps(rec) + "\n")


def _check_matrix(value, rows, cols, name, lineno):
    try:
        arr = np.asarray(value, dtype=np.float64) if isinstance(value, list) else None
    except (ValueError, TypeError):
        arr = None
    if arr is None or arr.shape != ((rows, cols) if cols else (rows,)):
        raise CorruptFileError(f"field {name!r} has wrong shape", lineno)
    return arr


def load_demos(path):
    """Read a demo file into a write-locked buffer sized to its contents."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    if not lines:
        raise CorruptFileError("empty demo file", 1)
    try:
        header = json.loads(lines[0])
        n, obs_dim, act_dim, count = header["n"], header["obs_dim"], header["act_dim"], header["count"]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CorruptFileError(f"bad header: {exc}", 1) from None
    if header.get("format") != DEMO_FORMAT or header.get("version") != DEMO_VERSION:
        raise CorruptFileError("unrecognized format or version", 1)
    records = lines[1:]
    buf = ReplayBuffer(max(count, 1), n, obs_dim, act_dim)
    for k, line in enumerate(records):
        lineno = k + 2
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise CorruptFileError(f"unparseable record ({exc.msg})", lineno) from None
        if not isinstance(rec, dict) or set(rec) != {"obs", "act", "rew", "next_obs", "done"}:
            raise CorruptFileError("record fields must be obs, act, rew, next_obs, done", lineno)
        if not isinstance(rec["done"], bool):
            raise CorruptFileError("field 'done' must be boolean", lineno)
        if k >= count:
            raise CorruptFileError(f"more records than the {count} declared", lineno)
        buf.push(Transition(_check_matrix(rec["obs"], n, obs_dim, "obs", lineno),
                            _check_matrix(rec["act"], n, act_dim, "act", lineno),
                            _check_matrix(rec["rew"], n, None, "rew", lineno),
                            _check_matrix(rec["next_obs"], n, obs_dim, "next_obs", lineno),
                            rec["done"]))
    if len(records) != count:
        raise CorruptFileError(f"header declares {count} records, found {len(records)}", len(lines) + 1)
    buf.meta = header.get("meta", {})
    return buf.lock()
