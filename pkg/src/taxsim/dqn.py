"""The rational decision stage: a small Deep Q-Network trained online.

Each agent owns one :class:`DqnPolicy`. Actions are discrete payment fractions
``i / K``. Agent traits parameterise learning: risk propensity sets the
exploration rate, planning horizon sets the discount and cognition sets the
reward-noise level.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from taxsim.econ import PublicGoodsKind, public_goods_value, to_cents
from taxsim.llm import DecisionContext, DecisionKind, LlmSuggestion


EVASION_TOLERANCE = 0.01  # underpayment of at most a cent is not evasion


class TrainingError(RuntimeError):
    """Non-finite loss or weights during a gradient step."""


def gamma_from_eta(eta: int) -> float:
    """Discount whose weight after ``eta + 1`` steps is exactly 1%."""
    if eta < 0:
        raise ValueError(f"planning horizon must be >= 0, got {eta}")
    return 0.01 ** (1.0 / (eta + 1))


def noisy_reward(r: float, upsilon: float, rng: np.random.Generator) -> float:
    if not 0.0 < upsilon <= 1.0:
        raise ValueError(f"cognition must lie in (0, 1], got {upsilon}")
    std = 1.0 - upsilon
    if std == 0.0:
        return r
    return r + rng.normal(0.0, std)


def compute_reward(utility: float, penalty: float, cost: float) -> float:
    return utility - penalty - cost


# ---------------------------------------------------------------------------
# network


class Mlp:
    """Dense ReLU network with a linear output layer.

    All weights and biases are views into one flat vector so the optimiser can
    update every parameter with a handful of array operations.
    """

    def __init__(self, sizes: Sequence[int], rng: np.random.Generator, zero_output: bool = True):
        self.sizes = list(sizes)
        shapes = []
        for n_in, n_out in zip(sizes, sizes[1:]):
            shapes += [(n_in, n_out), (n_out,)]
        self.flat = np.zeros(sum(math.prod(s) for s in shapes))
        self.grad_flat = np.zeros_like(self.flat)
        self._param_views = _views(self.flat, shapes)
        self._grad_views = _views(self.grad_flat, shapes)
        self.weights = self._param_views[0::2]
        self.biases = self._param_views[1::2]
        last = len(sizes) - 2
        for i, (n_in, _) in enumerate(zip(sizes, sizes[1:])):
            if not (i == last and zero_output):
                self.weights[i][...] = rng.normal(0.0, math.sqrt(2.0 / n_in), size=self.weights[i].shape)

    @property
    def params(self) -> list[np.ndarray]:
        return list(self._param_views)

    def copy_from(self, other: "Mlp") -> None:
        self.flat[...] = other.flat

    def forward(self, x: np.ndarray) -> np.ndarray:
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
        return h

    def forward_cached(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        acts = [x]
        h = x
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                np.maximum(h, 0.0, out=h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], grad_out: np.ndarray) -> list[np.ndarray]:
        """Gradients (in ``params`` order) of ``sum(grad_out * output)``.

        The returned arrays are views into ``grad_flat`` and are overwritten by
        the next call.
        """
        grads = self._grad_views
        g = grad_out
        for i in range(len(self.weights) - 1, -1, -1):
            np.matmul(acts[i].T, g, out=grads[2 * i])
            np.sum(g, axis=0, out=grads[2 * i + 1])
            if i > 0:
                g = g @ self.weights[i].T
                g *= acts[i] > 0
        return list(grads)


def _views(flat: np.ndarray, shapes: list[tuple[int, ...]]) -> list[np.ndarray]:
    out, k = [], 0
    for s in shapes:
        n = math.prod(s)
        out.append(flat[k:k + n].reshape(s))
        k += n
    return out


class Adam:
    """Adam over a single flat parameter vector, updated in place."""

    def __init__(self, params: np.ndarray, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros_like(params)
        self.v = np.zeros_like(params)
        self._tmp = np.zeros_like(params)
        self.t = 0

    def step(self, grad: np.ndarray) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        m, v, tmp = self.m, self.v, self._tmp
        m *= self.b1
        m += (1.0 - self.b1) * grad
        v *= self.b2
        np.multiply(grad, grad, out=tmp)
        tmp *= 1.0 - self.b2
        v += tmp
        np.divide(v, c2, out=tmp)
        np.sqrt(tmp, out=tmp)
        tmp += self.eps
        np.divide(m, tmp, out=tmp)
        tmp *= self.lr / c1
        self.params -= tmp


# ---------------------------------------------------------------------------
# state encoding

STATE_FIELDS = (
    "balance_over_annual_salary",
    "owed_over_monthly_salary",
    "suggestion_over_owed",
    "sales_rate",
    "top_income_rate",
    "audit_probability",
    "penalty_rate_normalized",
    "fine_over_annual_salary",
    "nu_linear",
    "nu_capitalist_log",
    "nu_socialist",
    "nu_custom_table",
    "gap_over_annual_salary",
    "audit_clock",
    "is_income_decision",
    "nu_value_per_dollar",
)
STATE_DIM = len(STATE_FIELDS)
FEATURE_CLIP = 10.0
_NU_INDEX = {
    PublicGoodsKind.LINEAR: 8,
    PublicGoodsKind.CAPITALIST_LOG: 9,
    PublicGoodsKind.SOCIALIST: 10,
    PublicGoodsKind.CUSTOM_TABLE: 11,
}


def encode_state(ctx: DecisionContext, suggestion: float) -> np.ndarray:
    """Fixed-length feature vector. Zero salaries fall back to a unit denominator."""
    monthly = ctx.salary if ctx.salary > 0 else 1.0
    annual = monthly * 12.0 if ctx.salary > 0 else 1.0
    p = ctx.policies
    enf = p.enforcement
    owed = ctx.owed_amount
    s = np.zeros(STATE_DIM)
    s[0] = ctx.balance / annual
    s[1] = owed / monthly
    s[2] = suggestion / owed if owed > 0 else 0.0
    s[3] = p.sales_tax.rate
    s[4] = p.income_tax.top_rate
    s[5] = enf.audit_probability
    s[6] = enf.penalty_rate / (1.0 + enf.penalty_rate)
    s[7] = enf.fixed_fine / annual
    s[_NU_INDEX[p.public_goods.kind]] = 1.0
    s[12] = ctx.evasion_gap / annual
    s[13] = ctx.steps_since_audit / enf.audit_period
    s[14] = 1.0 if ctx.decision_kind is DecisionKind.INCOME_TAX else 0.0
    s[15] = public_goods_value(p.public_goods, owed) / owed if owed > 0 else 0.0
    np.clip(s, -FEATURE_CLIP, FEATURE_CLIP, out=s)
    return s


# ---------------------------------------------------------------------------
# policy


@dataclass(frozen=True)
class DqnConfig:
    hidden_layers: tuple[int, ...] = (64, 64)
    learning_rate: float = 1e-3
    replay_capacity: int = 10_000
    batch: int = 64
    target_sync_every: int = 250
    train_every: int = 2
    eps_min: float = 0.01
    eps_max: float = 0.5
    n_levels: int = 10
    reward_clip: float = 10.0
    deference_margin: float = 0.1

    def epsilon(self, risk: float) -> float:
        return self.eps_min + (self.eps_max - self.eps_min) * risk


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions.

    Storage grows by doubling until it reaches ``capacity``; after that the
    oldest slot is overwritten.
    """

    def __init__(self, capacity: int, state_dim: int, initial: int = 256):
        self.capacity = capacity
        self.state_dim = state_dim
        self._alloc(min(capacity, initial))
        self.size = 0
        self._head = 0

    def _alloc(self, n: int) -> None:
        old = getattr(self, "states", None)
        fields = {
            "states": np.zeros((n, self.state_dim)),
            "next_states": np.zeros((n, self.state_dim)),
            "actions": np.zeros(n, dtype=np.int64),
            "rewards": np.zeros(n),
            "terminal": np.zeros(n, dtype=bool),
        }
        if old is not None:
            k = len(old)
            for name, arr in fields.items():
                arr[:k] = getattr(self, name)
        for name, arr in fields.items():
            setattr(self, name, arr)

    def __len__(self) -> int:
        return self.size

    def push(self, state, action: int, reward: float, next_state, terminal: bool) -> None:
        i = self._head
        if i >= len(self.states):
            self._alloc(min(self.capacity, 2 * len(self.states)))
        self.states[i] = state
        self.actions[i] = action
        self.rewards[i] = reward
        self.next_states[i] = next_state
        self.terminal[i] = terminal
        self._head = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def oldest_index(self) -> int:
        return self._head if self.size == self.capacity else 0

    def sample(self, n: int, rng: np.random.Generator):
        idx = rng.integers(0, self.size, size=n)
        return (self.states[idx], self.actions[idx], self.rewards[idx],
                self.next_states[idx], self.terminal[idx])


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    terminal: bool = False


@dataclass
class _Pending:
    state: np.ndarray
    action: int
    owed: float
    unpaid: float = 0.0
    utility: float = 0.0
    penalty: float = 0.0
    cost: float = 0.0


class DqnPolicy:
    """Q-network, target network, replay buffer and trait-derived settings."""

    def __init__(self, config: DqnConfig = DqnConfig(), *, risk: float = 0.0, horizon: int = 30,
                 cognition: float = 0.99, seed: int = 0, state_dim: int = STATE_DIM):
        self.config = config
        self.risk = risk
        self.horizon = horizon
        self.cognition = cognition
        self.seed = seed
        self.epsilon = config.epsilon(risk)
        self.gamma = gamma_from_eta(horizon)
        self.noise_std = 1.0 - cognition
        self.n_actions = config.n_levels + 1
        rng = np.random.default_rng(seed)
        sizes = [state_dim, *config.hidden_layers, self.n_actions]
        self.q = Mlp(sizes, rng)
        self.target = Mlp(sizes, rng)
        self.target.copy_from(self.q)
        self.opt = Adam(self.q.flat, config.learning_rate)
        self.buffer = ReplayBuffer(config.replay_capacity, state_dim)
        self.updates = 0
        self.transitions = 0
        self.pending: _Pending | None = None
        self.last_loss = math.nan
        # (push serial, buffer slot, unpaid dollars, owed) of underpaying
        # transitions since this agent's last audit
        self.gap_log: list[tuple[int, int, float, float]] = []
        self.pushes = 0

    def q_values(self, s: np.ndarray) -> np.ndarray:
        return self.q.forward(s[None, :])[0]

    def fraction(self, action: int) -> float:
        return action / self.config.n_levels

    def observe(self, utility: float = 0.0, penalty: float = 0.0, cost: float = 0.0) -> None:
        """Accumulate outcomes into the reward window of the last decision."""
        if self.pending is not None:
            self.pending.utility += utility
            self.pending.penalty += penalty
            self.pending.cost += cost

    def _close_pending(self, next_state: np.ndarray, terminal: bool, rng: np.random.Generator) -> float | None:
        p = self.pending
        if p is None:
            return None
        self.pending = None
        raw = compute_reward(p.utility, p.penalty, p.cost)
        # per owed dollar, shifted by the constant +1 so that full evasion with
        # no consequences scores 0; a constant shift leaves the optimal policy
        # unchanged but keeps untried zero-initialised actions from looking best
        scaled = raw / p.owed + 1.0
        clip = self.config.reward_clip
        scaled = min(max(scaled, -clip), clip)
        r = noisy_reward(scaled, self.cognition, rng)
        slot = self.buffer._head
        self.buffer.push(p.state, p.action, r, next_state, terminal)
        self.pushes += 1
        if p.unpaid > 0:
            self.gap_log.append((self.pushes, slot, p.unpaid, p.owed))
        self.transitions += 1
        if len(self.buffer) >= self.config.batch and self.transitions % self.config.train_every == 0:
            batch = self.buffer.sample(self.config.batch, rng)
            train_step(self, batch)
        return raw

    def audit(self, penalty: float) -> None:
        """Settle an audit: the penalty is shared by the underpaying decisions.

        Each decision that added to the gap since the previous audit takes a
        share proportional to its unpaid amount, scaled and clipped like any
        other reward. Transitions already in the replay buffer are amended in
        place; the open decision receives its share through its reward window.
        """
        entries = [e for e in self.gap_log if self.pushes - e[0] < self.buffer.capacity]
        pend = self.pending
        open_unpaid = pend.unpaid if pend is not None else 0.0
        total = sum(e[2] for e in entries) + open_unpaid
        self.gap_log = []
        if pend is not None:
            pend.unpaid = 0.0  # settled here, not again at the next audit
        if penalty <= 0:
            return
        if total <= 0:
            self.observe(penalty=penalty)
            return
        clip = self.config.reward_clip
        for _, slot, unpaid, owed in entries:
            r = self.buffer.rewards[slot] - penalty * unpaid / total / owed
            self.buffer.rewards[slot] = max(r, -clip)
        if open_unpaid > 0:
            pend.penalty += penalty * open_unpaid / total

    def finish(self, rng: np.random.Generator) -> None:
        """Close the open transition as terminal at the end of a run."""
        if self.pending is not None:
            self._close_pending(self.pending.state, True, rng)

    # checkpoint -----------------------------------------------------------

    def save(self, path: str | Path) -> None:
        doc = {
            "config": asdict(self.config),
            "traits": {"risk": self.risk, "horizon": self.horizon, "cognition": self.cognition,
                       "seed": self.seed},
            "layers": [
                {"shape": list(w.shape), "weights": w.ravel().tolist(), "bias": b.tolist()}
                for w, b in zip(self.q.weights, self.q.biases)
            ],
        }
        Path(path).write_text(json.dumps(doc))

    @classmethod
    def load(cls, path: str | Path) -> "DqnPolicy":
        doc = json.loads(Path(path).read_text())
        cfg = doc["config"]
        cfg["hidden_layers"] = tuple(cfg["hidden_layers"])
        t = doc["traits"]
        pol = cls(DqnConfig(**cfg), risk=t["risk"], horizon=t["horizon"],
                  cognition=t["cognition"], seed=t["seed"],
                  state_dim=doc["layers"][0]["shape"][0])
        for i, layer in enumerate(doc["layers"]):
            pol.q.weights[i][...] = np.asarray(layer["weights"]).reshape(layer["shape"])
            pol.q.biases[i][...] = np.asarray(layer["bias"])
        pol.target.copy_from(pol.q)
        return pol


def greedy(q: np.ndarray) -> int:
    # np.argmax returns the first maximum: ties go to the lowest index
    return int(np.argmax(q))


def select_action(policy: DqnPolicy, s: np.ndarray, rng: np.random.Generator,
                  anchor: int | None = None) -> int:
    """Epsilon-greedy action.

    With ``anchor`` set (the action nearest the suggestion), the greedy step
    keeps the anchor unless the best action beats it by more than the
    deference margin.
    """
    if rng.random() < policy.epsilon:
        return int(rng.integers(policy.n_actions))
    q = policy.q_values(s)
    best = greedy(q)
    if anchor is None:
        return best
    if q[best] - q[anchor] > policy.config.deference_margin:
        return best
    return anchor


def td_targets(policy: DqnPolicy, rewards: np.ndarray, next_states: np.ndarray,
               terminal: np.ndarray) -> np.ndarray:
    q_next = policy.target.forward(next_states).max(axis=1)
    return rewards + policy.gamma * q_next * (~terminal)


def train_step(policy: DqnPolicy, batch) -> float:
    """One Adam step on the mean squared TD error; returns the pre-step loss."""
    if isinstance(batch, Sequence) and batch and isinstance(batch[0], Transition):
        states = np.stack([t.state for t in batch])
        actions = np.array([t.action for t in batch])
        rewards = np.array([t.reward for t in batch], dtype=float)
        next_states = np.stack([t.next_state for t in batch])
        terminal = np.array([t.terminal for t in batch], dtype=bool)
    else:
        states, actions, rewards, next_states, terminal = batch
    targets = td_targets(policy, rewards, next_states, terminal)
    q, acts = policy.q.forward_cached(states)
    rows = np.arange(len(actions))
    err = q[rows, actions] - targets
    loss = float(err @ err) / len(err)
    if not math.isfinite(loss):
        raise TrainingError(
            f"non-finite TD loss after {policy.updates} updates: "
            f"rewards [{rewards.min():.3g}, {rewards.max():.3g}], targets [{targets.min():.3g}, {targets.max():.3g}]"
        )
    grad_out = np.zeros_like(q)
    grad_out[rows, actions] = 2.0 * err / len(actions)
    policy.q.backward(acts, grad_out)
    policy.opt.step(policy.q.grad_flat)
    policy.updates += 1
    if policy.updates % policy.config.target_sync_every == 0:
        policy.target.copy_from(policy.q)
    policy.last_loss = loss
    return loss


def anchor_action(policy: DqnPolicy, suggestion: float, owed: float) -> int:
    frac = min(max(suggestion / owed, 0.0), 1.0)
    return int(round(frac * policy.config.n_levels))


def decide_and_learn(policy: DqnPolicy, ctx: DecisionContext, suggestion: LlmSuggestion,
                     rng: np.random.Generator) -> float:
    """Final payment for one decision; also closes the previous transition.

    The previous decision's reward window (utility, penalties and taxes paid
    since then) ends here, becomes a transition with the current state as its
    successor, and triggers one gradient step once the buffer holds a batch.
    """
    owed = ctx.owed_amount
    if owed <= 0:
        return 0.0
    s = encode_state(ctx, suggestion.amount)
    policy._close_pending(s, False, rng)
    a = select_action(policy, s, rng, anchor_action(policy, suggestion.amount, owed))
    paid = to_cents(policy.fraction(a) * owed)
    unpaid = owed - paid
    policy.pending = _Pending(s, a, owed, unpaid if unpaid > EVASION_TOLERANCE else 0.0)
    return paid
