"""Soft actor-critic with hand-written backprop over small tanh MLPs.

Actions live in the normalized cube [-1, 1]^3 (``tanh`` of a Gaussian draw);
the emitted velocity command is ``limits * a``. The log-probability and the
entropy target are measured in the normalized space.
"""

from __future__ import annotations

import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .eval import Episode, EpisodeLimits, EpisodeOutcome, run_episode
from .instructions import make_instruction
from .policy import PolicyInput, PolicyOutput
from .world import (
    ALTITUDE_MAX,
    DEFAULT_LIMITS,
    ActionLimits,
    DepthImage,
    Scene,
    TargetInstance,
    UavState,
    VelocityAction,
    sample_start,
    wrap_angle,
)

log = logging.getLogger(__name__)

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
LOG_2PI = math.log(2.0 * math.pi)
ACT_DIM = 3
POOL_W, POOL_H = 8, 6
FEATURE_DIM = POOL_W * POOL_H + 3

CHECKPOINT_MAGIC = b"SACA"
CHECKPOINT_SCHEMA = 1


class TrainingError(RuntimeError):
    """Non-finite target, loss or gradient during an update."""


class InsufficientDataError(TrainingError):
    pass


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------


class Mlp:
    """Fully connected net, tanh hidden layers, linear output.

    All weights and biases are views into one flat float64 vector ``theta``
    so optimizers and target averaging can work on a single array.
    """

    def __init__(self, sizes, rng: np.random.Generator | None = None, theta=None, out_scale: float = 1.0):
        sizes = tuple(int(s) for s in sizes)
        if len(sizes) < 2 or min(sizes) < 1:
            raise ValueError(f"bad layer sizes {sizes}")
        self.sizes = sizes
        self.n_params = sum((i + 1) * o for i, o in zip(sizes[:-1], sizes[1:]))
        if theta is not None:
            theta = np.array(theta, dtype=np.float64)
            if theta.shape != (self.n_params,):
                raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        else:
            theta = np.zeros(self.n_params)
        self.theta = theta
        self._bind()
        if rng is not None and not np.any(theta):
            for li, (W, _) in enumerate(self.layers):
                bound = 1.0 / math.sqrt(W.shape[0])
                scale = out_scale if li == len(self.layers) - 1 else 1.0
                W[...] = rng.uniform(-bound, bound, W.shape) * scale
        if not np.all(np.isfinite(self.theta)):
            raise ValueError("non-finite parameters")

    def _bind(self):
        self.layers = []
        self._offsets = []
        k = 0
        for i, o in zip(self.sizes[:-1], self.sizes[1:]):
            W = self.theta[k:k + i * o].reshape(i, o)
            b = self.theta[k + i * o:k + i * o + o]
            self._offsets.append((k, k + i * o, k + i * o + o))
            self.layers.append((W, b))
            k += (i + 1) * o

    def copy(self) -> "Mlp":
        return Mlp(self.sizes, theta=self.theta.copy())

    def forward(self, x: np.ndarray):
        acts = [x]
        h = x
        last = len(self.layers) - 1
        for li, (W, b) in enumerate(self.layers):
            z = h @ W + b
            h = np.tanh(z) if li < last else z
            acts.append(h)
        return h, acts

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.forward(x)[0]

    def backward(self, acts, gy: np.ndarray):
        """Gradient of sum(gy * output) w.r.t. theta and the input."""
        g = np.empty_like(self.theta)
        delta = gy
        for li in range(len(self.layers) - 1, -1, -1):
            W, _ = self.layers[li]
            k0, k1, k2 = self._offsets[li]
            g[k0:k1] = (acts[li].T @ delta).ravel()
            g[k1:k2] = delta.sum(axis=0)
            delta = delta @ W.T
            if li > 0:
                delta = delta * (1.0 - acts[li] ** 2)
        return g, delta


def log1m_tanh2(u: np.ndarray) -> np.ndarray:
    """log(1 - tanh(u)^2), stable for large |u|."""
    return 2.0 * (math.log(2.0) - u - np.logaddexp(0.0, -2.0 * u))


def squash_log_std(raw: np.ndarray) -> np.ndarray:
    return LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * 0.5 * (np.tanh(raw) + 1.0)


class GaussianPolicyHead:
    """tanh-Gaussian actor: the net emits (mean, raw log-std) per action dim."""

    def __init__(self, net: Mlp, act_dim: int = ACT_DIM):
        if net.sizes[-1] != 2 * act_dim:
            raise ValueError("actor output must be 2 * act_dim")
        self.net = net
        self.act_dim = act_dim

    def forward(self, s: np.ndarray, eps: np.ndarray | None = None):
        """Reparameterized sample a = tanh(mean + std * eps) and its log-prob."""
        out, acts = self.net.forward(s)
        A = self.act_dim
        mean, raw = out[:, :A], out[:, A:]
        t = np.tanh(raw)
        log_std = LOG_STD_MIN + (LOG_STD_MAX - LOG_STD_MIN) * 0.5 * (t + 1.0)
        std = np.exp(log_std)
        if eps is None:
            eps = np.zeros_like(mean)
        u = mean + std * eps
        a = np.tanh(u)
        logp = np.sum(-0.5 * eps * eps - log_std - 0.5 * LOG_2PI - log1m_tanh2(u), axis=1)
        return a, logp, (acts, a, t, std, eps)

    def backward(self, cache, g_a: np.ndarray, g_logp: np.ndarray) -> np.ndarray:
        acts, a, t, std, eps = cache
        g_u = g_a * (1.0 - a * a) + g_logp[:, None] * 2.0 * a
        g_log_std = g_u * std * eps - g_logp[:, None]
        g_raw = g_log_std * (LOG_STD_MAX - LOG_STD_MIN) * 0.5 * (1.0 - t * t)
        return self.net.backward(acts, np.concatenate([g_u, g_raw], axis=1))[0]

    def mean_action(self, s: np.ndarray) -> np.ndarray:
        out = self.net(s)
        return np.tanh(out[:, :self.act_dim])


def log_prob_1d(a: np.ndarray, mean: float, log_std: float) -> np.ndarray:
    """Density of a = tanh(u), u ~ N(mean, exp(log_std)^2), in log space."""
    a = np.asarray(a, dtype=np.float64)
    u = np.arctanh(a)
    z = (u - mean) / math.exp(log_std)
    return -0.5 * z * z - log_std - 0.5 * LOG_2PI - log1m_tanh2(u)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------


def q_values(critics, s: np.ndarray, a: np.ndarray) -> np.ndarray:
    x = np.concatenate([s, a], axis=1)
    return np.stack([q(x)[:, 0] for q in critics])


def target_value(s2, r, d, policy: GaussianPolicyHead, target_critics, alpha: float, gamma: float,
                 eps: np.ndarray | None = None) -> np.ndarray:
    """y = r + gamma (1 - d) (min_i Q'_i(s', a') - alpha log pi(a'|s')), a' ~ pi(.|s')."""
    r = np.asarray(r, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    if r.size == 0:
        raise ValueError("empty batch")
    a2, logp2, _ = policy.forward(s2, eps)
    q = q_values(target_critics, s2, a2).min(axis=0)
    # a terminal transition's target is the reward itself, bit for bit
    y = np.where(d == 1.0, r, r + gamma * (1.0 - d) * (q - alpha * logp2))
    if not np.all(np.isfinite(y)):
        raise TrainingError("non-finite TD target")
    return y


def critic_loss(critics, s, a, y):
    """Mean over batch and critics of 0.5 (Q_i(s, a) - y)^2, with parameter gradients."""
    x = np.concatenate([s, a], axis=1)
    B, n = x.shape[0], len(critics)
    loss = 0.0
    grads = []
    for q in critics:
        out, acts = q.forward(x)
        diff = out[:, 0] - y
        loss += 0.5 * float(np.mean(diff * diff)) / n
        grads.append(q.backward(acts, (diff / (B * n))[:, None])[0])
    if not math.isfinite(loss):
        raise TrainingError("non-finite critic loss")
    return loss, grads


def actor_loss(policy: GaussianPolicyHead, critics, s, eps, alpha: float):
    """mean(alpha log pi(a|s) - min_i Q_i(s, a)) with a reparameterized.

    Returns (loss, actor gradient, log-probs). Critic parameters get no
    gradient; the path runs through the critics' action inputs only.
    """
    a, logp, cache = policy.forward(s, eps)
    x = np.concatenate([s, a], axis=1)
    B = x.shape[0]
    outs = [q.forward(x) for q in critics]
    qs = np.stack([o[0][:, 0] for o in outs])
    pick = np.argmin(qs, axis=0)
    qmin = qs[pick, np.arange(B)]
    loss = float(np.mean(alpha * logp - qmin))
    if not math.isfinite(loss):
        raise TrainingError("non-finite actor loss")
    g_x = np.zeros_like(x)
    for i, (q, (_, acts)) in enumerate(zip(critics, outs)):
        w = np.where(pick == i, -1.0 / B, 0.0)[:, None]
        g_x += q.backward(acts, w)[1]
    g_a = g_x[:, s.shape[1]:]
    g_theta = policy.backward(cache, g_a, np.full(B, alpha / B))
    return loss, g_theta, logp


def alpha_loss(log_alpha: float, logp: np.ndarray, target_entropy: float):
    """-mean(alpha (log pi + H_target)); gradient taken w.r.t. log alpha."""
    alpha = math.exp(log_alpha)
    m = float(np.mean(logp + target_entropy))
    return -alpha * m, -alpha * m


# ---------------------------------------------------------------------------
# agent
# ---------------------------------------------------------------------------


class Adam:
    def __init__(self, n: int, lr: float, b1: float = 0.9, b2: float = 0.999, eps: float = 1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, b1, b2, eps
        self.m = np.zeros(n)
        self.v = np.zeros(n)
        self.t = 0

    def step(self, theta: np.ndarray, g: np.ndarray) -> None:
        self.t += 1
        self.m = self.b1 * self.m + (1.0 - self.b1) * g
        self.v = self.b2 * self.v + (1.0 - self.b2) * g * g
        mh = self.m / (1.0 - self.b1 ** self.t)
        vh = self.v / (1.0 - self.b2 ** self.t)
        theta -= self.lr * mh / (np.sqrt(vh) + self.eps)


@dataclass(frozen=True)
class SacConfig:
    gamma: float = 0.99
    polyak: float = 0.995
    lr_actor: float = 3e-4
    lr_critic: float = 3e-4
    lr_alpha: float = 3e-4
    batch_size: int = 256
    target_entropy: float = -float(ACT_DIM)
    init_alpha: float = 0.2
    hidden: tuple = (64, 64)
    buffer_capacity: int = 100_000
    warmup_steps: int = 2_000

    def __post_init__(self):
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0.0 < self.polyak < 1.0:
            raise ValueError("polyak must lie in (0, 1)")
        if self.init_alpha <= 0:
            raise ValueError("init_alpha must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SacConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown sac config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: np.ndarray
    r: float
    s2: np.ndarray
    d: int

    def __post_init__(self):
        if self.d not in (0, 1):
            raise ValueError("termination flag must be 0 or 1")


class ReplayBuffer:
    """Fixed-capacity ring buffer with uniform sampling."""

    def __init__(self, capacity: int = 100_000, obs_dim: int = FEATURE_DIM, act_dim: int = ACT_DIM):
        self.capacity = int(capacity)
        self.s = np.zeros((capacity, obs_dim))
        self.a = np.zeros((capacity, act_dim))
        self.r = np.zeros(capacity)
        self.s2 = np.zeros((capacity, obs_dim))
        self.d = np.zeros(capacity)
        self._next = 0
        self._size = 0

    def __len__(self) -> int:
        return self._size

    def add(self, t: Transition) -> None:
        i = self._next
        self.s[i], self.a[i], self.r[i], self.s2[i], self.d[i] = t.s, t.a, t.r, t.s2, t.d
        self._next = (i + 1) % self.capacity
        self._size = min(self._size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator):
        if self._size < batch_size:
            raise InsufficientDataError(f"insufficient data: {self._size} transitions < batch {batch_size}")
        idx = rng.integers(0, self._size, batch_size)
        return self.s[idx], self.a[idx], self.r[idx], self.s2[idx], self.d[idx]


class SacAgent:
    def __init__(self, config: SacConfig = SacConfig(), obs_dim: int = FEATURE_DIM, act_dim: int = ACT_DIM,
                 seed: int = 0):
        self.config = config
        self.obs_dim, self.act_dim = obs_dim, act_dim
        self.rng = np.random.default_rng(seed)
        h = config.hidden
        self.policy = GaussianPolicyHead(Mlp((obs_dim, *h, 2 * act_dim), self.rng, out_scale=0.1), act_dim)
        self.critics = tuple(Mlp((obs_dim + act_dim, *h, 1), self.rng) for _ in range(2))
        self.targets = tuple(q.copy() for q in self.critics)
        self.log_alpha = np.array([math.log(config.init_alpha)])
        self.opt_actor = Adam(self.policy.net.n_params, config.lr_actor)
        self.opt_critics = tuple(Adam(q.n_params, config.lr_critic) for q in self.critics)
        self.opt_alpha = Adam(1, config.lr_alpha)
        self.updates = 0

    @property
    def alpha(self) -> float:
        return math.exp(float(self.log_alpha[0]))

    def act(self, s: np.ndarray, deterministic: bool = False) -> np.ndarray:
        """Normalized action in [-1, 1]^act_dim for one feature vector."""
        s = np.asarray(s, dtype=np.float64)[None]
        if deterministic:
            return self.policy.mean_action(s)[0]
        eps = self.rng.standard_normal((1, self.act_dim))
        return self.policy.forward(s, eps)[0][0]


def polyak_update(target: Mlp, source: Mlp, tau: float) -> None:
    target.theta *= tau
    target.theta += (1.0 - tau) * source.theta


def train_step(agent: SacAgent, buffer: ReplayBuffer, config: SacConfig | None = None) -> dict:
    """One gradient step on both critics, the actor and alpha, then target averaging."""
    cfg = config or agent.config
    s, a, r, s2, d = buffer.sample(cfg.batch_size, agent.rng)
    B = s.shape[0]
    alpha = agent.alpha
    y = target_value(s2, r, d, agent.policy, agent.targets, alpha, cfg.gamma,
                     agent.rng.standard_normal((B, agent.act_dim)))
    lq, gq = critic_loss(agent.critics, s, a, y)
    for q, g, opt in zip(agent.critics, gq, agent.opt_critics):
        if not np.all(np.isfinite(g)):
            raise TrainingError("non-finite critic gradient")
        opt.step(q.theta, g)
    eps = agent.rng.standard_normal((B, agent.act_dim))
    lpi, gpi, logp = actor_loss(agent.policy, agent.critics, s, eps, alpha)
    if not np.all(np.isfinite(gpi)):
        raise TrainingError("non-finite actor gradient")
    agent.opt_actor.step(agent.policy.net.theta, gpi)
    la, ga = alpha_loss(float(agent.log_alpha[0]), logp, cfg.target_entropy)
    agent.opt_alpha.step(agent.log_alpha, np.array([ga]))
    for tq, q in zip(agent.targets, agent.critics):
        polyak_update(tq, q, cfg.polyak)
    agent.updates += 1
    return {
        "critic_loss": lq,
        "actor_loss": lpi,
        "alpha_loss": la,
        "alpha": agent.alpha,
        "mean_q": float(np.mean(y)),
        "entropy": float(-np.mean(logp)),
    }


# ---------------------------------------------------------------------------
# observation features and the policy adapter
# ---------------------------------------------------------------------------


def pooled_depth(depth: DepthImage, gw: int = POOL_W, gh: int = POOL_H) -> np.ndarray:
    """Mean-pool the depth image to a (gh, gw) grid, normalized by max range."""
    r = depth.ranges.astype(np.float64)
    rows = np.linspace(0, depth.height, gh + 1).astype(int)
    cols = np.linspace(0, depth.width, gw + 1).astype(int)
    if np.any(np.diff(rows) == 0) or np.any(np.diff(cols) == 0):
        raise ValueError(f"depth image {depth.width}x{depth.height} is smaller than the pooling grid")
    sums = np.add.reduceat(np.add.reduceat(r, rows[:-1], axis=0), cols[:-1], axis=1)
    counts = np.outer(np.diff(rows), np.diff(cols))
    return sums / counts / depth.max_range


def features(depth: DepthImage, state: UavState, bearing: float) -> np.ndarray:
    """51-D input: pooled depth, sin/cos of goal bearing relative to yaw, altitude / ceiling."""
    out = np.empty(FEATURE_DIM)
    out[:-3] = pooled_depth(depth).ravel()
    out[-3] = math.sin(bearing)
    out[-2] = math.cos(bearing)
    out[-1] = state.position.z / ALTITUDE_MAX
    return out


def policy_features(inp: PolicyInput) -> np.ndarray:
    st = inp.state
    if inp.goal_position is not None:
        g = inp.goal_position
        bearing = wrap_angle(math.atan2(g.y - st.position.y, g.x - st.position.x) - st.yaw)
    elif inp.goal_hint is not None:
        bearing = wrap_angle(inp.goal_hint - st.yaw)
    else:
        bearing = 0.0
    return features(inp.depth, st, bearing)


class SacPolicy:
    """Policy adapter; evaluation mode emits the squashed mean action."""

    def __init__(self, agent: SacAgent, limits: ActionLimits = DEFAULT_LIMITS, deterministic: bool = True):
        self.agent = agent
        self.limits = limits
        self.deterministic = deterministic

    def reset(self) -> None:
        pass

    def act(self, inp: PolicyInput) -> PolicyOutput:
        s = policy_features(inp)
        a = self.agent.act(s, self.deterministic)
        v = a * self.limits.as_array()
        q = float(q_values(self.agent.critics, s[None], a[None]).min())
        return PolicyOutput(VelocityAction(*v).clamped(self.limits), {"value": q})


# ---------------------------------------------------------------------------
# environment interaction
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RewardConfig:
    progress: float = 2.0  # per metre of planar distance gained toward the goal
    step_penalty: float = 0.01
    collision: float = -5.0
    success: float = 10.0

    def to_dict(self) -> dict:
        return asdict(self)


def collect_training_episode(scene: Scene, agent: SacAgent, reward_config: RewardConfig = RewardConfig(),
                             rng: np.random.Generator | None = None, limits: EpisodeLimits = EpisodeLimits(),
                             goal: TargetInstance | None = None, start: UavState | None = None,
                             deterministic: bool = False, random_actions: bool = False):
    """Roll the agent once; returns (transitions, outcome).

    d = 1 on success or collision; timeouts and leaving the scene are
    truncations (d = 0).
    """
    rng = rng if rng is not None else agent.rng
    goal = goal or scene.goal
    if start is None:
        start = sample_start(scene, rng)
    ep = Episode(scene, goal, start, make_instruction(rng, goal, scene), limits)
    lim = limits.action_limits.as_array()
    g = goal.position
    rc = reward_config
    s = policy_features(ep.observe())
    dist = ep.state.position.planar_distance_to(g)
    out: list[Transition] = []
    while not ep.done:
        if random_actions:
            a = rng.uniform(-1.0, 1.0, ACT_DIM)
        else:
            a = agent.act(s, deterministic)
        action = VelocityAction(*(a * lim))
        term = ep.apply(action)
        a_applied = np.array(action.clamped(limits.action_limits).as_tuple()) / lim
        new_dist = ep.state.position.planar_distance_to(g)
        r = rc.progress * (dist - new_dist) - rc.step_penalty
        if term == "collision":
            r += rc.collision
        elif term == "success":
            r += rc.success
        dist = new_dist
        s2 = policy_features(ep.observe())
        out.append(Transition(s, a_applied, r, s2, int(term in ("success", "collision"))))
        s = s2
    return out, ep.outcome()


@dataclass
class TrainResult:
    agent: SacAgent
    steps: int
    episodes: int
    history: list = field(default_factory=list)
    eval_success: float | None = None


def evaluate_agent(scene: Scene, agent: SacAgent, seeds, limits: EpisodeLimits = EpisodeLimits()) -> list[EpisodeOutcome]:
    pol = SacPolicy(agent, limits.action_limits)
    return [run_episode(scene, pol, scene.goal, limits, seed=int(s)) for s in seeds]


def train_agent(scene: Scene, steps: int, config: SacConfig = SacConfig(), seed: int = 0,
                reward_config: RewardConfig = RewardConfig(), limits: EpisodeLimits = EpisodeLimits(),
                eval_every: int = 10_000, eval_episodes: int = 30, target_success: float | None = 0.95,
                progress=None) -> TrainResult:
    """Train one per-scene agent for at most ``steps`` environment steps.

    Every ``eval_every`` steps the deterministic policy is evaluated on
    ``eval_episodes`` fresh starts; training stops early once the success
    rate reaches ``target_success`` (None disables early stopping).
    """
    agent = SacAgent(config, seed=seed)
    buffer = ReplayBuffer(config.buffer_capacity)
    rng = np.random.default_rng((seed, 1))
    eval_seeds = np.random.default_rng((seed, 2)).integers(2**31, size=eval_episodes)
    res = TrainResult(agent, 0, 0)
    next_eval = eval_every
    while res.steps < steps:
        transitions, outcome = collect_training_episode(
            scene, agent, reward_config, rng, limits, random_actions=res.steps < config.warmup_steps)
        diag = {}
        for t in transitions:
            buffer.add(t)
            res.steps += 1
            if res.steps >= config.warmup_steps and len(buffer) >= config.batch_size:
                diag = train_step(agent, buffer)
            if res.steps >= steps:
                break
        res.episodes += 1
        entry = {"step": res.steps, "episode": res.episodes, "termination": outcome.termination,
                 "return": float(sum(t.r for t in transitions)), **diag}
        res.history.append(entry)
        if progress is not None:
            progress(entry)
        if eval_every and res.steps >= next_eval:
            next_eval += eval_every
            outs = evaluate_agent(scene, agent, eval_seeds, limits)
            sr = sum(o.termination == "success" for o in outs) / len(outs)
            res.eval_success = sr
            log.info("step %d: eval success %.3f alpha %.3f", res.steps, sr, agent.alpha)
            res.history.append({"step": res.steps, "eval_success": sr})
            if target_success is not None and sr >= target_success:
                break
    return res


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------


def save_checkpoint(agent: SacAgent, path, metadata: dict | None = None) -> None:
    """Binary layout: b"SACA", u16 schema, u32 header length, JSON header, LE f64 arrays."""
    arrays = [("actor", agent.policy.net.theta), ("q1", agent.critics[0].theta), ("q2", agent.critics[1].theta),
              ("q1_target", agent.targets[0].theta), ("q2_target", agent.targets[1].theta),
              ("log_alpha", agent.log_alpha)]
    header = {
        "obs_dim": agent.obs_dim,
        "act_dim": agent.act_dim,
        "config": agent.config.to_dict(),
        "updates": agent.updates,
        "layout": [[name, int(a.size)] for name, a in arrays],
        "metadata": metadata or {},
    }
    hb = json.dumps(header, sort_keys=True).encode()
    body = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes() for _, a in arrays)
    Path(path).write_bytes(CHECKPOINT_MAGIC + struct.pack("<HI", CHECKPOINT_SCHEMA, len(hb)) + hb + body)


def load_checkpoint(path) -> SacAgent:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a SAC checkpoint")
    if len(data) < 10:
        raise ValueError(f"{path}: truncated checkpoint")
    schema, hlen = struct.unpack_from("<HI", data, 4)
    if schema != CHECKPOINT_SCHEMA:
        raise ValueError(f"{path}: unsupported checkpoint schema {schema}")
    header = json.loads(data[10:10 + hlen])
    off = 10 + hlen
    cfg = SacConfig.from_dict(header["config"])
    agent = SacAgent(cfg, header["obs_dim"], header["act_dim"])
    dest = {"actor": agent.policy.net.theta, "q1": agent.critics[0].theta, "q2": agent.critics[1].theta,
            "q1_target": agent.targets[0].theta, "q2_target": agent.targets[1].theta, "log_alpha": agent.log_alpha}
    for name, n in header["layout"]:
        if name not in dest or dest[name].size != n:
            raise ValueError(f"{path}: layout mismatch for {name}")
        if off + 8 * n > len(data):
            raise ValueError(f"{path}: truncated checkpoint")
        dest[name][:] = np.frombuffer(data, dtype="<f8", count=n, offset=off)
        off += 8 * n
    agent.updates = header.get("updates", 0)
    return agent
