"""Actor-critic PPO with hand-written reverse-mode gradients.

Both networks are small D2RL MLPs: the raw observation is concatenated onto
the input of every hidden layer after the first. The actor outputs a Gaussian
mean with a state-independent log-std; the critic outputs a scalar value.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

import numpy as np

LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0
CHECKPOINT_VERSION = 1
_LOG_2PI = math.log(2.0 * math.pi)


class TrainingError(RuntimeError):
    pass


def elu(x):
    return np.where(x > 0, x, np.expm1(np.minimum(x, 0.0)))


def elu_grad(x):
    return np.where(x > 0, 1.0, np.exp(np.minimum(x, 0.0)))


class MLP:
    """Fully connected ELU network with optional D2RL input concatenation."""

    def __init__(self, in_dim, out_dim, hidden=(128, 64), d2rl=True, rng=None, head_scale=0.01):
        rng = np.random.default_rng(0) if rng is None else rng
        self.in_dim, self.out_dim = int(in_dim), int(out_dim)
        self.hidden = tuple(int(h) for h in hidden)
        self.d2rl = bool(d2rl)
        self.params = {}
        prev = self.in_dim
        for i, h in enumerate(self.hidden):
            fan_in = prev + (self.in_dim if (self.d2rl and i > 0) else 0)
            self.params[f"W{i}"] = rng.normal(0.0, math.sqrt(2.0 / fan_in), (fan_in, h))
            self.params[f"b{i}"] = np.zeros(h)
            prev = h
        self.params["Wout"] = rng.normal(0.0, head_scale / math.sqrt(prev), (prev, self.out_dim))
        self.params["bout"] = np.zeros(self.out_dim)

    def forward(self, x, cache=False):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        h = x
        pre, inputs = [], []
        for i in range(len(self.hidden)):
            inp = np.concatenate([h, x], axis=1) if (self.d2rl and i > 0) else h
            z = inp @ self.params[f"W{i}"] + self.params[f"b{i}"]
            inputs.append(inp)
            pre.append(z)
            h = elu(z)
        out = h @ self.params["Wout"] + self.params["bout"]
        if cache:
            return out, (x, inputs, pre, h)
        return out

    def backward(self, grad_out, cache):
        """Parameter gradients for an upstream gradient ``dL/dout``."""
        x, inputs, pre, h = cache
        g = {"Wout": h.T @ grad_out, "bout": grad_out.sum(axis=0)}
        dh = grad_out @ self.params["Wout"].T
        for i in reversed(range(len(self.hidden))):
            dz = dh * elu_grad(pre[i])
            g[f"W{i}"] = inputs[i].T @ dz
            g[f"b{i}"] = dz.sum(axis=0)
            if i > 0:
                dinp = dz @ self.params[f"W{i}"].T
                dh = dinp[:, : self.hidden[i - 1]] if self.d2rl else dinp
        return g

    def state_dict(self):
        return {k: v.tolist() for k, v in self.params.items()}

    def load_state_dict(self, d):
        for k in self.params:
            arr = np.asarray(d[k], dtype=float)
            if arr.shape != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k] = arr


class PolicyNetwork:
    def __init__(self, obs_dim=4, act_dim=3, hidden=(128, 64), d2rl=True, rng=None,
                 init_log_std=-0.5, head_scale=0.01):
        self.mlp = MLP(obs_dim, act_dim, hidden, d2rl, rng, head_scale)
        self.log_std = np.full(act_dim, float(init_log_std))

    @property
    def params(self):
        return {**{f"pi.{k}": v for k, v in self.mlp.params.items()}, "pi.log_std": self.log_std}

    def set_param(self, name, value):
        key = name.split(".", 1)[1]
        if key == "log_std":
            self.log_std = value
        else:
            self.mlp.params[key] = value

    def forward(self, obs):
        """Action mean and clamped log-std for a batch (or single) observation."""
        mean = self.mlp.forward(obs)
        return mean, np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX)


class ValueNetwork:
    def __init__(self, obs_dim=4, hidden=(128, 64), d2rl=True, rng=None):
        self.mlp = MLP(obs_dim, 1, hidden, d2rl, rng, head_scale=1.0)

    @property
    def params(self):
        return {f"vf.{k}": v for k, v in self.mlp.params.items()}

    def set_param(self, name, value):
        self.mlp.params[name.split(".", 1)[1]] = value

    def forward(self, obs):
        return self.mlp.forward(obs)[:, 0]


def policy_forward(policy, obs):
    mean, log_std = policy.forward(np.asarray(obs, dtype=float).reshape(1, -1))
    return mean[0], log_std


def gaussian_log_prob(x, mean, log_std):
    z = (x - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z * z, axis=-1) - np.sum(log_std) - 0.5 * x.shape[-1] * _LOG_2PI


def sample_action(mean, log_std, rng):
    """Diagonal Gaussian sample; returns (clamped action, raw sample, log-prob of raw)."""
    mean = np.asarray(mean, dtype=float)
    log_std = np.clip(np.asarray(log_std, dtype=float), LOG_STD_MIN, LOG_STD_MAX)
    raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    return np.clip(raw, -1.0, 1.0), raw, float(gaussian_log_prob(raw, mean, log_std))


# -- advantages ----------------------------------------------------------------

def compute_gae(rewards, values, dones, gamma=0.99, lam=0.95):
    """Generalized advantage estimates and returns.

    ``values`` holds ``len(rewards) + 1`` entries: the last one is the
    bootstrap value of the state after the final step.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    n = len(r)
    if len(v) != n + 1 or len(d) != n:
        raise ValueError(f"length mismatch: {n} rewards, {len(v)} values (need n+1), {len(d)} dones")
    adv = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * nonterminal - v[t]
        last = delta + gamma * lam * nonterminal * last
        adv[t] = last
    return adv, adv + v[:-1]


def normalize_advantages(adv):
    adv = np.asarray(adv, dtype=float)
    std = adv.std()
    return (adv - adv.mean()) / (std if std > 1e-12 else 1.0)


# -- optimizer -------------------------------------------------------------------

class Adam:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m, self.v, self.t = {}, {}, 0

    def step(self, params, grads):
        """Return updated copies of ``params`` (a name -> array dict)."""
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        out = {}
        for k, g in grads.items():
            m = self.m.get(k, np.zeros_like(g))
            v = self.v.get(k, np.zeros_like(g))
            m = self.beta1 * m + (1.0 - self.beta1) * g
            v = self.beta2 * v + (1.0 - self.beta2) * g * g
            self.m[k], self.v[k] = m, v
            out[k] = params[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out

    def state_dict(self):
        return {"t": self.t, "m": {k: v.tolist() for k, v in self.m.items()},
                "v": {k: v.tolist() for k, v in self.v.items()}}

    def load_state_dict(self, d):
        self.t = int(d["t"])
        self.m = {k: np.asarray(v, dtype=float) for k, v in d["m"].items()}
        self.v = {k: np.asarray(v, dtype=float) for k, v in d["v"].items()}


def clip_global_norm(grads, max_norm):
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        grads = {k: g * scale for k, g in grads.items()}
    return grads, norm


# -- PPO -----------------------------------------------------------------------

@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    minibatch_size: int = 16
    clip_epsilon: float = 0.2
    epochs_per_update: int = 4
    steps_per_update: int = 2048
    total_steps: int = 300_000
    entropy_coef: float = 0.0
    value_coef: float = 0.5
    max_grad_norm: float = 0.5
    hidden: tuple = (128, 64)
    d2rl: bool = True
    init_log_std: float = -0.5
    # critic regresses returns standardized by running statistics
    normalize_value_targets: bool = True
    n_envs: int = 1

    def __post_init__(self):
        if not 0 < self.gamma <= 1:
            raise ValueError("gamma must lie in (0, 1]")
        if not 0 < self.clip_epsilon < 1:
            raise ValueError("clip_epsilon must lie in (0, 1)")
        if not 0 <= self.gae_lambda <= 1:
            raise ValueError("gae_lambda must lie in [0, 1]")
        if self.minibatch_size < 1 or self.steps_per_update < self.minibatch_size:
            raise ValueError("need steps_per_update >= minibatch_size >= 1")
        if self.epochs_per_update < 1 or self.total_steps < 1 or self.n_envs < 1:
            raise ValueError("epochs_per_update, total_steps and n_envs must be positive")
        object.__setattr__(self, "hidden", tuple(self.hidden))

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown PPO config keys {sorted(unknown)}")
        return cls(**d)


class RunningStats:
    """Streaming mean/variance (parallel Welford merge)."""

    def __init__(self):
        self.count, self.mean, self.m2 = 0, 0.0, 0.0

    def update(self, x):
        x = np.asarray(x, dtype=float).ravel()
        if x.size == 0:
            return
        n, mean = x.size, float(x.mean())
        m2 = float(np.sum((x - mean) ** 2))
        delta = mean - self.mean
        tot = self.count + n
        self.mean += delta * n / tot
        self.m2 += m2 + delta * delta * self.count * n / tot
        self.count = tot

    @property
    def std(self):
        return math.sqrt(self.m2 / self.count) if self.count > 1 else 1.0

    def to_dict(self):
        return {"count": self.count, "mean": self.mean, "m2": self.m2}

    def load(self, d):
        self.count, self.mean, self.m2 = int(d["count"]), float(d["mean"]), float(d["m2"])


@dataclass
class RolloutBuffer:
    obs: np.ndarray
    raw_actions: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray = None
    returns: np.ndarray = None

    def __len__(self):
        return len(self.rewards)


def clipped_surrogate(ratio, adv, clip_epsilon):
    """Per-sample ``min(r A, clip(r, 1-eps, 1+eps) A)``."""
    return np.minimum(ratio * adv, np.clip(ratio, 1.0 - clip_epsilon, 1.0 + clip_epsilon) * adv)


class ActorCritic:
    def __init__(self, obs_dim=4, act_dim=3, config: PpoConfig = PpoConfig(), seed=0):
        rng = np.random.default_rng([int(seed), 11])
        self.config = config
        self.policy = PolicyNetwork(obs_dim, act_dim, config.hidden, config.d2rl, rng, config.init_log_std)
        self.value = ValueNetwork(obs_dim, config.hidden, config.d2rl, rng)
        self.optim = Adam(config.learning_rate)
        self.ret_stats = RunningStats()

    @property
    def params(self):
        return {**self.policy.params, **self.value.params}

    def set_params(self, new):
        for k, v in new.items():
            (self.policy if k.startswith("pi.") else self.value).set_param(k, v)

    def value_of(self, obs):
        """Critic output in return units."""
        v = self.value.forward(obs)
        if self.config.normalize_value_targets:
            return v * self.ret_stats.std + self.ret_stats.mean
        return v

    def act(self, obs, rng, deterministic=False):
        mean, log_std = policy_forward(self.policy, obs)
        if deterministic:
            return np.clip(mean, -1.0, 1.0), mean, float(gaussian_log_prob(mean, mean, log_std))
        return sample_action(mean, log_std, rng)

    # losses and gradients for one minibatch
    def loss_and_grads(self, obs, raw, old_logp, adv, ret):
        cfg = self.config
        mean, cache_pi = self.policy.mlp.forward(obs, cache=True)
        log_std_raw = self.policy.log_std
        log_std = np.clip(log_std_raw, LOG_STD_MIN, LOG_STD_MAX)
        std_inv = np.exp(-log_std)
        z = (raw - mean) * std_inv
        logp = -0.5 * np.sum(z * z, axis=1) - np.sum(log_std) - 0.5 * raw.shape[1] * _LOG_2PI
        ratio = np.exp(logp - old_logp)
        lo, hi = 1.0 - cfg.clip_epsilon, 1.0 + cfg.clip_epsilon
        surr = clipped_surrogate(ratio, adv, cfg.clip_epsilon)
        n = len(adv)
        entropy = float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + _LOG_2PI))
        actor_loss = -float(np.mean(surr)) - cfg.entropy_coef * entropy
        # d(surr)/d(logp): unclipped branch active when r*A <= clip(r)*A
        unclipped = ratio * adv <= np.clip(ratio, lo, hi) * adv
        dlogp = np.where(unclipped, -ratio * adv, 0.0) / n
        dmean = dlogp[:, None] * (z * std_inv)
        inside = (log_std_raw > LOG_STD_MIN) & (log_std_raw < LOG_STD_MAX)
        dlog_std = (np.sum(dlogp[:, None] * (z * z - 1.0), axis=0) - cfg.entropy_coef) * inside
        grads = {f"pi.{k}": g for k, g in self.policy.mlp.backward(dmean, cache_pi).items()}
        grads["pi.log_std"] = dlog_std

        v, cache_v = self.value.mlp.forward(obs, cache=True)
        target = ret
        if cfg.normalize_value_targets:
            target = (ret - self.ret_stats.mean) / self.ret_stats.std
        err = v[:, 0] - target
        value_loss = float(np.mean(err * err))
        dv = (cfg.value_coef * 2.0 * err / n)[:, None]
        grads.update({f"vf.{k}": g for k, g in self.value.mlp.backward(dv, cache_v).items()})
        approx_kl = float(np.mean(old_logp - logp))
        clip_frac = float(np.mean(~unclipped))
        return actor_loss, value_loss, grads, approx_kl, clip_frac

    def state_dict(self):
        return {
            "policy": self.policy.mlp.state_dict(),
            "log_std": self.policy.log_std.tolist(),
            "value": self.value.mlp.state_dict(),
            "optimizer": self.optim.state_dict(),
            "return_stats": self.ret_stats.to_dict(),
        }

    def load_state_dict(self, d):
        self.policy.mlp.load_state_dict(d["policy"])
        self.policy.log_std = np.asarray(d["log_std"], dtype=float)
        self.value.mlp.load_state_dict(d["value"])
        self.optim.load_state_dict(d["optimizer"])
        self.ret_stats.load(d["return_stats"])


def ppo_update(buffer: RolloutBuffer, agent: ActorCritic, config: PpoConfig, rng):
    """Clipped-objective epochs over shuffled minibatches; returns a loss report."""
    n = len(buffer)
    adv = normalize_advantages(buffer.advantages)
    if config.normalize_value_targets:
        agent.ret_stats.update(buffer.returns)
    report = {"actor_loss": [], "value_loss": [], "approx_kl": [], "clip_fraction": [], "grad_norm": []}
    for _ in range(config.epochs_per_update):
        order = rng.permutation(n)
        for start in range(0, n - config.minibatch_size + 1, config.minibatch_size):
            idx = order[start:start + config.minibatch_size]
            a_loss, v_loss, grads, kl, cf = agent.loss_and_grads(
                buffer.obs[idx], buffer.raw_actions[idx], buffer.log_probs[idx], adv[idx], buffer.returns[idx])
            if not (math.isfinite(a_loss) and math.isfinite(v_loss)):
                raise TrainingError(f"non-finite loss (actor={a_loss}, value={v_loss})")
            grads, norm = clip_global_norm(grads, config.max_grad_norm)
            agent.set_params(agent.optim.step(agent.params, grads))
            for key, val in zip(report, (a_loss, v_loss, kl, cf, norm)):
                report[key].append(val)
    for k, p in agent.params.items():
        if not np.all(np.isfinite(p)):
            raise TrainingError(f"parameter {k} became non-finite")
    return {k: float(np.mean(v)) for k, v in report.items()}


# -- training loop -------------------------------------------------------------------

def _obs_array(obs):
    return obs.as_array() if hasattr(obs, "as_array") else np.asarray(obs, dtype=float)


TRUNCATION_REASONS = ("horizon", "goal_reached")
CURVE_FIELDS = ("update", "steps", "mean_reward", "success_rate", "collision_rate", "episodes",
                "actor_loss", "value_loss")


def config_hash(*parts):
    blob = json.dumps(parts, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


class _Worker:
    """One environment instance with its own episode counter."""

    def __init__(self, env_factory, rank, seed):
        self.factory, self.rank, self.seed = env_factory, rank, seed
        self.episode = 0
        self.env = None
        self.obs = None
        self.ep_return = 0.0

    def start(self):
        ep_seed = int(self.seed) * 1_000_003 + self.rank * 100_003 + self.episode
        self.env = self.factory(self.rank, self.episode, ep_seed)
        self.obs = _obs_array(self.env.reset(ep_seed))
        self.ep_return = 0.0
        self.episode += 1


def train(env_factory, ppo_config: PpoConfig = PpoConfig(), seed=0, curve_path=None, progress=None,
          agent=None):
    """Alternate rollout collection and PPO updates.

    ``env_factory(rank, episode, episode_seed)`` returns a fresh environment
    exposing ``reset(seed)`` and ``step(action)``; each of the ``n_envs``
    instances is stepped in turn inside this process, so results depend only
    on ``seed`` and ``n_envs``.
    Returns ``(agent, curve)`` where ``curve`` is a list of per-update rows.
    """
    cfg = ppo_config
    rng = np.random.default_rng([int(seed), 29])
    workers = [_Worker(env_factory, r, seed) for r in range(cfg.n_envs)]
    for w in workers:
        w.start()
    obs_dim = len(workers[0].obs)
    agent = agent or ActorCritic(obs_dim, 3, cfg, seed)
    curve = []
    steps = 0
    update = 0
    csv_file = None
    writer = None
    if curve_path is not None:
        csv_file = open(curve_path, "w", newline="")
        writer = csv.writer(csv_file)
        writer.writerow(CURVE_FIELDS)
    try:
        while steps < cfg.total_steps:
            n = min(cfg.steps_per_update, cfg.total_steps - steps)
            n = max(n - n % cfg.minibatch_size, cfg.minibatch_size)
            per = -(-n // cfg.n_envs)
            traj = []
            finished = []
            for w in workers:
                o, ra, lp, r, v, d = [], [], [], [], [], []
                for _ in range(per):
                    action, raw, logp = agent.act(w.obs, rng)
                    value = float(agent.value_of(w.obs[None])[0])
                    out = w.env.step(action)
                    reward = out.reward.total if hasattr(out.reward, "total") else float(out.reward)
                    w.ep_return += reward
                    next_obs = _obs_array(out.observation)
                    terminal = out.done and out.done_reason not in TRUNCATION_REASONS
                    if out.done and not terminal:
                        # time-limit style ends bootstrap from the final state
                        reward = reward + cfg.gamma * float(agent.value_of(next_obs[None])[0])
                    o.append(w.obs), ra.append(raw), lp.append(logp)
                    r.append(reward), v.append(value), d.append(1.0 if out.done else 0.0)
                    if out.done:
                        finished.append((w.ep_return, out.done_reason))
                        w.start()
                    else:
                        w.obs = next_obs
                boot = float(agent.value_of(w.obs[None])[0])
                adv, ret = compute_gae(r, v + [boot], d, cfg.gamma, cfg.gae_lambda)
                traj.append((o, ra, lp, r, v, d, adv, ret))
            buf = RolloutBuffer(
                obs=np.array([x for t in traj for x in t[0]]),
                raw_actions=np.array([x for t in traj for x in t[1]]),
                log_probs=np.array([x for t in traj for x in t[2]]),
                rewards=np.array([x for t in traj for x in t[3]]),
                values=np.array([x for t in traj for x in t[4]]),
                dones=np.array([x for t in traj for x in t[5]]),
                advantages=np.concatenate([t[6] for t in traj]),
                returns=np.concatenate([t[7] for t in traj]),
            )
            report = ppo_update(buf, agent, cfg, rng)
            steps += len(buf)
            update += 1
            if finished:
                mean_r = float(np.mean([f[0] for f in finished]))
                succ = float(np.mean([f[1] == "goal_reached" for f in finished]))
                coll = float(np.mean([f[1] == "collision" for f in finished]))
            else:
                mean_r = succ = coll = float("nan")
            row = {"update": update, "steps": steps, "mean_reward": mean_r, "success_rate": succ,
                   "collision_rate": coll, "episodes": len(finished),
                   "actor_loss": report["actor_loss"], "value_loss": report["value_loss"]}
            curve.append(row)
            if writer is not None:
                writer.writerow([_fmt(row[k]) for k in CURVE_FIELDS])
                csv_file.flush()
            if progress is not None:
                progress(row)
    finally:
        if csv_file is not None:
            csv_file.close()
    agent.rng_state = rng.bit_generator.state
    agent.steps_done = steps
    return agent, curve


def _fmt(x):
    if isinstance(x, float):
        return "nan" if math.isnan(x) else repr(x)
    return str(x)


# -- checkpoints -------------------------------------------------------------------

def save_checkpoint(path, agent: ActorCritic, extra=None):
    payload = {
        "version": CHECKPOINT_VERSION,
        "obs_dim": agent.policy.mlp.in_dim,
        "act_dim": agent.policy.mlp.out_dim,
        "ppo_config": agent.config.to_dict(),
        "state": agent.state_dict(),
        "rng_state": getattr(agent, "rng_state", None),
        "steps_done": getattr(agent, "steps_done", 0),
        **(extra or {}),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")


def load_checkpoint(path):
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"file not found: {path}")
    d = json.loads(p.read_text())
    if d.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {d.get('version')!r}")
    cfg = PpoConfig.from_dict(d["ppo_config"])
    agent = ActorCritic(d["obs_dim"], d["act_dim"], cfg)
    agent.load_state_dict(d["state"])
    agent.rng_state = d.get("rng_state")
    agent.steps_done = d.get("steps_done", 0)
    agent.meta = {k: v for k, v in d.items() if k not in ("state",)}
    return agent


# -- gradient check -------------------------------------------------------------------

def gradient_check(net: MLP, probe_inputs, rng=None, n_coords=20, rel_step=1e-4):
    """Max relative error between backprop and central differences.

    The scalar loss is a fixed random projection of the network outputs.
    ``n_coords`` randomly chosen coordinates of every parameter array are
    probed (all of them when the array is smaller).
    """
    rng = np.random.default_rng(0) if rng is None else rng
    x = np.atleast_2d(np.asarray(probe_inputs, dtype=float))
    proj = rng.standard_normal((x.shape[0], net.out_dim))

    def loss():
        return float(np.sum(net.forward(x) * proj))

    out, cache = net.forward(x, cache=True)
    grads = net.backward(proj, cache)
    worst = 0.0
    for name, p in net.params.items():
        flat = p.reshape(-1)
        idx = np.arange(flat.size) if flat.size <= n_coords else rng.choice(flat.size, n_coords, replace=False)
        for i in idx:
            old = flat[i]
            h = rel_step * max(abs(old), 1.0)
            flat[i] = old + h
            up = loss()
            flat[i] = old - h
            down = loss()
            flat[i] = old
            num = (up - down) / (2.0 * h)
            ana = grads[name].reshape(-1)[i]
            scale = max(abs(num), abs(ana))
            if scale > 1e-7:
                worst = max(worst, abs(num - ana) / scale)
    return worst


# -- toy task -------------------------------------------------------------------

class ToyCenteringEnv:
    """One-dimensional centering task with the distance reward only.

    The observation mirrors the navigation encoding ``(u, 0, u, 0)``; the
    first action component shifts the offset by ``-gain * a``.
    """

    def __init__(self, horizon=100, gain=0.3, drift=0.02, epsilon=1e-6):
        self.horizon, self.gain, self.drift, self.epsilon = horizon, gain, drift, epsilon
        self.rng = None
        self.u = 0.0
        self.t = 0

    def _obs(self):
        return np.array([self.u, 0.0, self.u, 0.0])

    def reset(self, seed=0):
        self.rng = np.random.default_rng([int(seed), 3])
        self.u = float(self.rng.uniform(-1.0, 1.0))
        self.t = 0
        return self._obs()

    def step(self, action):
        from .env import reward_distance

        a = float(np.clip(np.asarray(action, dtype=float)[0], -1.0, 1.0))
        self.u = float(np.clip(self.u - self.gain * a + self.drift * self.rng.standard_normal(), -1.0, 1.0))
        self.t += 1
        r = float(reward_distance(self.u, 0.0, self.epsilon))
        done = self.t >= self.horizon
        return _ToyOutcome(self._obs(), r, done, "horizon" if done else None, {})


@dataclass
class _ToyOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    done_reason: str | None
    info: dict


def run_policy(agent: ActorCritic, env, seed, deterministic=True, max_steps=None):
    """Roll one episode with the agent; returns the list of step outcomes."""
    rng = np.random.default_rng([int(seed), 31])
    obs = _obs_array(env.reset(seed))
    outcomes = []
    while True:
        action = agent.act(obs, rng, deterministic=deterministic)[0]
        out = env.step(action)
        outcomes.append(out)
        obs = _obs_array(out.observation)
        if out.done or (max_steps is not None and len(outcomes) >= max_steps):
            return outcomes


def replace_config(cfg, **kw):
    return replace(cfg, **kw)
