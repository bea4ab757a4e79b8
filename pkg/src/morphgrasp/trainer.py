"""PPO with GAE over the grasp environment, plus seeded evaluation sweeps."""

import json
import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .env import EnvConfig, ObjectSpec, evaluate_success, reset, step
from .errors import InvalidConfigError, LengthMismatchError, NaNDetectedError
from .magcn import GraphBatch, PolicyNetwork

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PpoConfig:
    gamma: float = 0.996
    lam: float = 0.95
    clip: float = 0.2
    epochs: int = 4
    minibatches: int = 4
    lr: float = 5e-4
    max_grad_norm: float = 0.5
    n_repeat: int = 3
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    scale_rewards: bool = True
    kl_target: float | None = None  # set to adapt lr from the per-minibatch KL; None keeps lr fixed
    lr_bounds: tuple = (1e-5, 1e-2)

    def validate(self):
        if not 0.0 < self.clip < 1.0:
            raise InvalidConfigError(f"clip must lie in (0, 1), got {self.clip}")
        for name in ("gamma", "lam", "epochs", "minibatches", "lr", "max_grad_norm", "n_repeat"):
            if not getattr(self, name) > 0:
                raise InvalidConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.gamma > 1 or self.lam > 1:
            raise InvalidConfigError("gamma and lam must not exceed 1")
        if self.kl_target is not None and not self.kl_target > 0:
            raise InvalidConfigError(f"kl_target must be positive, got {self.kl_target}")
        return self


# -- advantages -------------------------------------------------------------------


def compute_gae(rewards, values, dones, gamma, lam):
    """Generalized advantage estimates; ``values`` carries one trailing bootstrap entry."""
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=float)
    if v.shape[0] != r.shape[0] + 1 or d.shape[0] != r.shape[0]:
        raise LengthMismatchError(
            f"need len(values) = len(rewards) + 1 = len(dones) + 1, got {len(v)}, {len(r)}, {len(d)}")
    adv = np.zeros_like(r)
    last = 0.0
    for t in range(len(r) - 1, -1, -1):
        live = 1.0 - d[t]
        delta = r[t] + gamma * v[t + 1] * live - v[t]
        last = delta + gamma * lam * live * last
        adv[t] = last
    return adv, adv + v[:-1]


class RunningStd:
    """Streaming variance (parallel update rule) for reward scaling."""

    def __init__(self):
        self.count, self.mean, self.m2 = 1e-4, 0.0, 0.0

    def update(self, x):
        x = np.asarray(x, dtype=float).ravel()
        n, mu = x.size, float(x.mean())
        var = float(x.var())
        delta = mu - self.mean
        total = self.count + n
        self.mean += delta * n / total
        self.m2 += var * n + delta * delta * self.count * n / total
        self.count = total

    @property
    def std(self):
        return float(np.sqrt(self.m2 / self.count)) if self.count > 1 else 1.0


# -- optimizer --------------------------------------------------------------------


class Adam:
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1.0 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1.0 - self.b2) * g * g
            p.data = p.data - self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def adapt_lr(lr, kl, target, bounds=(1e-5, 1e-2)):
    """Shrink lr by 1.5 when KL exceeds twice the target, grow it by 1.5 below half the target."""
    if kl > 2.0 * target:
        return max(bounds[0], lr / 1.5)
    if kl < 0.5 * target:
        return min(bounds[1], lr * 1.5)
    return lr


def clip_grad_norm(grads, max_norm):
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        f = max_norm / (norm + 1e-12)
        grads = {k: g * f for k, g in grads.items()}
    return grads, norm


# -- rollouts -----------------------------------------------------------------------


@dataclass(eq=False)
class RolloutBatch:
    states: list
    u: list  # normalized actions, flat per transition
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    dones: np.ndarray
    advantages: np.ndarray | None = None
    returns: np.ndarray | None = None

    def __len__(self):
        return len(self.states)


def _threads():
    try:
        return max(1, int(os.environ.get("MORPHGRASP_THREADS", "1")))
    except ValueError:
        return 1


def _step_all(scenes, actions, pool):
    if pool is None:
        return [step(s, a) for s, a in zip(scenes, actions)]
    return list(pool.map(lambda sa: step(*sa), zip(scenes, actions)))


def run_episodes(net, bundles, objects, seeds, env_config=None, rng=None, deterministic=False,
                 physicals=None, record_actions=False):
    """Run one episode per (bundle, object, seed) in lockstep with batched forwards.

    Returns scenes plus per-env trajectories: states, normalized actions, log-probs,
    values, rewards. With ``deterministic`` the Gaussian mean is executed.
    """
    cfg = env_config or EnvConfig()
    physicals = physicals or [None] * len(bundles)
    started = [reset(b, o, cfg, s, p) for b, o, s, p in zip(bundles, objects, seeds, physicals)]
    scenes = [sc for sc, _ in started]
    obs = [o for _, o in started]
    T = cfg.max_steps
    traj = [{"states": [], "u": [], "logp": [], "value": [], "reward": [], "breakdown": [], "mean": []}
            for _ in scenes]
    n_threads = _threads()
    pool = ThreadPoolExecutor(n_threads) if n_threads > 1 and len(scenes) > 1 else None
    try:
        for _ in range(T):
            out = net.forward(obs)
            actions = []
            for k, sc in enumerate(scenes):
                mean, log_std = out.mean_flat(k), out.log_std_flat(k)
                if deterministic:
                    u = mean
                else:
                    u = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
                z = (u - mean) * np.exp(-log_std)
                logp = float(np.sum(-0.5 * z * z - log_std) - 0.5 * np.log(2 * np.pi) * u.size)
                t = traj[k]
                t["states"].append(obs[k])
                t["u"].append(u)
                t["logp"].append(logp)
                t["value"].append(float(out.value[k]))
                if record_actions:
                    t["mean"].append(mean.copy())
                actions.append(net.to_action(u, sc.bundle.n_nodes))
            results = _step_all(scenes, actions, pool)
            obs = []
            for k, (o, rb, done) in enumerate(results):
                traj[k]["reward"].append(rb.total)
                traj[k]["breakdown"].append(rb)
                obs.append(o)
        final = net.forward(obs)
        for k in range(len(scenes)):
            traj[k]["bootstrap"] = float(final.value[k])
    finally:
        if pool is not None:
            pool.shutdown()
    return scenes, traj


def _iteration_envs(hands, objects, n_repeat):
    return [(h, o) for h in hands for o in objects for _ in range(n_repeat)]


def collect_rollouts(net, hands, objects, cfg, env_config, rng, reward_stats=None):
    envs = _iteration_envs(hands, objects, cfg.n_repeat)
    seeds = [int(s) for s in rng.integers(0, 2**31 - 1, size=len(envs))]
    scenes, traj = run_episodes(net, [h for h, _ in envs], [o for _, o in envs], seeds, env_config, rng)
    raw = np.array([t["reward"] for t in traj])  # envs x T
    scale = 1.0
    if cfg.scale_rewards and reward_stats is not None:
        disc = np.zeros(raw.shape[0])
        rets = []
        for t in range(raw.shape[1]):
            disc = disc * cfg.gamma + raw[:, t]
            rets.append(disc.copy())
        reward_stats.update(np.array(rets))
        scale = 1.0 / max(reward_stats.std, 1e-8)
    states, us, logps, rews, vals, dones, advs, rets = [], [], [], [], [], [], [], []
    T = raw.shape[1]
    for k, t in enumerate(traj):
        r = raw[k] * scale
        d = np.zeros(T)
        d[-1] = 1.0  # episodes end by time limit; no bootstrap past the horizon
        v = np.array(t["value"] + [0.0])
        a, ret = compute_gae(r, v, d, cfg.gamma, cfg.lam)
        states += t["states"]
        us += t["u"]
        logps += t["logp"]
        rews.append(r)
        vals.append(v[:-1])
        dones.append(d)
        advs.append(a)
        rets.append(ret)
    batch = RolloutBatch(states=states, u=us, log_probs=np.array(logps), rewards=np.concatenate(rews),
                         values=np.concatenate(vals), dones=np.concatenate(dones),
                         advantages=np.concatenate(advs), returns=np.concatenate(rets))
    info = []
    for (h, o), sc, t in zip(envs, scenes, traj):
        info.append({"hand": h.hand_id, "object": ObjectSpec.coerce(o).shape,
                     "return": float(np.sum(t["reward"])), "success": evaluate_success(sc)})
    return batch, info


# -- update ---------------------------------------------------------------------------


def _stack_actions(batch_states, us):
    wrist = np.array([u[:6] for u in us])
    nodes = np.vstack([u[6:].reshape(-1, 3) for u in us])
    return wrist, nodes


def ppo_loss(net, states, us, old_logp, adv, returns, cfg, batch=None):
    """Build the clipped-surrogate + value loss on the active tape.

    ``batch`` may carry a prebuilt ``(GraphBatch, wrist_actions, node_actions)``.
    """
    gb, aw, an = batch if batch is not None else (GraphBatch.from_states(states),
                                                   *_stack_actions(states, us))
    logp, value, entropy = net.log_prob_tensors(gb, aw, an)
    A = ad.Tensor(np.asarray(adv, dtype=float)[:, None])
    ratio = ad.exp(ad.sub(logp, ad.Tensor(np.asarray(old_logp, dtype=float)[:, None])))
    surr = ad.minimum(ad.mul(ratio, A), ad.mul(ad.clip(ratio, 1.0 - cfg.clip, 1.0 + cfg.clip), A))
    policy_loss = ad.scale(ad.mean(surr), -1.0)
    value_loss = ad.mean(ad.square(ad.sub(value, ad.Tensor(np.asarray(returns, dtype=float)[:, None]))))
    loss = policy_loss + ad.scale(value_loss, cfg.value_coef)
    if cfg.entropy_coef:
        loss = loss + ad.scale(entropy, -cfg.entropy_coef)
    log_r = logp.data[:, 0] - np.asarray(old_logp, dtype=float)
    return loss, {"policy_loss": float(policy_loss.data), "value_loss": float(value_loss.data),
                  "entropy": float(entropy.data), "kl": float(np.mean(-log_r)),
                  "kl_k3": float(np.mean(np.expm1(log_r) - log_r))}


def ppo_update(net, batch, cfg, optimizer=None, rng=None, normalize_advantages=True):
    """Epochs of shuffled minibatch PPO steps; returns mean loss statistics."""
    rng = rng if rng is not None else np.random.default_rng(0)
    optimizer = optimizer or Adam(net.params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    adv = np.asarray(batch.advantages, dtype=float)
    if normalize_advantages and adv.size > 1:
        adv = (adv - adv.mean()) / (adv.std() + 1e-8)
    n = len(batch)
    stats = []
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for chunk in np.array_split(order, min(cfg.minibatches, n)):
            with ad.Tape() as tape:
                loss, s = ppo_loss(net, [batch.states[i] for i in chunk], [batch.u[i] for i in chunk],
                                   batch.log_probs[chunk], adv[chunk], batch.returns[chunk], cfg)
            grads = tape.backward(loss, net.params)
            bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
            if bad or not np.isfinite(loss.data):
                raise NaNDetectedError("ppo_update", {"loss": float(loss.data), "parameters": bad[:10]})
            grads, norm = clip_grad_norm(grads, cfg.max_grad_norm)
            if cfg.kl_target is not None:
                optimizer.lr = adapt_lr(optimizer.lr, s["kl_k3"], cfg.kl_target, cfg.lr_bounds)
            optimizer.step(net.params, grads)
            s["grad_norm"] = norm
            s["lr"] = optimizer.lr
            stats.append(s)
    return {k: float(np.mean([s[k] for s in stats])) for k in stats[0]}


# -- training loop ---------------------------------------------------------------------


@dataclass(eq=False)
class TrainResult:
    net: PolicyNetwork
    metrics: list = field(default_factory=list)


def train(hands, objects, cfg=None, iterations=50, seed=0, env_config=None, net=None,
          metrics_path=None, checkpoint_dir=None, checkpoint_every=0, callback=None):
    """Joint PPO over every (hand, object, repeat) environment with one shared network."""
    if not hands:
        raise InvalidConfigError("train needs at least one hand")
    if not objects:
        raise InvalidConfigError("train needs at least one object")
    cfg = (cfg or PpoConfig()).validate()
    env_config = env_config or EnvConfig()
    objects = [ObjectSpec.coerce(o) for o in objects]
    rng = np.random.default_rng(seed)
    net = net or PolicyNetwork.initialize(seed=int(rng.integers(2**31 - 1)))
    optimizer = Adam(net.params, cfg.lr, cfg.adam_betas, cfg.adam_eps)
    stats = RunningStd()
    result = TrainResult(net=net)
    sink = open(metrics_path, "w") if metrics_path else None
    try:
        for it in range(iterations):
            batch, info = collect_rollouts(net, hands, objects, cfg, env_config, rng, stats)
            losses = ppo_update(net, batch, cfg, optimizer, rng)
            per_hand = {}
            for h in hands:
                rows = [i for i in info if i["hand"] == h.hand_id]
                per_hand[h.hand_id] = {"reward": float(np.mean([r["return"] for r in rows])),
                                       "success": float(np.mean([r["success"] for r in rows]))}
            record = {"iteration": it, "per_hand": per_hand,
                      "reward": float(np.mean([i["return"] for i in info])),
                      "success": float(np.mean([i["success"] for i in info])), **losses}
            result.metrics.append(record)
            log.info("iter %d reward %.3f success %.2f", it, record["reward"], record["success"])
            if sink:
                sink.write(json.dumps(record) + "\n")
                sink.flush()
            if checkpoint_dir and checkpoint_every and (it + 1) % checkpoint_every == 0:
                Path(checkpoint_dir).mkdir(parents=True, exist_ok=True)
                net.save(Path(checkpoint_dir) / f"iter_{it + 1:04d}.weights.json")
            if callback:
                callback(record, net)
    finally:
        if sink:
            sink.close()
    return result


# -- evaluation ------------------------------------------------------------------------


@dataclass(eq=False)
class EvalResult:
    success_rate: float
    per_object: dict
    returns: list
    actions: list  # per trial: array (steps, action_dim) of executed normalized means
    dq_in_limits: bool = True
    shape_violations: int = 0


def evaluate(net, bundle, objects, trials=25, link_scale=1.0, seed=0, env_config=None,
             deterministic=True, record_actions=True):
    """Seeded grasp trials per object.

    ``link_scale`` rebuilds the physical priors from a scaled tree while the simulated
    geometry stays nominal.
    """
    cfg = env_config or EnvConfig()
    objects = [ObjectSpec.coerce(o) for o in objects]
    features = bundle.with_link_scale(link_scale).physical
    rng = np.random.default_rng(seed)
    per_object, returns, actions = {}, [], []
    within = True
    tree = bundle.tree
    lower = np.array([tree.joints[j].lower for j in tree.actuated])
    upper = np.array([tree.joints[j].upper for j in tree.actuated])
    for obj in objects:
        seeds = [seed * 1000003 + k for k in range(trials)]
        scenes, traj = run_episodes(net, [bundle] * trials, [obj] * trials, seeds, cfg, rng=rng,
                                    deterministic=deterministic, physicals=[features] * trials,
                                    record_actions=record_actions)
        successes = [evaluate_success(sc) for sc in scenes]
        per_object[obj.shape] = float(np.mean(successes))
        for sc, t in zip(scenes, traj):
            returns.append(float(np.sum(t["reward"])))
            within &= bool(np.all(sc.q >= lower) and np.all(sc.q <= upper))
            if record_actions:
                actions.append(np.array(t["mean"]))
    rate = float(np.mean(list(per_object.values())))
    return EvalResult(success_rate=rate, per_object=per_object, returns=returns, actions=actions,
                      dq_in_limits=within)
