"""scikit-learn style wrappers over the compile and train/evaluate pipelines."""

from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.exceptions import NotFittedError

from .bundle import HandBundle, compile_file, compile_hand
from .magcn import PolicyNetwork, policy_forward


class HandCompiler(TransformerMixin, BaseEstimator):
    """Stateless transformer: URDF paths or XML strings -> list of :class:`HandBundle`."""

    def __init__(self, overrides=None):
        self.overrides = overrides

    def fit(self, X=None, y=None):
        return self

    def transform(self, X):
        out = []
        for item in X:
            if isinstance(item, HandBundle):
                out.append(item)
            elif isinstance(item, Path) or (isinstance(item, str) and not item.lstrip().startswith("<")):
                out.append(compile_file(item, overrides=self.overrides))
            else:
                out.append(compile_hand(item, overrides=self.overrides))
        return out


class MAGCNGraspPolicy(BaseEstimator):
    """One cross-hand policy: ``fit`` trains on a list of bundles, ``score`` is the grasp success rate."""

    def __init__(self, objects=("sphere",), iterations=100, seed=0, ppo_config=None, env_config=None,
                 trials=25):
        self.objects = objects
        self.iterations = iterations
        self.seed = seed
        self.ppo_config = ppo_config
        self.env_config = env_config
        self.trials = trials

    def fit(self, hands, y=None):
        from .trainer import train
        res = train(list(hands), list(self.objects), cfg=self.ppo_config, iterations=self.iterations,
                    seed=self.seed, env_config=self.env_config)
        self.network_ = res.net
        self.metrics_ = res.metrics
        return self

    def _net(self):
        if not hasattr(self, "network_"):
            raise NotFittedError("MAGCNGraspPolicy is not fitted")
        return self.network_

    def predict(self, states):
        """Deterministic primitive action for each :class:`StateGraph`."""
        net = self._net()
        return [policy_forward(net, s)[0] for s in states]

    def evaluate(self, hand, link_scale=1.0):
        from .trainer import evaluate
        return evaluate(self._net(), hand, list(self.objects), trials=self.trials, link_scale=link_scale,
                        seed=self.seed, env_config=self.env_config, record_actions=False)

    def score(self, hands, y=None):
        return float(np.mean([self.evaluate(h).success_rate for h in hands]))

    def save(self, path):
        self._net().save(path)

    @classmethod
    def from_weights(cls, path, **params):
        est = cls(**params)
        est.network_ = PolicyNetwork.load(path)
        est.metrics_ = []
        return est
