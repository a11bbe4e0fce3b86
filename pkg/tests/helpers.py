"""Shared test scaffolding: scripted streams and miniature targets."""

from __future__ import annotations

import numpy as np

from ubmcmc.levels import LevelSchedule
from ubmcmc.targets import DiscretizedTarget


class ScriptStream:
    """Stand-in for a Generator that replays scripted draws.

    ``normals`` feeds ``standard_normal`` (flattened, consumed in order);
    ``uniforms`` feeds ``random``.  Tests use it to drive couplings and
    kernels down a chosen branch.
    """

    def __init__(self, normals=(), uniforms=()):
        self._normals = [float(v) for v in np.ravel(normals)]
        self._uniforms = [float(v) for v in uniforms]

    def standard_normal(self, size=None):
        if size is None:
            return self._normals.pop(0)
        n = int(size)
        out = np.array([self._normals.pop(0) for _ in range(n)])
        return out

    def random(self):
        return self._uniforms.pop(0)


class GaussTarget(DiscretizedTarget):
    """Level-free standard normal in ``dim`` dimensions.

    The simplest valid target: log gamma = -|x|^2 / 2 at every level, with
    exact gradients. grad_raises turns every gradient call into an
    IntegratorError, which is how tests exercise the reject-on-blowup path.
    """

    schedule = LevelSchedule(base=1.0)
    cost_exponent = 1.0
    has_gradient = True

    def __init__(self, dim: int = 1, grad_raises: bool = False):
        self.dim = dim
        self.theta = np.ones(1)
        self.grad_raises = grad_raises

    def log_gamma(self, level, x):
        return -0.5 * float(x @ x)

    def grad_log_gamma(self, level, x):
        if self.grad_raises:
            from ubmcmc.errors import IntegratorError

            raise IntegratorError("scripted gradient failure")
        return -x

    def in_support(self, x):
        return True

    def sample_initial(self, level, stream):
        return stream.standard_normal(self.dim)
