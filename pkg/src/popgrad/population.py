"""Population gradients.

Each optimiser step evaluates the gradient ``s`` times, every time at a copy of
the weights multiplied coordinatewise by ``1 + eps`` with ``eps ~ N(0, r)``,
and returns the plain average. The average is then applied to the original
weights by whatever optimiser is in use.

Member ``i`` at step ``t`` always draws its noise from
``np.random.default_rng([seed, t, i])``, so the result does not depend on the
order or the number of threads the members run on.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ConfigError, NumericDivergenceError, UsageError

DEFAULT_SIZES = (5, 10)
DEFAULT_RANGES = (0.05, 0.1, 0.2, 0.4)


@dataclass(frozen=True)
class PopulationGradSpec:
    population_size: int = 5
    population_range: float = 0.1
    perturb_biases: bool = True

    def __post_init__(self):
        if int(self.population_size) != self.population_size or self.population_size < 1:
            raise ConfigError("population_size must be an integer >= 1")
        if not self.population_range >= 0:
            raise ConfigError("population_range must be >= 0")

    def to_dict(self):
        return asdict(self)


def perturb(params, r, rng, mask=None):
    """``params * (1 + N(0, r))`` coordinatewise; ``params`` is not modified.

    With ``mask`` given, only coordinates where it is True receive noise.
    """
    if r < 0:
        raise UsageError("population range must be >= 0")
    params = np.asarray(params, dtype=np.float64)
    noise = rng.normal(0.0, r, size=params.shape)
    if mask is not None:
        noise = np.where(mask, noise, 0.0)
    return params * (1.0 + noise)


def member_rng(seed, step, member):
    return np.random.default_rng([int(seed), int(step), int(member)])


def population_loss_and_grad(model, params, batch, spec, seed, step=0, *,
                             dropout_key=None, workers=1, mode="train"):
    """Mean loss and mean gradient over the ``spec.population_size`` members.

    ``model`` needs a ``loss_and_grad(params, images, labels, mode=, rng=)``
    method. All members see the same batch and, when ``dropout_key`` is
    given, the same dropout masks (each gets a fresh generator seeded with
    it). Averaging is a running mean in member order, which returns the
    single-member gradient unchanged when all members agree (e.g. ``r = 0``).
    """
    images, labels = batch
    params = np.asarray(params, dtype=np.float64)
    mask = None
    if not spec.perturb_biases and hasattr(model, "layout"):
        mask = model.layout.weight_mask()

    def member(i):
        w = perturb(params, spec.population_range, member_rng(seed, step, i), mask)
        rng = None if dropout_key is None else np.random.default_rng(dropout_key)
        try:
            return model.loss_and_grad(w, images, labels, mode=mode, rng=rng)
        except NumericDivergenceError as exc:
            exc.member = i
            raise

    indices = range(spec.population_size)
    if workers > 1 and spec.population_size > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(member, indices))
    else:
        results = [member(i) for i in indices]

    mean_loss = 0.0
    mean_grad = np.zeros_like(params)
    for i, (loss, grad) in enumerate(results):
        mean_loss += (loss - mean_loss) / (i + 1)
        mean_grad += (grad - mean_grad) / (i + 1)
    return mean_loss, mean_grad


def population_gradient(model, params, batch, spec, seed, step=0, **kwargs):
    return population_loss_and_grad(model, params, batch, spec, seed, step, **kwargs)[1]


# ---------------------------------------------------------------------------
# gradient quality


@dataclass
class GradQualityReport:
    subset_size: int
    repeats: int
    distances: list = field(default_factory=list)
    cosines: list = field(default_factory=list)  # None where undefined
    distance_mean: float = 0.0
    distance_var: float = 0.0
    cosine_mean: float | None = None
    cosine_var: float | None = None
    estimator: str = "standard"

    def to_dict(self):
        return asdict(self)

    def to_json(self, **kwargs):
        return json.dumps(self.to_dict(), **kwargs)


def _mean_var(values):
    if not values:
        return None, None
    arr = np.asarray(values, dtype=np.float64)
    var = float(arr.var(ddof=1)) if arr.size > 1 else 0.0
    return float(arr.mean()), var


def _cosine(a, b):
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return None
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def gradient_quality(model, params, dataset, m, k, rng, spec=None, seed=0):
    """How well mean gradients over ``m``-sample subsets track the full-data gradient.

    ``dataset`` is ``(images, labels)``. The full gradient is computed once in
    eval mode; each of the ``k`` repeats draws ``m`` samples without
    replacement. With a :class:`PopulationGradSpec` the subset gradient is a
    population gradient instead (repeat ``j`` uses step ``j`` of ``seed``).
    Undefined cosines (a zero-norm gradient) are reported as None.
    """
    images, labels = dataset
    n = len(labels)
    if not 1 <= m <= n:
        raise UsageError(f"subset size {m} outside 1..{n}")
    if k < 1:
        raise UsageError("need at least one repeat")
    _, full = model.loss_and_grad(params, images, labels, mode="eval")
    distances, cosines = [], []
    for j in range(k):
        idx = rng.choice(n, size=m, replace=False)
        batch = (images[idx], labels[idx])
        if spec is None:
            _, g = model.loss_and_grad(params, batch[0], batch[1], mode="eval")
        else:
            _, g = population_loss_and_grad(model, params, batch, spec, seed, j, mode="eval")
        distances.append(float(np.linalg.norm(g - full)))
        cosines.append(_cosine(g, full))
    d_mean, d_var = _mean_var(distances)
    c_mean, c_var = _mean_var([c for c in cosines if c is not None])
    return GradQualityReport(
        subset_size=m, repeats=k, distances=distances, cosines=cosines,
        distance_mean=d_mean, distance_var=d_var, cosine_mean=c_mean, cosine_var=c_var,
        estimator="standard" if spec is None else
        f"population(s={spec.population_size}, r={spec.population_range})",
    )
