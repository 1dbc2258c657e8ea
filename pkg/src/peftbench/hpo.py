"""Asynchronous successive-halving search over hyperparameter spaces.

Trials are sampled randomly; a trial becomes promotable to the next budget
rung as soon as its metric lands in the top 1/eta of everything reported at
its rung so far (no waiting for the rung to fill). Execution here is serial,
which makes the whole ledger reproducible from the seed, but the promotion
rule itself does not depend on completion order.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

from .rng import RngStream


@dataclass
class Uniform:
    low: float
    high: float

    def sample(self, rng: RngStream):
        return float(rng.uniform(low=self.low, high=self.high))


@dataclass
class LogUniform:
    low: float
    high: float

    def sample(self, rng: RngStream):
        return float(math.exp(rng.uniform(low=math.log(self.low),
                                          high=math.log(self.high))))


@dataclass
class Categorical:
    options: list

    def sample(self, rng: RngStream):
        return self.options[int(rng.integers(0, len(self.options)))]


@dataclass
class SearchSpace:
    dims: dict

    def __post_init__(self):
        for name, dim in self.dims.items():
            if isinstance(dim, (Uniform, LogUniform)):
                if not dim.low < dim.high:
                    raise ValueError(f"dim {name!r}: low must be < high")
                if isinstance(dim, LogUniform) and dim.low <= 0:
                    raise ValueError(f"dim {name!r}: log-uniform needs low > 0")
            elif isinstance(dim, Categorical):
                if not dim.options:
                    raise ValueError(f"dim {name!r}: empty categorical")
            else:
                raise ValueError(f"dim {name!r}: unknown dimension type")

    def to_json(self) -> dict:
        out = {}
        for name, dim in self.dims.items():
            if isinstance(dim, Uniform):
                out[name] = {"type": "uniform", "low": dim.low, "high": dim.high}
            elif isinstance(dim, LogUniform):
                out[name] = {"type": "log-uniform", "low": dim.low, "high": dim.high}
            else:
                out[name] = {"type": "categorical", "options": list(dim.options)}
        return out

    @classmethod
    def from_json(cls, d: dict) -> "SearchSpace":
        dims = {}
        for name, entry in d.items():
            kind = entry["type"]
            if kind == "uniform":
                dims[name] = Uniform(entry["low"], entry["high"])
            elif kind == "log-uniform":
                dims[name] = LogUniform(entry["low"], entry["high"])
            elif kind == "categorical":
                dims[name] = Categorical(entry["options"])
            else:
                raise ValueError(f"dim {name!r}: unknown type {kind!r}")
        return cls(dims)


@dataclass
class Trial:
    id: int
    config: dict
    rung: int = 0
    budget: int = 0
    status: str = "pending"  # pending | running | reported | promoted | stopped
    metric: float | None = None


@dataclass
class Rung:
    level: int
    budget: int
    results: list = field(default_factory=list)  # (trial_id, metric)
    promoted: set = field(default_factory=set)


def sample_trial(space: SearchSpace, rng: RngStream, trial_id: int = 0) -> Trial:
    """Draw one configuration; log-uniform dims are sampled in log domain."""
    config = {name: space.dims[name].sample(rng.child(name))
              for name in sorted(space.dims)}
    return Trial(id=trial_id, config=config)


def asha_promote(rung: Rung, reduction: int) -> list:
    """Trial ids currently promotable from this rung, best first.

    A trial is promotable when its metric sits in the top 1/reduction of all
    results reported at this rung so far; with fewer than `reduction`
    reports the single best is still promotable (floor(n/eta) >= 1 guard).
    Ties break toward the lower trial id.
    """
    if reduction < 2:
        raise ValueError("reduction factor must be >= 2")
    n = len(rung.results)
    if n == 0:
        return []
    k = max(1, n // reduction)
    ranked = sorted(rung.results, key=lambda r: (-r[1], r[0]))
    return [tid for tid, _ in ranked[:k] if tid not in rung.promoted]


def run_search(space: SearchSpace, objective, max_trials: int = 27,
               eta: int = 3, min_budget: int = 2, max_budget: int = 18,
               seed: int = 0):
    """Run the search; returns (best trial, ledger dict).

    `objective(config, budget)` evaluates a configuration trained for
    `budget` epochs and returns a metric to maximize. Promoted trials are
    re-evaluated from scratch at the larger budget.
    """
    budgets = [min_budget]
    while budgets[-1] < max_budget:
        budgets.append(budgets[-1] * eta)
    if budgets[-1] != max_budget:
        raise ValueError(
            f"max_budget must be min_budget*eta^k; got {min_budget}..{max_budget} "
            f"with eta={eta}"
        )
    rungs = [Rung(level=i, budget=b) for i, b in enumerate(budgets)]
    top = len(rungs) - 1
    rng = RngStream(seed).child("hpo")
    trials: list[Trial] = []
    events = []
    total_epochs = 0

    def next_job():
        for level in range(top - 1, -1, -1):
            promotable = asha_promote(rungs[level], eta)
            if promotable:
                tid = promotable[0]
                rungs[level].promoted.add(tid)
                trial = trials[tid]
                trial.status = "promoted"
                trial.rung = level + 1
                trial.budget = rungs[level + 1].budget
                events.append({"event": "promote", "trial": tid,
                               "to_rung": level + 1})
                return trial
        if len(trials) < max_trials:
            trial = sample_trial(space, rng.child(f"trial-{len(trials)}"),
                                 trial_id=len(trials))
            trial.rung = 0
            trial.budget = rungs[0].budget
            trials.append(trial)
            events.append({"event": "sample", "trial": trial.id,
                           "config": trial.config})
            return trial
        return None

    while True:
        trial = next_job()
        if trial is None:
            break
        trial.status = "running"
        metric = float(objective(trial.config, trial.budget))
        trial.metric = metric
        trial.status = "reported"
        total_epochs += trial.budget
        rungs[trial.rung].results.append((trial.id, metric))
        events.append({"event": "report", "trial": trial.id, "rung": trial.rung,
                       "budget": trial.budget, "metric": metric})

    best = None
    for rung in reversed(rungs):
        if rung.results:
            best_id = min(rung.results, key=lambda r: (-r[1], r[0]))[0]
            best = trials[best_id]
            break
    if best is None:
        raise RuntimeError("search produced no results")
    ledger = {
        "seed": seed,
        "eta": eta,
        "budgets": budgets,
        "events": events,
        "total_epochs": total_epochs,
        "best_trial": best.id,
        "best_config": best.config,
        "best_metric": best.metric,
    }
    return best, ledger
