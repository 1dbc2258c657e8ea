"""Fine-tuning strategy registry: selective masks and additive adapters.

Selective strategies pick a subset of existing parameters to train; additive
strategies freeze the backbone and inject fresh parameters through the model
hook sites. Every strategy trains a fresh task head. Construction never
mutates the wrapped model; trainability is expressed through the mask.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .linalg import svd_small
from .models import AdapterHooks, ModelGraph, ParamRecord
from .rng import RngStream


class IncompatibleStrategy(ValueError):
    """Method cannot be applied to the given architecture."""


class EmptySelection(ValueError):
    """A selective predicate matched no parameters."""


METHODS = (
    "full-ft", "linear-probe", "bias", "batchnorm", "layernorm", "attention",
    "bitfit", "bias-norm", "bias-norm-attention", "tsa", "ssf", "adaptformer",
    "lora", "svdiff",
)

_ALL_ARCHS = frozenset({"mini-cnn", "mini-vit", "mini-denoiser"})

# Architecture gates. The CNN-only and ViT-only entries mirror which model
# family each method was designed for; the denoiser accepts everything that
# structurally applies to it.
COMPAT = {
    "full-ft": _ALL_ARCHS,
    "linear-probe": _ALL_ARCHS,
    "ssf": _ALL_ARCHS,
    "svdiff": _ALL_ARCHS,
    "bias-norm": _ALL_ARCHS,
    "bias": frozenset({"mini-cnn", "mini-denoiser"}),
    "bitfit": frozenset({"mini-vit"}),
    "batchnorm": frozenset({"mini-cnn"}),
    "layernorm": frozenset({"mini-vit", "mini-denoiser"}),
    "attention": frozenset({"mini-vit", "mini-denoiser"}),
    "bias-norm-attention": frozenset({"mini-vit", "mini-denoiser"}),
    "tsa": frozenset({"mini-cnn", "mini-denoiser"}),
    "lora": frozenset({"mini-vit", "mini-denoiser"}),
    "adaptformer": frozenset({"mini-vit", "mini-denoiser"}),
}


@dataclass
class PeftSpec:
    """A strategy identifier plus its hyperparameters."""

    method: str
    hyper: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        h = dict(self.hyper)
        if self.method == "lora":
            if "rank" not in h:
                raise ValueError("lora requires hyperparameter 'rank'")
            h.setdefault("alpha", h["rank"])
            if h["rank"] < 1 or h["alpha"] <= 0:
                raise ValueError("lora rank/alpha must be positive")
        elif self.method == "adaptformer":
            if "bottleneck" not in h:
                raise ValueError("adaptformer requires hyperparameter 'bottleneck'")
            h.setdefault("scale", 1.0)
            if h["bottleneck"] < 1:
                raise ValueError("adaptformer bottleneck must be >= 1")
        elif self.method == "tsa":
            h.setdefault("kernel", 1)
            if h["kernel"] < 1 or h["kernel"] % 2 == 0:
                raise ValueError("tsa kernel must be a positive odd size")
        elif self.method == "svdiff":
            h.setdefault("filter", None)
        self.hyper = h

    def to_json(self) -> dict:
        out = {"method": self.method}
        out.update({k: v for k, v in self.hyper.items() if v is not None})
        return out

    @classmethod
    def from_json(cls, d: dict) -> "PeftSpec":
        d = dict(d)
        method = d.pop("method")
        return cls(method, d)


@dataclass
class TrainabilityMask:
    trainable_names: set
    head_trainable: bool = True


class AdaptedModel:
    """A base model plus the strategy state that rides along with it."""

    def __init__(self, base: ModelGraph, spec: PeftSpec, mask: TrainabilityMask,
                 injected=None, hooks: AdapterHooks | None = None):
        self.base = base
        self.spec = spec
        self.mask = mask
        self.injected: dict[str, ParamRecord] = injected or {}
        self.hooks = hooks or AdapterHooks()

    def forward(self, x, train: bool = False, aux=None):
        return self.base.forward(x, train=train, aux=aux, hooks=self.hooks)

    def trainable_records(self) -> list[ParamRecord]:
        head = self.base.head_names()
        out = []
        for rec in self.base.params():
            if not rec.trainable:
                continue
            if rec.name in self.mask.trainable_names or (
                self.mask.head_trainable and rec.name in head
            ):
                out.append(rec)
        out.extend(self.injected.values())
        return out

    def frozen_records(self) -> list[ParamRecord]:
        chosen = {r.name for r in self.trainable_records()}
        return [r for r in self.base.params() if r.name not in chosen]

    def zero_grads(self):
        ad.zero_grads(self.base.params())
        ad.zero_grads(self.injected.values())

    def state_snapshot(self) -> dict:
        state = self.base.state_snapshot()
        state.update({f"i:{n}": r.tensor.data.copy() for n, r in self.injected.items()})
        return state

    def load_snapshot(self, state: dict):
        self.base.load_snapshot(state)
        for n, r in self.injected.items():
            r.tensor.data[...] = state[f"i:{n}"]


# ---------------------------------------------------------------------------
# selective masks

_ROLE_SELECTORS = {
    # additive terms of affine layers plus norm shifts (the bias-tuning set)
    "bias": lambda rec, layer: rec.role in ("bias", "norm-shift"),
    "norm": lambda rec, layer: rec.role in ("norm-scale", "norm-shift"),
    "batchnorm": lambda rec, layer: layer.kind == "batch-norm",
    "layernorm": lambda rec, layer: layer.kind == "layer-norm",
    "attention": lambda rec, layer: layer.kind == "multi-head-attention",
}


def select_trainable(model: ModelGraph, selector) -> TrainabilityMask:
    """Build a mask from a named selector, a path prefix, or a predicate.

    The predicate is called as f(record, owning_layer). The task head is
    always appended; the predicate must match at least one non-head param.
    """
    if isinstance(selector, str):
        if selector.startswith("path:"):
            prefix = selector[5:]
            pred = lambda rec, layer: rec.name.startswith(prefix)
        elif selector in _ROLE_SELECTORS:
            pred = _ROLE_SELECTORS[selector]
        else:
            raise ValueError(f"unknown selector {selector!r}")
    else:
        pred = selector
    head = model.head_names()
    names = {
        rec.name
        for rec in model.params()
        if rec.name not in head and rec.trainable and pred(rec, model.layer_of(rec.name))
    }
    if not names:
        raise EmptySelection(f"selector {selector!r} matched no parameters")
    return TrainabilityMask(trainable_names=names)


def _union_mask(model: ModelGraph, selectors) -> TrainabilityMask:
    names = set()
    for s in selectors:
        try:
            names |= select_trainable(model, s).trainable_names
        except EmptySelection:
            continue
    if not names:
        raise EmptySelection(f"selectors {selectors!r} matched no parameters")
    return TrainabilityMask(trainable_names=names)


# ---------------------------------------------------------------------------
# additive adapters


class _LoraHooks(AdapterHooks):
    def __init__(self, targets: dict, scaling: float):
        self.targets = targets
        self.scaling = scaling

    def linear_delta(self, name, x):
        pair = self.targets.get(name)
        if pair is None:
            return None
        a, b = pair
        delta = ad.matmul(ad.matmul(x, ad.transpose(a.tensor, (1, 0))),
                          ad.transpose(b.tensor, (1, 0)))
        return ad.mul(delta, Tensor(self.scaling))


def inject_lora(model: ModelGraph, rank: int, alpha: float | None = None,
                rng: RngStream | None = None) -> AdaptedModel:
    """Low-rank deltas on the attention query/value projections."""
    if not model.lora_sites:
        raise IncompatibleStrategy(
            f"lora needs attention projections; {model.arch_id} has none"
        )
    alpha = rank if alpha is None else alpha
    rng = (rng or RngStream(0)).child("lora")
    injected, targets = {}, {}
    for site, d_out, d_in in model.lora_sites:
        if rank < 1 or rank > min(d_out, d_in):
            raise ValueError(
                f"lora rank {rank} out of range [1, {min(d_out, d_in)}] at {site}"
            )
        a = ParamRecord(f"lora.{site}.A", "adapter",
                        Tensor(rng.child(f"{site}.A").normal(
                            (rank, d_in), scale=1.0 / math.sqrt(d_in)), True))
        b = ParamRecord(f"lora.{site}.B", "adapter",
                        Tensor(np.zeros((d_out, rank)), True))
        injected[a.name] = a
        injected[b.name] = b
        targets[site] = (a, b)
    spec = PeftSpec("lora", {"rank": rank, "alpha": alpha})
    return AdaptedModel(model, spec, TrainabilityMask(set()), injected,
                        _LoraHooks(targets, alpha / rank))


def merge_lora(adapted: AdaptedModel) -> ModelGraph:
    """Fold the low-rank deltas into the base weights; returns a plain model."""
    if not isinstance(adapted, AdaptedModel) or adapted.spec.method != "lora":
        raise ValueError("merge_lora: expected a lora-adapted model (already plain?)")
    scaling = adapted.spec.hyper["alpha"] / adapted.spec.hyper["rank"]
    merged = adapted.base.clone()
    for site, (a, b) in adapted.hooks.targets.items():
        w = merged.param(f"{site}.weight").tensor
        w.data += scaling * (b.tensor.data @ a.tensor.data)
    return merged


class _SsfHooks(AdapterHooks):
    def __init__(self, pairs: dict):
        self.pairs = pairs

    def post(self, name, y, axis):
        pair = self.pairs.get(name)
        if pair is None:
            return y
        gamma, beta = pair
        return ad.scale_shift(y, gamma.tensor, beta.tensor, axis=axis)


def inject_ssf(model: ModelGraph) -> AdaptedModel:
    """Per-channel scale and shift after every conv/dense/norm output."""
    injected, pairs = {}, {}
    for site, width in model.ssf_sites:
        gamma = ParamRecord(f"ssf.{site}.scale", "adapter", Tensor(np.ones(width), True))
        beta = ParamRecord(f"ssf.{site}.shift", "adapter", Tensor(np.zeros(width), True))
        injected[gamma.name] = gamma
        injected[beta.name] = beta
        pairs[site] = (gamma, beta)
    return AdaptedModel(model, PeftSpec("ssf"), TrainabilityMask(set()),
                        injected, _SsfHooks(pairs))


class _AdaptFormerHooks(AdapterHooks):
    def __init__(self, branches: dict, scale: float):
        self.branches = branches
        self.scale = scale

    def mlp_extra(self, name, x_orig):
        br = self.branches.get(name)
        if br is None:
            return None
        h = ad.layer_norm(x_orig, br["ln.scale"].tensor, br["ln.shift"].tensor)
        h = ad.relu(ad.add(ad.matmul(h, ad.transpose(br["down.weight"].tensor, (1, 0))),
                           br["down.bias"].tensor))
        h = ad.add(ad.matmul(h, ad.transpose(br["up.weight"].tensor, (1, 0))),
                   br["up.bias"].tensor)
        return ad.mul(h, Tensor(self.scale))


def inject_adaptformer(model: ModelGraph, bottleneck: int, scale: float = 1.0,
                       rng: RngStream | None = None) -> AdaptedModel:
    """Parallel bottleneck branch (own LN, down-proj, ReLU, up-proj) per MLP block."""
    if not model.mlp_sites:
        raise IncompatibleStrategy(
            f"adaptformer needs MLP blocks; {model.arch_id} has none"
        )
    rng = (rng or RngStream(0)).child("adaptformer")
    injected, branches = {}, {}
    for site, dim in model.mlp_sites:
        parts = {
            "ln.scale": np.ones(dim),
            "ln.shift": np.zeros(dim),
            "down.weight": rng.child(f"{site}.down").normal(
                (bottleneck, dim), scale=1.0 / math.sqrt(dim)),
            "down.bias": np.zeros(bottleneck),
            "up.weight": np.zeros((dim, bottleneck)),  # zero-init: identity at start
            "up.bias": np.zeros(dim),
        }
        recs = {}
        for key, values in parts.items():
            rec = ParamRecord(f"adaptformer.{site}.{key}", "adapter",
                              Tensor(values, True))
            injected[rec.name] = rec
            recs[key] = rec
        branches[site] = recs
    spec = PeftSpec("adaptformer", {"bottleneck": bottleneck, "scale": scale})
    return AdaptedModel(model, spec, TrainabilityMask(set()), injected,
                        _AdaptFormerHooks(branches, scale))


class _TsaHooks(AdapterHooks):
    def __init__(self, adapters: dict, kernel: int):
        self.adapters = adapters
        self.pad = (kernel - 1) // 2

    def parallel(self, name, h):
        rec = self.adapters.get(name)
        if rec is None:
            return None
        return ad.conv2d(h, rec.tensor, stride=1, padding=self.pad)


def inject_tsa(model: ModelGraph, kernel: int = 1) -> AdaptedModel:
    """Zero-initialized parallel conv adapters on the block conv layers."""
    if not model.tsa_sites:
        raise IncompatibleStrategy(
            f"tsa needs convolutional blocks; {model.arch_id} has none"
        )
    injected, adapters = {}, {}
    for site, cin, cout in model.tsa_sites:
        rec = ParamRecord(f"tsa.{site}.weight", "adapter",
                          Tensor(np.zeros((cout, cin, kernel, kernel)), True))
        injected[rec.name] = rec
        adapters[site] = rec
    spec = PeftSpec("tsa", {"kernel": kernel})
    return AdaptedModel(model, spec, TrainabilityMask(set()), injected,
                        _TsaHooks(adapters, kernel))


class _SvdiffHooks(AdapterHooks):
    def __init__(self, entries: dict):
        self.entries = entries

    def weight(self, name, w):
        e = self.entries.get(name)
        if e is None:
            return w
        u, sigma, v, delta = e["u"], e["sigma"], e["v"], e["delta"]
        s = ad.relu(ad.add(Tensor(sigma), delta.tensor))
        w2 = ad.matmul(ad.mul(Tensor(u), ad.reshape(s, (1, s.size))),
                       Tensor(v.T))
        return ad.reshape(w2, w.shape)


def apply_svdiff(model: ModelGraph, layer_filter=None) -> AdaptedModel:
    """Trainable spectral shifts over the singular values of targeted weights."""
    if isinstance(layer_filter, str):
        prefix = layer_filter
        layer_filter = lambda name: name.startswith(prefix)
    targets = [t for t in model.svdiff_targets
               if layer_filter is None or layer_filter(t)]
    if not targets:
        raise EmptySelection("svdiff filter matched no weight matrices")
    injected, entries = {}, {}
    for name in targets:
        w = model.param(name).tensor.data
        u, sigma, v = svd_small(w.reshape(w.shape[0], -1))
        delta = ParamRecord(f"svdiff.{name}.delta", "adapter",
                            Tensor(np.zeros(sigma.size), True))
        injected[delta.name] = delta
        entries[name] = {"u": u, "sigma": sigma, "v": v, "delta": delta}
    return AdaptedModel(model, PeftSpec("svdiff"), TrainabilityMask(set()),
                        injected, _SvdiffHooks(entries))


# ---------------------------------------------------------------------------
# dispatch and accounting


def make_strategy(model: ModelGraph, spec: PeftSpec,
                  rng: RngStream | None = None) -> AdaptedModel:
    """Construct the AdaptedModel for any registered method."""
    if spec.method not in COMPAT:
        raise ValueError(f"unknown method {spec.method!r}")
    if model.arch_id not in COMPAT[spec.method]:
        raise IncompatibleStrategy(
            f"method {spec.method!r} is not applicable to {model.arch_id}"
        )
    m = spec.method
    if m == "full-ft":
        names = {r.name for r in model.params() if r.trainable}
        return AdaptedModel(model, spec, TrainabilityMask(names))
    if m == "linear-probe":
        return AdaptedModel(model, spec, TrainabilityMask(set()))
    if m in ("bias", "bitfit"):
        return AdaptedModel(model, spec, select_trainable(model, "bias"))
    if m == "batchnorm":
        return AdaptedModel(model, spec, select_trainable(model, "batchnorm"))
    if m == "layernorm":
        return AdaptedModel(model, spec, select_trainable(model, "layernorm"))
    if m == "attention":
        return AdaptedModel(model, spec, select_trainable(model, "attention"))
    if m == "bias-norm":
        return AdaptedModel(model, spec, _union_mask(model, ["bias", "norm"]))
    if m == "bias-norm-attention":
        return AdaptedModel(model, spec,
                            _union_mask(model, ["bias", "norm", "attention"]))
    if m == "lora":
        return inject_lora(model, spec.hyper["rank"], spec.hyper["alpha"], rng)
    if m == "ssf":
        return inject_ssf(model)
    if m == "adaptformer":
        return inject_adaptformer(model, spec.hyper["bottleneck"],
                                  spec.hyper["scale"], rng)
    if m == "tsa":
        return inject_tsa(model, spec.hyper["kernel"])
    if m == "svdiff":
        return apply_svdiff(model, spec.hyper.get("filter"))
    raise AssertionError(f"unhandled method {m}")


def trainable_count(adapted: AdaptedModel):
    """(trainable, total, ratio) where total is the full-FT equivalent."""
    trainable = sum(r.size for r in adapted.trainable_records())
    total = sum(r.size for r in adapted.base.params() if r.trainable)
    return trainable, total, trainable / total
