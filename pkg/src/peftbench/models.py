"""Toy backbone models: residual CNN, ViT encoder, conditional denoiser.

Each model owns an ordered registry of named, role-tagged parameters (the
unit every fine-tuning strategy acts on) plus the buffer state of its batch
norms. Forward passes are built from autodiff primitives and call into an
:class:`AdapterHooks` object at well-defined sites, which is how the
additive strategies (low-rank deltas, scale-shift, parallel convs, bottleneck
branches, spectral reweighting) splice themselves in without touching the
backbone code.
"""

from __future__ import annotations

import dataclasses
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .rng import RngStream

ROLES = (
    "bias", "norm-scale", "norm-shift", "attention", "conv", "dense",
    "adapter", "head", "embed",
)

CHECKPOINT_VERSION = 1


@dataclass
class LayerSpec:
    kind: str
    name: str
    dims: dict = field(default_factory=dict)


@dataclass
class ParamRecord:
    name: str
    role: str
    tensor: Tensor
    trainable: bool = True

    @property
    def size(self) -> int:
        return self.tensor.size


class AdapterHooks:
    """No-op hook set; adapter strategies override the relevant methods."""

    def weight(self, name: str, w: Tensor) -> Tensor:
        return w

    def linear_delta(self, name: str, x: Tensor):
        return None

    def post(self, name: str, y: Tensor, axis: int) -> Tensor:
        return y

    def parallel(self, name: str, h: Tensor):
        return None

    def mlp_extra(self, name: str, x_orig: Tensor):
        return None


_NULL_HOOKS = AdapterHooks()


class ModelGraph:
    """Base model: layer specs, parameter registry, buffers, hook sites."""

    arch_id = "base"

    def __init__(self, cfg):
        self.cfg = cfg
        self.layers: list[LayerSpec] = []
        self._params: dict[str, ParamRecord] = {}
        self._owner: dict[str, LayerSpec] = {}
        self.buffers: dict[str, np.ndarray] = {}
        # hook-site inventories, filled during construction
        self.ssf_sites: list[tuple[str, int]] = []
        self.tsa_sites: list[tuple[str, int, int]] = []
        self.lora_sites: list[tuple[str, int, int]] = []
        self.mlp_sites: list[tuple[str, int]] = []
        self.svdiff_targets: list[str] = []

    # -- registry -----------------------------------------------------

    def add_layer(self, kind: str, name: str, **dims) -> LayerSpec:
        if any(l.name == name for l in self.layers):
            raise ValueError(f"duplicate layer name: {name}")
        spec = LayerSpec(kind, name, dims)
        self.layers.append(spec)
        return spec

    def add_param(self, layer: LayerSpec, name: str, role: str, values,
                  trainable: bool = True) -> ParamRecord:
        if name in self._params:
            raise ValueError(f"duplicate parameter name: {name}")
        if role not in ROLES:
            raise ValueError(f"unknown role: {role}")
        rec = ParamRecord(name, role, Tensor(values, requires_grad=trainable),
                          trainable)
        self._params[name] = rec
        self._owner[name] = layer
        return rec

    def params(self) -> list[ParamRecord]:
        return list(self._params.values())

    def param(self, name: str) -> ParamRecord:
        return self._params[name]

    def layer_of(self, param_name: str) -> LayerSpec:
        return self._owner[param_name]

    @property
    def layer_kinds(self) -> set:
        return {l.kind for l in self.layers}

    def head_names(self) -> set:
        return {r.name for r in self._params.values() if r.role == "head"}

    # -- lifecycle ----------------------------------------------------

    def clone(self) -> "ModelGraph":
        other = type(self)(dataclasses.replace(self.cfg))
        for name, rec in self._params.items():
            mine = other._params[name]
            mine.tensor.data[...] = rec.tensor.data
            mine.trainable = rec.trainable
            mine.tensor.requires_grad = rec.tensor.requires_grad
        for name, buf in self.buffers.items():
            other.buffers[name][...] = buf
        return other

    def state_snapshot(self) -> dict:
        """Copy of every mutable array (params + buffers)."""
        state = {f"p:{n}": r.tensor.data.copy() for n, r in self._params.items()}
        state.update({f"b:{n}": b.copy() for n, b in self.buffers.items()})
        return state

    def load_snapshot(self, state: dict):
        for n, r in self._params.items():
            r.tensor.data[...] = state[f"p:{n}"]
        for n, b in self.buffers.items():
            b[...] = state[f"b:{n}"]

    def save(self, path):
        manifest = {
            "format_version": CHECKPOINT_VERSION,
            "arch_id": self.arch_id,
            "cfg": asdict(self.cfg),
            "params": [
                {"name": r.name, "role": r.role, "shape": list(r.tensor.shape),
                 "trainable": r.trainable}
                for r in self._params.values()
            ],
            "buffers": sorted(self.buffers),
        }
        arrays = {f"p:{n}": r.tensor.data for n, r in self._params.items()}
        arrays.update({f"b:{n}": b for n, b in self.buffers.items()})
        buf = io.BytesIO()
        np.savez(buf, __manifest__=np.frombuffer(
            json.dumps(manifest, sort_keys=True).encode(), dtype=np.uint8),
            **arrays)
        with open(path, "wb") as fh:
            fh.write(buf.getvalue())

    def forward(self, x, train: bool = False, aux=None, hooks: AdapterHooks | None = None):
        x = x if isinstance(x, Tensor) else Tensor(x)
        return self._forward(x, train, aux or {}, hooks or _NULL_HOOKS)

    def _forward(self, x, train, aux, hooks):
        raise NotImplementedError

    # -- shared building blocks ----------------------------------------

    def _dense(self, x: Tensor, name: str, hooks: AdapterHooks,
               hook_post: bool = True) -> Tensor:
        w = hooks.weight(f"{name}.weight", self.param(f"{name}.weight").tensor)
        b = self.param(f"{name}.bias").tensor
        y = ad.matmul(x, ad.transpose(w, (1, 0)))
        delta = hooks.linear_delta(name, x)
        if delta is not None:
            y = ad.add(y, delta)
        y = ad.add(y, b)
        if hook_post:
            y = hooks.post(name, y, axis=-1)
        return y

    def _conv(self, x: Tensor, name: str, hooks: AdapterHooks, stride=1,
              padding=1, hook_post: bool = True) -> Tensor:
        w = hooks.weight(f"{name}.weight", self.param(f"{name}.weight").tensor)
        b = self.param(f"{name}.bias").tensor
        y = ad.conv2d(x, w, stride=stride, padding=padding)
        y = ad.add(y, ad.reshape(b, (1, b.size, 1, 1)))
        par = hooks.parallel(name, x)
        if par is not None:
            y = ad.add(y, par)
        if hook_post:
            y = hooks.post(name, y, axis=1)
        return y

    def _batch_norm(self, x: Tensor, name: str, train: bool,
                    hooks: AdapterHooks) -> Tensor:
        y = ad.batch_norm(
            x,
            self.param(f"{name}.scale").tensor,
            self.param(f"{name}.shift").tensor,
            self.buffers[f"{name}.running_mean"],
            self.buffers[f"{name}.running_var"],
            training=train,
        )
        return hooks.post(name, y, axis=1)

    def _layer_norm_feat(self, x: Tensor, name: str, hooks: AdapterHooks) -> Tensor:
        """Last-axis layer norm (token features)."""
        y = ad.layer_norm(
            x,
            self.param(f"{name}.scale").tensor,
            self.param(f"{name}.shift").tensor,
            axes=(-1,),
        )
        return hooks.post(name, y, axis=-1)

    def _layer_norm_chan(self, x: Tensor, name: str, hooks: AdapterHooks) -> Tensor:
        """Whole-sample norm of a feature map with per-channel affine."""
        c = x.shape[1]
        y = ad.layer_norm(
            x,
            ad.reshape(self.param(f"{name}.scale").tensor, (c, 1, 1)),
            ad.reshape(self.param(f"{name}.shift").tensor, (c, 1, 1)),
            axes=(1, 2, 3),
        )
        return hooks.post(name, y, axis=1)

    def _attention(self, x: Tensor, prefix: str, heads: int,
                   hooks: AdapterHooks) -> Tensor:
        b, n, d = x.shape
        dh = d // heads
        q = self._dense(x, f"{prefix}.q", hooks)
        k = self._dense(x, f"{prefix}.k", hooks)
        v = self._dense(x, f"{prefix}.v", hooks)

        def split(t):
            return ad.transpose(ad.reshape(t, (b, n, heads, dh)), (0, 2, 1, 3))

        q, k, v = split(q), split(k), split(v)
        scores = ad.mul(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))),
                        Tensor(1.0 / math.sqrt(dh)))
        attn = ad.softmax(scores, axis=-1)
        ctx = ad.reshape(ad.transpose(ad.matmul(attn, v), (0, 2, 1, 3)), (b, n, d))
        return self._dense(ctx, f"{prefix}.out", hooks)

    def _register_attention(self, layer: LayerSpec, prefix: str, dim: int,
                            rng: RngStream):
        for proj in ("q", "k", "v", "out"):
            self.add_param(
                layer, f"{prefix}.{proj}.weight", "attention",
                rng.child(f"{prefix}.{proj}").normal((dim, dim), scale=1.0 / math.sqrt(dim)),
            )
            self.add_param(layer, f"{prefix}.{proj}.bias", "bias", np.zeros(dim))
            self.ssf_sites.append((f"{prefix}.{proj}", dim))
            self.svdiff_targets.append(f"{prefix}.{proj}.weight")
        self.lora_sites.append((f"{prefix}.q", dim, dim))
        self.lora_sites.append((f"{prefix}.v", dim, dim))

    def _register_mlp(self, layer: LayerSpec, prefix: str, dim: int, hidden: int,
                      rng: RngStream):
        self.add_param(layer, f"{prefix}.fc1.weight", "dense",
                       rng.child(f"{prefix}.fc1").normal((hidden, dim), scale=1.0 / math.sqrt(dim)))
        self.add_param(layer, f"{prefix}.fc1.bias", "bias", np.zeros(hidden))
        self.add_param(layer, f"{prefix}.fc2.weight", "dense",
                       rng.child(f"{prefix}.fc2").normal((dim, hidden), scale=1.0 / math.sqrt(hidden)))
        self.add_param(layer, f"{prefix}.fc2.bias", "bias", np.zeros(dim))
        self.ssf_sites.append((f"{prefix}.fc1", hidden))
        self.ssf_sites.append((f"{prefix}.fc2", dim))
        self.svdiff_targets.append(f"{prefix}.fc1.weight")
        self.svdiff_targets.append(f"{prefix}.fc2.weight")
        self.mlp_sites.append((prefix, dim))

    def _mlp_forward(self, x: Tensor, prefix: str, hooks: AdapterHooks) -> Tensor:
        h = self._dense(x, f"{prefix}.fc1", hooks)
        h = ad.gelu(h)
        return self._dense(h, f"{prefix}.fc2", hooks)


def _avg_pool2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    x = ad.reshape(x, (b, c, h // 2, 2, w // 2, 2))
    return ad.mean(x, axis=(3, 5))


def _upsample2(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    x = ad.reshape(x, (b, c, h, 1, w, 1))
    x = ad.concat([x, x], axis=3)
    x = ad.concat([x, x], axis=5)
    return ad.reshape(x, (b, c, 2 * h, 2 * w))


# ---------------------------------------------------------------------------
# residual CNN


@dataclass
class CnnConfig:
    width: int = 8
    blocks: int = 2
    classes: int = 3
    image_size: int = 16
    in_channels: int = 1


class MiniCnn(ModelGraph):
    arch_id = "mini-cnn"

    def __init__(self, cfg: CnnConfig, init_rng: RngStream | None = None):
        super().__init__(cfg)
        stride = 2 ** cfg.blocks
        if cfg.image_size % stride != 0:
            raise ValueError(
                f"image size {cfg.image_size} not divisible by total stride {stride}"
            )
        rng = init_rng or RngStream(0)
        w = cfg.width

        stem = self.add_layer("conv2d", "stem.conv", in_ch=cfg.in_channels, out_ch=w)
        self.add_param(stem, "stem.conv.weight", "conv",
                       rng.child("stem").normal((w, cfg.in_channels, 3, 3),
                                                scale=math.sqrt(2.0 / (9 * cfg.in_channels))))
        self.add_param(stem, "stem.conv.bias", "bias", np.zeros(w))
        self.ssf_sites.append(("stem.conv", w))
        self.svdiff_targets.append("stem.conv.weight")
        self._add_bn("stem.bn", w)

        for i in range(cfg.blocks):
            block = self.add_layer("residual-block", f"blocks.{i}", channels=w)
            for j in (1, 2):
                conv = self.add_layer("conv2d", f"blocks.{i}.conv{j}", in_ch=w, out_ch=w)
                self.add_param(conv, f"blocks.{i}.conv{j}.weight", "conv",
                               rng.child(f"b{i}c{j}").normal((w, w, 3, 3),
                                                             scale=math.sqrt(2.0 / (9 * w))))
                self.add_param(conv, f"blocks.{i}.conv{j}.bias", "bias", np.zeros(w))
                self.ssf_sites.append((f"blocks.{i}.conv{j}", w))
                self.tsa_sites.append((f"blocks.{i}.conv{j}", w, w))
                self.svdiff_targets.append(f"blocks.{i}.conv{j}.weight")
                self._add_bn(f"blocks.{i}.bn{j}", w)
            del block

        head = self.add_layer("head", "head", in_dim=w, classes=cfg.classes)
        self.add_param(head, "head.weight", "head", np.zeros((cfg.classes, w)))
        self.add_param(head, "head.bias", "head", np.zeros(cfg.classes))

    def _add_bn(self, name: str, width: int):
        layer = self.add_layer("batch-norm", name, channels=width)
        self.add_param(layer, f"{name}.scale", "norm-scale", np.ones(width))
        self.add_param(layer, f"{name}.shift", "norm-shift", np.zeros(width))
        self.buffers[f"{name}.running_mean"] = np.zeros(width)
        self.buffers[f"{name}.running_var"] = np.ones(width)
        self.ssf_sites.append((name, width))

    def reset_head(self, classes: int):
        self.cfg.classes = classes
        w = self.cfg.width
        self._owner["head.weight"].dims["classes"] = classes
        self._params["head.weight"].tensor = Tensor(np.zeros((classes, w)), True)
        self._params["head.bias"].tensor = Tensor(np.zeros(classes), True)

    def _forward(self, x, train, aux, hooks):
        h = self._conv(x, "stem.conv", hooks)
        h = self._batch_norm(h, "stem.bn", train, hooks)
        h = ad.relu(h)
        for i in range(self.cfg.blocks):
            identity = h
            h = self._conv(h, f"blocks.{i}.conv1", hooks)
            h = self._batch_norm(h, f"blocks.{i}.bn1", train, hooks)
            h = ad.relu(h)
            h = self._conv(h, f"blocks.{i}.conv2", hooks)
            h = self._batch_norm(h, f"blocks.{i}.bn2", train, hooks)
            h = ad.relu(ad.add(h, identity))
            h = _avg_pool2(h)
        feat = ad.mean(h, axis=(2, 3))
        return self._dense(feat, "head", hooks, hook_post=False)


# ---------------------------------------------------------------------------
# ViT encoder


@dataclass
class VitConfig:
    dim: int = 32
    heads: int = 4
    blocks: int = 2
    patch: int = 4
    classes: int = 3
    image_size: int = 16
    mlp_ratio: int = 2
    in_channels: int = 1


class MiniVit(ModelGraph):
    arch_id = "mini-vit"

    def __init__(self, cfg: VitConfig, init_rng: RngStream | None = None):
        super().__init__(cfg)
        if cfg.dim % cfg.heads != 0:
            raise ValueError(f"dim {cfg.dim} not divisible by heads {cfg.heads}")
        if cfg.image_size % cfg.patch != 0:
            raise ValueError(
                f"image size {cfg.image_size} not divisible by patch {cfg.patch}"
            )
        rng = init_rng or RngStream(0)
        d = cfg.dim
        n_patches = (cfg.image_size // cfg.patch) ** 2
        self.seq_len = n_patches + 1
        patch_dim = cfg.in_channels * cfg.patch ** 2

        embed = self.add_layer("patch-embed", "embed", patch_dim=patch_dim, dim=d)
        self.add_param(embed, "embed.patch.weight", "embed",
                       rng.child("patch").normal((d, patch_dim),
                                                 scale=1.0 / math.sqrt(patch_dim)))
        self.add_param(embed, "embed.patch.bias", "bias", np.zeros(d))
        self.add_param(embed, "embed.pos", "embed",
                       rng.child("pos").normal((self.seq_len, d), scale=0.02))
        self.add_param(embed, "embed.cls", "embed",
                       rng.child("cls").normal((1, d), scale=0.02))
        self.ssf_sites.append(("embed.patch", d))

        hidden = cfg.mlp_ratio * d
        for i in range(cfg.blocks):
            self._add_ln(f"blocks.{i}.ln1", d)
            attn = self.add_layer("multi-head-attention", f"blocks.{i}.attn",
                                  dim=d, heads=cfg.heads)
            self._register_attention(attn, f"blocks.{i}.attn", d, rng)
            self._add_ln(f"blocks.{i}.ln2", d)
            mlp = self.add_layer("mlp-block", f"blocks.{i}.mlp", dim=d, hidden=hidden)
            self._register_mlp(mlp, f"blocks.{i}.mlp", d, hidden, rng)

        self._add_ln("norm", d)
        head = self.add_layer("head", "head", in_dim=d, classes=cfg.classes)
        self.add_param(head, "head.weight", "head", np.zeros((cfg.classes, d)))
        self.add_param(head, "head.bias", "head", np.zeros(cfg.classes))

    def _add_ln(self, name: str, dim: int):
        layer = self.add_layer("layer-norm", name, dim=dim)
        self.add_param(layer, f"{name}.scale", "norm-scale", np.ones(dim))
        self.add_param(layer, f"{name}.shift", "norm-shift", np.zeros(dim))
        self.ssf_sites.append((name, dim))

    def reset_head(self, classes: int):
        self.cfg.classes = classes
        d = self.cfg.dim
        self._owner["head.weight"].dims["classes"] = classes
        self._params["head.weight"].tensor = Tensor(np.zeros((classes, d)), True)
        self._params["head.bias"].tensor = Tensor(np.zeros(classes), True)

    def _patchify(self, x: Tensor) -> Tensor:
        b, c, s, _ = x.shape
        p = self.cfg.patch
        g = s // p
        x = ad.reshape(x, (b, c, g, p, g, p))
        x = ad.transpose(x, (0, 2, 4, 1, 3, 5))
        return ad.reshape(x, (b, g * g, c * p * p))

    def _forward(self, x, train, aux, hooks):
        b = x.shape[0]
        tok = self._dense(self._patchify(x), "embed.patch", hooks)
        cls = ad.add(Tensor(np.zeros((b, 1, self.cfg.dim))),
                     ad.reshape(self.param("embed.cls").tensor, (1, 1, self.cfg.dim)))
        seq = ad.concat([cls, tok], axis=1)
        seq = ad.add(seq, ad.reshape(self.param("embed.pos").tensor,
                                     (1, self.seq_len, self.cfg.dim)))
        for i in range(self.cfg.blocks):
            h = self._layer_norm_feat(seq, f"blocks.{i}.ln1", hooks)
            seq = ad.add(seq, self._attention(h, f"blocks.{i}.attn",
                                              self.cfg.heads, hooks))
            h = self._layer_norm_feat(seq, f"blocks.{i}.ln2", hooks)
            m = self._mlp_forward(h, f"blocks.{i}.mlp", hooks)
            extra = hooks.mlp_extra(f"blocks.{i}.mlp", seq)
            if extra is not None:
                m = ad.add(m, extra)
            seq = ad.add(seq, m)
        seq = self._layer_norm_feat(seq, "norm", hooks)
        cls_tok = ad.slice_(seq, (slice(None), 0))
        return self._dense(cls_tok, "head", hooks, hook_post=False)


# ---------------------------------------------------------------------------
# conditional denoiser (U-Net analog)


@dataclass
class DenoiserConfig:
    channels: int = 8
    levels: int = 2
    cond_vocab: int = 8
    image_size: int = 16
    in_channels: int = 1
    heads: int = 4


class MiniDenoiser(ModelGraph):
    arch_id = "mini-denoiser"

    def __init__(self, cfg: DenoiserConfig, init_rng: RngStream | None = None):
        super().__init__(cfg)
        if cfg.image_size % (2 ** cfg.levels) != 0:
            raise ValueError(
                f"image size {cfg.image_size} not divisible by 2^levels "
                f"({2 ** cfg.levels})"
            )
        rng = init_rng or RngStream(0)
        self.temb_dim = 4 * cfg.channels
        self.enc_channels = [cfg.channels * 2 ** i for i in range(cfg.levels)]
        self.mid_channels = cfg.channels * 2 ** cfg.levels

        tlayer = self.add_layer("dense", "time.fc", in_dim=self.temb_dim,
                                out_dim=self.temb_dim)
        self.add_param(tlayer, "time.fc.weight", "dense",
                       rng.child("time").normal((self.temb_dim, self.temb_dim),
                                                scale=1.0 / math.sqrt(self.temb_dim)))
        self.add_param(tlayer, "time.fc.bias", "bias", np.zeros(self.temb_dim))
        self.ssf_sites.append(("time.fc", self.temb_dim))
        self.svdiff_targets.append("time.fc.weight")

        clayer = self.add_layer("patch-embed", "cond.table", vocab=cfg.cond_vocab,
                                dim=self.temb_dim)
        self.add_param(clayer, "cond.table.weight", "embed",
                       rng.child("cond").normal((cfg.cond_vocab, self.temb_dim)),
                       trainable=False)

        prev = cfg.in_channels
        for i, ch in enumerate(self.enc_channels):
            self._add_conv_block(f"enc.{i}", prev, ch, rng)
            prev = ch

        self._add_conv_block("mid.block", prev, self.mid_channels, rng)
        d = self.mid_channels
        self._add_ln("mid.attn_ln", d)
        attn = self.add_layer("multi-head-attention", "mid.attn", dim=d,
                              heads=cfg.heads)
        self._register_attention(attn, "mid.attn", d, rng)
        self._add_ln("mid.mlp_ln", d)
        mlp = self.add_layer("mlp-block", "mid.mlp", dim=d, hidden=2 * d)
        self._register_mlp(mlp, "mid.mlp", d, 2 * d, rng)

        up_prev = self.mid_channels
        for i in reversed(range(cfg.levels)):
            skip = self.enc_channels[i]
            out_ch = self.enc_channels[i]
            self._add_conv_block(f"dec.{i}", up_prev + skip, out_ch, rng)
            up_prev = out_ch

        out = self.add_layer("head", "out", in_ch=up_prev, out_ch=cfg.in_channels)
        self.add_param(out, "out.weight", "head",
                       rng.child("out").normal((cfg.in_channels, up_prev, 1, 1),
                                               scale=1.0 / math.sqrt(up_prev)))
        self.add_param(out, "out.bias", "head", np.zeros(cfg.in_channels))

    def _add_ln(self, name: str, dim: int):
        layer = self.add_layer("layer-norm", name, dim=dim)
        self.add_param(layer, f"{name}.scale", "norm-scale", np.ones(dim))
        self.add_param(layer, f"{name}.shift", "norm-shift", np.zeros(dim))
        self.ssf_sites.append((name, dim))

    def _add_conv_block(self, prefix: str, cin: int, cout: int, rng: RngStream):
        block = self.add_layer("residual-block", prefix, in_ch=cin, out_ch=cout)
        del block
        for j, (ci, co) in enumerate(((cin, cout), (cout, cout)), start=1):
            conv = self.add_layer("conv2d", f"{prefix}.conv{j}", in_ch=ci, out_ch=co)
            self.add_param(conv, f"{prefix}.conv{j}.weight", "conv",
                           rng.child(f"{prefix}.conv{j}").normal(
                               (co, ci, 3, 3), scale=math.sqrt(2.0 / (9 * ci))))
            self.add_param(conv, f"{prefix}.conv{j}.bias", "bias", np.zeros(co))
            self.ssf_sites.append((f"{prefix}.conv{j}", co))
            self.tsa_sites.append((f"{prefix}.conv{j}", ci, co))
            self.svdiff_targets.append(f"{prefix}.conv{j}.weight")
            norm = self.add_layer("layer-norm", f"{prefix}.norm{j}", dim=co)
            self.add_param(norm, f"{prefix}.norm{j}.scale", "norm-scale", np.ones(co))
            self.add_param(norm, f"{prefix}.norm{j}.shift", "norm-shift", np.zeros(co))
            self.ssf_sites.append((f"{prefix}.norm{j}", co))
        inj = self.add_layer("dense", f"{prefix}.inject", in_dim=self.temb_dim,
                             out_dim=cout)
        self.add_param(inj, f"{prefix}.inject.weight", "dense",
                       rng.child(f"{prefix}.inject").normal(
                           (cout, self.temb_dim), scale=1.0 / math.sqrt(self.temb_dim)))
        self.add_param(inj, f"{prefix}.inject.bias", "bias", np.zeros(cout))
        self.ssf_sites.append((f"{prefix}.inject", cout))
        self.svdiff_targets.append(f"{prefix}.inject.weight")

    def _time_features(self, t: np.ndarray) -> np.ndarray:
        half = self.temb_dim // 2
        freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
        ang = t[:, None].astype(np.float64) * freqs[None, :]
        return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)

    def _context(self, aux, hooks: AdapterHooks) -> Tensor:
        t = np.asarray(aux["t"])
        cond = np.asarray(aux["cond"])
        if cond.min() < 0 or cond.max() >= self.cfg.cond_vocab:
            raise ValueError(
                f"condition id out of range [0, {self.cfg.cond_vocab})"
            )
        feats = Tensor(self._time_features(t))
        temb = self._dense(feats, "time.fc", hooks)
        cond_emb = Tensor(self.param("cond.table.weight").tensor.data[cond])
        return ad.relu(ad.add(temb, cond_emb))

    def _conv_block(self, h: Tensor, prefix: str, ctx: Tensor, hooks) -> Tensor:
        h = self._conv(h, f"{prefix}.conv1", hooks)
        inj = self._dense(ctx, f"{prefix}.inject", hooks)
        c = inj.shape[-1]
        h = ad.add(h, ad.reshape(inj, (inj.shape[0], c, 1, 1)))
        h = self._layer_norm_chan(h, f"{prefix}.norm1", hooks)
        h = ad.relu(h)
        h = self._conv(h, f"{prefix}.conv2", hooks)
        h = self._layer_norm_chan(h, f"{prefix}.norm2", hooks)
        return ad.relu(h)

    def _forward(self, x, train, aux, hooks):
        if "t" not in aux or "cond" not in aux:
            raise ValueError("mini-denoiser forward needs aux={'t': ..., 'cond': ...}")
        ctx = self._context(aux, hooks)
        skips = []
        h = x
        for i in range(self.cfg.levels):
            h = self._conv_block(h, f"enc.{i}", ctx, hooks)
            skips.append(h)
            h = _avg_pool2(h)

        h = self._conv_block(h, "mid.block", ctx, hooks)
        b, c, hh, ww = h.shape
        tokens = ad.transpose(ad.reshape(h, (b, c, hh * ww)), (0, 2, 1))
        t = self._layer_norm_feat(tokens, "mid.attn_ln", hooks)
        tokens = ad.add(tokens, self._attention(t, "mid.attn", self.cfg.heads, hooks))
        t = self._layer_norm_feat(tokens, "mid.mlp_ln", hooks)
        m = self._mlp_forward(t, "mid.mlp", hooks)
        extra = hooks.mlp_extra("mid.mlp", tokens)
        if extra is not None:
            m = ad.add(m, extra)
        tokens = ad.add(tokens, m)
        h = ad.reshape(ad.transpose(tokens, (0, 2, 1)), (b, c, hh, ww))

        for i in reversed(range(self.cfg.levels)):
            h = _upsample2(h)
            h = ad.concat([h, skips[i]], axis=1)
            h = self._conv_block(h, f"dec.{i}", ctx, hooks)

        w = self.param("out.weight").tensor
        bias = self.param("out.bias").tensor
        y = ad.conv2d(h, w, stride=1, padding=0)
        return ad.add(y, ad.reshape(bias, (1, bias.size, 1, 1)))


# ---------------------------------------------------------------------------
# builders, manifest, checkpoint io


def build_mini_cnn(cfg: CnnConfig | None = None, rng: RngStream | None = None) -> MiniCnn:
    return MiniCnn(cfg or CnnConfig(), rng)


def build_mini_vit(cfg: VitConfig | None = None, rng: RngStream | None = None) -> MiniVit:
    return MiniVit(cfg or VitConfig(), rng)


def build_mini_denoiser(cfg: DenoiserConfig | None = None,
                        rng: RngStream | None = None) -> MiniDenoiser:
    return MiniDenoiser(cfg or DenoiserConfig(), rng)


ARCHS = {
    "mini-cnn": (build_mini_cnn, CnnConfig),
    "mini-vit": (build_mini_vit, VitConfig),
    "mini-denoiser": (build_mini_denoiser, DenoiserConfig),
}


def build_model(arch: str, cfg_kwargs=None, rng: RngStream | None = None) -> ModelGraph:
    if arch not in ARCHS:
        raise ValueError(f"unknown arch {arch!r}; expected one of {sorted(ARCHS)}")
    builder, cfg_cls = ARCHS[arch]
    return builder(cfg_cls(**(cfg_kwargs or {})), rng)


def model_forward(model: ModelGraph, batch, aux=None, train: bool = False,
                  hooks: AdapterHooks | None = None) -> Tensor:
    """Forward pass: logits for classifiers, predicted noise for the denoiser."""
    return model.forward(batch, train=train, aux=aux, hooks=hooks)


def param_manifest(model: ModelGraph):
    """Records sorted by name, plus per-role counts and the grand total."""
    records = sorted(model.params(), key=lambda r: r.name)
    counts = {}
    for r in records:
        counts[r.role] = counts.get(r.role, 0) + r.size
    return records, counts, sum(counts.values())


def load_model(path) -> ModelGraph:
    with np.load(path) as data:
        manifest = json.loads(bytes(data["__manifest__"]).decode())
        if manifest["format_version"] != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version {manifest['format_version']}"
            )
        model = build_model(manifest["arch_id"], manifest["cfg"])
        for entry in manifest["params"]:
            rec = model.param(entry["name"])
            arr = data[f"p:{entry['name']}"]
            if list(arr.shape) != entry["shape"] or arr.shape != rec.tensor.shape:
                raise ValueError(f"checkpoint shape mismatch for {entry['name']}")
            rec.tensor.data[...] = arr
            rec.trainable = bool(entry["trainable"])
            rec.tensor.requires_grad = rec.trainable
        for name in manifest["buffers"]:
            model.buffers[name][...] = data[f"b:{name}"]
    return model
