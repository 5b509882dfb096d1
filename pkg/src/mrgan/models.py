"""Architecture builders for U-net, DCGAN, SRResGAN and ProGAN.

A :class:`Model` is an ordered list of nodes. Each node is one row of the
architecture tables: a main layer followed by optional normalization,
activation and dropout. Nodes read the previous node's output unless they
name their inputs, which is how skip, residual and fade-in edges are
expressed.

Builders are resolution-parameterized. The defaults reproduce the tables;
smaller settings give desk-scale instances with the same topology.
"""

import contextlib
import math
from dataclasses import dataclass

import numpy as np

from . import layers as L
from .layers import ShapeError
from .optim import InitScheme, init_weights
from .tensor import Tensor

_ACT_NAMES = {"relu": "ReLU", "lrelu": "LReLU", "sigmoid": "Sigmoid", "tanh": "Tanh", "linear": None}
_NORM_NAMES = {"bn": "BN", "pn": "PN"}


class Node:
    def __init__(self, name, layer, inputs=(), norm=None, act=None, dropout=0.0,
                 show=True, group=None, label=None):
        self.name = name
        self.layer = layer
        self.inputs = tuple(inputs)
        self.norm = norm
        self.act = act
        self.dropout = dropout
        self.show = show
        self.group = group
        self.label = label or layer.label
        self.norm_layer = None

    @property
    def act_label(self):
        parts = [_NORM_NAMES[self.norm]] if self.norm else []
        if self.act and _ACT_NAMES[self.act]:
            parts.append(_ACT_NAMES[self.act])
        return "+".join(parts) or "-"


@dataclass
class Row:
    group: str
    layer: str
    act: str
    shape: tuple

    def __str__(self):
        shape = " x ".join(str(n) for n in self.shape)
        head = f"{self.group} " if self.group else ""
        return f"{head + self.layer:<26} {self.act:<10} {shape}"


class Model:
    def __init__(self, arch, nodes, meta=None):
        self.arch = arch
        self.nodes = list(nodes)
        self.meta = dict(meta or {})
        if not isinstance(self.nodes[0].layer, L.Input):
            raise ValueError("first node must be an input")
        self.input_shape = self.nodes[0].layer.shape
        names = [n.name for n in self.nodes]
        if len(set(names)) != len(names):
            raise ValueError("duplicate node names")
        self._params = None
        self._attach_norms()

    # -- structure -------------------------------------------------------------

    def _attach_norms(self):
        for node, shape in zip(self.nodes, self._walk(self.input_shape)):
            if node.norm == "bn":
                node.norm_layer = L.BatchNorm(shape[0])
            elif node.norm == "pn":
                node.norm_layer = L.PixelNorm()

    def _walk(self, input_shape):
        shapes = {}
        prev = None
        out = []
        for node in self.nodes:
            try:
                if isinstance(node.layer, L.Input):
                    if math.prod(input_shape) != math.prod(node.layer.shape):
                        raise ShapeError(f"input {tuple(input_shape)} does not fit {node.layer.shape}")
                    s = node.layer.output_shape()
                else:
                    args = [shapes[n] for n in node.inputs] if node.inputs else [prev]
                    s = node.layer.output_shape(*args)
            except ShapeError as exc:
                raise ShapeError(f"layer '{node.name}' ({node.label}): {exc}") from None
            s = tuple(int(v) for v in s)
            shapes[node.name] = prev = s
            out.append(s)
        return out

    def forward_shapes(self, input_shape=None):
        """Per-node output shapes by symbolic walk; nothing is allocated."""
        shape = tuple(input_shape) if input_shape is not None else self.input_shape
        return [(n.name, s) for n, s in zip(self.nodes, self._walk(shape))]

    def table(self):
        """Rows in the architecture-table format; repeated blocks appear once."""
        rows, seen_groups = [], set()
        for node, shape in zip(self.nodes, self._walk(self.input_shape)):
            if not node.show:
                continue
            if node.group:
                gid, tag = node.group
                if (gid, node.label, node.act_label) in seen_groups:
                    continue
                seen_groups.add((gid, node.label, node.act_label))
                rows.append(Row(tag, node.label, node.act_label, shape))
            else:
                rows.append(Row("", node.label, node.act_label, shape))
        return rows

    def dump(self):
        return "\n".join(str(r) for r in self.table())

    # -- parameters ------------------------------------------------------------

    def _layers(self):
        for node in self.nodes:
            yield node.name, node.layer
            if node.norm_layer is not None:
                yield node.name + ".bn", node.norm_layer

    def param_specs(self):
        return [(f"{prefix}.{spec.name}", spec, layer)
                for prefix, layer in self._layers() for spec in layer.param_specs()]

    def count_params(self):
        total = trainable = 0
        for _, spec, _ in self.param_specs():
            total += spec.size
            if spec.trainable:
                trainable += spec.size
        return total, trainable

    def apply_scheme(self, scheme):
        """Set per-layer forward scales (only ``dynamic_scaled`` uses them)."""
        for _, spec, layer in self.param_specs():
            if spec.init == "weight":
                layer.wscale = (np.float32(scheme.sigma(spec.fan_out, spec.size // spec.fan_out))
                                if scheme.kind == "dynamic_scaled" else None)
        self.meta["init"] = scheme.kind
        self.meta["init_fan_in"] = scheme.fan_in

    def initialize(self, rng, scheme=None):
        scheme = scheme or InitScheme()
        for full, spec, layer in self.param_specs():
            if spec.init == "weight":
                arr, scale = init_weights(spec.shape, scheme, rng, n_filters=spec.fan_out,
                                          fan_in=spec.size // spec.fan_out)
                layer.wscale = scale
            elif spec.init == "ones":
                arr = np.ones(spec.shape, dtype=np.float32)
            else:
                arr = np.zeros(spec.shape, dtype=np.float32)
            layer.params[spec.name] = Tensor(arr, requires_grad=spec.trainable, name=full,
                                             trainable=spec.trainable)
        self.meta["init"] = scheme.kind
        self.meta["init_fan_in"] = scheme.fan_in
        self._params = None
        return self

    @property
    def params(self):
        """All parameters by full name, including non-trainable BN statistics."""
        if self._params is None:
            out = {}
            for full, spec, layer in self.param_specs():
                if spec.name not in layer.params:
                    raise RuntimeError(f"model not initialized (missing {full})")
                out[full] = layer.params[spec.name]
            self._params = out
        return self._params

    def trainable_params(self):
        return {n: p for n, p in self.params.items() if p.trainable}

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def load_params(self, arrays, strict=True):
        """Copy arrays into parameters by name. Unknown names are ignored unless strict."""
        specs = {full: (spec, layer) for full, spec, layer in self.param_specs()}
        if strict:
            missing = set(specs) - set(arrays)
            if missing:
                raise KeyError(f"missing parameters: {sorted(missing)[:5]}")
        for full, (spec, layer) in specs.items():
            if full not in arrays:
                continue
            arr = np.asarray(arrays[full], dtype=np.float32)
            if arr.shape != spec.shape:
                raise ShapeError(f"{full}: stored shape {arr.shape} vs model {spec.shape}")
            layer.params[spec.name] = Tensor(arr, requires_grad=spec.trainable, name=full,
                                             trainable=spec.trainable)
        self._params = None

    @contextlib.contextmanager
    def frozen(self):
        """Temporarily stop recording gradients for this model's parameters."""
        params = list(self.params.values())
        flags = [p.requires_grad for p in params]
        for p in params:
            p.requires_grad = False
        try:
            yield self
        finally:
            for p, f in zip(params, flags):
                p.requires_grad = f

    # -- forward -----------------------------------------------------------------

    def __call__(self, x, train=True, rng=None):
        if not isinstance(x, Tensor):
            x = Tensor(x)
        outs = {}
        prev = None
        for node in self.nodes:
            if isinstance(node.layer, L.Input):
                y = node.layer.forward(x)
            else:
                args = [outs[n] for n in node.inputs] if node.inputs else [prev]
                y = node.layer.forward(*args, train=train, rng=rng)
            if node.norm_layer is not None:
                y = node.norm_layer.forward(y, train=train)
            if node.act:
                y = L.activation(node.act, y)
            if node.dropout:
                y = L.dropout(y, node.dropout, train, rng)
            outs[node.name] = prev = y
        return prev

    def set_alpha(self, alpha):
        for node in self.nodes:
            if isinstance(node.layer, L.Blend):
                node.layer.alpha = float(alpha)
        self.meta["alpha"] = float(alpha)


def count_params(model):
    return model.count_params()


def forward_shapes(model, input_shape=None):
    return model.forward_shapes(input_shape)


def transfer_params(src, dst):
    """Copy every parameter ``dst`` shares by name with ``src``; returns the names copied."""
    shared = {n: p.data for n, p in src.params.items() if n in {f for f, _, _ in dst.param_specs()}}
    dst.load_params(shared, strict=False)
    return sorted(shared)


def _log2(n, what):
    e = int(round(math.log2(n))) if n > 0 else -1
    if e < 0 or 2 ** e != n:
        raise ValueError(f"{what} must be a power of two, got {n}")
    return e


# -- U-net -------------------------------------------------------------------------

def build_unet(base_filters=32, use_bn=True, dropout=0.0, in_channels=1, out_channels=1,
               input_res=128, depth=4):
    """Encoder/decoder with ``depth`` poolings and concatenated skips.

    BN follows every 3x3 convolution; the transpose convolutions carry no
    BN (the only placement that matches the target parameter counts).
    """
    if base_filters not in (8, 16, 32, 64):
        raise ValueError(f"base_filters must be one of 8, 16, 32, 64, got {base_filters}")
    if input_res % (2 ** depth):
        raise ShapeError(f"U-net input extent {input_res} not divisible by {2 ** depth}")
    norm = "bn" if use_bn else None
    nodes = [Node("input", L.Input((in_channels, input_res, input_res)))]
    cin = in_channels
    for d in range(depth):
        c = base_filters * 2 ** d
        nodes += [
            Node(f"enc{d + 1}.conv1", L.Conv2d(cin, c, 3), norm=norm, act="relu"),
            Node(f"enc{d + 1}.conv2", L.Conv2d(c, c, 3), norm=norm, act="relu", dropout=dropout,
                 label=f"l{d + 1} <- Conv 3x3"),
            Node(f"enc{d + 1}.pool", L.Pool("max")),
        ]
        cin = c
    c = base_filters * 2 ** depth
    nodes += [Node("mid.conv1", L.Conv2d(cin, c, 3), norm=norm, act="relu"),
              Node("mid.conv2", L.Conv2d(c, c, 3), norm=norm, act="relu", dropout=dropout)]
    cin = c
    for d in reversed(range(depth)):
        c = base_filters * 2 ** d
        nodes += [
            Node(f"dec{d + 1}.up", L.ConvTranspose2d(cin, c, 3, 2)),
            Node(f"dec{d + 1}.cat", L.Concat(f"Concatenate l{d + 1}"),
                 inputs=(f"dec{d + 1}.up", f"enc{d + 1}.conv2")),
            Node(f"dec{d + 1}.conv1", L.Conv2d(2 * c, c, 3), norm=norm, act="relu"),
            Node(f"dec{d + 1}.conv2", L.Conv2d(c, c, 3), norm=norm, act="relu"),
        ]
        cin = c
    nodes.append(Node("head", L.Conv2d(cin, out_channels, 1), act="sigmoid"))
    meta = dict(base_filters=base_filters, use_bn=use_bn, dropout=dropout, in_channels=in_channels,
                out_channels=out_channels, input_res=input_res, depth=depth)
    return Model("unet", nodes, meta)


# -- DCGAN -------------------------------------------------------------------------

def build_dcgan(latent=256, base_res=8, target_res=256, g_filters=256, d_filters=64,
                disc_final_res=8, kernel=5, minibatch_std=False, head="sigmoid"):
    """Generator and discriminator from the DCGAN table, scaled to ``target_res``.

    The generator doubles resolution with stride-2 transpose convs. Each of
    the first doublings is followed by a stride-1 transpose conv at the same
    width (the paired rows of the table); the last two doublings halve the
    channel count instead.
    """
    if target_res < 16:
        raise ValueError(f"DCGAN target resolution must be >= 16, got {target_res}")
    n_up = _log2(target_res, "target_res") - _log2(base_res, "base_res")
    if n_up < 1:
        raise ValueError("target_res must exceed base_res")
    g = g_filters
    nodes = [Node("input", L.Input((latent, 1, 1), "Latent vector")),
             Node("dense", L.Dense(latent, g * base_res ** 2, reshape_to=(g, base_res, base_res)),
                  norm="bn", act="relu")]
    pairs = max(n_up - 2, 0)
    for i in range(pairs):
        nodes += [Node(f"up{i}.a", L.ConvTranspose2d(g, g, kernel, 2), norm="bn", act="relu"),
                  Node(f"up{i}.b", L.ConvTranspose2d(g, g, kernel, 1), norm="bn", act="relu")]
    cin = g
    for j in range(n_up - pairs):
        cout = max(g // 2 ** (j + 1), 1)
        nodes.append(Node(f"up{pairs + j}", L.ConvTranspose2d(cin, cout, kernel, 2), norm="bn", act="relu"))
        cin = cout
    nodes.append(Node("out", L.ConvTranspose2d(cin, 1, kernel, 1), act="tanh"))
    gen = Model("dcgan_g", nodes, dict(latent=latent, base_res=base_res, target_res=target_res,
                                       g_filters=g_filters, kernel=kernel))

    n_down = _log2(target_res, "target_res") - _log2(disc_final_res, "disc_final_res")
    if n_down < 1:
        raise ValueError("disc_final_res must be below target_res")
    nodes = [Node("input", L.Input((1, target_res, target_res)))]
    cin = 1
    for i in range(n_down):
        c = d_filters * 2 ** i
        nodes.append(Node(f"conv{i}", L.Conv2d(cin, c, kernel, 2), norm="bn" if i else None, act="lrelu"))
        cin = c
    feat = cin
    if minibatch_std:
        nodes.append(Node("mbstd", L.MinibatchStd()))
        feat += 1
    nodes += [Node("dense1", L.Dense(feat * disc_final_res ** 2, cin), act="lrelu"),
              Node("head", L.Dense(cin, 1), act=head)]
    disc = Model("dcgan_d", nodes, dict(target_res=target_res, d_filters=d_filters,
                                        disc_final_res=disc_final_res, kernel=kernel,
                                        minibatch_std=minibatch_std, head=head))
    return gen, disc


# -- SRResGAN ------------------------------------------------------------------------

def build_srresgan(latent=256, n_res_blocks=16, target_res=256, g_filters=64, d_filters=32,
                   kernel=3, d_res_act="lrelu", minibatch_std=False, head="sigmoid"):
    """Residual generator with PixelShuffle upscaling from 16x16, and its discriminator."""
    u = _log2(target_res, "target_res") - 4
    if u < 0:
        raise ValueError(f"SRResGAN target_res must be 16 * 2^u, got {target_res}")
    g = g_filters
    grp = f"x{n_res_blocks}"
    nodes = [Node("input", L.Input((latent, 1, 1), "Latent vector")),
             Node("dense", L.Dense(latent, g * 256, reshape_to=(g, 16, 16)), norm="bn", act="relu")]
    prev = "dense"
    for i in range(n_res_blocks):
        nodes += [Node(f"res{i}.conv1", L.Conv2d(g, g, kernel), norm="bn", act="relu", group=("res", grp)),
                  Node(f"res{i}.conv2", L.Conv2d(g, g, kernel), norm="bn", group=("res", grp)),
                  Node(f"res{i}.add", L.Add(), inputs=(f"res{i}.conv2", prev), group=("res", grp))]
        prev = f"res{i}.add"
    nodes += [Node("post", L.Identity(), norm="bn", act="relu"),
              Node("skip", L.Add(), inputs=("post", "dense"))]
    for j in range(u):
        nodes += [Node(f"up{j}.conv", L.Conv2d(g, 4 * g, 3)),
                  Node(f"up{j}.shuffle", L.PixelShuffle(2), norm="bn", act="relu")]
    nodes.append(Node("out", L.Conv2d(g, 1, 9), act="tanh"))
    gen = Model("srresgan_g", nodes, dict(latent=latent, n_res_blocks=n_res_blocks,
                                          target_res=target_res, g_filters=g_filters, kernel=kernel))

    n_stages = _log2(target_res, "target_res") - 2
    nodes = [Node("input", L.Input((1, target_res, target_res)))]
    cin, prev = 1, None
    for s in range(n_stages):
        c = d_filters * 2 ** s
        nodes.append(Node(f"s{s}.down", L.Conv2d(cin, c, 4, 2), act="lrelu"))
        prev = f"s{s}.down"
        for r in range(2):
            tag = (f"dres{s}", "x2")
            p = f"s{s}.r{r}"
            nodes += [Node(f"{p}.conv1", L.Conv2d(c, c, kernel), act=d_res_act, group=tag),
                      Node(f"{p}.conv2", L.Conv2d(c, c, kernel), group=tag),
                      Node(f"{p}.add", L.Add(), inputs=(f"{p}.conv2", prev), act="lrelu", group=tag)]
            prev = f"{p}.add"
        cin = c
    if minibatch_std:
        nodes.append(Node("mbstd", L.MinibatchStd()))
    nodes += [Node("final", L.Conv2d(cin + (1 if minibatch_std else 0), 2 * cin, 3, 2), act="lrelu"),
              Node("head", L.Dense(2 * cin * 4, 1), act=head)]
    disc = Model("srresgan_d", nodes, dict(target_res=target_res, d_filters=d_filters, kernel=kernel,
                                           d_res_act=d_res_act, minibatch_std=minibatch_std, head=head))
    return gen, disc


# -- ProGAN --------------------------------------------------------------------------

@dataclass
class ProGANStage:
    resolution: int
    phase: str = "stabilize"
    alpha: float = 1.0

    def __post_init__(self):
        _log2(self.resolution, "stage resolution")
        if not 4 <= self.resolution <= 256:
            raise ValueError(f"stage resolution must be in [4, 256], got {self.resolution}")
        if self.phase not in ("stabilize", "transition"):
            raise ValueError(f"unknown phase {self.phase!r}")
        if self.phase == "stabilize" and self.alpha != 1.0:
            raise ValueError("alpha must be 1 in the stabilize phase")
        if self.phase == "transition" and self.resolution == 4:
            raise ValueError("the 4x4 stage has no transition")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")


def stage_ladder(target_res):
    _log2(target_res, "target_res")
    return [2 ** e for e in range(2, _log2(target_res, "target_res") + 1)]


def build_progan(stage, latent=512, fbase=4096, fmax=512, kernel=5, pixelnorm=True,
                 minibatch_std=True, head="sigmoid"):
    """Generator and discriminator truncated at ``stage.resolution``.

    In the transition phase both networks blend the new block with the
    previous stage's path: generator ``alpha * toRGB(new) +
    (1 - alpha) * upsample(toRGB(previous))``, discriminator ``alpha *
    block(fromRGB(x)) + (1 - alpha) * fromRGB(avgpool(x))``. Parameter
    names depend only on resolution, so weights carry across stages.
    """
    if isinstance(stage, int):
        stage = ProGANStage(stage)
    R = stage.resolution
    trans = stage.phase == "transition"

    def ch(res):
        return min(fmax, fbase // res)

    pn = "pn" if pixelnorm else None
    nodes = [Node("input", L.Input((latent, 1, 1), "Latent vector")),
             Node("b4.conv1", L.ConvTranspose2d(latent, ch(4), 4, 1, padding="valid"), act="lrelu",
                  label="Conv 4x4"),
             Node("b4.conv2", L.Conv2d(ch(4), ch(4), 3), norm=pn, act="lrelu")]
    prev = "b4.conv2"
    res = 8
    while res <= R:
        if trans and res == R:
            nodes += [Node(f"torgb{res // 2}", L.Conv2d(ch(res // 2), 1, 1), inputs=(prev,), act="tanh", show=False),
                      Node("old.up", L.Upsample(), show=False)]
        nodes += [Node(f"b{res}.up", L.Upsample(), inputs=(prev,)),
                  Node(f"b{res}.conv1", L.Conv2d(ch(res // 2), ch(res), kernel), norm=pn, act="lrelu"),
                  Node(f"b{res}.conv2", L.Conv2d(ch(res), ch(res), kernel), norm=pn, act="lrelu")]
        prev = f"b{res}.conv2"
        res *= 2
    nodes.append(Node(f"torgb{R}", L.Conv2d(ch(R), 1, 1), act="tanh"))
    if trans:
        nodes.append(Node("blend", L.Blend(stage.alpha), inputs=(f"torgb{R}", "old.up"), show=False))
    meta = dict(latent=latent, fbase=fbase, fmax=fmax, kernel=kernel, pixelnorm=pixelnorm,
                resolution=R, phase=stage.phase, alpha=stage.alpha)
    gen = Model("progan_g", nodes, meta)

    nodes = [Node("input", L.Input((1, R, R))),
             Node(f"fromrgb{R}", L.Conv2d(1, ch(R), 1), act="lrelu")]
    res = R
    while res >= 8:
        nodes += [Node(f"b{res}.conv1", L.Conv2d(ch(res), ch(res), kernel), act="lrelu"),
                  Node(f"b{res}.conv2", L.Conv2d(ch(res), ch(res // 2), kernel)),
                  Node(f"b{res}.down", L.Pool("avg"), act="lrelu")]
        if trans and res == R:
            nodes += [Node("old.down", L.Pool("avg"), inputs=("input",), show=False),
                      Node(f"fromrgb{R // 2}", L.Conv2d(1, ch(R // 2), 1), act="lrelu", show=False),
                      Node("blend", L.Blend(stage.alpha), inputs=(f"b{R}.down", f"fromrgb{R // 2}"), show=False)]
        res //= 2
    c4 = ch(4)
    if minibatch_std:
        nodes.append(Node("mbstd", L.MinibatchStd()))
    nodes += [Node("final.conv3", L.Conv2d(c4 + (1 if minibatch_std else 0), c4, 3), act="lrelu"),
              Node("final.conv4", L.Conv2d(c4, c4, 4, 1, padding="valid"), act="lrelu"),
              Node("head", L.Dense(c4, 1), act=head)]
    meta = dict(fbase=fbase, fmax=fmax, kernel=kernel, minibatch_std=minibatch_std, head=head,
                resolution=R, phase=stage.phase, alpha=stage.alpha)
    disc = Model("progan_d", nodes, meta)
    return gen, disc


ARCHITECTURES = ("unet", "dcgan", "srresgan", "progan")


def canonical(arch):
    """The table configuration of each architecture (models are not initialized)."""
    if arch == "unet":
        return (build_unet(32, True, 0.0, input_res=128),)
    if arch == "dcgan":
        return build_dcgan()
    if arch == "srresgan":
        return build_srresgan()
    if arch == "progan":
        return build_progan(ProGANStage(256))
    raise ValueError(f"unknown architecture {arch!r}; choose from {', '.join(ARCHITECTURES)}")
