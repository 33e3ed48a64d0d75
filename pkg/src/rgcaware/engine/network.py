"""Network specs, shape checking, parameter accounting and the hybrid model.

A :class:`NetworkSpec` is an ordered list of layer descriptors, each naming its
inputs. Channel counts on the input side are inferred by :meth:`NetworkSpec.check`,
so descriptors only state output widths (as in Keras). A spec names two heads:
a per-pixel segmentation softmax and a scan-level classification softmax that
share the encoder.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import layers as L
from .dilation import make_schedule

SEG_CLASSES = ("background", "rnfl", "gcip")
CLS_CLASSES = ("healthy", "glaucoma")


@dataclass
class LayerSpec:
    name: str
    kind: str
    inputs: list = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"name": self.name, "kind": self.kind, "inputs": list(self.inputs), "config": dict(self.config)}


@dataclass
class NetworkSpec:
    name: str
    layers: list
    seg_output: Optional[str] = None
    cls_output: Optional[str] = None

    def to_dict(self) -> dict:
        return {"name": self.name, "seg_output": self.seg_output, "cls_output": self.cls_output,
                "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        layers = [LayerSpec(l["name"], l["kind"], list(l.get("inputs", [])), dict(l.get("config", {})))
                  for l in d["layers"]]
        return cls(d["name"], layers, d.get("seg_output"), d.get("cls_output"))

    def input_layer(self) -> LayerSpec:
        return next(l for l in self.layers if l.kind == "input")

    def check(self) -> dict:
        """Infer every layer's output shape (excluding batch); raise on any mismatch."""
        return _build(self)[1]


def _layer_from_spec(ls: LayerSpec, in_shapes: list) -> L.Layer:
    c = dict(ls.config)
    k = ls.kind
    if k == "input":
        return L.Input(c["shape"], name=ls.name)
    if k == "conv":
        return L.AtrousConv2D(in_shapes[0][0], c["filters"], c.get("ksize", 3), c.get("rate", 1),
                              c.get("padding", "same"), name=ls.name)
    if k == "batchnorm":
        return L.BatchNorm(in_shapes[0][0], c.get("momentum", 0.9), c.get("eps", 1e-3), name=ls.name)
    if k in ("dense", "classify"):
        if len(in_shapes[0]) != 1:
            raise L.ShapeError(f"{ls.name}: dense input must be flat, got {in_shapes[0]}")
        cls = L.Dense if k == "dense" else L.Classifier
        return cls(in_shapes[0][0], c["units"], name=ls.name)
    if k in ("maxpool", "avgpool"):
        cls = L.MaxPool if k == "maxpool" else L.AvgPool
        return cls(c.get("size", 2), c.get("global_pool", False), name=ls.name)
    if k == "zeropad":
        return L.ZeroPad(c.get("pad", 1), name=ls.name)
    if k == "resize":
        return L.Resize(c["size"], name=ls.name)
    if k == "scale":
        return L.Scale(c.get("factor", 1.0), name=ls.name)
    if k == "reshape":
        return L.Reshape(c["shape"], name=ls.name)
    return L.make_layer(k, ls.name)


def _build(spec: NetworkSpec):
    if not spec.layers:
        return {}, {}
    built, shapes = {}, {}
    n_inputs = 0
    for ls in spec.layers:
        if ls.name in built:
            raise L.ShapeError(f"duplicate layer name {ls.name!r}")
        missing = [i for i in ls.inputs if i not in shapes]
        if missing:
            raise L.ShapeError(f"{ls.name}: inputs {missing} are not defined earlier in the network spec")
        if ls.kind == "input":
            n_inputs += 1
            if ls.inputs:
                raise L.ShapeError("input layers take no inputs")
        elif not ls.inputs:
            raise L.ShapeError(f"{ls.name}: needs at least one input")
        in_shapes = [shapes[i] for i in ls.inputs]
        layer = _layer_from_spec(ls, in_shapes)
        if layer.n_inputs > 0 and len(in_shapes) != layer.n_inputs:
            raise L.ShapeError(f"{ls.name}: expects {layer.n_inputs} input(s), got {len(in_shapes)}")
        shapes[ls.name] = tuple(layer.output_shape(in_shapes))
        built[ls.name] = layer
    if n_inputs != 1:
        raise L.ShapeError(f"spec must have exactly one input layer, found {n_inputs}")
    for head in (spec.seg_output, spec.cls_output):
        if head is not None and head not in shapes:
            raise L.ShapeError(f"head {head!r} is not a layer of the network spec")
    if spec.seg_output is not None:
        C, H, W = shapes[spec.seg_output]
        inC, inH, inW = shapes[spec.input_layer().name]
        if (H, W) != (inH, inW):
            raise L.ShapeError(f"segmentation head is {H}x{W}, input is {inH}x{inW}")
    return built, shapes


def count_parameters(spec: NetworkSpec) -> tuple[int, int, int]:
    """(learnable, non_learnable, total) from the accounting rules per layer family.

    conv: kh*kw*C_in*C_out + C_out; batch-norm: 2C learnable (scale, shift) and
    2C non-learnable (running mean, variance); dense/classify: D*U + U; every
    other family contributes nothing.
    """
    shapes = spec.check()
    learn = fixed = 0
    for ls in spec.layers:
        in_shapes = [shapes[i] for i in ls.inputs]
        c = ls.config
        if ls.kind == "conv":
            ks = c.get("ksize", 3)
            kh, kw = (ks, ks) if np.isscalar(ks) else ks
            learn += kh * kw * in_shapes[0][0] * c["filters"] + c["filters"]
        elif ls.kind == "batchnorm":
            ch = in_shapes[0][0]
            learn += 2 * ch
            fixed += 2 * ch
        elif ls.kind in ("dense", "classify"):
            learn += in_shapes[0][0] * c["units"] + c["units"]
    return learn, fixed, learn + fixed


class Network:
    """Executable graph built from a checked :class:`NetworkSpec`."""

    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.layers, self.shapes = _build(spec)
        self.seed = seed
        self.values: dict[str, np.ndarray] = {}
        rng = np.random.default_rng(seed)
        for layer in self.layers.values():
            if hasattr(layer, "init"):
                layer.init(rng)

    @property
    def input_shape(self) -> tuple:
        return self.shapes[self.spec.input_layer().name]

    # -- parameters -------------------------------------------------------

    def parameters(self):
        """Yield ``(key, array)`` for every learnable tensor, in spec order."""
        for name, layer in self.layers.items():
            for pname in sorted(layer.params):
                yield f"{name}.{pname}", layer.params[pname]

    def gradients(self):
        for name, layer in self.layers.items():
            for pname in sorted(layer.params):
                yield f"{name}.{pname}", layer.grads[pname]

    def buffers(self):
        for name, layer in self.layers.items():
            for bname in sorted(layer.buffers):
                yield f"{name}.{bname}", layer.buffers[bname]

    def zero_grad(self):
        for layer in self.layers.values():
            layer.zero_grad()

    def state_dict(self) -> dict:
        out = {k: v.copy() for k, v in self.parameters()}
        out.update({k: v.copy() for k, v in self.buffers()})
        return out

    def load_state_dict(self, state: dict) -> None:
        for key, arr in state.items():
            lname, pname = key.rsplit(".", 1)
            layer = self.layers[lname]
            target = layer.params if pname in layer.params else layer.buffers
            if pname not in target:
                raise KeyError(f"unknown tensor {key}")
            if target[pname].shape != np.shape(arr):
                raise L.ShapeError(f"{key}: shape {np.shape(arr)} != {target[pname].shape}")
            target[pname] = np.array(arr, dtype=np.float64)

    # -- execution --------------------------------------------------------

    def forward(self, x: np.ndarray, train: bool = False):
        """Run the graph; returns ``(seg_probs, cls_probs)`` (either may be None)."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim == 3:
            x = x[:, None]
        if tuple(x.shape[1:]) != self.input_shape:
            raise L.ShapeError(f"input shape {x.shape[1:]} != spec input {self.input_shape}")
        vals = {}
        for ls in self.spec.layers:
            layer = self.layers[ls.name]
            if ls.kind == "input":
                vals[ls.name] = x
            else:
                vals[ls.name] = layer.forward([vals[i] for i in ls.inputs], train=train)
        self.values = vals
        seg = vals.get(self.spec.seg_output) if self.spec.seg_output else None
        cls = vals.get(self.spec.cls_output) if self.spec.cls_output else None
        return seg, cls

    def backward(self, grads: dict) -> np.ndarray:
        """Backpropagate output gradients ``{layer_name: dL/d(output)}``; returns dL/dx."""
        acc: dict[str, np.ndarray] = {}
        for k, g in grads.items():
            if g is not None:
                acc[k] = np.asarray(g, dtype=np.float64)
        gx = None
        for ls in reversed(self.spec.layers):
            g = acc.pop(ls.name, None)
            if ls.kind == "input":
                gx = g
                continue
            if g is None:
                continue
            for src, gi in zip(ls.inputs, self.layers[ls.name].backward(g)):
                acc[src] = gi if src not in acc else acc[src] + gi
        return gx


# ------------------------------------------------------------------- specs

def toy_spec(height: int = 128, width: int = 256, base: int = 8, block_n: int = 3, block_r: int = 2) -> NetworkSpec:
    """Scaled-down hybrid segmentation/classification network.

    Full-resolution stem -> max-pool -> atrous block with the variable dilation
    schedule -> bilinear upsampling (lambda) -> skip concatenation -> decoder ->
    per-pixel softmax. The classification head average-pools the atrous block
    output, then flatten -> dense -> classification layer -> softmax.
    """
    if height % 2 or width % 2:
        raise ValueError("toy spec needs even input dimensions")
    c1, c2 = base, 2 * base
    S = []

    def add(name, kind, inputs, **config):
        S.append(LayerSpec(name, kind, list(inputs), config))
        return name

    x = add("input", "input", [], shape=[1, height, width])
    h = add("stem_conv", "conv", [x], filters=c1, ksize=3, rate=1, padding="same")
    h = add("stem_bn", "batchnorm", [h])
    stem = add("stem_relu", "relu", [h])
    h = add("pool", "maxpool", [stem], size=2)
    h = add("enc_pad", "zeropad", [h], pad=1)
    h = add("enc_conv", "conv", [h], filters=c2, ksize=3, rate=1, padding="valid")
    h = add("enc_bn", "batchnorm", [h])
    h = add("enc_relu", "relu", [h])
    for i, r in enumerate(make_schedule(block_n, block_r).rates):
        h = add(f"atrous{i}_pad", "zeropad", [h], pad=r)
        h = add(f"atrous{i}_conv", "conv", [h], filters=c2, ksize=3, rate=r, padding="valid")
        h = add(f"atrous{i}_bn", "batchnorm", [h])
        h = add(f"atrous{i}_relu", "relu", [h])
    enc = h
    h = add("upsample", "resize", [enc], size=[height, width])
    h = add("skip", "concat", [h, stem])
    h = add("dec_pad", "zeropad", [h], pad=1)
    h = add("dec_conv", "conv", [h], filters=c2, ksize=3, rate=1, padding="valid")
    h = add("dec_bn", "batchnorm", [h])
    h = add("dec_relu", "relu", [h])
    h = add("seg_logits", "conv", [h], filters=len(SEG_CLASSES), ksize=1, rate=1, padding="same")
    seg = add("seg_softmax", "softmax", [h])

    g = add("cls_gap", "avgpool", [enc], global_pool=True)
    g = add("cls_flatten", "flatten", [g])
    g = add("cls_fc", "dense", [g], units=10)
    g = add("cls_relu", "relu", [g])
    g = add("cls_head", "classify", [g], units=len(CLS_CLASSES))
    cls = add("cls_softmax", "softmax", [g])
    return NetworkSpec("ragnet-v2-toy", S, seg_output=seg, cls_output=cls)


SPECS = {"ragnet-v2-toy": toy_spec}


def spec_by_name(name: str, **kw) -> NetworkSpec:
    try:
        return SPECS[name](**kw)
    except KeyError:
        raise ValueError(f"unknown network spec {name!r}; known: {sorted(SPECS)}") from None


# ----------------------------------------------------------- serialization

MAGIC = b"RGCN"
FORMAT_VERSION = 1


def save_network(net: Network, path, extra: Optional[dict] = None) -> None:
    """Write spec + tensors: magic, u16 version, u32 header length, JSON header, raw <f8 data."""
    table, blobs, offset = [], [], 0
    for key, arr in list(net.parameters()) + list(net.buffers()):
        a = np.ascontiguousarray(arr, dtype="<f8")
        lname, pname = key.rsplit(".", 1)
        table.append({"layer": lname, "tensor": pname, "shape": list(a.shape), "offset": offset,
                      "learnable": pname in net.layers[lname].params})
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps({"spec": net.spec.to_dict(), "seed": net.seed, "tensors": table,
                         "extra": extra or {}}).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(header)))
        fh.write(header)
        for b in blobs:
            fh.write(b)


def load_network(path) -> tuple[Network, dict]:
    data = Path(path).read_bytes()
    if data[:4] != MAGIC:
        raise ValueError(f"{path}: not a network container (bad magic)")
    version, hlen = struct.unpack("<HI", data[4:10])
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    header = json.loads(data[10:10 + hlen].decode("utf-8"))
    body = data[10 + hlen:]
    net = Network(NetworkSpec.from_dict(header["spec"]), seed=header.get("seed", 0))
    state = {}
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) if t["shape"] else 1
        arr = np.frombuffer(body, dtype="<f8", count=n, offset=t["offset"]).reshape(t["shape"])
        state[f"{t['layer']}.{t['tensor']}"] = arr.astype(np.float64)
    net.load_state_dict(state)
    return net, header.get("extra", {})
