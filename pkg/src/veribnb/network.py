"""Feed-forward ReLU networks: file format, convolution lowering, canonical form.

A network is a list of affine layers ``(W_k, b_k)`` with a ReLU between each
consecutive pair. Convolutions and input normalisation only exist in the file
format; they are lowered to dense affine form when a network is loaded, so
everything downstream sees ``weights`` and ``biases`` only.

Layer indices in code are 0-based: hidden layer ``k`` is the pre-activation
``W_k x_{k-1} + b_k`` that feeds the ``k``-th ReLU.
"""
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import numpy as np

from . import _kernels
from . import autodiff as ad


class NetworkFormatError(ValueError):
    """Malformed network or property file."""


@dataclass(frozen=True)
class LayerSpec:
    kind: str  # "affine" | "conv" | "relu"
    W: Optional[np.ndarray] = None
    b: Optional[np.ndarray] = None
    kernel: Optional[np.ndarray] = None
    in_shape: Optional[tuple] = None  # (channels, height, width) for conv
    stride: int = 1
    padding: int = 0


@dataclass(frozen=True)
class Network:
    weights: tuple
    biases: tuple
    canonical: bool = False
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if len(self.weights) == 0 or len(self.weights) != len(self.biases):
            raise NetworkFormatError("network needs matching, non-empty weight and bias lists")
        for k, (W, b) in enumerate(zip(self.weights, self.biases)):
            if W.ndim != 2 or b.shape != (W.shape[0],):
                raise NetworkFormatError(f"layer {k}: bias length {b.shape} does not match W {W.shape}")
            if k and W.shape[1] != self.weights[k - 1].shape[0]:
                raise NetworkFormatError(
                    f"layer {k}: expects {W.shape[1]} inputs, previous layer has {self.weights[k - 1].shape[0]}")
            if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
                raise NetworkFormatError(f"layer {k}: non-finite weight")
            W.flags.writeable = False
            b.flags.writeable = False
        if self.canonical and self.output_dim != 1:
            raise NetworkFormatError("canonical networks have a single output")

    @property
    def input_dim(self):
        return self.weights[0].shape[1]

    @property
    def output_dim(self):
        return self.weights[-1].shape[0]

    @property
    def n_layers(self):
        return len(self.weights)

    @property
    def hidden_sizes(self):
        return [W.shape[0] for W in self.weights[:-1]]

    @property
    def n_relus(self):
        return sum(self.hidden_sizes)

    @classmethod
    def from_arrays(cls, weights, biases, canonical=False, **meta):
        return cls(tuple(np.array(W, dtype=np.float64) for W in weights),
                   tuple(np.array(b, dtype=np.float64).reshape(-1) for b in biases),
                   canonical=canonical, meta=dict(meta))

    def params(self):
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


@dataclass(frozen=True)
class PropertySpec:
    center: np.ndarray
    epsilon: float
    true_label: int
    target_label: Union[int, str, None] = None  # int, "all", or None when `c` given
    input_range: tuple = (0.0, 1.0)
    c: Optional[np.ndarray] = None

    def __post_init__(self):
        if not self.epsilon > 0:
            raise NetworkFormatError("epsilon must be positive")
        if self.c is not None:
            if not np.any(np.asarray(self.c) != 0):
                raise NetworkFormatError("objective row c must have a nonzero entry")
        elif self.target_label is None:
            raise NetworkFormatError("property needs a target_label or an objective row c")
        elif self.target_label != "all" and int(self.target_label) == int(self.true_label):
            raise NetworkFormatError("true_label and target_label must differ")

    def targets(self, n_classes):
        if self.target_label == "all":
            return [j for j in range(n_classes) if j != self.true_label]
        return [int(self.target_label)]

    def with_target(self, target):
        return PropertySpec(self.center, self.epsilon, self.true_label, target, self.input_range)


# -- forward pass ---------------------------------------------------------------

def evaluate(net: Network, x):
    """Forward pass for a vector (d,) or a batch (B, d)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.input_dim:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.input_dim}")
    h = x
    last = net.n_layers - 1
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        h = h @ W.T + b
        if k < last:
            h = np.maximum(h, 0.0)
    return h


def pre_activations(net: Network, x):
    """All pre-activation values ``[x̂_1, ..., x̂_n]`` for a (batch of) input(s)."""
    x = np.asarray(x, dtype=np.float64)
    out, h = [], x
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = h @ W.T + b
        out.append(z)
        h = np.maximum(z, 0.0)
    return out


# -- canonical form -------------------------------------------------------------

def canonicalize(net: Network, prop: PropertySpec = None, *, true_label=None, target_label=None, c=None):
    """Merge the margin row ``c`` into the last layer, giving a single-output net.

    The property holds on the input region iff the returned network is strictly
    positive on it. By default ``c = e_true - e_target``.
    """
    if net.canonical:
        raise ValueError("network is already canonical")
    o = net.output_dim
    if prop is not None:
        true_label = prop.true_label if true_label is None else true_label
        if c is None and prop.c is not None:
            c = prop.c
        if target_label is None and c is None:
            if prop.target_label == "all":
                raise ValueError("property targets all labels; canonicalize once per target")
            target_label = prop.target_label
    if c is None:
        for lbl in (true_label, target_label):
            if lbl is None or not 0 <= int(lbl) < o:
                raise ValueError(f"label {lbl} out of range for {o} outputs")
        c = np.zeros(o)
        c[int(true_label)] += 1.0
        c[int(target_label)] -= 1.0
    c = np.asarray(c, dtype=np.float64).reshape(-1)
    if c.shape != (o,):
        raise ValueError(f"objective row has length {c.size}, network has {o} outputs")
    W_last = (c @ net.weights[-1])[None, :]
    b_last = np.array([c @ net.biases[-1]])
    return Network(net.weights[:-1] + (W_last,), net.biases[:-1] + (b_last,), canonical=True,
                   meta=dict(net.meta))


# -- convolution lowering ----------------------------------------------------------

def conv_output_shape(in_shape, kernel_shape, stride, padding):
    c, h, w = in_shape
    out_c, in_c, kh, kw = kernel_shape
    if in_c != c:
        raise NetworkFormatError(f"conv kernel expects {in_c} channels, input has {c}")
    if stride < 1 or padding < 0 or padding >= max(kh, kw):
        raise NetworkFormatError(f"unsupported stride/padding combination ({stride}, {padding})")
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    if oh < 1 or ow < 1:
        raise NetworkFormatError("convolution kernel larger than padded input")
    return out_c, oh, ow


def conv_as_affine(spec: LayerSpec):
    kernel = np.ascontiguousarray(spec.kernel, dtype=np.float64)
    out_c, oh, ow = conv_output_shape(spec.in_shape, kernel.shape, spec.stride, spec.padding)
    c, h, w = spec.in_shape
    W = _kernels.conv_to_dense(kernel, c, h, w, spec.stride, spec.padding)
    bias = np.zeros(out_c) if spec.b is None else np.asarray(spec.b, dtype=np.float64)
    return W, np.repeat(bias, oh * ow)


def lower_convolutions(layers: Sequence[LayerSpec]):
    """Replace every conv layer with the equivalent dense affine layer."""
    out = []
    for spec in layers:
        if spec.kind == "conv":
            W, b = conv_as_affine(spec)
            out.append(LayerSpec("affine", W=W, b=b))
        else:
            out.append(spec)
    return out


def build_network(layers: Sequence[LayerSpec], input_dim=None, normalization=None, **meta):
    """Validate the affine/relu alternation and assemble a ``Network``."""
    layers = lower_convolutions(layers)
    if not layers or layers[-1].kind != "affine":
        raise NetworkFormatError("network must end with an affine layer")
    weights, biases = [], []
    expect_affine = True
    for i, spec in enumerate(layers):
        if spec.kind == "affine":
            if not expect_affine:
                raise NetworkFormatError(f"layer {i}: two affine layers without a relu between them")
            weights.append(np.asarray(spec.W, dtype=np.float64))
            biases.append(np.asarray(spec.b, dtype=np.float64).reshape(-1))
            expect_affine = False
        elif spec.kind == "relu":
            if expect_affine:
                raise NetworkFormatError(f"layer {i}: relu must follow an affine layer")
            expect_affine = True
        else:
            raise NetworkFormatError(f"layer {i}: unknown layer type {spec.kind!r}")
    if input_dim is not None and weights[0].shape[1] != input_dim:
        raise NetworkFormatError(f"input_dim {input_dim} does not match first layer {weights[0].shape}")
    if normalization is not None:
        mean = np.asarray(normalization["mean"], dtype=np.float64)
        std = np.asarray(normalization["std"], dtype=np.float64)
        d = weights[0].shape[1]
        mean, std = np.broadcast_to(mean, (d,)), np.broadcast_to(std, (d,))
        if np.any(std <= 0):
            raise NetworkFormatError("normalization std must be positive")
        # W((x - m) / s) + b == (W / s) x + (b - W (m / s))
        biases[0] = biases[0] - weights[0] @ (mean / std)
        weights[0] = weights[0] / std
    return Network.from_arrays(weights, biases, **meta)


# -- file format --------------------------------------------------------------------

def _layer_from_json(i, item):
    try:
        kind = item["type"]
        if kind == "affine":
            return LayerSpec("affine", W=np.array(item["W"], dtype=np.float64),
                             b=np.array(item["b"], dtype=np.float64))
        if kind == "relu":
            return LayerSpec("relu")
        if kind == "conv":
            return LayerSpec("conv", kernel=np.array(item["kernel"], dtype=np.float64),
                             b=np.array(item.get("b", np.zeros(len(item["kernel"]))), dtype=np.float64),
                             in_shape=tuple(int(v) for v in item["in_shape"]),
                             stride=int(item.get("stride", 1)), padding=int(item.get("padding", 0)))
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"layer {i}: {exc}") from exc
    raise NetworkFormatError(f"layer {i}: unknown layer type {kind!r}")


def network_from_dict(doc):
    if "layers" not in doc:
        raise NetworkFormatError("network file has no 'layers' entry")
    layers = [_layer_from_json(i, item) for i, item in enumerate(doc["layers"])]
    for spec in layers:
        for arr in (spec.W, spec.b, spec.kernel):
            if arr is not None and not np.all(np.isfinite(arr)):
                raise NetworkFormatError("non-finite weight in network file")
    meta = {k: v for k, v in doc.items() if k not in ("layers", "input_dim", "normalization", "canonical")}
    net = build_network(layers, doc.get("input_dim"), doc.get("normalization"), **meta)
    if doc.get("canonical"):
        net = Network(net.weights, net.biases, canonical=True, meta=net.meta)
    return net


def load_network(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    return network_from_dict(doc)


def network_to_dict(net: Network, **extra):
    layers = []
    for k, (W, b) in enumerate(zip(net.weights, net.biases)):
        if k:
            layers.append({"type": "relu"})
        layers.append({"type": "affine", "W": W.tolist(), "b": b.tolist()})
    doc = {"input_dim": net.input_dim, "layers": layers}
    if net.canonical:
        doc["canonical"] = True
    doc.update(net.meta)
    doc.update(extra)
    return doc


def save_network(net: Network, path, **extra):
    # json writes floats with repr(), which round-trips float64 exactly
    Path(path).write_text(json.dumps(network_to_dict(net, **extra)) + "\n", encoding="utf-8")


def property_from_dict(doc):
    try:
        target = doc.get("target_label")
        if target is not None and target != "all":
            target = int(target)
        c = doc.get("c")
        return PropertySpec(center=np.array(doc["center"], dtype=np.float64),
                            epsilon=float(doc["epsilon"]),
                            true_label=int(doc["true_label"]),
                            target_label=target,
                            input_range=tuple(doc.get("input_range", (0.0, 1.0))),
                            c=None if c is None else np.array(c, dtype=np.float64))
    except (KeyError, TypeError, ValueError) as exc:
        raise NetworkFormatError(f"malformed property: {exc}") from exc


def property_to_dict(prop: PropertySpec):
    doc = {"center": np.asarray(prop.center).tolist(), "epsilon": prop.epsilon,
           "true_label": int(prop.true_label),
           "target_label": prop.target_label,
           "input_range": [np.asarray(v).tolist() for v in prop.input_range]}
    if prop.c is not None:
        doc["c"] = np.asarray(prop.c).tolist()
    return doc


def load_properties(path):
    """Properties from a JSON file (object or list) or a directory of JSON files.

    Returns ``[(property_id, PropertySpec), ...]``. An ``"id"`` key wins;
    otherwise ids come from the file stem plus an index when a file holds
    several properties.
    """
    path = Path(path)
    files = sorted(path.glob("*.json")) if path.is_dir() else [path]
    out = []
    for f in files:
        items = _read_props(f)
        for i, (pid, prop) in enumerate(items):
            if pid is None:
                pid = f.stem if len(items) == 1 else f"{f.stem}_{i}"
            out.append((str(pid), prop))
    return out


def _read_props(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise NetworkFormatError(f"{path}: {exc}") from exc
    if isinstance(doc, dict) and "properties" in doc:
        doc = doc["properties"]
    docs = doc if isinstance(doc, list) else [doc]
    for d in docs:
        if not isinstance(d, dict):
            raise NetworkFormatError(f"{path}: each property must be a JSON object")
    return [(d.get("id"), property_from_dict(d)) for d in docs]


def forward_tape(params, x):
    """Forward pass on the autodiff tape; ``params`` is ``[W_1, b_1, ..., W_n, b_n]``."""
    n = len(params) // 2
    h = ad.as_tensor(x)
    for k in range(n):
        h = ad.affine(params[2 * k], h, params[2 * k + 1])
        if k < n - 1:
            h = ad.relu(h)
    return h
