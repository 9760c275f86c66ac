"""Architecture parameters and Gumbel-based operation selection.

Per module, a vector of five selection logits is perturbed with Gumbel noise
and the winning operation is selected hard (argmax); training uses a
straight-through estimator whose backward pass follows the temperature-
controlled softmax relaxation. Per task and layer, fusion logits weight the
contributions of the task-specific and shared modules.

The searched result is an :class:`ArchitectureSpec`, serialized as canonical
JSON (sorted keys, 9-significant-digit floats) so identical specs always
produce identical bytes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .ops import ALL_KINDS, OperationKind
from .tensor import ShapeError, Tensor

N_OPERATIONS = len(ALL_KINDS)
SPEC_VERSION = 1


class ArchitectureError(ValueError):
    """Malformed or inconsistent architecture description."""


class OpSelector:
    """Selection logits over the operation set plus a softmax temperature."""

    def __init__(self, n_ops=N_OPERATIONS, temperature=1.0, dtype=np.float64):
        if temperature <= 0:
            raise ValueError(f"temperature must be positive, got {temperature}")
        self.logits = Tensor(np.zeros(n_ops, dtype=dtype), requires_grad=True)
        self.temperature = float(temperature)


def gumbel_from_uniform(eps):
    """The Gumbel transform g = -log(-log(eps)) for eps in (0, 1)."""
    eps = np.asarray(eps, dtype=np.float64)
    if np.any(eps <= 0) or np.any(eps >= 1):
        raise ValueError("uniform draws must lie strictly inside (0, 1)")
    return -np.log(-np.log(eps))


def sample_gumbel(count, rng):
    """i.i.d. standard Gumbel noise from a seeded stream."""
    if count < 1:
        raise ValueError("count must be >= 1")
    u = rng.random(count)
    u = np.clip(u, 1e-12, 1.0 - 1e-12)  # exclude the endpoints
    return gumbel_from_uniform(u)


def gumbel_softmax(selector, g):
    """Differentiable relaxation p_j ∝ exp((logit_j + g_j) / tau)."""
    if selector.temperature <= 0:
        raise ValueError(f"temperature must be positive, got {selector.temperature}")
    g = np.asarray(g, dtype=selector.logits.dtype)
    if g.shape != selector.logits.shape:
        raise ShapeError(f"gumbel_softmax: noise shape {g.shape} vs logits {selector.logits.shape}")
    perturbed = T.add(selector.logits, Tensor(g))
    return T.softmax(T.scalar_mul(perturbed, 1.0 / selector.temperature), axis=-1)


def hard_select(selector, g):
    """Gumbel-max selection: argmax of perturbed logits, ties to the lowest
    index. Returns (one-hot vector, chosen index)."""
    g = np.asarray(g, dtype=np.float64)
    scores = selector.logits.data + g
    index = int(np.argmax(scores))
    onehot = np.zeros_like(selector.logits.data)
    onehot[index] = 1.0
    return onehot, index


def straight_through_mix(probs, onehot, candidate_outputs):
    """Forward the hard-selected candidate bit-exactly; gradients w.r.t. the
    logits flow as if the output were sum_j p_j * candidate_j."""
    candidate_outputs = list(candidate_outputs)
    if len(candidate_outputs) != N_OPERATIONS:
        raise ShapeError(f"straight_through_mix: expected {N_OPERATIONS} candidates, got {len(candidate_outputs)}")
    index = int(np.argmax(onehot))
    return T.st_mix(probs, candidate_outputs, index)


def make_fusion_logits(fan_in, dtype=np.float64):
    """Fusion logits start at zero: every contributing module weighs equally."""
    if fan_in < 1:
        raise ValueError("fusion fan-in must be >= 1")
    return Tensor(np.zeros(fan_in, dtype=dtype), requires_grad=True)


def fuse_many(beta, outputs):
    """Convex combination of module outputs, weighted by softmax(beta)."""
    outputs = list(outputs)
    if beta.data.shape != (len(outputs),):
        raise ShapeError(f"fuse: {len(outputs)} outputs vs fusion shape {beta.data.shape}")
    base = outputs[0].shape
    for o in outputs[1:]:
        if o.shape != base:
            raise ShapeError(f"fuse: module output shapes differ, {base} vs {o.shape}")
    weights = T.softmax(beta, axis=-1)
    mixed = None
    for j, out in enumerate(outputs):
        w_j = T.reshape(T.slice_axis(weights, 0, j, j + 1), (1,) * out.ndim)
        term = T.mul(out, w_j)
        mixed = term if mixed is None else T.add(mixed, term)
    return mixed


def fuse(beta, specific_out, shared_out):
    """Two-module fusion of a task-specific and a shared output."""
    return fuse_many(beta, [specific_out, shared_out])


# ---------------------------------------------------------------------------
# searched-architecture description
# ---------------------------------------------------------------------------

def _round9(x):
    return float(f"{float(x):.9g}")


@dataclass
class LayerArch:
    modules: list  # [(role, OperationKind)]
    fusion: dict   # role "task:<i>" -> [weight, ...]


@dataclass
class ArchitectureSpec:
    """Self-contained description of one searched architecture."""

    n_layers: int
    hidden_dim: int
    n_tasks: int
    layers: list = field(default_factory=list)

    def __post_init__(self):
        if self.n_layers < 1:
            raise ArchitectureError("architecture needs at least one layer")
        if len(self.layers) != self.n_layers:
            raise ArchitectureError(f"{len(self.layers)} layer entries for n_layers={self.n_layers}")
        for li, layer in enumerate(self.layers):
            if not layer.modules:
                raise ArchitectureError(f"layer {li} has no modules")
            for role, op in layer.modules:
                if not isinstance(op, OperationKind):
                    raise ArchitectureError(f"layer {li}: invalid operation {op!r}")
                if role != "shared" and not self._valid_task_role(role):
                    raise ArchitectureError(f"layer {li}: invalid module role {role!r}")
            layer.fusion = {
                role: [_round9(w) for w in weights] for role, weights in layer.fusion.items()
            }
            for role, weights in layer.fusion.items():
                if not self._valid_task_role(role):
                    raise ArchitectureError(f"layer {li}: fusion role {role!r} invalid")
                if abs(sum(weights) - 1.0) > 1e-6:
                    raise ArchitectureError(f"layer {li}: fusion weights for {role} sum to {sum(weights)}")

    def _valid_task_role(self, role):
        if not role.startswith("task:"):
            return False
        try:
            idx = int(role.split(":", 1)[1])
        except ValueError:
            return False
        return 0 <= idx < self.n_tasks


def derive_architecture(model):
    """Freeze the searched model into a spec: per module the noise-free
    argmax operation (lowest index wins ties), per task the softmax of the
    trained fusion logits."""
    layers = []
    for layer in model.layers:
        modules = []
        fusion = {}
        for ti, mod in enumerate(layer.task_modules):
            modules.append((f"task:{ti}", OperationKind(int(np.argmax(mod.selector.logits.data)))))
        for mod in layer.shared_modules:
            modules.append(("shared", OperationKind(int(np.argmax(mod.selector.logits.data)))))
        for ti, beta in enumerate(layer.fusion_logits):
            w = np.exp(beta.data - beta.data.max())
            fusion[f"task:{ti}"] = list(w / w.sum())
        layers.append(LayerArch(modules=modules, fusion=fusion))
    cfg = model.config
    return ArchitectureSpec(n_layers=cfg.n_layers, hidden_dim=cfg.hidden_dim,
                            n_tasks=cfg.n_tasks, layers=layers)


def _emit(obj):
    if isinstance(obj, dict):
        items = ",".join(f"{json.dumps(k)}:{_emit(obj[k])}" for k in sorted(obj))
        return "{" + items + "}"
    if isinstance(obj, (list, tuple)):
        return "[" + ",".join(_emit(v) for v in obj) + "]"
    if isinstance(obj, bool):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, float):
        return f"{obj:.9g}"
    if isinstance(obj, str):
        return json.dumps(obj)
    raise TypeError(f"cannot serialize {type(obj)!r}")


def serialize_architecture(spec):
    """Canonical textual form: sorted keys, 9-significant-digit floats."""
    doc = {
        "version": SPEC_VERSION,
        "n_layers": spec.n_layers,
        "hidden_dim": spec.hidden_dim,
        "n_tasks": spec.n_tasks,
        "layers": [
            {
                "modules": [{"role": role, "op": op.name} for role, op in layer.modules],
                "fusion": {role: list(map(float, w)) for role, w in layer.fusion.items()},
            }
            for layer in spec.layers
        ],
    }
    return _emit(doc) + "\n"


def deserialize_architecture(text):
    """Parse and validate the canonical form; malformed input raises
    :class:`ArchitectureError` with position information."""
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as e:
        raise ArchitectureError(f"malformed architecture JSON at line {e.lineno} column {e.colno}: {e.msg}")
    if not isinstance(doc, dict):
        raise ArchitectureError("architecture document must be a JSON object")
    known = {"version", "n_layers", "hidden_dim", "n_tasks", "layers"}
    unknown = set(doc) - known
    if unknown:
        raise ArchitectureError(f"unknown keys in architecture document: {sorted(unknown)}")
    missing = known - set(doc)
    if missing:
        raise ArchitectureError(f"missing keys in architecture document: {sorted(missing)}")
    if doc["version"] != SPEC_VERSION:
        raise ArchitectureError(f"unsupported architecture version {doc['version']!r}")
    layers = []
    for li, entry in enumerate(doc["layers"]):
        modules = []
        for mi, mod in enumerate(entry.get("modules", [])):
            name = mod.get("op")
            if name not in OperationKind.__members__:
                raise ArchitectureError(f"layer {li} module {mi}: unknown operation name {name!r}")
            modules.append((mod.get("role"), OperationKind[name]))
        fusion = {role: [float(w) for w in ws] for role, ws in entry.get("fusion", {}).items()}
        layers.append(LayerArch(modules=modules, fusion=fusion))
    try:
        return ArchitectureSpec(n_layers=doc["n_layers"], hidden_dim=doc["hidden_dim"],
                                n_tasks=doc["n_tasks"], layers=layers)
    except TypeError as e:
        raise ArchitectureError(str(e))


def anneal_temperature(epoch, total_epochs, tau_start=5.0, tau_end=0.5):
    """Exponential schedule hitting tau_start at the first epoch and tau_end
    at the last one."""
    if total_epochs <= 1:
        return tau_end
    frac = epoch / (total_epochs - 1)
    return tau_start * (tau_end / tau_start) ** frac
