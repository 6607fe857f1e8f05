"""Central finite-difference checks for each layer kind in reduced form."""

import numpy as np
import torch

from gesturefusion.models import NetworkSpec, chain, concat_layer, init_parameters, logits
from gesturefusion.training import cross_entropy

H = 1e-6
LAYER_KINDS = ("conv3x3", "maxpool2x2", "flatten", "project_fc", "fc", "lstm", "last_step", "concat", "softmax")


def reduced_spec(kind: str) -> NetworkSpec:
    if kind == "concat":
        a = chain("depth", (3,), [("fc", "fa", 2, "none")], "depth/")
        b = chain("skeleton", (4,), [("fc", "fb", 3, "none")], "skeleton/")
        cat = concat_layer([a, b])
        head = chain("head", cat.out_shape, [("fc", "out", 2, "none")])
        return NetworkSpec("g", (("depth", (3,)), ("skeleton", (4,))), tuple(a + b + [cat] + head), 2, 1)
    table = {
        "conv3x3": ((5, 5, 2), [("conv3x3", "c", 3, "relu")]),
        "maxpool2x2": ((5, 5, 2), [("maxpool2x2", "p", 0, "none")]),
        "flatten": ((2, 3, 2), [("flatten", "f", 0, "none")]),
        "project_fc": ((3, 6), [("project_fc", "proj", 4, "relu")]),
        "fc": ((6,), [("fc", "fc1", 5, "relu"), ("fc", "fc2", 4, "none")]),
        "lstm": ((4, 3), [("lstm", "l", 2, "none")]),
        "last_step": ((5, 3), [("last_step", "last", 0, "none")]),
        "softmax": ((5,), [("fc", "fc", 4, "none"), ("softmax", "softmax", 0, "softmax")]),
    }
    shape, items = table[kind]
    stream = "depth" if len(shape) == 3 else "skeleton"
    return NetworkSpec("g", ((stream, shape),), tuple(chain(stream, shape, items)), 4, shape[0])


def _draw(spec: NetworkSpec, rng: np.random.Generator, batch_size: int = 2):
    params = {k: torch.as_tensor(rng.normal(0, 0.7, tuple(v.shape)))
              for k, v in init_parameters(spec, 0, torch.float64).items()}
    batch = {name: torch.as_tensor(rng.normal(0, 1, (batch_size,) + tuple(shape))) for name, shape in spec.inputs}
    t = spec.inputs[0][1][0]
    lengths = rng.integers(1, t + 1, batch_size)
    batch["mask"] = torch.as_tensor(np.arange(t)[None, :] < lengths[:, None])
    with torch.no_grad():
        out_shape = tuple(logits(spec, params, batch).shape)
    weights = torch.as_tensor(rng.normal(0, 1, out_shape))
    labels = torch.as_tensor(rng.integers(0, out_shape[-1], batch_size))
    return params, batch, weights, labels


def _loss(spec, params, batch, weights, labels):
    out = logits(spec, params, batch)
    if spec.layers[-1].kind == "softmax":
        return cross_entropy(out, labels)
    return (out * weights).sum()


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Elementwise |a - n| / max(|a|, |n|), with both-zero entries counted as exact."""
    a, n = np.ravel(analytic), np.ravel(numeric)
    scale = np.maximum(np.abs(a), np.abs(n))
    diff = np.abs(a - n)
    err = np.where(scale > 1e-7, diff / np.maximum(scale, 1e-300), diff / 1e-7)
    return float(err.max()) if err.size else 0.0


def check_once(spec: NetworkSpec, rng: np.random.Generator, only: str | None = None) -> float:
    """Max relative error between autograd and central differences for one random draw."""
    params, batch, weights, labels = _draw(spec, rng)
    if only == "zero_skeleton":
        batch["skeleton"] = torch.zeros_like(batch["skeleton"])
    leaves = {f"p:{k}": v.clone().requires_grad_(True) for k, v in params.items()}
    for name, _ in spec.inputs:
        leaves[f"x:{name}"] = batch[name].clone().requires_grad_(True)

    def evaluate(values):
        p = {k[2:]: v for k, v in values.items() if k.startswith("p:")}
        b = dict(batch, **{k[2:]: v for k, v in values.items() if k.startswith("x:")})
        return _loss(spec, p, b, weights, labels)

    loss = evaluate(leaves)
    keys = [k for k in leaves if only is None or only == "zero_skeleton" and k.startswith("p:depth/")]
    grads = torch.autograd.grad(loss, [leaves[k] for k in keys], allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        base = {k: v.detach().clone() for k, v in leaves.items()}
        for key, grad in zip(keys, grads):
            numeric = np.zeros(tuple(base[key].shape))
            flat = base[key].view(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + H
                up = evaluate(base).item()
                flat[i] = orig - H
                down = evaluate(base).item()
                flat[i] = orig
                numeric.reshape(-1)[i] = (up - down) / (2 * H)
            analytic = np.zeros_like(numeric) if grad is None else grad.numpy()
            worst = max(worst, relative_error(analytic, numeric))
    return worst


def max_error(kind: str, draws: int = 100, seed: int = 0) -> float:
    spec = reduced_spec(kind)
    rng = np.random.default_rng([seed, LAYER_KINDS.index(kind)])
    return max(check_once(spec, rng) for _ in range(draws))
