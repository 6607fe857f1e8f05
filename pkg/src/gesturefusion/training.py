"""Optimizers, training recipes and the leave-one-subject-out driver."""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch

from .dataset_io import DatasetIndex, Fold, load_sequence, n_classes, split_loso
from .models import (
    NetworkSpec,
    Parameters,
    ShapeError,
    build_network,
    check_parameters,
    clone_parameters,
    init_layer,
    init_parameters,
    logits,
    parameter_shapes,
    predict,
    transfer_conv_weights,
)
from .preprocess import DEFAULT_IMAGE_SIZE, DEFAULT_TIMESTEP, Clip, build_clip

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


class LeakageError(TrainingError):
    pass


# ---------------------------------------------------------------- optimizers


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str
    lr: float
    rho: float = 0.95
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def adadelta(cls, lr=1.0, rho=0.95, epsilon=1e-8) -> "OptimizerConfig":
        return cls("adadelta", lr=lr, rho=rho, epsilon=epsilon)

    @classmethod
    def adam(cls, lr=0.001, beta1=0.9, beta2=0.999, epsilon=1e-8) -> "OptimizerConfig":
        return cls("adam", lr=lr, beta1=beta1, beta2=beta2, epsilon=epsilon)

    def describe(self) -> dict:
        if self.kind == "adadelta":
            return {"kind": "adadelta", "lr": self.lr, "rho": self.rho, "epsilon": self.epsilon}
        return {"kind": "adam", "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "epsilon": self.epsilon}


def init_optimizer_state(config: OptimizerConfig, params: Mapping[str, torch.Tensor]) -> dict:
    zeros = lambda: {k: torch.zeros_like(v) for k, v in params.items()}  # noqa: E731
    if config.kind == "adadelta":
        return {"step": 0, "square_avg": zeros(), "acc_delta": zeros()}
    if config.kind == "adam":
        return {"step": 0, "exp_avg": zeros(), "exp_avg_sq": zeros()}
    raise ValueError(f"unknown optimizer {config.kind!r}")


def _check_grads(params, grads) -> None:
    for k, g in grads.items():
        if k not in params:
            raise KeyError(f"gradient for unknown parameter {k}")
        if g.shape != params[k].shape:
            raise ShapeError(f"gradient {k}: shape {tuple(g.shape)} != parameter {tuple(params[k].shape)}")
        if not torch.isfinite(g).all():
            raise TrainingError(f"non-finite gradient for {k}")


def adadelta_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: dict,
                  config: OptimizerConfig = OptimizerConfig.adadelta()) -> tuple[Parameters, dict]:
    """One Adadelta update: RMS of past updates over RMS of gradients, times ``lr``."""
    _check_grads(params, grads)
    rho, eps = config.rho, config.epsilon
    new_params, sq_avg, acc_delta = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        sq = rho * state["square_avg"][k] + (1 - rho) * g * g
        delta = torch.sqrt(state["acc_delta"][k] + eps) / torch.sqrt(sq + eps) * g
        acc_delta[k] = rho * state["acc_delta"][k] + (1 - rho) * delta * delta
        sq_avg[k] = sq
        new_params[k] = p - config.lr * delta
    return new_params, {"step": state["step"] + 1, "square_avg": sq_avg, "acc_delta": acc_delta}


def adam_step(params: Mapping[str, torch.Tensor], grads: Mapping[str, torch.Tensor], state: dict,
              config: OptimizerConfig = OptimizerConfig.adam()) -> tuple[Parameters, dict]:
    """One bias-corrected Adam update."""
    _check_grads(params, grads)
    t = state["step"] + 1
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1 - b1**t, 1 - b2**t
    new_params, m_new, v_new = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        m = b1 * state["exp_avg"][k] + (1 - b1) * g
        v = b2 * state["exp_avg_sq"][k] + (1 - b2) * g * g
        m_new[k], v_new[k] = m, v
        new_params[k] = p - config.lr * (m / c1) / (torch.sqrt(v / c2) + config.epsilon)
    return new_params, {"step": t, "exp_avg": m_new, "exp_avg_sq": v_new}


def optimizer_step(params, grads, state, config: OptimizerConfig):
    if config.kind == "adadelta":
        return adadelta_step(params, grads, state, config)
    return adam_step(params, grads, state, config)


# ---------------------------------------------------------------- plans


@dataclass(frozen=True)
class TrainPlan:
    network: str
    epochs: int
    batch_size: int
    timestep: int
    optimizer: OptimizerConfig
    init: str = "random"  # random | transfer | warm

    def describe(self) -> dict:
        return {
            "network": self.network,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "timestep": self.timestep,
            "optimizer": self.optimizer.describe(),
            "init": self.init,
        }


PRESET_PLANS: dict[str, TrainPlan] = {
    "depth_cnn": TrainPlan("depth_cnn", 20, 32, DEFAULT_TIMESTEP, OptimizerConfig.adadelta(), "random"),
    "depth_cnn_lstm": TrainPlan("depth_cnn_lstm", 100, 16, DEFAULT_TIMESTEP, OptimizerConfig.adadelta(), "transfer"),
    "skeleton_lstm": TrainPlan("skeleton_lstm", 100, 32, DEFAULT_TIMESTEP, OptimizerConfig.adam(), "random"),
    "fl_concat": TrainPlan("fl_concat", 100, 16, DEFAULT_TIMESTEP, OptimizerConfig.adadelta(), "warm"),
}

_PLAN_KEYS = {"epochs": int, "batch_size": int, "init": str, "lr": float, "rho": float,
              "beta1": float, "beta2": float, "epsilon": float}


def preset_plans(scale: float = 1.0, timestep: int = DEFAULT_TIMESTEP,
                 overrides: Mapping[str, Mapping[str, object]] | None = None) -> dict[str, TrainPlan]:
    """The four reference recipes, with epochs shrunk by ``scale`` and optional per-network overrides.

    ``overrides`` maps network -> {key: value} with keys epochs, batch_size,
    init, lr, rho, beta1, beta2, epsilon. Overridden epochs are not scaled.
    """
    if not 0 < scale <= 1:
        raise ValueError(f"scale must be in (0, 1], got {scale}")
    plans = {}
    for name, plan in PRESET_PLANS.items():
        plan = dataclasses.replace(plan, timestep=timestep, epochs=max(1, int(round(plan.epochs * scale))))
        for key, value in (overrides or {}).get(name, {}).items():
            if key not in _PLAN_KEYS:
                raise ValueError(f"unknown plan override {name}.{key}")
            value = _PLAN_KEYS[key](value)
            if key in ("epochs", "batch_size", "init"):
                plan = dataclasses.replace(plan, **{key: value})
            else:
                plan = dataclasses.replace(plan, optimizer=dataclasses.replace(plan.optimizer, **{key: value}))
        plans[name] = plan
    unknown = set(overrides or {}) - set(plans)
    if unknown:
        raise ValueError(f"overrides for unknown networks: {sorted(unknown)}")
    return plans


# ---------------------------------------------------------------- data


@dataclass
class ClipSet:
    """Stacked clips: depth (N, T, S, S, 1), skeleton (N, T, 44), mask (N, T)."""

    depth: np.ndarray | None
    skeleton: np.ndarray | None
    mask: np.ndarray
    labels: np.ndarray  # 1-based class index for class_mode
    subjects: np.ndarray
    sequence_ids: list[str]
    class_mode: str = "c14"

    @classmethod
    def from_clips(cls, clips: Sequence[Clip], class_mode: str) -> "ClipSet":
        if not clips:
            raise TrainingError("no clips")
        depth = np.stack([c.depth for c in clips]) if clips[0].depth is not None else None
        skel = np.stack([c.skeleton for c in clips]) if clips[0].skeleton is not None else None
        return cls(
            depth,
            skel,
            np.stack([c.mask for c in clips]),
            np.array([c.label.index(class_mode) for c in clips]),
            np.array([c.subject_id for c in clips]),
            [c.sequence_id for c in clips],
            class_mode,
        )

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def timestep(self) -> int:
        return self.mask.shape[1]

    @property
    def n_classes(self) -> int:
        return n_classes(self.class_mode)

    def subset(self, idx) -> "ClipSet":
        idx = np.asarray(idx)
        return ClipSet(
            None if self.depth is None else self.depth[idx],
            None if self.skeleton is None else self.skeleton[idx],
            self.mask[idx],
            self.labels[idx],
            self.subjects[idx],
            [self.sequence_ids[i] for i in idx],
            self.class_mode,
        )

    def for_subjects(self, subjects) -> "ClipSet":
        return self.subset(np.flatnonzero(np.isin(self.subjects, list(subjects))))

    def batch(self, idx, spec: NetworkSpec) -> dict:
        names = {n for n, _ in spec.inputs}
        out = {"mask": torch.from_numpy(self.mask[idx])}
        if "depth" in names:
            if self.depth is None:
                raise TrainingError(f"{spec.name} needs depth clips")
            out["depth"] = torch.from_numpy(self.depth[idx])
        if "skeleton" in names:
            if self.skeleton is None:
                raise TrainingError(f"{spec.name} needs skeleton clips")
            out["skeleton"] = torch.from_numpy(self.skeleton[idx])
        return out


def clips_from_index(index: DatasetIndex, timestep: int = DEFAULT_TIMESTEP, image_size: int = DEFAULT_IMAGE_SIZE,
                     modalities=("depth", "skeleton"), entries=None) -> ClipSet:
    entries = index.records if entries is None else entries
    clips = [build_clip(load_sequence(e), timestep, image_size, modalities) for e in entries]
    return ClipSet.from_clips(clips, index.class_mode)


class _SequenceView:
    def __init__(self, data: ClipSet, spec: NetworkSpec):
        self.data, self.spec = data, spec
        self.labels, self.subjects = data.labels, data.subjects

    def __len__(self):
        return len(self.data)

    def batch(self, idx):
        return self.data.batch(idx, self.spec)


class _FrameView:
    """Every valid frame of every clip, labelled with its sequence's class."""

    def __init__(self, data: ClipSet):
        if data.depth is None:
            raise TrainingError("depth CNN needs depth clips")
        self.data = data
        self.clip_idx, self.t_idx = np.nonzero(data.mask)
        self.labels = data.labels[self.clip_idx]
        self.subjects = data.subjects[self.clip_idx]

    def __len__(self):
        return len(self.clip_idx)

    def batch(self, idx):
        return {"depth": torch.from_numpy(self.data.depth[self.clip_idx[idx], self.t_idx[idx]])}


def _view(spec: NetworkSpec, data: ClipSet):
    return _FrameView(data) if spec.name == "depth_cnn" else _SequenceView(data, spec)


# ---------------------------------------------------------------- training


@dataclass
class TrainLog:
    epochs: int
    steps_per_epoch: int
    losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)
    optimizer_state: dict = field(default_factory=dict)


@dataclass
class FoldResult:
    network: str
    fold: int
    class_mode: str
    sequence_ids: list[str]
    subjects: np.ndarray
    true: np.ndarray
    scores: np.ndarray
    fingerprint: str = ""
    losses: list[float] = field(default_factory=list)
    train_accuracy: list[float] = field(default_factory=list)

    @property
    def predicted(self) -> np.ndarray:
        return predict(self.scores)

    @property
    def accuracy(self) -> float:
        return float(np.mean(self.predicted == self.true))


def cross_entropy(logit: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean negative log softmax probability of the true (0-based) class."""
    return -torch.log_softmax(logit, dim=-1).gather(1, labels[:, None]).mean()


def _assert_no_leak(subjects: np.ndarray, held_out) -> None:
    if held_out is not None and np.isin(subjects, np.atleast_1d(held_out)).any():
        raise LeakageError(f"held-out subject {held_out} reached a gradient step")


def train_network(spec: NetworkSpec, data: ClipSet, plan: TrainPlan, seed: int = 0,
                  init_params: Mapping[str, torch.Tensor] | None = None, held_out=None,
                  track_train_accuracy: bool = True) -> tuple[Parameters, TrainLog]:
    """Minimise cross-entropy with the plan's optimizer; deterministic given ``seed``."""
    view = _view(spec, data)
    n = len(view)
    if n == 0:
        raise TrainingError(f"empty training set for {spec.name}")
    _assert_no_leak(view.subjects, held_out)
    params = clone_parameters(init_params) if init_params is not None else init_parameters(spec, seed)
    check_parameters(spec, params)
    state = init_optimizer_state(plan.optimizer, params)
    rng = np.random.default_rng([seed, 1])
    labels = torch.from_numpy(view.labels - 1).long()
    steps = math.ceil(n / plan.batch_size)
    trace = TrainLog(plan.epochs, steps)
    for epoch in range(plan.epochs):
        order = rng.permutation(n)
        total = 0.0
        for step in range(steps):
            idx = order[step * plan.batch_size : (step + 1) * plan.batch_size]
            _assert_no_leak(view.subjects[idx], held_out)
            leaves = {k: v.detach().requires_grad_(True) for k, v in params.items()}
            loss = cross_entropy(logits(spec, leaves, view.batch(idx)), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"{spec.name}: loss diverged at epoch {epoch + 1}, step {step + 1}")
            grads = torch.autograd.grad(loss, list(leaves.values()))
            params, state = optimizer_step(
                {k: v.detach() for k, v in leaves.items()}, dict(zip(leaves, grads)), state, plan.optimizer
            )
            total += float(loss.detach()) * len(idx)
        trace.losses.append(total / n)
        if track_train_accuracy:
            trace.train_accuracy.append(evaluate_accuracy(spec, params, data))
        log.debug("%s epoch %d loss %.4f", spec.name, epoch + 1, trace.losses[-1])
    trace.optimizer_state = state
    return params, trace


def pretrain_depth_cnn(data: ClipSet, plan: TrainPlan, spec: NetworkSpec, seed: int = 0,
                       held_out=None) -> tuple[Parameters, TrainLog]:
    """Train the per-frame CNN on every valid frame; its conv layers seed the CNN+LSTM."""
    if spec.name != "depth_cnn":
        raise ValueError(f"pretraining needs a depth_cnn spec, got {spec.name}")
    return train_network(spec, data, plan, seed, held_out=held_out, track_train_accuracy=False)


def predict_scores(spec: NetworkSpec, params: Mapping[str, torch.Tensor], data: ClipSet,
                   batch_size: int = 64) -> np.ndarray:
    """Softmax scores per clip. The per-frame CNN averages its frame scores over valid frames."""
    view = _view(spec, data)
    chunks = []
    with torch.no_grad():
        for start in range(0, len(view), batch_size):
            idx = np.arange(start, min(start + batch_size, len(view)))
            chunks.append(torch.softmax(logits(spec, params, view.batch(idx)), dim=-1).double().numpy())
    scores = np.concatenate(chunks)
    if spec.name == "depth_cnn":
        counts = data.mask.sum(axis=1)
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        scores = np.add.reduceat(scores, starts, axis=0) / counts[:, None]
    return scores


def evaluate_accuracy(spec, params, data: ClipSet) -> float:
    return float(np.mean(predict(predict_scores(spec, params, data)) == data.labels))


def warm_start_28(params_14: Mapping[str, torch.Tensor], spec_28: NetworkSpec, seed: int = 0) -> Parameters:
    """Reuse every layer of a 14-class network except the classifier, which is re-initialised at width 28."""
    final = spec_28.final_layer
    expected = parameter_shapes(spec_28)
    out = {}
    for key, shape in expected.items():
        if key.startswith(final.name + "."):
            continue
        if key not in params_14 or tuple(params_14[key].shape) != shape:
            got = None if key not in params_14 else tuple(params_14[key].shape)
            raise ShapeError(f"warm start: {key} expected {shape}, source has {got}")
        out[key] = params_14[key].detach().clone()
    dtype = next(iter(params_14.values())).dtype
    for key, value in init_layer(final, np.random.default_rng([seed, 28])).items():
        out[f"{final.name}.{key}"] = torch.as_tensor(value, dtype=dtype)
    return out


def warm_start_fl_concat(spec: NetworkSpec, depth_params: Mapping[str, torch.Tensor] | None,
                         skeleton_params: Mapping[str, torch.Tensor] | None, seed: int = 0) -> Parameters:
    """Fresh fusion parameters whose branches are copied from trained single-modality networks."""
    params = init_parameters(spec, seed)
    for prefix, source in (("depth/", depth_params), ("skeleton/", skeleton_params)):
        if source is None:
            continue
        for key in params:
            if key.startswith(prefix):
                src = source[key[len(prefix):]]
                if src.shape != params[key].shape:
                    raise ShapeError(f"{key}: branch shape {tuple(src.shape)} != {tuple(params[key].shape)}")
                params[key] = src.detach().clone()
    return params


# ---------------------------------------------------------------- LOSO


DEPENDENCIES = {
    "depth_cnn": (),
    "skeleton_lstm": (),
    "depth_cnn_lstm": ("depth_cnn",),
    "fl_concat": ("depth_cnn_lstm", "skeleton_lstm"),
}
TRAIN_ORDER = ("depth_cnn", "skeleton_lstm", "depth_cnn_lstm", "fl_concat")


def required_networks(networks: Iterable[str], plans: Mapping[str, TrainPlan]) -> list[str]:
    needed = set()

    def visit(name):
        if name in needed:
            return
        if name not in DEPENDENCIES:
            raise ValueError(f"unknown network {name!r}")
        needed.add(name)
        init = plans[name].init if name in plans else PRESET_PLANS[name].init
        if init in ("transfer", "warm"):
            for dep in DEPENDENCIES[name]:
                visit(dep)

    for n in networks:
        visit(n)
    return [n for n in TRAIN_ORDER if n in needed]


@dataclass
class FoldOutput:
    spec: NetworkSpec
    params: Parameters
    result: FoldResult
    log: TrainLog


def run_fold(data: ClipSet, fold: Fold, networks: Iterable[str], plans: Mapping[str, TrainPlan], seed: int = 0,
             scale: float = 1.0, image_size: int | None = None) -> dict[str, FoldOutput]:
    """Train every needed network on the fold's training subjects and score the held-out subject."""
    train = data.for_subjects(fold.train_subjects)
    test = data.for_subjects([fold.test_subject])
    if set(train.subjects) & set(test.subjects) or len(train) + len(test) != len(data):
        raise TrainingError(f"fold {fold.test_subject}: split is not a partition")
    if len(test) == 0:
        raise TrainingError(f"fold {fold.test_subject}: no test sequences")
    if image_size is None:
        image_size = data.depth.shape[2] if data.depth is not None else DEFAULT_IMAGE_SIZE
    c = data.n_classes
    outputs: dict[str, FoldOutput] = {}
    for name in required_networks(networks, plans):
        plan = plans[name]
        if plan.timestep != data.timestep:
            raise TrainingError(f"{name}: plan timestep {plan.timestep} != clip timestep {data.timestep}")
        spec = build_network(name, c, data.timestep, scale, image_size)
        net_seed = int(np.random.default_rng([seed, fold.test_subject, TRAIN_ORDER.index(name)]).integers(2**31))
        init = None
        if name == "depth_cnn_lstm" and plan.init == "transfer":
            init = transfer_conv_weights(outputs["depth_cnn"].params, init_parameters(spec, net_seed))
        elif name == "fl_concat" and plan.init == "warm":
            init = warm_start_fl_concat(spec, outputs["depth_cnn_lstm"].params,
                                        outputs["skeleton_lstm"].params, net_seed)
        log.info("fold %d: training %s (%d epochs, batch %d)", fold.test_subject, name, plan.epochs, plan.batch_size)
        params, trace = train_network(spec, train, plan, net_seed, init, held_out=fold.test_subject)
        scores = predict_scores(spec, params, test)
        result = FoldResult(name, fold.test_subject, data.class_mode, list(test.sequence_ids), test.subjects.copy(),
                            test.labels.copy(), scores, spec.fingerprint(), trace.losses, trace.train_accuracy)
        outputs[name] = FoldOutput(spec, params, result, trace)
    return outputs


def run_loso(data, networks: Iterable[str], plans: Mapping[str, TrainPlan] | None = None, seed: int = 0,
             scale: float = 1.0, timestep: int = DEFAULT_TIMESTEP, image_size: int = DEFAULT_IMAGE_SIZE,
             on_fold: Callable[[Fold, dict[str, FoldOutput]], None] | None = None) -> dict[str, list[FoldResult]]:
    """Leave-one-subject-out over ``data`` (a DatasetIndex or ClipSet)."""
    networks = list(networks)
    plans = dict(plans or preset_plans(scale, timestep))
    if isinstance(data, DatasetIndex):
        modalities = _modalities(required_networks(networks, plans))
        data = clips_from_index(data, timestep, image_size, modalities)
    results: dict[str, list[FoldResult]] = {}
    for fold in split_loso(np.unique(data.subjects)):
        try:
            outputs = run_fold(data, fold, networks, plans, seed, scale)
        except Exception as exc:
            raise TrainingError(f"fold {fold.test_subject} failed: {exc}") from exc
        for name, out in outputs.items():
            results.setdefault(name, []).append(out.result)
        if on_fold is not None:
            on_fold(fold, outputs)
    return results


def _modalities(networks: Iterable[str]) -> tuple[str, ...]:
    mods = set()
    for n in networks:
        if n in ("depth_cnn", "depth_cnn_lstm", "fl_concat"):
            mods.add("depth")
        if n in ("skeleton_lstm", "fl_concat"):
            mods.add("skeleton")
    return tuple(sorted(mods))


modalities_for = _modalities


# ---------------------------------------------------------------- prediction files

PREDICTION_MAGIC = "# gesturefusion predictions v1"


def write_predictions(path, result: FoldResult) -> Path:
    """CSV with a commented header: sequence id, subject, true and predicted class, C scores."""
    path = Path(path)
    c = result.scores.shape[1]
    lines = [
        PREDICTION_MAGIC,
        f"# network={result.network}",
        f"# fingerprint={result.fingerprint}",
        f"# class_mode={result.class_mode}",
        f"# fold={result.fold}",
        ",".join(["sequence_id", "subject", "true_class", "predicted_class"] + [f"score_{i}" for i in range(1, c + 1)]),
    ]
    pred = result.predicted
    for i, sid in enumerate(result.sequence_ids):
        row = [sid, str(int(result.subjects[i])), str(int(result.true[i])), str(int(pred[i]))]
        row += [repr(float(s)) for s in result.scores[i]]
        lines.append(",".join(row))
    path.write_text("\n".join(lines) + "\n")
    return path


def read_predictions(path) -> FoldResult:
    path = Path(path)
    meta, rows = {}, []
    with path.open() as fh:
        first = fh.readline().rstrip("\n")
        if first != PREDICTION_MAGIC:
            raise ValueError(f"{path}: not a prediction file")
        for line in fh:
            line = line.rstrip("\n")
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key] = value
            elif line and not line.startswith("sequence_id"):
                rows.append(line.split(","))
    for key in ("network", "class_mode", "fold"):
        if key not in meta:
            raise ValueError(f"{path}: header lacks {key}")
    c = n_classes(meta["class_mode"])
    if any(len(r) != 4 + c for r in rows):
        raise ValueError(f"{path}: expected {4 + c} columns per row")
    scores = np.array([[float(x) for x in r[4:]] for r in rows]).reshape(-1, c)
    result = FoldResult(
        meta["network"],
        int(meta["fold"]),
        meta["class_mode"],
        [r[0] for r in rows],
        np.array([int(r[1]) for r in rows]),
        np.array([int(r[2]) for r in rows]),
        scores,
        meta.get("fingerprint", ""),
    )
    stored = np.array([int(r[3]) for r in rows])
    if len(rows) and not np.array_equal(stored, result.predicted):
        raise ValueError(f"{path}: predicted_class column disagrees with scores")
    return result
