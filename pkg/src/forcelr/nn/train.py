"""Seeded minibatch SGD with optional Force Regularization on convolution layers."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from ..filters import group_matrices
from ..force import (DegenerateFilterError, ForceConfig, ForceKind, apply_update, force_gradient,
                     mean_pairwise_cosine, reference_regularizer)
from ..lowrank import Method, factorize, layer_rank, pca_spectrum, select_rank, split_layer
from ..rng import make_rng
from .net import Conv2D, DivergenceError, MicroNet

log = logging.getLogger(__name__)


@dataclass
class Schedule:
    kind: str = "constant"
    step_size: int = 0
    gamma: float = 0.1

    def lr(self, base: float, step: int) -> float:
        if self.kind == "constant":
            return base
        if self.kind == "step":
            return base * self.gamma ** (step // self.step_size)
        raise ValueError(f"unknown schedule {self.kind!r}")

    def __post_init__(self):
        if self.kind not in ("constant", "step"):
            raise ValueError(f"unknown schedule {self.kind!r}")
        if self.kind == "step" and self.step_size < 1:
            raise ValueError("step schedule needs step_size >= 1")


@dataclass
class TrainConfig:
    eta: float = 0.05
    schedule: Schedule = field(default_factory=Schedule)
    weight_decay: float = 1e-4
    # conv layer name -> force settings; "*" applies to every conv layer
    force: dict = field(default_factory=dict)
    batch_size: int = 32
    max_steps: int = 500
    eval_every: int = 100
    seed: int = 0
    tau: float = 0.05
    # False drops the data-loss gradient (force-only dynamics)
    data_loss: bool = True

    def __post_init__(self):
        if self.eta <= 0:
            raise ValueError("eta must be positive")
        if self.batch_size < 1 or self.max_steps < 0 or self.eval_every < 1:
            raise ValueError("batch_size and eval_every must be >= 1, max_steps >= 0")
        if isinstance(self.schedule, dict):
            self.schedule = Schedule(**self.schedule)
        self.force = {k: v if isinstance(v, ForceConfig) else ForceConfig.from_dict(v)
                      for k, v in (self.force or {}).items()}

    def force_for(self, layer: str) -> ForceConfig | None:
        return self.force.get(layer, self.force.get("*"))

    def to_dict(self) -> dict:
        return {"eta": self.eta, "schedule": vars(self.schedule).copy(),
                "weight_decay": self.weight_decay,
                "force": {k: v.to_dict() for k, v in sorted(self.force.items())},
                "batch_size": self.batch_size, "max_steps": self.max_steps,
                "eval_every": self.eval_every, "seed": self.seed, "tau": self.tau,
                "data_loss": self.data_loss}

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**d)


@dataclass
class TrainResult:
    net: MicroNet
    log: list


def _layer_metrics(net: MicroNet, cfg: TrainConfig) -> dict:
    ranks, regs, cos = {}, {}, {}
    for layer in net.conv_layers():
        bank = layer.bank
        mats = group_matrices(bank)
        if bank.filter_size < 2:
            # 1x1 combination over a single basis map: rank is trivially 1
            r = [1] * len(mats)
        else:
            r = [layer_rank(m, cfg.tau) for m in mats]
        ranks[layer.name] = r[0] if len(r) == 1 else r
        fc = cfg.force_for(layer.name)
        kind = fc.kind if fc is not None else ForceKind.L2
        try:
            regs[layer.name] = sum(reference_regularizer(m, kind) for m in mats)
        except DegenerateFilterError:
            regs[layer.name] = None
        cos[layer.name] = mean_pairwise_cosine(mats[0]) if len(mats) == 1 else \
            [mean_pairwise_cosine(m) for m in mats]
    return {"ranks": ranks, "regularizer": regs, "cosine": cos}


def _record(net, data, cfg, step, lr, train_loss):
    val_loss, val_acc = net.evaluate(data.x_val, data.y_val)
    rec = {"step": step, "lr": lr, "train_loss": train_loss, "val_loss": val_loss,
           "val_acc": val_acc}
    rec.update(_layer_metrics(net, cfg))
    return rec


def sgd_step(net: MicroNet, grads: dict, cfg: TrainConfig, lr: float):
    for layer in net.layers:
        params = layer.params()
        if not params:
            continue
        fc = cfg.force_for(layer.name) if layer.kind == "conv" else None
        for pname, value in params.items():
            key = f"{layer.name}.{pname}"
            w = value.astype(np.float64)
            g = grads.get(key)
            g = np.zeros_like(w) if g is None or not cfg.data_loss else g
            if pname == "weight" and cfg.weight_decay:
                g = g + cfg.weight_decay * w
            if pname == "weight" and fc is not None:
                w2 = w.reshape(w.shape[0], -1)
                fg = force_gradient(w2, fc)
                new = apply_update(w2, g.reshape(w2.shape), fg, lr, fc.lambda_s).reshape(w.shape)
            else:
                new = w - lr * g
            with np.errstate(over="ignore"):
                # overflow shows up as inf and is caught by check_finite
                setattr(layer, pname, new.astype(np.float32))


def train(net: MicroNet, data, cfg: TrainConfig, start_step: int = 0) -> TrainResult:
    """Train ``net`` in place and return it with one metrics record per evaluation."""
    if len(data.y_train) == 0:
        raise ValueError("empty training set")
    for layer in net.conv_layers():
        if layer.groups != 1 and cfg.force_for(layer.name) is not None:
            raise ValueError(f"{layer.name}: training with grouped convolution is not supported")
        if layer.groups != 1:
            raise ValueError(f"{layer.name}: the trainer supports groups=1 only")
    n = len(data.y_train)
    bs = min(cfg.batch_size, n)
    per_epoch = max(n // bs, 1)
    records = [_record(net, data, cfg, start_step, cfg.schedule.lr(cfg.eta, 0), None)]
    running, count = 0.0, 0
    order = None
    for step in range(cfg.max_steps):
        epoch, pos = divmod(step, per_epoch)
        if pos == 0:
            order = make_rng(cfg.seed, "shuffle", epoch).permutation(n)
        idx = order[pos * bs:(pos + 1) * bs]
        lr = cfg.schedule.lr(cfg.eta, step)
        loss, grads = net.loss_and_grads(data.x_train[idx], data.y_train[idx])
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss} at step {start_step + step}")
        sgd_step(net, grads, cfg, lr)
        net.check_finite()
        running += loss
        count += 1
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.max_steps:
            rec = _record(net, data, cfg, start_step + done, lr, running / count)
            records.append(rec)
            log.debug("step %d loss %.4f val_acc %.2f ranks %s", rec["step"], rec["train_loss"],
                      rec["val_acc"], rec["ranks"])
            running, count = 0.0, 0
    return TrainResult(net, records)


@dataclass
class DecompositionInfo:
    method: str
    tau: float | None
    ranks: dict
    layers: dict = field(default_factory=dict)


def decompose_net(net: MicroNet, method=Method.PCA, tau: float | None = 0.05,
                  ranks: dict | None = None, seed: int = 0):
    """Replace every (not yet split) conv layer by a basis conv and a 1x1 combination conv.

    Explicit ``ranks`` take precedence over ``tau``.  Grouped layers use the
    largest per-group rank for every group.
    """
    method = Method(method)
    ranks = dict(ranks or {})
    new_layers = []
    chosen = {}
    for layer in net.layers:
        if layer.kind != "conv" or layer.role:
            new_layers.append(layer)
            continue
        bank = layer.bank
        mats = group_matrices(bank)
        if layer.name in ranks:
            m = int(ranks[layer.name])
        elif tau is not None:
            m = max(select_rank(pca_spectrum(mat)[0], tau) for mat in mats)
        else:
            raise ValueError(f"no rank given for {layer.name} and no tau")
        facts = [factorize(mat, m, method, seed) for mat in mats]
        split = split_layer(bank, facts if bank.groups > 1 else facts[0])
        chosen[layer.name] = m
        basis = Conv2D(f"{layer.name}_basis", split.basis_layer.as_array().astype(np.float32),
                       None, layer.stride, layer.pad, layer.groups, "basis", layer.name)
        comb = Conv2D(f"{layer.name}_combine", split.combine_layer.as_array().astype(np.float32),
                      None if layer.bias is None else layer.bias.copy(), 1, 0, layer.groups,
                      "combine", layer.name)
        new_layers += [basis, comb]
    unknown = set(ranks) - set(chosen)
    if unknown:
        raise ValueError(f"ranks given for unknown conv layers {sorted(unknown)}")
    out = MicroNet(new_layers, net.input_shape, net.num_classes, net.rng_seed, net.preset)
    return out, DecompositionInfo(method.value, tau if not ranks else None, chosen)


def reconstructed_net(decomposed: MicroNet) -> MicroNet:
    """Collapse each basis/combine pair back into one conv with weights ``b @ B``."""
    layers = []
    it = iter(decomposed.layers)
    for layer in it:
        if layer.kind == "conv" and layer.role == "basis":
            comb = next(it)
            g = layer.groups
            basis = layer.weight.astype(np.float64)
            m_tot, c, kh, kw = basis.shape
            mg = m_tot // g
            n = comb.weight.shape[0]
            ng = n // g
            w = np.empty((n, c, kh, kw))
            for k in range(g):
                b = comb.weight[k * ng:(k + 1) * ng, :, 0, 0].astype(np.float64)
                w[k * ng:(k + 1) * ng] = (b @ basis[k * mg:(k + 1) * mg].reshape(mg, -1)).reshape(ng, c, kh, kw)
            layers.append(Conv2D(layer.source, w.astype(np.float32),
                                 None if comb.bias is None else comb.bias.copy(),
                                 layer.stride, layer.pad, g))
        else:
            layers.append(layer)
    return MicroNet(layers, decomposed.input_shape, decomposed.num_classes,
                    decomposed.rng_seed, decomposed.preset)


def finetune_decomposed(net: MicroNet, data, cfg: TrainConfig) -> TrainResult:
    """Train a split network; force stays off unless ``cfg.force`` names a layer."""
    if not any(layer.role for layer in net.conv_layers()):
        raise ValueError("network has no split layers; decompose it first")
    return train(net, data, cfg)
