"""Experiment specs and the paired baseline-vs-force runs built on them."""
from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .force import ForceConfig, mean_pairwise_cosine
from .lowrank import Method
from .nn.data import Dataset, load_idx_dataset, synthetic_blobs
from .nn.net import PRESETS, MicroNet, build_preset
from .nn.train import TrainConfig, decompose_net, finetune_decomposed, train
from .rng import make_rng

log = logging.getLogger(__name__)


class SpecError(ValueError):
    pass


def derive_seed(seed: int, name: str) -> int:
    return int(make_rng(seed, f"derive:{name}").integers(2 ** 31 - 1))


DEFAULT_DATASET = {"kind": "synthetic", "classes": 2, "samples": 1024, "val_samples": 1024,
                   "image_size": 8, "noise": 0.5}


@dataclass
class ExperimentSpec:
    seed: int = 0
    dataset: dict = field(default_factory=lambda: dict(DEFAULT_DATASET))
    architecture: str = "tiny-convnet"
    baseline: dict = field(default_factory=lambda: {"eta": 0.05, "max_steps": 600,
                                                    "eval_every": 100})
    force_phase: dict = field(default_factory=lambda: {
        "eta": 0.05, "max_steps": 600, "eval_every": 100,
        "force": {"*": {"kind": "l2", "scaler": "length"}}})
    lambda_sweep: list = field(default_factory=lambda: [0.002, 0.005, 0.01])
    taus: list = field(default_factory=lambda: [0.05])
    methods: list = field(default_factory=lambda: ["pca"])
    finetune: dict = field(default_factory=lambda: {"eta": 0.005, "max_steps": 300,
                                                    "eval_every": 50})

    def __post_init__(self):
        if self.architecture not in PRESETS:
            raise SpecError(f"unknown architecture preset {self.architecture!r}")
        if not self.lambda_sweep or not self.taus or not self.methods:
            raise SpecError("lambda_sweep, taus and methods must be non-empty")
        for m in self.methods:
            try:
                Method(m)
            except ValueError:
                raise SpecError(f"unknown decomposition method {m!r}") from None
        for t in self.taus:
            if not 0.0 <= float(t) < 1.0:
                raise SpecError(f"tau {t} outside [0, 1)")
        kind = self.dataset.get("kind")
        if kind not in ("synthetic", "idx"):
            raise SpecError(f"unknown dataset kind {kind!r}")
        for name in ("baseline", "force_phase", "finetune"):
            try:
                self.train_config(name)
            except (TypeError, ValueError) as exc:
                raise SpecError(f"invalid {name} config: {exc}") from None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise SpecError(f"unknown spec keys {sorted(unknown)}")
        return cls(**copy.deepcopy(d))

    @classmethod
    def load(cls, path) -> "ExperimentSpec":
        path = Path(path)
        try:
            raw = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError:
            raise SpecError(f"spec file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise SpecError(f"spec file {path} is not valid JSON: {exc}") from None
        spec = cls.from_dict(raw)
        spec._base_dir = path.parent
        return spec

    def to_dict(self) -> dict:
        return {k: copy.deepcopy(getattr(self, k)) for k in self.__dataclass_fields__}

    def train_config(self, phase: str, lambda_s: float | None = None) -> TrainConfig:
        d = copy.deepcopy(getattr(self, phase))
        d["seed"] = derive_seed(self.seed, phase)
        if lambda_s is not None:
            d["force"] = {k: dict(v, lambda_s=lambda_s) for k, v in d.get("force", {}).items()}
        return TrainConfig.from_dict(d)

    def load_dataset(self) -> Dataset:
        d = dict(self.dataset)
        if d.pop("kind") == "synthetic":
            d.setdefault("seed", derive_seed(self.seed, "data"))
            try:
                return synthetic_blobs(**d)
            except TypeError as exc:
                raise SpecError(f"invalid synthetic dataset config: {exc}") from None
        base = getattr(self, "_base_dir", Path("."))
        paths = []
        for key in ("train_images", "train_labels", "val_images", "val_labels"):
            if key not in d:
                raise SpecError(f"idx dataset needs {key!r}")
            p = Path(d[key])
            p = p if p.is_absolute() else base / p
            if not p.is_file():
                raise SpecError(f"dataset file {p} not found")
            paths.append(p)
        return load_idx_dataset(*paths)

    def build_net(self, data: Dataset) -> MicroNet:
        return build_preset(self.architecture, data.input_shape, data.num_classes,
                            derive_seed(self.seed, "init"))


def deepest_conv(net: MicroNet) -> str:
    return net.conv_layers()[-1].name


def final_summary(net: MicroNet, records: list) -> dict:
    last = records[-1]
    deep = deepest_conv(net)
    w = net.layer(deep).weight.astype(np.float64)
    return {"val_acc": last["val_acc"], "val_loss": last["val_loss"], "ranks": last["ranks"],
            "deep_layer": deep, "deep_rank": last["ranks"][deep],
            "deep_cosine": mean_pairwise_cosine(w.reshape(w.shape[0], -1))}


# ---------------------------------------------------------------------------
# paired runs used by the acceptance experiments

@dataclass
class PairedSettings:
    lambda_sweep: tuple = (0.002, 0.005, 0.01)
    max_acc_drop: float = 2.0
    base_steps: int = 600
    force_steps: int = 600
    finetune_steps: int = 300
    eta: float = 0.05
    finetune_eta: float = 0.005
    noise: float = 0.5


def _phase(net, data, seed, steps, eta, force=None, eval_every=None):
    cfg = TrainConfig(eta=eta, max_steps=steps, eval_every=eval_every or steps, seed=seed,
                      force=force or {})
    return train(net, data, cfg)


def paired_seed_run(seed: int, settings: PairedSettings = PairedSettings()) -> dict:
    """Baseline, then force-phase continuations (sweep, reciprocal scaler, repulsion) for one seed."""
    spec = ExperimentSpec(seed=seed, dataset=dict(DEFAULT_DATASET, noise=settings.noise))
    data = spec.load_dataset()
    net = spec.build_net(data)
    base = _phase(net, data, derive_seed(seed, "baseline"), settings.base_steps, settings.eta)
    fseed = derive_seed(seed, "force_phase")

    def cont(lam, scaler="length"):
        force = {"*": ForceConfig("l2", lam, scaler=scaler)} if lam else None
        res = _phase(base.net.copy(), data, fseed, settings.force_steps, settings.eta, force)
        return res.net, final_summary(res.net, res.log)

    ref_net, ref = cont(0.0)
    sweep = {lam: cont(lam) for lam in settings.lambda_sweep}
    return {"seed": seed, "data": data, "reference": (ref_net, ref), "sweep": sweep,
            "cont": cont}


def choose_lambda(runs: list, settings: PairedSettings) -> float:
    """Largest rank reduction (mean over seeds) among values that keep accuracy on every seed."""
    best, best_rank = None, None
    for lam in settings.lambda_sweep:
        ok = all(r["reference"][1]["val_acc"] - r["sweep"][lam][1]["val_acc"] <= settings.max_acc_drop
                 for r in runs)
        if not ok:
            continue
        mean_rank = float(np.mean([r["sweep"][lam][1]["deep_rank"] for r in runs]))
        if best_rank is None or mean_rank < best_rank:
            best, best_rank = lam, mean_rank
    return best if best is not None else min(settings.lambda_sweep)


def finetune_pair(run: dict, lam: float, settings: PairedSettings, method="pca") -> dict:
    """Decompose the force-trained and uncoordinated nets at the force net's ranks and fine-tune both."""
    data = run["data"]
    force_net = run["sweep"][lam][0]
    ref_net = run["reference"][0]
    split_f, info = decompose_net(force_net, method, tau=0.05)
    split_r, _ = decompose_net(ref_net, method, ranks=info.ranks)
    seed = derive_seed(run["seed"], "finetune")
    cfg = TrainConfig(eta=settings.finetune_eta, max_steps=settings.finetune_steps,
                      eval_every=max(settings.finetune_steps // 6, 1), seed=seed)
    res_f = finetune_decomposed(split_f, data, cfg)
    res_r = finetune_decomposed(split_r, data, cfg)
    return {"ranks": info.ranks,
            "force_err": [100.0 - r["val_acc"] for r in res_f.log],
            "reference_err": [100.0 - r["val_acc"] for r in res_r.log]}
