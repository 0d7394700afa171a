"""``forcelr`` command line: train, analyze-ranks, decompose, finetune, verify, speedup.

Exit codes: 0 success, 1 failed verification, 2 invalid input, 3 training diverged.
"""
from __future__ import annotations

import argparse
import contextlib
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import archive
from .experiments import ExperimentSpec, SpecError, final_summary
from .lowrank import (Method, RankReport, analyze_bank, break_even_rank, decomposed_macs,
                      layer_macs, theoretical_speedup)
from .nn.data import IDXFormatError
from .nn.net import DivergenceError
from .nn.train import decompose_net, finetune_decomposed, train
from .verify import run_all

log = logging.getLogger("forcelr")

EXIT_OK, EXIT_VERIFY, EXIT_INPUT, EXIT_DIVERGED = 0, 1, 2, 3


class UsageError(Exception):
    pass


def _thread_limit():
    threads = os.environ.get("FORCELR_THREADS")
    if not threads:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=int(threads))


def _write_jsonl(path: Path, records: list):
    archive.atomic_write(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _lambda_tag(lam: float) -> str:
    return f"lambda_{lam:g}"


def _provenance(spec: ExperimentSpec, phase: str, **extra) -> dict:
    return {"phase": phase, "seed": spec.seed, "spec": spec.to_dict(), **extra}


# ---------------------------------------------------------------------------

def cmd_train(args) -> int:
    spec = ExperimentSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    data = spec.load_dataset()
    base_cfg = spec.train_config("baseline")
    out = Path(args.out)

    net = spec.build_net(data)
    base = train(net, data, base_cfg)
    runs = [("baseline", 0.0, base)]
    for lam in spec.lambda_sweep:
        cfg = spec.train_config("force_phase", lambda_s=lam)
        res = train(base.net.copy(), data, cfg, start_step=base_cfg.max_steps)
        runs.append((_lambda_tag(lam), lam, res))

    conv_names = [layer.name for layer in base.net.conv_layers()]
    rows = []
    for tag, lam, res in runs:
        phase = "baseline" if tag == "baseline" else "force_phase"
        archive.save_model(res.net, out / tag,
                           _provenance(spec, phase, lambda_s=lam, steps=res.log[-1]["step"]))
        _write_jsonl(out / f"{tag}.metrics.jsonl", res.log)
        s = final_summary(res.net, res.log)
        rows.append([tag, lam, f"{s['val_acc']:.4f}"] + [s["ranks"][c] for c in conv_names])
    summary = _csv_text(["run", "lambda_s", "final_accuracy"] + [f"rank_{c}" for c in conv_names], rows)
    archive.atomic_write(out / "summary.csv", summary)
    print(summary, end="")
    return EXIT_OK


def _conv_out_hw(net) -> dict:
    return net.conv_out_hw()


def cmd_analyze_ranks(args) -> int:
    net, _ = archive.load_model(args.model)
    tau = args.tau
    method = Method(args.method or "pca")
    hw = _conv_out_hw(net)
    rows = []
    for layer in net.conv_layers():
        rows += analyze_bank(layer.name, layer.bank, hw[layer.name], tau, method, args.seed or 0)
    report = RankReport(rows)
    out = Path(args.out)
    archive.atomic_write(out / "ranks.json", report.to_json())
    archive.atomic_write(out / "ranks.csv", report.to_csv())
    print(report.to_csv(), end="")
    return EXIT_OK


def _parse_ranks(text: str | None) -> dict | None:
    if not text:
        return None
    ranks = {}
    for item in text.split(","):
        name, _, value = item.partition("=")
        if not value:
            raise UsageError(f"--ranks entries look like layer=M, got {item!r}")
        try:
            ranks[name.strip()] = int(value)
        except ValueError:
            raise UsageError(f"rank for {name!r} is not an integer: {value!r}") from None
    return ranks


def speedup_rows(original, decomposed, manifest: dict) -> tuple[list, dict]:
    hw = original.conv_out_hw()
    ranks = manifest.get("decomposition", {}).get("ranks", {})
    rows = []
    tot_orig, tot_dec = 0, 0
    for layer in original.conv_layers():
        n, c, h, w = layer.weight.shape
        oh, ow = hw[layer.name]
        macs = layer_macs(n, c, h, w, oh, ow)
        tot_orig += macs
        if layer.name not in ranks:
            tot_dec += macs
            continue
        m = int(ranks[layer.name])
        dm = decomposed_macs(n, c, h, w, oh, ow, m)
        tot_dec += dm
        rows.append({"layer": layer.name, "N": n, "C": c, "H": h, "W": w, "H_out": oh, "W_out": ow,
                     "M": m, "break_even_rank": break_even_rank(n, c, h, w),
                     "theoretical_speedup": theoretical_speedup(n, c, h, w, oh, ow, m),
                     "macs_original": macs, "macs_decomposed": dm})
    total = {"macs_original": tot_orig, "macs_decomposed": tot_dec,
             "theoretical_speedup": tot_orig / tot_dec}
    return rows, total


def _speedup_csv(rows, total) -> str:
    keys = ["layer", "N", "C", "H", "W", "H_out", "W_out", "M", "break_even_rank",
            "theoretical_speedup", "macs_original", "macs_decomposed"]
    body = [[r[k] if not isinstance(r[k], float) else f"{r[k]:.6f}" for k in keys] for r in rows]
    body.append(["TOTAL"] + [""] * 8 + [f"{total['theoretical_speedup']:.6f}",
                                        total["macs_original"], total["macs_decomposed"]])
    return _csv_text(keys, body)


def cmd_decompose(args) -> int:
    net, manifest = archive.load_model(args.model)
    try:
        method = Method(args.method)
    except ValueError:
        raise UsageError(f"unknown method {args.method!r}; choose pca, svd or kmeans") from None
    ranks = _parse_ranks(args.ranks)
    if ranks is None and args.tau is None:
        raise UsageError("decompose needs --tau or --ranks")
    dec, info = decompose_net(net, method, tau=args.tau, ranks=ranks, seed=args.seed or 0)
    extra = {"decomposition": {"method": info.method, "tau": info.tau, "ranks": info.ranks,
                               "source_provenance": manifest.get("provenance", {})}}
    out = Path(args.out)
    archive.save_model(dec, out / "model", manifest.get("provenance", {}), extra)
    rows, total = speedup_rows(net, dec, extra)
    text = _speedup_csv(rows, total)
    archive.atomic_write(out / "speedup.csv", text)
    print(text, end="")
    return EXIT_OK


def cmd_finetune(args) -> int:
    net, manifest = archive.load_model(args.model)
    spec = ExperimentSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    data = spec.load_dataset()
    cfg = spec.train_config("finetune")
    res = finetune_decomposed(net, data, cfg)
    out = Path(args.out)
    extra = {k: v for k, v in manifest.items()
             if k not in ("format_version", "architecture", "tensors", "provenance")}
    archive.save_model(res.net, out / "model",
                       {"phase": "finetune", "seed": spec.seed, "config": cfg.to_dict(),
                        "source_provenance": manifest.get("provenance", {})}, extra)
    _write_jsonl(out / "metrics.jsonl", res.log)
    last = res.log[-1]
    print(f"finetuned {last['step']} steps: val_acc={last['val_acc']:.2f} val_loss={last['val_loss']:.4f}")
    return EXIT_OK


def cmd_verify(args) -> int:
    results = run_all()
    for chk in results:
        print(chk.line())
    payload = json.dumps([c.to_dict() for c in results], indent=2, sort_keys=True, default=float)
    if args.out:
        archive.atomic_write(Path(args.out) / "verify.json", payload + "\n")
    if args.json:
        print(payload)
    failed = [c for c in results if not c.passed]
    if failed:
        worst = max(failed, key=lambda c: c.worst / c.threshold)
        print(f"{len(failed)} check(s) failed; worst: {worst.name} residual {worst.worst:.3e}",
              file=sys.stderr)
        return EXIT_VERIFY
    return EXIT_OK


def _time_forward(net, x, repeats=5) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        net.forward(x)
        best = min(best, time.perf_counter() - t0)
    return best


def cmd_speedup(args) -> int:
    net, _ = archive.load_model(args.model)
    dec, manifest = archive.load_model(args.decomposed)
    if "decomposition" not in manifest:
        raise UsageError(f"{args.decomposed} is not a decomposed archive")
    if tuple(net.input_shape) != tuple(dec.input_shape) or net.num_classes != dec.num_classes:
        raise UsageError("archives have different input or output shapes")
    sources = {layer.source for layer in dec.conv_layers() if layer.role}
    for layer in net.conv_layers():
        if layer.name in sources:
            basis = dec.layer(f"{layer.name}_basis")
            if basis.weight.shape[1:] != layer.weight.shape[1:]:
                raise UsageError(f"{layer.name}: basis filters {basis.weight.shape[1:]} do not "
                                 f"match original {layer.weight.shape[1:]}")
    rows, total = speedup_rows(net, dec, manifest)
    text = _speedup_csv(rows, total)
    print(text, end="")
    result = {"per_layer": rows, "total": total}
    if args.measure:
        x = np.random.default_rng(0).standard_normal((64,) + tuple(net.input_shape))
        t_orig, t_dec = _time_forward(net, x), _time_forward(dec, x)
        result["measured_machine_dependent"] = {"original_s": t_orig, "decomposed_s": t_dec,
                                                "ratio": t_orig / t_dec}
        print(f"measured, machine-dependent: forward speed ratio {t_orig / t_dec:.3f}")
    if args.out:
        out = Path(args.out)
        archive.atomic_write(out / "speedup.csv", text)
        archive.atomic_write(out / "speedup.json", archive.dumps_json(result))
    return EXIT_OK


COMMANDS = {
    "train": cmd_train,
    "analyze-ranks": cmd_analyze_ranks,
    "decompose": cmd_decompose,
    "finetune": cmd_finetune,
    "verify": cmd_verify,
    "speedup": cmd_speedup,
}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forcelr", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, model=False, spec=False, out=True):
        if model:
            sp.add_argument("--model", required=True, help="model archive directory")
        if spec:
            sp.add_argument("--spec", required=True, help="experiment spec (JSON)")
        sp.add_argument("--out", required=out, default=None, help="output directory")
        sp.add_argument("--seed", type=int, default=None)

    common(sub.add_parser("train", help="baseline then force-regularized training"), spec=True)
    sp = sub.add_parser("analyze-ranks", help="per-layer PCA rank report")
    common(sp, model=True)
    sp.add_argument("--tau", type=float, default=0.05)
    sp.add_argument("--method", default="pca")
    sp = sub.add_parser("decompose", help="split conv layers into basis + 1x1 combination")
    common(sp, model=True)
    sp.add_argument("--method", default="pca")
    sp.add_argument("--tau", type=float, default=None)
    sp.add_argument("--ranks", default=None, help="explicit ranks, e.g. conv1=3,conv2=5")
    common(sub.add_parser("finetune", help="fine-tune a decomposed archive"), model=True, spec=True)
    sp = sub.add_parser("verify", help="run the numerical property checks")
    sp.add_argument("--out", default=None)
    sp.add_argument("--json", action="store_true", help="print residuals as JSON")
    sp = sub.add_parser("speedup", help="theoretical (and optionally measured) speedup")
    common(sp, model=True, out=False)
    sp.add_argument("--decomposed", required=True)
    sp.add_argument("--measure", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "method", None) is not None and args.command != "verify":
        try:
            Method(args.method)
        except ValueError:
            print(f"error: unknown method {args.method!r}; choose pca, svd or kmeans", file=sys.stderr)
            return EXIT_INPUT
    try:
        with _thread_limit():
            return COMMANDS[args.command](args)
    except DivergenceError as exc:
        print(f"error: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SpecError, UsageError, archive.ArchiveError, IDXFormatError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
