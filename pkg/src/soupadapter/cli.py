"""Command-line pipeline: inspect, synthesize, train, merge, evaluate.

Exit codes: 0 success, 1 usage error, 2 data-format error, 3 numerical or
equivalence failure. All flags are long-form and every subcommand is
deterministic given its flags and --seed, so reruns produce byte-identical
outputs.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import adapter as adapter_mod
from . import dataio, evalkit, heads, soup as soup_mod
from .errors import DataError, NumericalError, SoupAdapterError

_OVERRIDE_TYPES = {
    "red": int, "lr": float, "weight_decay": float, "aug_strength": float,
    "seed": int, "epochs": int, "batch_size": int, "train_r": float,
    "mask_strategy": str,
}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse default exits 2; we reserve that
        raise UsageError(message)


def parse_grid(text: str) -> list[float]:
    """Parse "start:end:step" into an ascending grid within [0, 1]."""
    try:
        start_s, end_s, step_s = text.split(":")
        start, end, step = float(start_s), float(end_s), float(step_s)
    except ValueError:
        raise UsageError(f"grid must look like start:end:step, got {text!r}")
    if not (np.isfinite(start) and np.isfinite(end) and np.isfinite(step)):
        raise UsageError("grid bounds must be finite")
    if start == end:
        grid = [round(start, 12)]
    else:
        if step <= 0 or end < start:
            raise UsageError("grid needs end >= start and a positive step")
        count = int(np.floor((end - start) / step + 1e-9)) + 1
        grid = [round(start + i * step, 12) for i in range(count)]
    if grid[0] < 0.0 or grid[-1] > 1.0:
        raise UsageError("grid values must stay within [0, 1]")
    return grid


def _parse_overrides(pairs) -> dict:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise UsageError(f"override must look like key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        if key not in _OVERRIDE_TYPES:
            raise UsageError(f"unknown override key {key!r}")
        try:
            overrides[key] = _OVERRIDE_TYPES[key](value)
        except ValueError:
            raise UsageError(f"cannot parse override {pair!r}")
    return overrides


def _load_with_manifest(path):
    emb = dataio.read_container(path)
    manifest_path = dataio.manifest_path_for(path)
    manifest = None
    if os.path.exists(manifest_path):
        manifest = dataio.read_manifest(manifest_path)
        manifest.validate_against(emb)
    return emb, manifest


# ------------------------------------------------------------------ commands

def cmd_info(args) -> int:
    emb, manifest = _load_with_manifest(args.embeddings)
    print(f"dim: {emb.dim}")
    print(f"samples: {emb.n}")
    print(f"views: {emb.views}")
    print(f"classes: {emb.n_classes}")
    print("norm-check: ok")
    if manifest is not None:
        print(f"dataset: {manifest.dataset}")
        print(f"model: {manifest.model}")
        print(f"splits: {', '.join(sorted(manifest.splits))}")
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    train, id_test, ood_test = dataio.generate_synthetic(
        args.classes, args.dim, args.per_class, args.shift_angle,
        args.noise, args.seed)
    classes = [f"class_{c:03d}" for c in range(args.classes)]
    for name, emb, split in (("train", train, "train"),
                             ("id_test", id_test, "test"),
                             ("ood_test", ood_test, "shift:rotation")):
        path = out / f"{name}.sadp"
        dataio.write_container(emb, path)
        manifest = dataio.Manifest(
            dataset=f"synthetic-{name}", classes=classes,
            splits={split: list(range(emb.n))}, model="synthetic")
        dataio.write_manifest(manifest, dataio.manifest_path_for(path))
        print(f"wrote {path} ({emb.n} samples)")
    return 0


def cmd_train(args) -> int:
    emb, manifest = _load_with_manifest(args.embeddings)
    if manifest is None:
        raise DataError(f"no manifest found next to {args.embeddings}")
    if args.split not in manifest.splits:
        raise DataError(f"split {args.split!r} not in manifest "
                        f"(have {sorted(manifest.splits)})")
    selection = dataio.sample_few_shot(emb, manifest.splits[args.split],
                                       args.shots, args.seed)

    if args.head:
        head = heads.import_head(args.head)
        head_mode = adapter_mod.IMPORTED_HEAD
    else:
        head = None
        head_mode = adapter_mod.PROTOTYPE_HEAD

    overrides = _parse_overrides(args.override)
    overrides["epochs"] = args.epochs
    if "mask_strategy" not in overrides:
        overrides["mask_strategy"] = (
            adapter_mod.mask_strategy_for_shots(args.shots)
            if args.mask == "auto" else args.mask)
    if head_mode == adapter_mod.IMPORTED_HEAD:
        overrides["mask_strategy"] = adapter_mod.NO_MASK

    configs = [adapter_mod.sample_hyperconfig(args.seed, j, overrides)
               for j in range(args.k)]

    def run(j):
        try:
            return adapter_mod.train_component(emb, selection, head_mode,
                                               configs[j], head=head)
        except Exception as exc:  # collected so every failure gets listed
            return exc

    jobs = args.jobs or args.k
    if jobs > 1:
        with concurrent.futures.ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(run, range(args.k)))
    else:
        results = [run(j) for j in range(args.k)]
    failures = [(j, r) for j, r in enumerate(results) if isinstance(r, Exception)]
    if failures:
        for j, exc in failures:
            print(f"component {j} failed: {exc}", file=sys.stderr)
        raise failures[0][1]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # export the frozen head and the selected bank so evaluation can reuse them
    if head is None:
        clean = emb.unit_features(0)
        prompts = [clean[selection.indices[c]]
                   for c in range(emb.n_classes)]
        head = heads.build_prototypes(prompts)
        heads.export_head(head, out / "head.shed")
        print(f"wrote {out / 'head.shed'}")
    sel_idx = np.asarray([t[0] for t in selection.flat()], dtype=np.int64)
    bank = dataio.EmbeddingSet(features=emb.features[sel_idx][:, :1, :],
                               labels=emb.labels[sel_idx],
                               n_classes=emb.n_classes)
    dataio.write_container(bank, out / "fewshot.sadp")
    print(f"wrote {out / 'fewshot.sadp'} ({bank.n} samples)")

    for j, (params, record) in enumerate(results):
        ckpt = out / f"component_{j}.sada"
        meta = {"kind": "component", "hyper": configs[j].to_dict(),
                "record": record.to_dict()}
        adapter_mod.save_checkpoint(ckpt, params, head.scale, meta)
        sidecar = out / f"component_{j}.json"
        with open(sidecar, "w", encoding="utf-8") as fh:
            json.dump({"hyper": configs[j].to_dict(),
                       "record": record.to_dict()},
                      fh, indent=2, sort_keys=True)
            fh.write("\n")
        loss = record.final_loss
        print(f"wrote {ckpt} (H={params.hidden}, "
              f"final loss {loss if loss is None else f'{loss:.4f}'})")
    return 0


def cmd_soup(args) -> int:
    components = []
    scales = []
    checksums = []
    dim = None
    for path in args.components:
        with open(path, "rb") as fh:
            blob = fh.read()
        checksums.append(hashlib.sha256(blob).hexdigest())
        params, scale, _ = adapter_mod.load_checkpoint(path)
        if dim is None:
            dim = params.dim
        elif params.dim != dim:
            raise DataError(f"{path}: dim {params.dim} does not match first "
                            f"component dim {dim}")
        components.append(params)
        scales.append(scale)
    if len(set(scales)) > 1:
        print(f"warning: components carry different logit scales {scales}; "
              f"using {scales[0]}", file=sys.stderr)

    ensemble = soup_mod.Soup(components=components)
    merged = soup_mod.reparameterize(ensemble)
    meta = {"kind": "merged", "k": ensemble.k, "source_sha256": checksums}

    # verify the artifact actually written to disk (32-bit round-trip path)
    tmp = str(args.out) + ".tmp"
    adapter_mod.save_checkpoint(tmp, merged, scales[0], meta)
    try:
        reloaded, _, _ = adapter_mod.load_checkpoint(tmp)
        worst = soup_mod.verify_equivalence(ensemble, args.trials,
                                            args.tolerance, merged=reloaded)
    except Exception:
        os.unlink(tmp)
        raise
    os.replace(tmp, args.out)
    print(f"wrote {args.out} (K={ensemble.k}, H={merged.hidden}, "
          f"worst deviation {worst:.3e} over {args.trials} probes)")
    return 0


def cmd_eval(args) -> int:
    grid = parse_grid(args.grid)
    head = heads.import_head(args.head)
    id_set, _ = _load_with_manifest(args.embeddings)
    ood_sets = {}
    for path in args.ood or []:
        emb, _ = _load_with_manifest(path)
        ood_sets[Path(path).stem] = emb

    models = []
    if args.adapter:
        merged, _, _ = adapter_mod.load_checkpoint(args.adapter)
        models.append(("soup", merged))
    components = []
    for path in args.components or []:
        params, _, _ = adapter_mod.load_checkpoint(path)
        components.append(params)
    if not models and not components:
        raise UsageError("need --adapter and/or --components to evaluate")

    report = evalkit.EvalReport()
    if models:
        report.extend(evalkit.robustness_report(models, head, id_set,
                                                ood_sets, grid))
    if components:
        sets = {"id": id_set, **ood_sets}
        report.extend(evalkit.component_average_report(components, head,
                                                       sets, grid))
    if args.knn_bank:
        bank, _ = _load_with_manifest(args.knn_bank)
        cfg = heads.KnnConfig(k=args.knn_k, temperature=args.knn_t)
        bank_feats = bank.unit_features(0)
        report.baselines.setdefault("id", {})["knn"] = evalkit.knn_accuracy(
            bank_feats, bank.labels, cfg, id_set, head.n_classes)
        if ood_sets:
            report.baselines.setdefault("ood", {})["knn"] = float(np.mean(
                [evalkit.knn_accuracy(bank_feats, bank.labels, cfg, emb,
                                      head.n_classes)
                 for emb in ood_sets.values()]))

    evalkit.write_report(report, str(args.out) + ".csv", "csv")
    evalkit.write_report(report, str(args.out) + ".json", "json")
    print(f"wrote {args.out}.csv and {args.out}.json "
          f"({len(report.rows)} rows)")
    return 0


# -------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="soupadapter",
                     description="Adapter-ensemble training and evaluation "
                                 "over frozen embeddings")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("info", help="inspect an embedding container")
    p.add_argument("--embeddings", required=True)
    p.set_defaults(func=cmd_info)

    p = sub.add_parser("synth", help="write a synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--classes", type=int, default=10)
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--per-class", type=int, default=100)
    p.add_argument("--shift-angle", type=float, default=0.3)
    p.add_argument("--noise", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train K adapter components")
    p.add_argument("--embeddings", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--head", default=None,
                   help="imported head file; omit to build prototypes")
    p.add_argument("--shots", type=int, required=True)
    p.add_argument("--k", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, required=True)
    p.add_argument("--mask", choices=["auto", "mask", "no-mask"],
                   default="auto")
    p.add_argument("--override", action="append", metavar="KEY=VALUE")
    p.add_argument("--jobs", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("soup", help="merge components into one adapter")
    p.add_argument("--components", nargs="+", required=True)
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_soup)

    p = sub.add_parser("eval", help="residual-ratio sweeps and robustness")
    p.add_argument("--embeddings", required=True, help="in-distribution set")
    p.add_argument("--ood", nargs="*", default=None)
    p.add_argument("--head", required=True)
    p.add_argument("--adapter", default=None)
    p.add_argument("--components", nargs="*", default=None)
    p.add_argument("--grid", default="0:1:0.1")
    p.add_argument("--knn-bank", default=None)
    p.add_argument("--knn-k", type=int, default=10)
    p.add_argument("--knn-t", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except SoupAdapterError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())
