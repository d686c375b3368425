"""Command line: ``d3mes prepare | train | sample | evaluate``.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from collections import Counter
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, save_checkpoint
from .config import DESK_PROFILE, ConfigError, RunConfig
from .diffusion import SizeSampler, generate
from .encoding import CapacityError, VocabularyError, encode_molecule, read_tensor_cache, write_tensor_cache
from .metrics import CYCLIC, NONCYCLIC, MetricReport, evaluate
from .molgraph import ParseError, UnsupportedElementError, detect_rings, infer_bonds, parse_structure, strip_hydrogens, write_sdf
from .training import NumericalError, schedule_for, train

logger = logging.getLogger("d3mes")

CACHE_NAME = "dataset.d3t"
CHECKPOINT_NAME = "checkpoint.d3c"
LABELS = {NONCYCLIC: 0, CYCLIC: 1}


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


def _label_id(label) -> int | None:
    if label is None:
        return None
    if isinstance(label, str) and label in LABELS:
        return LABELS[label]
    try:
        return int(label)
    except (TypeError, ValueError):
        raise UsageError(f"unknown label {label!r}; use {NONCYCLIC!r}, {CYCLIC!r} or an integer") from None


def cmd_prepare(config: RunConfig, cache_path: str | Path | None = None) -> Path:
    """Parse, strip hydrogens, encode and cache every molecule in ``config.data``."""
    if not config.data:
        raise UsageError("no input structure files configured (config key 'data')")
    cache_path = Path(cache_path) if cache_path else config.resolved_cache_dir() / CACHE_NAME
    tensors, labels, names = [], [], []
    skipped = Counter()
    for path in config.data:
        try:
            mols = parse_structure(path)
        except (OSError, ParseError, UnsupportedElementError) as exc:
            raise DataError(str(exc)) from exc
        for m in mols:
            if not m.bonds:
                # XYZ input carries no bond block
                m = infer_bonds(m, "geometry")
            heavy = strip_hydrogens(m)
            if len(heavy) == 0:
                skipped["empty"] += 1
                continue
            try:
                t = encode_molecule(heavy, config.n_max, config.vocab)
            except CapacityError:
                skipped["oversize"] += 1
                continue
            except VocabularyError:
                skipped["vocabulary"] += 1
                continue
            tensors.append(t)
            labels.append(m.class_label if m.class_label is not None else int(detect_rings(heavy)))
            names.append(m.name)
    for reason, count in sorted(skipped.items()):
        logger.warning("skipped %d molecules (%s)", count, reason)
    if not tensors:
        raise DataError("no usable molecules in the input")
    sizes = Counter(t.n_atoms for t in tensors)
    per_class: dict[int, Counter] = {}
    for t, y in zip(tensors, labels):
        per_class.setdefault(y, Counter())[t.n_atoms] += 1
    cache_path.parent.mkdir(parents=True, exist_ok=True)
    write_tensor_cache(
        cache_path,
        tensors,
        vocab=list(config.vocab),
        n_max=config.n_max,
        labels=labels,
        names=names,
        size_histogram={str(k): v for k, v in sorted(sizes.items())},
        class_histograms={str(c): {str(k): v for k, v in sorted(h.items())} for c, h in sorted(per_class.items())},
        skipped=dict(sorted(skipped.items())),
    )
    logger.info("cached %d molecules to %s", len(tensors), cache_path)
    return cache_path


def cmd_train(config: RunConfig, cache_path: str | Path | None = None, out: str | Path | None = None):
    """Train on a prepared cache and write the checkpoint. Returns ``(path, history)``."""
    cache_path = Path(cache_path) if cache_path else config.resolved_cache_dir() / CACHE_NAME
    if not cache_path.exists():
        raise DataError(f"dataset cache {cache_path} not found; run 'prepare' first")
    data, n_atoms, header = read_tensor_cache(cache_path)
    if header["vocab"] != list(config.vocab) or header["n_max"] != config.n_max:
        raise UsageError("cache was prepared with a different vocabulary or n_max")
    out = Path(out) if out else cache_path.parent / CHECKPOINT_NAME
    out.parent.mkdir(parents=True, exist_ok=True)
    hist = {int(k): v for k, v in header["size_histogram"].items()}
    class_hist = {int(c): {int(k): v for k, v in h.items()} for c, h in header["class_histograms"].items()}

    def checkpoint(model, step):
        save_checkpoint(out, model, config, hist, class_hist)
        logger.info("step %d: checkpoint written to %s", step, out)

    model, history = train(config, data, n_atoms, np.asarray(header["labels"]), on_checkpoint=checkpoint, dump_dir=out.parent)
    save_checkpoint(out, model, config, hist, class_hist)
    return out, history


def cmd_sample(checkpoint: str | Path, n: int, out_dir: str | Path, label=None, seed: int = 0, batch_size: int = 256) -> list[Path]:
    """Generate ``n`` molecules into ``out_dir`` as SDF files plus ``manifest.tsv``."""
    model, config, header = load_checkpoint(checkpoint)
    y = _label_id(label)
    if y is not None and not config.class_conditional:
        raise UsageError("a label was given but the checkpoint was trained unconditionally")
    if y is not None and not 0 <= y < model.config.num_classes:
        raise UsageError(f"label {y} outside the checkpoint's {model.config.num_classes} classes")
    hist = header["class_histograms"].get(y) if y is not None else None
    sampler = SizeSampler(hist or header["size_histogram"])
    mols = generate(
        n,
        model,
        schedule_for(config),
        sampler,
        grid=config.n_max,
        vocab=config.vocab,
        label=y,
        seed=seed,
        bond_mode=config.bond_mode,
        batch_size=batch_size,
        center=config.center_noise,
    )
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    lines = ["index\tfile\tlabel\tn_atoms\tformula"]
    for k, m in enumerate(mols):
        p = out_dir / f"sample_{k:05d}.sdf"
        write_sdf([m.replace(name=f"sample_{k:05d}")], p)
        paths.append(p)
        lines.append(f"{k}\t{p.name}\t{'' if y is None else y}\t{len(m)}\t{m.formula}")
    (out_dir / "manifest.tsv").write_text("\n".join(lines) + "\n")
    return paths


def cmd_evaluate(paths: Sequence[str | Path], targets: Sequence[str] = (), bond_mode: str = "file", report: str | Path | None = None) -> MetricReport:
    """Score structure files. ``bond_mode`` ``"file"`` keeps the stored bonds,
    ``"geometry"`` re-infers them from positions."""
    mols = []
    for p in paths:
        try:
            found = parse_structure(p)
        except (OSError, ValueError) as exc:
            logger.warning("skipping %s: %s", p, exc)
            continue
        if bond_mode == "geometry":
            found = [infer_bonds(m, "geometry") for m in found]
        mols.extend(found)
    if not mols:
        raise DataError("no molecules could be read")
    result = evaluate(mols, targets)
    if report:
        result.write(report)
    return result


# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _overrides(pairs: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        out[k.strip()] = v
    return out


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="d3mes", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def config_args(p):
        p.add_argument("--config", help="INI file with a [run] section")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--desk", action="store_true", help="start from the 50-step desk profile")

    p = sub.add_parser("prepare", help="parse, strip hydrogens, encode and cache a dataset")
    config_args(p)
    p.add_argument("--cache", help="cache file (default: <cache_dir>/dataset.d3t)")

    p = sub.add_parser("train", help="train a model on a prepared cache")
    config_args(p)
    p.add_argument("--cache")
    p.add_argument("--out", help="checkpoint path (default: next to the cache)")

    p = sub.add_parser("sample", help="generate molecules from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("-n", type=int, required=True)
    p.add_argument("--label", help="'cyclic', 'noncyclic' or a class id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("evaluate", help="compute stability/validity/uniqueness metrics")
    p.add_argument("paths", nargs="+")
    p.add_argument("--target", action="append", default=[], choices=[CYCLIC, NONCYCLIC])
    p.add_argument("--bonds", default="file", choices=["file", "geometry"])
    p.add_argument("--report", help="write key=value report here (and a .csv next to it)")
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("prepare", "train"):
            config = RunConfig.load(args.config, _overrides(args.set), DESK_PROFILE if args.desk else None)
        if args.command == "prepare":
            print(cmd_prepare(config, args.cache))
        elif args.command == "train":
            out, history = cmd_train(config, args.cache, args.out)
            print(out)
        elif args.command == "sample":
            paths = cmd_sample(args.checkpoint, args.n, args.out, args.label, args.seed)
            print(f"wrote {len(paths)} molecules to {args.out}")
        elif args.command == "evaluate":
            report = cmd_evaluate(args.paths, args.target, args.bonds, args.report)
            sys.stdout.write(report.to_text())
    except (UsageError, ConfigError) as exc:
        print(f"d3mes: error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"d3mes: data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"d3mes: numerical failure: {exc}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
