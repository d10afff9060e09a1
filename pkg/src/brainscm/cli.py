"""Command-line entry points.

    brainscm generate-phantoms --count 200 --out data/
    brainscm train --data data/ --preset desk-64 --out runs/desk
    brainscm sample --checkpoint runs/desk/checkpoint.pt --count 6 --out samples/
    brainscm counterfactual --checkpoint ... --data data/ --record 3 \
        --do l=0 --out cf/
    brainscm evaluate --checkpoint ... --data data/ --report-dir reports/
    brainscm serve --checkpoint ... --data data/ --port 8000
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np

from .errors import BrainScmError
from .evaluation import (
    counterfactual_fidelity,
    covariate_fit,
    export_report,
    lesion_shift_suite,
)
from .graph import DEFAULT_GRAPH_CONFIG, Intervention, load_graph_config
from .model import build_model, load_checkpoint
from .phantom import (
    PhantomConfig,
    export_dataset,
    generate_phantoms,
    import_dataset,
)
from .pngio import encode_diff_png, encode_intensity_png
from .training import TrainConfig, train


def _parse_do(pairs: list[str]) -> dict[str, float]:
    out = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise BrainScmError(f"bad intervention {pair!r}; expected name=value")
        name, value = pair.split("=", 1)
        out[name.strip()] = float(value)
    return out


def _load_dataset_config(data_dir: Path) -> PhantomConfig:
    manifest = json.loads((Path(data_dir) / "manifest.json").read_text())
    if "phantom_config" in manifest:
        return PhantomConfig.from_dict(manifest["phantom_config"])
    return PhantomConfig()


def cmd_generate_phantoms(args) -> int:
    config = PhantomConfig(image_size=args.size, seed=args.seed)
    records = generate_phantoms(args.count, config, seed=args.seed)
    manifest = export_dataset(records, args.out)
    # keep the generating config alongside the data for later stages
    data = json.loads(manifest.read_text())
    data["phantom_config"] = config.to_dict()
    manifest.write_text(json.dumps(data, indent=1))
    print(f"wrote {len(records)} phantoms to {args.out}")
    return 0


def cmd_train(args) -> int:
    records = import_dataset(args.data)
    if args.train_config:
        import yaml
        with open(args.train_config) as fh:
            config = TrainConfig.from_dict(yaml.safe_load(fh))
    else:
        config = TrainConfig.from_preset(args.preset)
    if args.epochs is not None:
        config.epochs = args.epochs
    if args.batch_size is not None:
        config.batch_size = args.batch_size
    config.seed = args.seed
    graph_config = load_graph_config(args.graph_config) \
        if args.graph_config else DEFAULT_GRAPH_CONFIG
    preset_map = {"small-128": "small-128", "large-224": "large-224",
                  "desk-64": "desk-64"}
    model = build_model(preset_map[args.preset], graph_config)
    model.extra["phantom_config"] = _load_dataset_config(args.data).to_dict()
    path = train(model, records, config, args.out)
    print(f"final checkpoint: {path}")
    return 0


def cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    samples = model.sample(args.count, seed=args.seed)
    rows = []
    for i, (record, image) in enumerate(samples):
        (out / f"sample_{i:03d}.png").write_bytes(
            encode_intensity_png(np.asarray(image)))
        rows.append(record.to_dict())
    (out / "covariates.json").write_text(json.dumps(rows, indent=1))
    print(f"wrote {len(samples)} samples to {out}")
    return 0


def cmd_counterfactual(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = import_dataset(args.data)
    if not 0 <= args.record < len(records):
        raise BrainScmError(f"record index {args.record} out of range "
                            f"(dataset has {len(records)})")
    rec = records[args.record]
    assignments = _parse_do(args.do)
    cf_record, cf_image = model.counterfactual(rec.covariates, rec.image,
                                               assignments)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    original = np.asarray(rec.image, dtype=np.float64)
    cf_image = np.asarray(cf_image, dtype=np.float64)
    (out / "original.png").write_bytes(encode_intensity_png(original))
    (out / "counterfactual.png").write_bytes(encode_intensity_png(cf_image))
    (out / "diff.png").write_bytes(encode_diff_png(cf_image - original))
    (out / "covariates.json").write_text(json.dumps({
        "interventions": assignments,
        "before": rec.covariates.to_dict(),
        "after": cf_record.to_dict(),
    }, indent=1))
    print(f"wrote counterfactual panel to {out}")
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    records = import_dataset(args.data)
    phantom_config = _load_dataset_config(args.data)
    report_dir = Path(args.report_dir)
    report_dir.mkdir(parents=True, exist_ok=True)
    suite = lesion_shift_suite(model, records, phantom_config)
    export_report(suite["removal"], report_dir / "removal")
    export_report(suite["addition"], report_dir / "addition")
    fidelity = counterfactual_fidelity(
        model, [r for r in records if r.covariates.l >= 10][:50],
        Intervention({"l": 0.0}), phantom_config)
    fit = covariate_fit(model, records)
    (report_dir / "summary.json").write_text(json.dumps({
        "removal": suite["removal"].summary,
        "addition": suite["addition"].summary,
        "fidelity": fidelity.summary,
        "covariate_fit": fit,
    }, indent=1))
    print(f"reports under {report_dir}")
    return 0


def cmd_serve(args) -> int:
    from .server import serve

    model = load_checkpoint(args.checkpoint)
    records = import_dataset(args.data)
    phantom_config = _load_dataset_config(args.data)
    port = int(os.environ.get("BRAINSCM_PORT", args.port))
    serve(model, records, phantom_config, port=port, host=args.host)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="brainscm",
        description="counterfactual brain-image SCM engine")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-phantoms", help="write a synthetic dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_generate_phantoms)

    p = sub.add_parser("train", help="train a model on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--preset", default="desk-64",
                   choices=["small-128", "large-224", "desk-64"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--graph-config", help="YAML graph declaration")
    p.add_argument("--train-config", help="YAML file mirroring TrainConfig")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("sample", help="ancestral samples from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("counterfactual",
                       help="original/counterfactual/diff panel for one record")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--record", type=int, required=True)
    p.add_argument("--do", action="append", metavar="NAME=VALUE")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_counterfactual)

    p = sub.add_parser("evaluate", help="lesion-shift and fidelity reports")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--report-dir", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("serve", help="run the HTTP inference service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", default="127.0.0.1")
    p.set_defaults(func=cmd_serve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except BrainScmError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
