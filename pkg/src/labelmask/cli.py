"""Command-line interface.

Subcommands:

    generate-data      synthesize a planted-correlation dataset to disk
    train              fit a model on a dataset directory, write a run dir
    eval               score a checkpoint under an evaluation protocol
    predict            per-label probabilities for one sample, with optional
                       evidence states (shares its inference core with the
                       HTTP endpoint, so outputs match bit for bit)
    intervene-serve    start the JSON-over-HTTP intervention service
    export-embeddings  dump the label embedding table plus a name manifest

All file outputs are deterministic for a fixed config and seed: no
timestamps, stable key order, repr-formatted floats.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .data import SynthSpec, generate, load_dataset, save_dataset
from .errors import (ConfigurationError, FormatError, NumericsError,
                     ProtocolError, ShapeMismatchError)
from .metrics import EvalProtocol, evaluate, write_reports_csv
from .model import LabelPartition, LabelTransformer, ModelConfig
from .server import (build_server, intervene_response, parse_states,
                     resolve_request_inputs, RequestError)
from .training import TrainConfig, train


class CliError(Exception):
    """Fatal CLI problem; carries the process exit code."""

    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


def _require(path: str, kind: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise CliError(f"{kind} path not found: {path}", code=2)
    return p


def _load_json(path: Path, kind: str) -> dict:
    try:
        payload = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{kind} file {path} is not valid JSON: {exc}")
    if not isinstance(payload, dict):
        raise CliError(f"{kind} file {path} must hold a JSON object")
    return payload


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected true or false, got {text!r}")


# ---------------------------------------------------------------- commands


def cmd_generate_data(args) -> int:
    spec_path = _require(args.spec, "spec")
    spec_dict = _load_json(spec_path, "spec")
    if args.seed is not None:
        spec_dict["seed"] = args.seed
    spec = SynthSpec.from_dict(spec_dict)
    data = generate(spec)
    out = Path(args.out)
    save_dataset(data.train, out / "train")
    save_dataset(data.test, out / "test")
    print(f"wrote {len(data.train.sample_ids)} train / "
          f"{len(data.test.sample_ids)} test samples to {out}")
    return 0


def _model_config_for_dataset(ds, overrides: dict) -> ModelConfig:
    derived = {
        "num_labels": ds.num_labels,
        "embed_dim": ds.features.shape[3],
        "grid_h": ds.features.shape[1],
        "grid_w": ds.features.shape[2],
    }
    for key, value in derived.items():
        if key in overrides and overrides[key] != value:
            raise ConfigurationError(
                f"config sets {key}={overrides[key]} but the dataset requires {value}"
            )
    merged = {**overrides, **derived}
    if ds.groups is not None and ds.target_count is not None:
        merged["label_partition"] = LabelPartition(
            target_count=ds.target_count,
            groups={k: tuple(v) for k, v in ds.groups.items()},
        )
    return ModelConfig(**merged)


def cmd_train(args) -> int:
    ds_path = _require(args.dataset, "dataset")
    ds = load_dataset(ds_path)

    file_cfg = {"model": {}, "train": {}}
    if args.config is not None:
        loaded = _load_json(_require(args.config, "config"), "config")
        unknown = set(loaded) - {"model", "train"}
        if unknown:
            raise CliError(f"config file has unknown sections: {sorted(unknown)}")
        file_cfg["model"].update(loaded.get("model", {}))
        file_cfg["train"].update(loaded.get("train", {}))

    model_over = dict(file_cfg["model"])
    for key, flag in (("num_layers", args.num_layers), ("num_heads", args.num_heads),
                      ("dropout_p", args.dropout)):
        if flag is not None:
            model_over[key] = flag
    if args.no_image:
        model_over["no_image_ablation"] = True

    train_over = dict(file_cfg["train"])
    for key, flag in (("epochs", args.epochs), ("batch_size", args.batch_size),
                      ("learning_rate", args.learning_rate), ("seed", args.seed),
                      ("lmt_enabled", args.lmt), ("dtype", args.dtype)):
        if flag is not None:
            train_over[key] = flag

    model_config = _model_config_for_dataset(ds, model_over)
    train_config = TrainConfig.from_dict(train_over)
    model = LabelTransformer(model_config, label_names=ds.label_names,
                             rng=np.random.default_rng(train_config.seed))
    result = train(model, ds.features, ds.targets, train_config,
                   run_dir=Path(args.run_dir))
    final = result.loss_trace[-1][2]
    print(f"trained {train_config.epochs} epochs; final step loss {final!r}; "
          f"run dir {args.run_dir}")
    return 0


def _parse_epsilons(text: str) -> list[float]:
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = float(part)
        except ValueError as exc:
            raise CliError(f"--epsilon: not a number: {part!r}") from exc
        values.append(value / 100.0 if value > 1.0 else value)
    if not values:
        raise CliError("--epsilon: no values given")
    return values


def cmd_eval(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    ds_path = _require(args.dataset, "dataset")
    model = LabelTransformer.load(ckpt_path)
    ds = load_dataset(ds_path)

    mode = args.mode
    known_groups = None
    if args.known_groups is not None:
        known_groups = tuple(g.strip() for g in args.known_groups.split(",") if g.strip())
        mode = "extra"
    protocols = []
    if args.epsilon is not None:
        if mode not in (None, "partial"):
            raise CliError("--epsilon only applies to the partial protocol")
        for eps in _parse_epsilons(args.epsilon):
            protocols.append(EvalProtocol(
                mode="partial", epsilon=eps, selection_seed=args.selection_seed,
                threshold=args.threshold, top_k=args.top_k))
    else:
        protocols.append(EvalProtocol(
            mode=mode or "regular", known_groups=known_groups,
            selection_seed=args.selection_seed, threshold=args.threshold,
            top_k=args.top_k))

    reports = [evaluate(model, ds, p, batch_size=args.batch_size) for p in protocols]
    for report in reports:
        p = report.protocol
        eps = "" if p.epsilon is None else f" epsilon={p.epsilon!r}"
        print(f"{p.mode}{eps} mAP={report.mAP!r} "
              f"OF1={report.thresholded.overall_f1!r}")
    if args.out_csv is not None:
        write_reports_csv(reports, Path(args.out_csv))
    if args.out_json is not None:
        payload = [r.to_dict() for r in reports]
        Path(args.out_json).write_text(json.dumps(payload, sort_keys=True, indent=2))
    return 0


def _predict_payload(args) -> dict:
    payload: dict = {}
    if args.sample_id is not None:
        payload["sample_id"] = args.sample_id
    if args.features_json is not None:
        feat_path = _require(args.features_json, "features")
        try:
            payload["features"] = json.loads(feat_path.read_text())
        except json.JSONDecodeError as exc:
            raise CliError(f"features file {feat_path} is not valid JSON: {exc}")
    states = []
    for item in args.state or []:
        if "=" not in item:
            raise CliError(f"--state expects LABEL=STATE, got {item!r}")
        name, _, word = item.partition("=")
        states.append({"label": name, "state": word})
    if states:
        payload["states"] = states
    return payload


def cmd_predict(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    model = LabelTransformer.load(ckpt_path)
    ds = None
    if args.dataset is not None:
        ds = load_dataset(_require(args.dataset, "dataset"))
    try:
        features, states = resolve_request_inputs(_predict_payload(args), model, ds)
        response = intervene_response(model, features, states)
    except RequestError as exc:
        raise CliError(str(exc))
    if args.json:
        print(json.dumps(response))
        return 0
    width = max(len(n) for n in model.label_names)
    print(f"{'label':<{width}}  {'state':<8}  {'probability':>12}  {'baseline':>12}")
    for row, base in zip(response["labels"], response["baseline"]):
        print(f"{row['name']:<{width}}  {row['state']:<8}  "
              f"{row['probability']:>12.6f}  {base:>12.6f}")
    return 0


def cmd_intervene_serve(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    model = LabelTransformer.load(ckpt_path)
    ds = None
    if args.dataset is not None:
        ds = load_dataset(_require(args.dataset, "dataset"))
    ui_dir = None
    if args.ui_dir is not None:
        ui_dir = _require(args.ui_dir, "ui")
    server = build_server(model, ds, host=args.host, port=args.port, ui_dir=ui_dir)
    host, port = server.server_address[:2]
    print(f"intervention service listening on http://{host}:{port}")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_export_embeddings(args) -> int:
    ckpt_path = _require(args.checkpoint, "checkpoint")
    model = LabelTransformer.load(ckpt_path)
    out = Path(args.out)
    model.export_label_embeddings(out)
    print(f"wrote {model.config.num_labels} label embeddings to {out}")
    return 0


# ----------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelmask",
        description="Multi-label classifier with ternary label-state conditioning.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate-data", help="synthesize a dataset to disk")
    p.add_argument("--spec", required=True, help="JSON file of generator settings")
    p.add_argument("--out", required=True, help="output directory (train/ and test/)")
    p.add_argument("--seed", type=int, default=None)
    p.set_defaults(func=cmd_generate_data)

    p = sub.add_parser("train", help="train a model on a dataset directory")
    p.add_argument("--dataset", required=True)
    p.add_argument("--run-dir", required=True)
    p.add_argument("--config", default=None, help="JSON file with model/train sections")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--learning-rate", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lmt", type=_parse_bool, default=None,
                   help="label mask training on/off (default on)")
    p.add_argument("--num-layers", type=int, default=None)
    p.add_argument("--num-heads", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--no-image", action="store_true",
                   help="drop image tokens; labels attend only to each other")
    p.add_argument("--dtype", choices=("float32", "float64"), default=None)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint under a protocol")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--mode", choices=("regular", "partial", "extra"), default=None)
    p.add_argument("--epsilon", default=None,
                   help="comma list of known fractions (percent or fraction)")
    p.add_argument("--known-groups", default=None,
                   help="comma list of extra-label groups revealed as evidence")
    p.add_argument("--selection-seed", type=int, default=0)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--top-k", type=int, default=3)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--out-csv", default=None)
    p.add_argument("--out-json", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="per-label probabilities for one sample")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--sample-id", default=None)
    p.add_argument("--features-json", default=None,
                   help="JSON file holding a [h][w][d] feature grid")
    p.add_argument("--state", action="append", default=None, metavar="LABEL=STATE",
                   help="evidence state, repeatable; STATE is "
                        "unknown|negative|positive")
    p.add_argument("--json", action="store_true",
                   help="print the full response as JSON")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("intervene-serve", help="start the HTTP intervention service")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8752)
    p.add_argument("--ui-dir", default=None, help="static directory to serve at /")
    p.set_defaults(func=cmd_intervene_serve)

    p = sub.add_parser("export-embeddings", help="dump the label embedding table")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export_embeddings)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except (ConfigurationError, ProtocolError, FormatError, NumericsError,
            ShapeMismatchError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
