"""Command-line entry points: generate / train / eval / detect / serve / audit.

Exit codes: 0 success, 1 user error (bad flags, bad files, failed audit),
2 internal error. Machine-readable JSON goes to stdout; human noise to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields, replace
from pathlib import Path

import numpy as np

from . import data as dt
from . import report as rp
from . import synth as sy
from . import trainer as tr
from .boxes import BoxXYWH
from .errors import FeatureFormatError, GenerationError
from .head import DecodeVariant
from .infer import InferConfig
from .matching import MatchVariant
from .model import Model, ModelConfig
from .service import (DEFAULT_TAU, RequestError, decode_png, run_detection,
                      serve, variant_views)

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{message}\n{self.format_usage()}")


def _emit(doc) -> None:
    print(json.dumps(doc, sort_keys=True))


def _load_config(path) -> dict:
    p = Path(path)
    if p.suffix == ".toml":
        with open(p, "rb") as f:
            return tomllib.load(f)
    return json.loads(p.read_text())


def _apply_section(cfg, section: dict):
    known = {f.name for f in fields(cfg)}
    unknown = set(section) - known
    if unknown:
        raise UsageError(f"unknown config keys {sorted(unknown)} for "
                         f"{type(cfg).__name__}")
    return replace(cfg, **section)


def _parse_box(text: str) -> BoxXYWH:
    parts = [float(v) for v in text.split(",")]
    if len(parts) != 4:
        raise UsageError(f"expected cx,cy,w,h, got {text!r}")
    return BoxXYWH(*parts)


def _parse_ints(text: str):
    return [int(v) for v in text.split(",") if v]


# --------------------------------------------------------------------------- #
# subcommands                                                                  #
# --------------------------------------------------------------------------- #

def cmd_generate(args) -> int:
    templates = sy.preset(args.preset, args.seed)
    overrides = {}
    if args.image_size:
        overrides["image_size"] = args.image_size
    if args.lattice:
        overrides["lattice"] = args.lattice
    if args.motif:
        overrides["motif"] = args.motif
    if args.patterns:
        overrides["patterns_per_image"] = args.patterns
    if args.jitter is not None:
        overrides["jitter"] = args.jitter
    if args.distractors is not None:
        overrides["distractors"] = args.distractors
    if args.instances is not None:
        overrides["n_instances"] = args.instances
    if args.lattice_shape:
        rows, cols = (int(v) for v in args.lattice_shape.split("x"))
        overrides["lattice_shape"] = (rows, cols)
    if overrides:
        templates = [replace(t, **overrides) for t in templates]
    cycle = args.edgeless.split(",") if args.edgeless else None
    anns = dt.write_dataset(args.out, templates, n=args.n, seed=args.seed,
                            edgeless_cycle=cycle)
    _emit({"out": str(args.out), "samples": len(anns), "seed": args.seed,
           "preset": args.preset})
    return 0


def _model_config_from_args(args, config: dict) -> ModelConfig:
    cfg = ModelConfig()
    if "model" in config:
        section = dict(config["model"])
        for key in ("match_variant", "decode_variant"):
            if key in section:
                section[key] = (MatchVariant(section[key])
                                if key == "match_variant"
                                else DecodeVariant(section[key]))
        if "tiny_widths" in section:
            section["tiny_widths"] = tuple(section["tiny_widths"])
        cfg = _apply_section(cfg, section)
    if args.depth:
        cfg = replace(cfg, feature_depth=args.depth)
    if args.widths:
        cfg = replace(cfg, tiny_widths=tuple(_parse_ints(args.widths)))
    if args.upsample is not None:
        cfg = replace(cfg, upsample_to=args.upsample)
    if args.match_variant:
        cfg = replace(cfg, match_variant=MatchVariant(args.match_variant))
    if args.decode_variant:
        cfg = replace(cfg, decode_variant=DecodeVariant(args.decode_variant))
    if args.dtype:
        cfg = replace(cfg, dtype=args.dtype)
    if args.freeze_backbone:
        cfg = replace(cfg, freeze_backbone=True)
    if args.no_template_grad:
        cfg = replace(cfg, template_grad=False)
    return cfg


def cmd_train(args) -> int:
    config = _load_config(args.config) if args.config else {}
    train_cfg = tr.TrainConfig()
    if "train" in config:
        train_cfg = _apply_section(train_cfg, config["train"])
    for name in ("lr", "batch_size", "steps", "seed", "loss_reduction",
                 "weight_decay", "eval_every", "eval_tau"):
        value = getattr(args, name)
        if value is not None:
            train_cfg = replace(train_cfg, **{name: value})

    anns = dt.load_dataset(args.data)
    eval_anns = dt.load_dataset(args.eval_data) if args.eval_data else None

    if args.resume and Path(args.out).exists():
        model, tensors = Model.load(args.out, dtype=args.dtype or "float32")
        opt_state = {k: v for k, v in tensors.items() if k.startswith("opt.")}
    else:
        model_cfg = _model_config_from_args(args, config)
        model = Model(model_cfg, np.random.default_rng(train_cfg.seed))
        opt_state = None

    result = tr.train(model, args.data, anns, train_cfg, eval_anns=eval_anns,
                      eval_dir=args.eval_data, checkpoint_path=args.out,
                      optimizer_state=opt_state)
    if args.log:
        result.write_log(args.log)
    if args.report_dir:
        rp.write_training_curves(result.log, args.report_dir)
    summary = {"checkpoint": str(args.out), "steps": train_cfg.steps,
               "params": model.param_count()}
    if result.log:
        summary["final_loss"] = result.log[-1].loss
        summary["final_loss_p"] = result.log[-1].loss_p
        summary["final_loss_b"] = result.log[-1].loss_b
    if eval_anns is not None:
        final = tr.evaluate_model(model, args.eval_data, eval_anns,
                                  InferConfig(tau=train_cfg.eval_tau),
                                  shots=train_cfg.eval_shots)
        summary["eval"] = final.to_dict()
        if args.report_dir:
            rp.write_eval_report(final, args.report_dir)
    _emit(summary)
    return 0


def cmd_eval(args) -> int:
    preds = dt.load_predictions(args.pred)
    gts = dt.load_annotations(args.gt)
    from .metrics import evaluate
    report = evaluate(preds, gts)
    if args.report_dir:
        rp.write_eval_report(report, args.report_dir, preds=preds, gts=gts)
    _emit(report.to_dict())
    return 0


def cmd_detect(args) -> int:
    model, _ = Model.load(args.model)
    views = variant_views(model)
    scales = _parse_ints(args.scales) if args.scales else None
    if args.data:
        if not args.out:
            raise UsageError("--data mode needs --out for the prediction dump")
        anns = dt.load_dataset(args.data)
        cfg = InferConfig(tau=args.tau if args.tau is not None else DEFAULT_TAU,
                          scales=scales)
        preds = tr.predict_dataset(model, args.data, anns, cfg,
                                   shots=args.shots)
        dt.save_predictions(args.out, preds)
        _emit({"out": str(args.out), "units": len(preds)})
        return 0
    if not args.image or not args.exemplar:
        raise UsageError("detect needs --image and --exemplar "
                         "(or --data/--out for batch mode)")
    image = decode_png(Path(args.image).read_bytes())
    exemplars = [_parse_box(e) for e in args.exemplar]
    response = run_detection(views, image, exemplars, tau=args.tau,
                             scales=scales, variant=args.variant,
                             aggregate=not args.no_aggregate)
    if args.render:
        from .infer import Detection
        dets = [Detection(box=BoxXYWH(*d["box"]), score=d["score"],
                          exemplar_id=d["exemplar_id"], scale_id=d["scale_id"])
                for d in response["detections"]]
        rp.render_detections(image, dets, exemplars, args.render)
    _emit(response)
    return 0


def cmd_serve(args) -> int:
    model, _ = Model.load(args.model)
    server = serve(model, host=args.host, port=args.port,
                   default_tau=args.tau if args.tau is not None else DEFAULT_TAU)
    print(f"serving on http://{args.host}:{server.server_address[1]} "
          f"(model {args.model})", file=sys.stderr)
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def cmd_audit(args) -> int:
    worst = 0.0
    failed = 0
    for seed in range(args.seed0, args.seed0 + args.seeds):
        model, sample = tr.build_audit_case(seed)
        report = tr.audit_gradients(model, sample, tolerance=args.tolerance,
                                    max_entries_per_tensor=args.entries,
                                    seed=seed)
        _emit(report.to_dict())
        worst = max(worst, report.max_rel_err)
        failed += 0 if report.passed else 1
    _emit({"seeds": args.seeds, "failed": failed, "worst_rel_err": worst})
    return 0 if failed == 0 else 1


# --------------------------------------------------------------------------- #
# parser                                                                       #
# --------------------------------------------------------------------------- #

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tmdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="render a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--preset", default="lattice-easy",
                   choices=["lattice-easy", "lattice-mixed", "bigram"])
    p.add_argument("--edgeless", help="comma list of crop modes to cycle, "
                                      "e.g. L,R")
    p.add_argument("--image-size", type=int)
    p.add_argument("--lattice", choices=["square", "hex", "frieze_row",
                                         "scattered"])
    p.add_argument("--motif", choices=["disc", "ring", "bigram", "texture"])
    p.add_argument("--patterns", type=int)
    p.add_argument("--jitter", type=float)
    p.add_argument("--distractors", type=int)
    p.add_argument("--instances", type=int)
    p.add_argument("--lattice-shape", help="ROWSxCOLS, e.g. 4x4")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a detector")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="checkpoint path (.tmrc)")
    p.add_argument("--eval-data")
    p.add_argument("--config", help="JSON or TOML file with train/model/infer "
                                    "sections")
    p.add_argument("--lr", type=float)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--loss-reduction", dest="loss_reduction",
                   choices=["mean", "sum"])
    p.add_argument("--weight-decay", dest="weight_decay", type=float)
    p.add_argument("--eval-every", dest="eval_every", type=int)
    p.add_argument("--eval-tau", dest="eval_tau", type=float)
    p.add_argument("--depth", type=int)
    p.add_argument("--widths", help="comma list, e.g. 16,32,64")
    p.add_argument("--upsample", type=int)
    p.add_argument("--match-variant", choices=[v.value for v in MatchVariant])
    p.add_argument("--decode-variant", choices=[v.value for v in DecodeVariant])
    p.add_argument("--dtype", choices=["float32", "float64"])
    p.add_argument("--freeze-backbone", action="store_true")
    p.add_argument("--no-template-grad", action="store_true")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--log", help="write per-step JSONL here")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a prediction dump")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True,
                   help="dataset directory or annotation JSON file")
    p.add_argument("--report-dir")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("detect", help="run detection")
    p.add_argument("--model", required=True)
    p.add_argument("--image")
    p.add_argument("--exemplar", action="append",
                   help="cx,cy,w,h (repeatable)")
    p.add_argument("--tau", type=float)
    p.add_argument("--scales", help="comma list of feature resolutions")
    p.add_argument("--variant", choices=[v.value for v in MatchVariant])
    p.add_argument("--no-aggregate", action="store_true",
                   help="use only the first exemplar")
    p.add_argument("--render", help="write a detection overlay PNG here")
    p.add_argument("--data", help="batch mode: dataset directory")
    p.add_argument("--out", help="batch mode: prediction dump path")
    p.add_argument("--shots", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("serve", help="start the HTTP detection service")
    p.add_argument("--model", required=True)
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=8765)
    p.add_argument("--tau", type=float)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("audit", help="gradient audit over random seeds")
    p.add_argument("--seeds", type=int, default=10)
    p.add_argument("--seed0", type=int, default=0)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--entries", type=int, default=10)
    p.set_defaults(func=cmd_audit)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(str(exc), file=sys.stderr)
        return 1
    except (ValueError, FileNotFoundError, GenerationError, FeatureFormatError,
            RequestError, IOError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        return 1
    except Exception as exc:  # pragma: no cover - internal failures
        print(f"internal error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
