"""Command line entry point: ``tslstm {synth,train,gradcheck,caption,eval,ablate-ne}``.

Configuration is a JSON file with the sections below; every key is optional
and unknown keys are rejected. Command-line flags override file values,
which override built-in defaults::

    {
      "seed": 0,                      # copied into synth.seed and train.seed
      "synth":  {... SynthConfig ...},
      "train":  {... TrainConfig ...},
      "decode": {"beam_width": 5, "max_len": 30, "length_normalize": false, "split": "test"},
      "gradcheck": {... GradCheckConfig ..., "n_e_values": [1, 2, 3]},
      "ablation": {"values": [1, 3, 30]},
      "paths":  {"data": "data/", "out": "runs/"}
    }

Exit codes: 0 success, 1 invalid configuration, 2 runtime failure,
3 gradient check failure.
"""

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

from . import __version__, data, decoder, metrics
from .errors import ConfigError, LoadError, TsLstmError
from .model import context
from .training import (Checkpoint, GradCheckConfig, TrainConfig, config_from_dict,
                       gradient_check, train)
from .vocab import decode_tokens

log = logging.getLogger("tslstm")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_GRADCHECK = 0, 1, 2, 3


@dataclass
class DecodeConfig:
    beam_width: int = 5
    max_len: int = 30
    length_normalize: bool = False
    split: str = "test"

    def validate(self):
        if self.beam_width < 1 or self.max_len < 1:
            raise ConfigError("beam_width and max_len must be >= 1")
        if self.split not in data.SPLITS:
            raise ConfigError(f"split must be one of {data.SPLITS}")
        return self


@dataclass
class GradCheckSection(GradCheckConfig):
    n_e_values: List[int] = field(default_factory=lambda: [1, 2, 3])


@dataclass
class PathsConfig:
    data: Optional[str] = None
    out: Optional[str] = None


@dataclass
class RunConfig:
    seed: Optional[int] = None
    synth: data.SynthConfig = field(default_factory=data.SynthConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    gradcheck: GradCheckSection = field(default_factory=GradCheckSection)
    ablation_values: List[int] = field(default_factory=lambda: [1, 3, 30])
    paths: PathsConfig = field(default_factory=PathsConfig)

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "synth": data.synth_config_dict(self.synth),
            "train": asdict(self.train),
            "decode": asdict(self.decode),
            "gradcheck": asdict(self.gradcheck),
            "ablation": {"values": list(self.ablation_values)},
            "paths": asdict(self.paths),
            "code_version": __version__,
        }


_SECTIONS = {"seed", "synth", "train", "decode", "gradcheck", "ablation", "paths"}


def load_run_config(path: Optional[str], args: argparse.Namespace) -> RunConfig:
    raw = {}
    if path is not None:
        try:
            raw = json.loads(Path(path).read_text(encoding="utf-8"))
        except OSError as exc:
            raise ConfigError(f"{path}: cannot read config ({exc.strerror})") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: malformed JSON at offset {exc.pos}") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - _SECTIONS - {"code_version"})
    if unknown:
        raise ConfigError(f"unknown config sections: {unknown}")
    ablation = raw.get("ablation", {})
    if set(ablation) - {"values"}:
        raise ConfigError(f"unknown keys in ablation: {sorted(set(ablation) - {'values'})}")
    try:
        cfg = RunConfig(
            seed=raw.get("seed"),
            synth=config_from_dict(data.SynthConfig, raw.get("synth", {}), "synth"),
            train=config_from_dict(TrainConfig, raw.get("train", {}), "train"),
            decode=config_from_dict(DecodeConfig, raw.get("decode", {}), "decode"),
            gradcheck=config_from_dict(GradCheckSection, raw.get("gradcheck", {}), "gradcheck"),
            ablation_values=list(ablation.get("values", [1, 3, 30])),
            paths=config_from_dict(PathsConfig, raw.get("paths", {}), "paths"),
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc

    # flags win over the file
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if cfg.seed is not None:
        cfg.synth.seed = cfg.seed
        cfg.train.seed = cfg.seed
    if getattr(args, "beam_width", None) is not None:
        cfg.decode.beam_width = args.beam_width
    if getattr(args, "ne", None) is not None:
        cfg.train.n_e = args.ne
    if getattr(args, "out", None) is not None:
        cfg.paths.out = args.out
    if getattr(args, "data", None) is not None:
        cfg.paths.data = args.data
    if getattr(args, "split", None) is not None:
        cfg.decode.split = args.split
    if getattr(args, "values", None) is not None:
        cfg.ablation_values = args.values

    cfg.synth.validate()
    cfg.train.validate()
    cfg.decode.validate()
    base = {k: v for k, v in asdict(cfg.gradcheck).items() if k != "n_e_values"}
    if not cfg.gradcheck.n_e_values:
        raise ConfigError("gradcheck.n_e_values must not be empty")
    for n_e in cfg.gradcheck.n_e_values:
        GradCheckConfig(**{**base, "n_e": n_e}).validate()
    if not cfg.ablation_values or any(int(v) < 1 for v in cfg.ablation_values):
        raise ConfigError("ablation values must be positive segment counts")
    return cfg


def _require(value, what: str):
    if value is None:
        raise ConfigError(f"missing {what}")
    return value


def _manifest_path(cfg: RunConfig) -> Path:
    p = Path(_require(cfg.paths.data, "paths.data (dataset directory or manifest)"))
    return p / "manifest.json" if p.is_dir() else p


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _check_segments(ds: data.Dataset, n_e: int):
    short = min(s.features.shape[1] for s in ds.samples.values())
    if n_e > short:
        raise ConfigError(f"n_e={n_e} exceeds the shortest video ({short} frames)")


# --- commands ----------------------------------------------------------------

def cmd_synth(cfg: RunConfig) -> int:
    out = Path(_require(cfg.paths.out or cfg.paths.data, "--out (dataset directory)"))
    ds = data.generate_synthetic(cfg.synth)
    data.save_dataset(ds, out)
    _write_json(out / "synth_config.json", {"code_version": __version__,
                                            "synth": data.synth_config_dict(cfg.synth)})
    n_frames = [s.features.shape[1] for s in ds.samples.values()]
    print(f"wrote {len(ds.samples)} videos to {out}")
    print(f"  feature_dim {ds.feature_dim}, frames {min(n_frames)}..{max(n_frames)}")
    print("  splits " + ", ".join(f"{k}={len(v)}" for k, v in ds.splits.items()))
    return EXIT_OK


def run_training(cfg: RunConfig, ds: data.Dataset, out: Path, resume: Optional[Checkpoint] = None):
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_json())
    result = train(ds, cfg.train, resume=resume, checkpoint_path=out / "checkpoint.json")
    history = list(result.log)
    log_path = out / "train_log.json"
    if resume is not None and log_path.exists():
        history = json.loads(log_path.read_text(encoding="utf-8")).get("epochs", []) + history
    _write_json(log_path, {"code_version": __version__, "config": cfg.to_json(), "epochs": history})
    return result


def cmd_train(cfg: RunConfig, resume_path: Optional[str] = None) -> int:
    ds = data.load_dataset(_manifest_path(cfg))
    _check_segments(ds, cfg.train.n_e)
    out = Path(_require(cfg.paths.out, "--out (run directory)"))
    resume = Checkpoint.load(resume_path) if resume_path else None
    result = run_training(cfg, ds, out, resume)
    last = result.log[-1] if result.log else {}
    print(f"trained {result.checkpoint.epoch} epochs; best epoch {result.checkpoint.best_epoch}; "
          f"val loss {last.get('val_loss', float('nan')):.4f}, "
          f"val perplexity {last.get('val_perplexity', float('nan')):.4f}")
    print(f"checkpoint: {out / 'checkpoint.json'}")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    ok = True
    reports = []
    base = {k: v for k, v in asdict(cfg.gradcheck).items() if k != "n_e_values"}
    for n_e in cfg.gradcheck.n_e_values:
        gc = GradCheckConfig(**{**base, "n_e": n_e})
        if cfg.seed is not None:
            gc.seed = cfg.seed
        report = gradient_check(gc)
        print(report.format())
        reports.append(report.to_json())
        ok &= report.passed
    if cfg.paths.out:
        out = Path(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        _write_json(out / "gradcheck.json", {"code_version": __version__, "config": cfg.to_json(),
                                             "passed": ok, "reports": reports})
    return EXIT_OK if ok else EXIT_GRADCHECK


def caption_videos(ckpt: Checkpoint, videos, dec: DecodeConfig):
    params = ckpt.model
    if videos and videos[0].features.shape[0] != params.enc.input_size:
        raise LoadError(f"checkpoint expects feature width {params.enc.input_size}, "
                          f"dataset has {videos[0].features.shape[0]}")
    caps, scores = {}, {}
    for v in videos:
        y = context(v.features, ckpt.config.n_e, params)
        best = decoder.beam_search_ranked(y, params, dec.beam_width, dec.max_len,
                                          length_normalize=dec.length_normalize)[0]
        caps[v.id] = decode_tokens(best.tokens, ckpt.vocab)
        scores[v.id] = best.log_prob
    return caps, scores


def cmd_caption(cfg: RunConfig, checkpoint: Optional[str]) -> int:
    ds = data.load_dataset(_manifest_path(cfg))
    out = Path(_require(cfg.paths.out, "--out"))
    ckpt_path = Path(checkpoint) if checkpoint else out / "checkpoint.json"
    ckpt = Checkpoint.load(ckpt_path)
    _check_segments(ds, ckpt.config.n_e)
    caps, scores = caption_videos(ckpt, ds.split(cfg.decode.split), cfg.decode)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"captions_{cfg.decode.split}.json"
    _write_json(path, {"code_version": __version__, "config": cfg.to_json(),
                       "checkpoint": str(ckpt_path), "split": cfg.decode.split,
                       "captions": caps, "log_probs": scores})
    print(f"wrote {len(caps)} captions to {path}")
    return EXIT_OK


def read_captions(path) -> Dict[str, str]:
    try:
        obj = json.loads(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read captions ({exc.strerror})") from exc
    return obj["captions"] if "captions" in obj else obj


def cmd_eval(cfg: RunConfig, captions_path: str) -> int:
    ds = data.load_dataset(_manifest_path(cfg))
    outputs = read_captions(captions_path)
    refs = ds.captions(cfg.decode.split)
    report = metrics.evaluate(outputs, refs)
    report.meta = {"code_version": __version__, "config": cfg.to_json(),
                   "captions": str(captions_path), "split": cfg.decode.split}
    print(report.table(Path(captions_path).stem))
    if cfg.paths.out:
        out = Path(cfg.paths.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"report_{cfg.decode.split}.json").write_text(report.dumps() + "\n", encoding="utf-8")
    return EXIT_OK


ABLATION_HEAD = ["model", "B@1", "B@2", "B@3", "B@4", "M", "C"]


def ablation_row(n_e: int, report: metrics.MetricReport) -> List[str]:
    return ([f"TS-LSTM(N_e={n_e})"] + [f"{100 * b:.1f}" for b in report.bleu]
            + ["-", f"{100 * report.cider:.1f}"])


def cmd_ablate_ne(cfg: RunConfig) -> int:
    ds = data.load_dataset(_manifest_path(cfg))
    for n_e in cfg.ablation_values:
        _check_segments(ds, n_e)
    out = Path(_require(cfg.paths.out, "--out"))
    rows, results = [], []
    for n_e in cfg.ablation_values:
        run_cfg = RunConfig(**{**cfg.__dict__})
        run_cfg.train = TrainConfig(**{**asdict(cfg.train), "n_e": n_e})
        result = run_training(run_cfg, ds, out / f"ne_{n_e}")
        caps, _ = caption_videos(result.checkpoint, ds.split(cfg.decode.split), cfg.decode)
        report = metrics.evaluate(caps, ds.captions(cfg.decode.split))
        rows.append(ablation_row(n_e, report))
        results.append({"n_e": n_e, "epochs": result.checkpoint.epoch,
                        "best_epoch": result.checkpoint.best_epoch,
                        "best_val_loss": -result.checkpoint.best_score
                        if cfg.train.early_stop_metric == "loss" else None,
                        **report.to_json()["metrics"]})
        print(f"N_e={n_e}: " + " ".join(rows[-1][1:]), flush=True)
    table = metrics.format_table(ABLATION_HEAD, rows)
    print(table)
    _write_json(out / "ablation.json", {"code_version": __version__, "config": cfg.to_json(),
                                        "split": cfg.decode.split, "columns": ABLATION_HEAD,
                                        "rows": results})
    (out / "ablation.txt").write_text(table + "\n", encoding="utf-8")
    return EXIT_OK


# --- argument parsing --------------------------------------------------------

def _int_list(text: str) -> List[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tslstm", description=__doc__.split("\n")[0])
    p.add_argument("--verbose", "-v", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data_flag=True):
        sp.add_argument("--config", metavar="PATH")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", metavar="DIR")
        if data_flag:
            sp.add_argument("--data", metavar="PATH", help="dataset directory or manifest.json")
        return sp

    common(sub.add_parser("synth", help="write a synthetic dataset"), data_flag=False)
    sp = common(sub.add_parser("train", help="train a model"))
    sp.add_argument("--ne", type=int)
    sp.add_argument("--resume", metavar="CHECKPOINT")
    common(sub.add_parser("gradcheck", help="finite-difference gradient check"), data_flag=False)
    sp = common(sub.add_parser("caption", help="caption a dataset split"))
    sp.add_argument("--checkpoint", metavar="PATH")
    sp.add_argument("--beam-width", type=int)
    sp.add_argument("--split", choices=data.SPLITS)
    sp = common(sub.add_parser("eval", help="score captions against references"))
    sp.add_argument("--captions", metavar="PATH", required=True)
    sp.add_argument("--split", choices=data.SPLITS)
    sp = common(sub.add_parser("ablate-ne", help="train and score one model per segment count"))
    sp.add_argument("--values", type=_int_list)
    sp.add_argument("--ne", type=int, help=argparse.SUPPRESS)
    sp.add_argument("--beam-width", type=int)
    sp.add_argument("--split", choices=data.SPLITS)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = load_run_config(args.config, args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg, args.resume)
        if args.command == "gradcheck":
            return cmd_gradcheck(cfg)
        if args.command == "caption":
            return cmd_caption(cfg, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(cfg, args.captions)
        if args.command == "ablate-ne":
            return cmd_ablate_ne(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TsLstmError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
