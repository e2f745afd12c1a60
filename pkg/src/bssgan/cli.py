"""Command-line entry point: ``bssgan {synth-data,train,eval,generate}``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure (NaN/Inf abort).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from bssgan import __version__
from bssgan.errors import BssGanError, ConfigError, DataError

log = logging.getLogger("bssgan")

MANIFEST_NAME = "run_manifest.json"


@dataclass
class RunManifest:
    command: str
    config_hash: str
    seed: int
    code_version: str = __version__
    started: str = ""
    finished: str = ""
    artifacts: list[str] = field(default_factory=list)

    def write(self, out_dir) -> Path:
        path = Path(out_dir) / MANIFEST_NAME
        path.write_text(json.dumps(asdict(self), indent=1, sort_keys=True) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def _artifacts(out_dir: Path) -> list[str]:
    return sorted(p.relative_to(out_dir).as_posix() for p in out_dir.rglob("*") if p.is_file() and p.name != MANIFEST_NAME)


def _ints(text: str, what: str) -> list[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"{what}: expected comma-separated integers, got {text!r}") from e


def _floats(text: str, what: str) -> list[float]:
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"{what}: expected comma-separated numbers, got {text!r}") from e


def _prepare_out(out: Path, force: bool) -> None:
    if out.exists() and any(out.iterdir()):
        if not force:
            raise ConfigError(f"{out} exists and is not empty (use --force to overwrite)")
        import shutil

        shutil.rmtree(out)
    out.mkdir(parents=True, exist_ok=True)


# ---------------------------------------------------------------- synth-data


def cmd_synth_data(args) -> int:
    from bssgan.data import SplitSpec, make_procedural, make_split, materialize

    counts = _ints(args.counts, "--counts")
    out = Path(args.out)
    _prepare_out(out, args.force)
    started = _now()
    index = make_procedural(counts, args.size, args.seed, args.contrast)
    if args.split:
        parts = _ints(args.split.replace(":", ","), "--split")
        if len(parts) != 2:
            raise ConfigError(f"--split must look like 2:1, got {args.split!r}")
        train, test = make_split(index, SplitSpec(parts[0], parts[1], args.seed))
        materialize(train, out, "train")
        materialize(test, out, "test")
    else:
        materialize(index, out, "all")
    info = {"counts": counts, "size": args.size, "seed": args.seed, "contrast": args.contrast, "split": args.split}
    (out / "dataset.json").write_text(json.dumps(info, indent=1, sort_keys=True) + "\n")
    RunManifest("synth-data", _hash(info), args.seed, started=started, finished=_now(), artifacts=_artifacts(out)).write(out)
    print(f"wrote {sum(counts)} images to {out}")
    return 0


# ---------------------------------------------------------------- train


OVERRIDES = ("pipeline", "epochs", "seed", "lr", "n_l", "c", "out_dir", "dataset_root", "image_size")


def load_config(path, overrides: dict | None = None):
    from bssgan.trainer import ExperimentConfig

    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as e:
        raise ConfigError(f"config file {path} not found") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a JSON object")
    raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return ExperimentConfig.from_dict(raw)


def _parse_set(items) -> dict:
    out = {}
    for item in items or ():
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            out[key] = json.loads(value)
        except json.JSONDecodeError:
            out[key] = value
    return out


def cmd_train(args) -> int:
    from bssgan.trainer import run_experiment

    overrides = {k: getattr(args, k, None) for k in OVERRIDES}
    overrides.update(_parse_set(args.set))
    config = load_config(args.config, overrides)
    out = Path(config.out_dir)
    _prepare_out(out, args.force)
    started = _now()
    result = run_experiment(config)
    RunManifest("train", config.fingerprint(), config.seed, started=started, finished=_now(), artifacts=_artifacts(out)).write(out)
    r = result.report
    print(f"{config.pipeline}: selected {result.selected['checkpoint']}; test TPR={r.tpr} TNR={r.tnr} accuracy={r.accuracy}")
    return 0


# ---------------------------------------------------------------- eval


def cmd_eval(args) -> int:
    from bssgan.data import ingest_dir
    from bssgan.evaluation import emit_report
    from bssgan.networks import discriminator_spec, load_network
    from bssgan.tensor.checkpoint import read_manifest
    from bssgan.trainer import evaluate

    ckpt = Path(args.checkpoint)
    meta = read_manifest(ckpt)["meta"]
    net = load_network(ckpt, "d", "discriminator")
    size = net.spec.input_shape[0]
    if args.config:
        config = load_config(args.config)
        expected = discriminator_spec(config.k, config.pipeline == "bss-gan", config.image_size)
        if expected.fingerprint() != net.spec.fingerprint():
            raise ConfigError(
                f"checkpoint network {net.spec.fingerprint()} does not match the config's {expected.fingerprint()} "
                f"(pipeline={config.pipeline}, k={config.k}, image_size={config.image_size})"
            )
    data = Path(args.data)
    split_dir = data / args.split if (data / args.split).is_dir() else data
    names = meta.get("class_names")
    index = ingest_dir(split_dir, size, names)
    k = net.spec.output_dim if meta.get("pipeline") != "bss-gan" else net.spec.output_dim - 1
    if index.k != k:
        raise ConfigError(f"checkpoint classifies {k} classes but {split_dir} has {index.k}")
    betas = _floats(args.betas, "--betas")
    report = evaluate(net, index, meta.get("pipeline", ""), ckpt.as_posix(), betas)
    out = Path(args.out) if args.out else ckpt / "eval"
    out.mkdir(parents=True, exist_ok=True)
    started = _now()
    emit_report(report, out, betas=sorted(set(betas) | set(range(1, 11))))
    RunManifest("eval", _hash({"checkpoint": ckpt.as_posix(), "data": data.as_posix(), "betas": betas}), 0, started=started, finished=_now(), artifacts=_artifacts(out)).write(out)
    print(json.dumps({"accuracy": report.accuracy, "tpr": report.tpr, "tnr": report.tnr, "f": report.f}))
    return 0


# ---------------------------------------------------------------- generate


def cmd_generate(args) -> int:
    from bssgan.data import write_image
    from bssgan.evaluation import save_grid
    from bssgan.networks import find_network
    from bssgan.sampling import synthesize

    if args.n < 1:
        raise ConfigError("--n must be positive")
    generator = find_network(args.checkpoint, "generator")
    out = Path(args.out)
    _prepare_out(out, args.force)
    started = _now()
    images = synthesize(generator, args.n, np.random.default_rng(args.seed))
    for i, img in enumerate(images):
        write_image(out / f"sample_{i:05d}.png", img)
    save_grid(images[:64], out / "grid.png")
    RunManifest("generate", _hash({"checkpoint": str(args.checkpoint), "n": args.n}), args.seed, started=started, finished=_now(), artifacts=_artifacts(out)).write(out)
    print(f"wrote {args.n} samples and grid.png to {out}")
    return 0


# ---------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bssgan", description="Balanced semi-supervised GAN lab")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth-data", help="write a procedural dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--counts", required=True, help="per-class totals, UD,CR[,SP]")
    s.add_argument("--size", type=int, default=32)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--split", default=None, help="e.g. 2:1 writes train/ and test/; default writes all/")
    s.add_argument("--contrast", type=float, default=0.4)
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_synth_data)

    t = sub.add_parser("train", help="train one pipeline from a JSON config")
    t.add_argument("--config", required=True)
    t.add_argument("--pipeline")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--n-l", dest="n_l", type=int)
    t.add_argument("--c", type=float)
    t.add_argument("--image-size", dest="image_size", type=int)
    t.add_argument("--out-dir", dest="out_dir")
    t.add_argument("--dataset-root", dest="dataset_root")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override any config key (JSON value)")
    t.add_argument("--force", action="store_true")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a labeled folder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--betas", default="2,5")
    e.add_argument("--config")
    e.add_argument("--out")
    e.set_defaults(fn=cmd_eval)

    g = sub.add_parser("generate", help="sample a trained generator")
    g.add_argument("--checkpoint", required=True)
    g.add_argument("--n", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(fn=cmd_generate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except BssGanError as e:
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
