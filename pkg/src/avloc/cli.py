"""Command-line front end binding the library into reproducible runs.

Exit codes: 2 for bad flags or invalid configuration, 3 for file problems,
4 for numeric failures (divergence, non-finite values). Every command is a
pure function of its flags, so identical invocations write identical bytes.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import attention, encoders, metrics, mining, objective, synthdata, trainer
from .encoders import EncoderConfig
from .synthdata import SynthConfig
from .trainer import TrainConfig


def _build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    parser = argparse.ArgumentParser(
        prog="avloc",
        description="Sound-source localization with hard-positive mining.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    commands: dict[str, argparse.ArgumentParser] = {}

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="key=value config file; flags win")
        commands[name] = p
        return p

    p = add("gen-data", "generate a synthetic dataset dump")
    p.add_argument("--n", type=int, default=200, help="number of samples")
    p.add_argument("--classes", type=int, default=10, help="number of latent classes")
    p.add_argument("--image-size", type=int, nargs=2, default=[32, 32],
                   metavar=("H", "W"))
    p.add_argument("--audio-size", type=int, nargs=2, default=[8, 16],
                   metavar=("HA", "WA"))
    p.add_argument("--object-size", type=int, default=16)
    p.add_argument("--noise-std", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--features", action="store_true",
                   help="also write encoded features to features.avf")
    p.add_argument("--params", help="checkpoint for --features (default: seeded init)")
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--patch-size", type=int, default=4)

    def add_train_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--epochs-stage1", type=int, default=10)
        p.add_argument("--epochs-stage2", type=int, default=25)
        p.add_argument("--batch-size", type=int, default=16)
        p.add_argument("--lr", type=float, default=0.015)
        p.add_argument("--epsilon", type=float, default=0.65)
        p.add_argument("--tau", type=float, default=0.03)
        p.add_argument("--k", type=int, default=1000,
                       help="mined positives per modality (clamped to n-1)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--stop-grad-mask", action="store_true",
                       help="treat pseudo-masks as constants in the backward pass")
        p.add_argument("--remine-every", type=int, default=0,
                       help="rebuild the index every N stage-2 epochs (0 = never)")
        p.add_argument("--mode", choices=list(trainer.MODES), default="hp")
        p.add_argument("--channels", type=int, default=16)
        p.add_argument("--patch-size", type=int, default=4)

    p = add("train", "run the two-stage schedule and write checkpoints")
    p.add_argument("--data", required=True, help="dataset dump directory")
    p.add_argument("--out", required=True, help="output directory")
    add_train_flags(p)

    p = add("mine", "build the neighbor index and write it as CSV")
    p.add_argument("--data", help="dataset dump directory (with --params)")
    p.add_argument("--params", help="encoder checkpoint for --data")
    p.add_argument("--features", help="precomputed AVF1 feature file")
    p.add_argument("--k", type=int, default=1000)
    p.add_argument("--out", required=True, help="index CSV path")

    p = add("eval", "evaluate localization and write a report CSV")
    p.add_argument("--data", help="dataset dump directory (with --params)")
    p.add_argument("--params", help="encoder checkpoint for --data")
    p.add_argument("--features", help="precomputed AVF1 feature file")
    p.add_argument("--boxes", help="boxes CSV for --features")
    p.add_argument("--image-size", type=int, nargs=2, metavar=("H", "W"),
                   help="image resolution for --features")
    p.add_argument("--out", required=True, help="report CSV path")

    p = add("ablate-k", "two-stage run per K value from a shared stage-1 checkpoint")
    p.add_argument("--data", required=True)
    p.add_argument("--k-list", default="2,19,60,150",
                   help="comma-separated K values")
    p.add_argument("--out", required=True, help="sweep CSV path")
    add_train_flags(p)

    p = add("compare", "train and evaluate several modes with matched seeds")
    p.add_argument("--data", required=True)
    p.add_argument("--modes", default="vanilla,random_hp,hp",
                   help="comma-separated modes")
    p.add_argument("--out", required=True, help="comparison CSV path")
    add_train_flags(p)

    p = add("export-maps", "write response maps as PGM files")
    p.add_argument("--data", required=True)
    p.add_argument("--params", required=True)
    p.add_argument("--pairs", help="audio:image id pairs, e.g. 1:1,1:2 (default i:i)")
    p.add_argument("--out", required=True, help="output directory")

    p = add("grad-check", "compare analytic gradients with finite differences")
    p.add_argument("--seed", default="1..20",
                   help="seed or inclusive seed range, e.g. 7 or 1..20")
    p.add_argument("--n", type=int, default=3, help="tiny dataset size")
    p.add_argument("--channels", type=int, default=4)
    p.add_argument("--mode", choices=list(trainer.MODES), default="hp")
    p.add_argument("--out", help="optional report file")

    return parser, commands


def _apply_config_file(path: str, command: argparse.ArgumentParser) -> None:
    """Load key=value lines as defaults for the subcommand; flags still win."""
    options = {}
    for action in command._actions:  # argparse has no public introspection
        for opt in action.option_strings:
            if opt.startswith("--"):
                options[opt[2:]] = action
    text = Path(path).read_text()
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        action = options.get(key)
        if action is None or key == "config":
            raise ValueError(f"{path}:{lineno}: unknown config key {key!r}")
        if isinstance(action, argparse._StoreTrueAction):
            if value.lower() not in ("true", "false", "1", "0"):
                raise ValueError(f"{path}:{lineno}: {key} must be true/false")
            parsed = value.lower() in ("true", "1")
        elif action.nargs == 2:
            parts = value.split()
            if len(parts) != 2:
                raise ValueError(f"{path}:{lineno}: {key} needs two values")
            parsed = [action.type(part) for part in parts]
        else:
            parsed = action.type(value) if action.type else value
            if action.choices and parsed not in action.choices:
                raise ValueError(
                    f"{path}:{lineno}: {key} must be one of {list(action.choices)}"
                )
        command.set_defaults(**{action.dest: parsed})


def _encoder_config(args: argparse.Namespace, dataset) -> EncoderConfig:
    _, hv, wv = dataset[0].image.shape
    _, ha, wa = dataset[0].audio.shape
    return EncoderConfig(
        channels=args.channels,
        patch_size=args.patch_size,
        image_size=(hv, wv),
        audio_size=(ha, wa),
    )


def _train_config(args: argparse.Namespace, encoder: EncoderConfig) -> TrainConfig:
    config = TrainConfig(
        epochs_stage1=args.epochs_stage1,
        epochs_stage2=args.epochs_stage2,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        epsilon=args.epsilon,
        tau=args.tau,
        k=args.k,
        seed=args.seed,
        stop_grad_mask=args.stop_grad_mask,
        remine_every=args.remine_every,
        mode=args.mode,
        encoder=encoder,
    )
    config.validate()
    return config


def _cmd_gen_data(args: argparse.Namespace) -> int:
    config = SynthConfig(
        n_samples=args.n,
        n_classes=args.classes,
        image_size=tuple(args.image_size),
        audio_size=tuple(args.audio_size),
        object_size=args.object_size,
        noise_std=args.noise_std,
        seed=args.seed,
    )
    config.validate()
    samples = synthdata.generate(config)
    synthdata.save_dataset(samples, args.out)
    if args.features:
        if args.params:
            params = encoders.load_params(args.params)
        else:
            params = encoders.init_params(
                EncoderConfig(
                    channels=args.channels,
                    patch_size=args.patch_size,
                    image_size=config.image_size,
                    audio_size=config.audio_size,
                ),
                args.seed,
            )
        audio_feats, _ = trainer.encode_dataset_pooled(params, samples)
        sites = encoders.encode_vision_batch(
            params, np.stack([s.image for s in samples])
        )
        h, w = params.config.grid_size
        vision = sites.transpose(0, 2, 1).reshape(len(samples), -1, h, w)
        features = synthdata.FeatureSet(
            ids=tuple(s.id for s in samples), audio=audio_feats, vision=vision
        )
        synthdata.save_features(features, Path(args.out) / "features.avf")
    print(f"wrote {len(samples)} samples to {args.out}")
    return 0


def _cmd_train(args: argparse.Namespace) -> int:
    dataset = synthdata.load_dataset(args.data)
    config = _train_config(args, _encoder_config(args, dataset))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        result = trainer.train_full(dataset, config)
    except trainer.DivergenceError as exc:
        trainer.save_checkpoint(exc.params, out / "aborted.avp", config)
        trainer.save_logs(exc.logs, out / "logs.csv")
        raise
    trainer.save_checkpoint(result.stage1_params, out / "stage1.avp", config)
    trainer.save_checkpoint(result.final_params, out / "final.avp", config)
    trainer.save_logs(result.logs, out / "logs.csv")
    if result.index is not None:
        mining.save_index(result.index, out / "index.csv")
    print(f"trained mode={config.mode}; wrote checkpoints to {out}")
    return 0


def _mined_inputs(args: argparse.Namespace):
    if args.features:
        feats = synthdata.load_features(args.features)
        return feats.audio, feats.vision.mean(axis=(2, 3)), len(feats.ids)
    if not (args.data and args.params):
        raise ValueError("mine needs either --features or both --data and --params")
    dataset = synthdata.load_dataset(args.data)
    params = encoders.load_params(args.params)
    audio_feats, pooled = trainer.encode_dataset_pooled(params, dataset)
    return audio_feats, pooled, len(dataset)


def _cmd_mine(args: argparse.Namespace) -> int:
    audio_feats, pooled, n = _mined_inputs(args)
    index = mining.build_index(audio_feats, pooled, min(args.k, n - 1))
    mining.save_index(index, args.out)
    print(f"mined K={index.k} neighbors for {n} samples -> {args.out}")
    return 0


def _cmd_eval(args: argparse.Namespace) -> int:
    if args.features:
        if not (args.boxes and args.image_size):
            raise ValueError("eval --features needs --boxes and --image-size")
        feats = synthdata.load_features(args.features)
        boxes = synthdata._load_boxes(Path(args.boxes))
        report = metrics.evaluate_features(feats, boxes, tuple(args.image_size))
    else:
        if not (args.data and args.params):
            raise ValueError("eval needs either --features or both --data and --params")
        dataset = synthdata.load_dataset(args.data)
        params = encoders.load_params(args.params)
        report = metrics.evaluate(params, dataset)
    metrics.save_report_csv(report, args.out)
    print(f"ciou={report.ciou!r},auc={report.auc!r}")
    return 0


def _parse_int_list(text: str, what: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ValueError(f"bad {what} list {text!r}: {exc}") from exc


def _cmd_ablate_k(args: argparse.Namespace) -> int:
    dataset = synthdata.load_dataset(args.data)
    config = _train_config(args, _encoder_config(args, dataset))
    k_list = _parse_int_list(args.k_list, "K")
    rows = metrics.ablate_k(dataset, config, k_list)
    metrics.save_sweep_csv(rows, args.out)
    for k, ciou, auc in rows:
        print(f"K={k}: ciou={ciou!r} auc={auc!r}")
    return 0


def _cmd_compare(args: argparse.Namespace) -> int:
    dataset = synthdata.load_dataset(args.data)
    config = _train_config(args, _encoder_config(args, dataset))
    modes = [m.strip() for m in args.modes.split(",") if m.strip()]
    for mode in modes:
        if mode not in trainer.MODES:
            raise ValueError(f"unknown mode {mode!r}")
    rows = metrics.compare_methods(dataset, config, modes)
    metrics.save_compare_csv(rows, args.out)
    for mode, ciou, auc in rows:
        print(f"{mode}: ciou={ciou!r} auc={auc!r}")
    return 0


def _cmd_export_maps(args: argparse.Namespace) -> int:
    dataset = synthdata.load_dataset(args.data)
    params = encoders.load_params(args.params)
    by_id = {s.id: s for s in dataset}
    if args.pairs:
        pairs = []
        for token in args.pairs.split(","):
            if ":" not in token:
                raise ValueError(f"bad pair {token!r}, expected i:j")
            i, j = (int(part) for part in token.split(":", 1))
            pairs.append((i, j))
    else:
        pairs = [(s.id, s.id) for s in dataset]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, j in pairs:
        if i not in by_id or j not in by_id:
            raise ValueError(f"pair {i}:{j} references unknown sample ids")
        resp = attention.response_map(
            encoders.encode_audio(params, by_id[i].audio),
            encoders.encode_vision(params, by_id[j].image),
        )
        attention.write_response_pgm(resp, out / f"resp_{i}_{j}.pgm")
    print(f"wrote {len(pairs)} maps to {out}")
    return 0


def _parse_seed_range(text: str) -> list[int]:
    if ".." in text:
        lo, hi = text.split("..", 1)
        seeds = list(range(int(lo), int(hi) + 1))
        if not seeds:
            raise ValueError(f"empty seed range {text!r}")
        return seeds
    return [int(text)]


def _cmd_grad_check(args: argparse.Namespace) -> int:
    seeds = _parse_seed_range(args.seed)
    if not 3 <= args.n <= 4:
        raise ValueError("grad-check uses tiny instances; --n must be 3 or 4")
    lines = []
    worst = 0.0
    for seed in seeds:
        synth = SynthConfig(
            n_samples=args.n,
            n_classes=2,
            image_size=(4, 4),
            audio_size=(2, 4),
            object_size=2,
            noise_std=0.5,
            seed=seed,
        )
        config = TrainConfig(
            seed=seed,
            mode=args.mode,
            encoder=EncoderConfig(
                channels=args.channels,
                patch_size=2,
                image_size=(4, 4),
                audio_size=(2, 4),
            ),
        )
        err = trainer.grad_check(synthdata.generate(synth), config)
        worst = max(worst, err)
        lines.append(f"seed {seed}: rel err {err:.3e}")
    lines.append(f"max relative error: {worst:.3e}")
    report = "\n".join(lines)
    print(report)
    if args.out:
        Path(args.out).write_text(report + "\n")
    return 0


_HANDLERS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "mine": _cmd_mine,
    "eval": _cmd_eval,
    "ablate-k": _cmd_ablate_k,
    "compare": _cmd_compare,
    "export-maps": _cmd_export_maps,
    "grad-check": _cmd_grad_check,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, commands = _build_parser()
    try:
        if "--config" in argv and argv.index("--config") + 1 < len(argv):
            command = argv[0] if argv and not argv[0].startswith("-") else None
            if command in commands:
                cfg_path = argv[argv.index("--config") + 1]
                _apply_config_file(cfg_path, commands[command])
        args = parser.parse_args(argv)
        return _HANDLERS[args.command](args)
    except (synthdata.DatasetFileError, encoders.CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (trainer.DivergenceError, objective.NonFiniteError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
