"""Command-line entry point: experiments, sweeps, probes, and reports.

One plain-text key-value config format feeds every verb; ``--set key=value``
overrides file values, and the effective config is echoed into the output
directory so each run documents itself.  Every emitted CSV carries a config
hash column tying rows back to the exact settings that produced them, and all
outputs are pure functions of (config, seeds, input data): rerunning a config
rewrites byte-identical CSVs.

Verbs:
  run                train methods across seeds, write metrics/summary/checkpoints
  sweep              rerun one method along a hyperparameter axis
  probe              train an affine domain classifier on frozen hidden states
  typicality-report  rank the most and least typical instances per domain
  synth-gen          write the synthetic corpus as TSV files
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .data import (
    MultiDomainDataset,
    SynthSpec,
    Vocabulary,
    build_vocab,
    load_corpus,
    subsample_train,
    synth_generate,
    write_corpus,
)
from .encoder import EncoderConfig, load_checkpoint, save_checkpoint
from .errors import (
    CheckpointError,
    ConfigError,
    MetatuneError,
    ParseError,
    SchemaError,
    SynthSpecError,
    VocabularyError,
)
from .meta import compute_prototypes, compute_typicality_table
from .plots import save_loss_curves, save_sweep_curve, save_typicality_histogram
from .trainer import (
    METHODS,
    TrainConfig,
    evaluate,
    pooled_features,
    rng_streams,
    run_method,
    train_domain_probe,
)

DEFAULTS: dict[str, str] = {
    "task": "synth",
    "task.name": "",
    "out": "runs/out",
    "methods": "mft_full",
    "seeds": "0",
    "data.path": "",
    "data.vocab_size": "2000",
    "data.train_fraction": "1.0",
    "data.subsample_seed": "7",
    "synth.num_domains": "3",
    "synth.num_classes": "3",
    "synth.shared_tokens_per_class": "30",
    "synth.domain_tokens_per_class": "30",
    "synth.noise_tokens": "300",
    "synth.instances_per_domain": "2500",
    "synth.transfer": "0.7",
    "synth.signal_tokens_per_instance": "4",
    "synth.noise_tokens_per_instance": "8",
    "synth.label_noise": "0.0",
    "synth.domain_noise_tokens": "0",
    "synth.domain_noise_fraction": "0.0",
    "synth.seed": "13",
    "enc.num_layers": "4",
    "enc.d_model": "64",
    "enc.num_heads": "4",
    "enc.ffn_dim": "128",
    "enc.max_len": "32",
    "train.alpha": "0.5",
    "train.lam": "0.1",
    "train.taps": "2,4",
    "train.j_prototypes": "1",
    "train.own_class_only": "false",
    "train.mft_epochs": "2",
    "train.ft_epochs": "4",
    "train.batch_size": "32",
    "train.learning_rate": "3e-4",
    "train.corruption": "shuffle",
    "train.adv_weight": "0.1",
    "train.adv_mode": "reverse",
    "train.stratified": "false",
    "train.reinit_label_head": "false",
    "sweep.axis": "lambda",
    "sweep.values": "",
    "probe.checkpoint": "",
    "probe.layer": "2",
    "probe.steps": "300",
    "probe.lr": "0.05",
    "probe.seed": "0",
    "probe.augment": "false",
    "probe.shuffle": "false",
    "report.checkpoint": "",
    "report.top_n": "5",
}

METRICS_HEADER = ("config_hash", "task", "method", "domain", "seed", "epoch",
                  "l_tlc", "l_sdc", "total", "accuracy")


# -- config handling ---------------------------------------------------------------


class Config:
    """Flat key-value settings with typed accessors and a content hash."""

    def __init__(self, values: dict[str, str]):
        for key in values:
            if key not in DEFAULTS:
                raise ConfigError(f"unknown config key {key!r}")
        self.values = dict(DEFAULTS)
        self.values.update(values)

    def get(self, key: str) -> str:
        return self.values[key]

    def get_int(self, key: str) -> int:
        try:
            return int(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be an integer, "
                              f"got {self.values[key]!r}") from None

    def get_float(self, key: str) -> float:
        try:
            return float(self.values[key])
        except ValueError:
            raise ConfigError(f"{key} must be a number, "
                              f"got {self.values[key]!r}") from None

    def get_bool(self, key: str) -> bool:
        value = self.values[key].lower()
        if value in ("true", "yes", "1"):
            return True
        if value in ("false", "no", "0"):
            return False
        raise ConfigError(f"{key} must be true or false, got {self.values[key]!r}")

    def get_int_tuple(self, key: str) -> tuple[int, ...]:
        raw = self.values[key].strip()
        if not raw:
            return ()
        try:
            return tuple(int(part) for part in raw.split(","))
        except ValueError:
            raise ConfigError(f"{key} must be comma-separated integers, "
                              f"got {raw!r}") from None

    def seeds(self) -> tuple[int, ...]:
        seeds = self.get_int_tuple("seeds")
        if not seeds:
            raise ConfigError("seed list must not be empty")
        return seeds

    def methods(self) -> tuple[str, ...]:
        names = tuple(p.strip() for p in self.get("methods").split(",") if p.strip())
        if not names:
            raise ConfigError("methods list must not be empty")
        for name in names:
            if name not in METHODS:
                raise ConfigError(f"unknown method {name!r}; "
                                  f"expected one of {METHODS}")
        return names

    def effective_text(self, include_out: bool = True) -> str:
        lines = [f"{key} = {self.values[key]}"
                 for key in sorted(self.values)
                 if include_out or key != "out"]
        return "\n".join(lines) + "\n"

    def hash(self) -> str:
        # The output directory is excluded so moving a run does not change
        # the hash that links its rows to its settings.
        digest = hashlib.sha256(self.effective_text(include_out=False).encode())
        return digest.hexdigest()[:12]


def parse_config_text(text: str, source: str = "<config>") -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        key, sep, value = stripped.partition("=")
        if not sep:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        values[key.strip()] = value.strip()
    return values


def load_config(path: Path | None, overrides: list[str]) -> Config:
    values: dict[str, str] = {}
    if path is not None:
        if not Path(path).exists():
            raise ConfigError(f"config file not found: {path}")
        values.update(parse_config_text(Path(path).read_text(encoding="utf-8"),
                                        str(path)))
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"--set needs KEY=VALUE, got {item!r}")
        values[key.strip()] = value.strip()
    return Config(values)


# -- shared assembly ---------------------------------------------------------------


def synth_spec_from(cfg: Config) -> SynthSpec:
    return SynthSpec(
        num_domains=cfg.get_int("synth.num_domains"),
        num_classes=cfg.get_int("synth.num_classes"),
        shared_tokens_per_class=cfg.get_int("synth.shared_tokens_per_class"),
        domain_tokens_per_class=cfg.get_int("synth.domain_tokens_per_class"),
        noise_tokens=cfg.get_int("synth.noise_tokens"),
        instances_per_domain=cfg.get_int("synth.instances_per_domain"),
        transfer=cfg.get_float("synth.transfer"),
        signal_tokens_per_instance=cfg.get_int("synth.signal_tokens_per_instance"),
        noise_tokens_per_instance=cfg.get_int("synth.noise_tokens_per_instance"),
        label_noise=cfg.get_float("synth.label_noise"),
        domain_noise_tokens=cfg.get_int("synth.domain_noise_tokens"),
        domain_noise_fraction=cfg.get_float("synth.domain_noise_fraction"),
        seed=cfg.get_int("synth.seed"),
    )


def load_dataset(cfg: Config) -> MultiDomainDataset:
    task = cfg.get("task")
    if task == "synth":
        dataset = synth_generate(synth_spec_from(cfg))
    elif task == "tsv":
        path = cfg.get("data.path")
        if not path:
            raise ConfigError("task tsv requires data.path")
        dataset = load_corpus(path)
    else:
        raise ConfigError(f"unknown task {task!r}; expected synth or tsv")
    fraction = cfg.get_float("data.train_fraction")
    if fraction != 1.0:
        dataset = subsample_train(dataset, fraction,
                                  cfg.get_int("data.subsample_seed"))
    return dataset


def train_config_from(cfg: Config, seed: int) -> TrainConfig:
    config = TrainConfig(
        alpha=cfg.get_float("train.alpha"),
        lam=cfg.get_float("train.lam"),
        taps=cfg.get_int_tuple("train.taps"),
        j_prototypes=cfg.get_int("train.j_prototypes"),
        own_class_only=cfg.get_bool("train.own_class_only"),
        mft_epochs=cfg.get_int("train.mft_epochs"),
        ft_epochs=cfg.get_int("train.ft_epochs"),
        batch_size=cfg.get_int("train.batch_size"),
        learning_rate=cfg.get_float("train.learning_rate"),
        seed=seed,
        corruption=cfg.get("train.corruption"),
        adv_weight=cfg.get_float("train.adv_weight"),
        adv_mode=cfg.get("train.adv_mode"),
        stratified=cfg.get_bool("train.stratified"),
        reinit_label_head=cfg.get_bool("train.reinit_label_head"),
    )
    config.validate()
    return config


def encoder_config_from(cfg: Config, vocab_size: int) -> EncoderConfig:
    config = EncoderConfig(
        vocab_size=vocab_size,
        num_layers=cfg.get_int("enc.num_layers"),
        d_model=cfg.get_int("enc.d_model"),
        num_heads=cfg.get_int("enc.num_heads"),
        ffn_dim=cfg.get_int("enc.ffn_dim"),
        max_len=cfg.get_int("enc.max_len"),
    )
    config.validate()
    return config


def task_label(cfg: Config) -> str:
    return cfg.get("task.name") or cfg.get("task")


def prepare_out_dir(cfg: Config, out_flag: Path | None) -> Path:
    out = Path(out_flag) if out_flag is not None else Path(cfg.get("out"))
    out.mkdir(parents=True, exist_ok=True)
    cfg.values["out"] = str(out)
    (out / "effective.cfg").write_text(cfg.effective_text(), encoding="utf-8")
    return out


def write_csv(path: Path, header: tuple[str, ...], rows: list[tuple]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def fmt(value: float) -> str:
    return repr(float(value))


# -- run --------------------------------------------------------------------------


def _shares_one_model(method: str) -> bool:
    return method in ("mix", "mtl", "adv")


def _checkpoint_paths(out: Path, method: str, seed: int,
                      dataset: MultiDomainDataset) -> dict[int, Path]:
    if _shares_one_model(method):
        path = out / f"{method}_seed{seed}.ckpt"
        return {k: path for k in range(dataset.num_domains)}
    return {k: out / f"{method}_seed{seed}_{dataset.domain_names[k]}.ckpt"
            for k in range(dataset.num_domains)}


def cmd_run(cfg: Config, out: Path) -> int:
    dataset = load_dataset(cfg)
    vocab = build_vocab(dataset, cfg.get_int("data.vocab_size"))
    vocab.save(out / "vocab.txt")
    enc_config = encoder_config_from(cfg, len(vocab))
    task = task_label(cfg)
    chash = cfg.hash()
    metrics: list[tuple] = []
    summary: dict[tuple[str, int], dict[int, float]] = {}

    for method in cfg.methods():
        for seed in cfg.seeds():
            train_cfg = train_config_from(cfg, seed)
            result = run_method(dataset, vocab, enc_config, train_cfg, method)
            for record in result.meta_records:
                metrics.append((chash, task, method, "all", seed, record.epoch,
                                fmt(record.report.l_tlc), fmt(record.report.l_sdc),
                                fmt(record.report.total), ""))
            for key in sorted(result.ft_records):
                name = "all" if key < 0 else dataset.domain_names[key]
                for record in result.ft_records[key]:
                    metrics.append((chash, task, method, name, seed, record.epoch,
                                    fmt(record.report.l_tlc), "",
                                    fmt(record.report.total), ""))
            eval_result = evaluate(result.models, dataset, vocab, seed=seed,
                                   config_hash=chash)
            final_epoch = max(train_cfg.mft_epochs, train_cfg.ft_epochs)
            for k in sorted(eval_result.per_domain):
                metrics.append((chash, task, method, dataset.domain_names[k],
                                seed, final_epoch, "", "", "",
                                fmt(eval_result.per_domain[k])))
                summary.setdefault((method, seed), {})[k] = eval_result.per_domain[k]
            metrics.append((chash, task, method, "macro", seed, final_epoch,
                            "", "", "", fmt(eval_result.macro)))

            paths = _checkpoint_paths(out, method, seed, dataset)
            for k, path in paths.items():
                save_checkpoint(result.models[k], path)
            if result.typicality is not None:
                result.typicality.save(out / f"{method}_seed{seed}_typicality.tsv")
                save_typicality_histogram(
                    [c for _, c in result.typicality.rows.values()],
                    out / f"{method}_seed{seed}_typicality.png",
                    f"{method} seed {seed}")
            if result.prototypes is not None:
                result.prototypes.save(out / f"{method}_seed{seed}_prototypes.tsv")
            trace = result.meta_records or [r for key in sorted(result.ft_records)
                                            for r in result.ft_records[key]]
            if trace:
                save_loss_curves(
                    list(range(len(trace))),
                    [r.report.l_tlc for r in trace],
                    [r.report.l_sdc for r in trace],
                    [r.report.total for r in trace],
                    out / f"{method}_seed{seed}_loss.png",
                    f"{method} seed {seed}")

    write_csv(out / "metrics.csv", METRICS_HEADER, metrics)

    summary_rows: list[tuple] = []
    seeds = cfg.seeds()
    for method in cfg.methods():
        cells = []
        for k in range(dataset.num_domains):
            mean = sum(summary[(method, s)][k] for s in seeds) / len(seeds)
            cells.append(mean)
        macro = sum(cells) / len(cells)
        summary_rows.append((chash, task, method,
                             *[fmt(c) for c in cells], fmt(macro)))
    header = ("config_hash", "task", "method",
              *dataset.domain_names, "macro")
    write_csv(out / "summary.csv", header, summary_rows)

    width = max(len(m) for m, _ in summary)
    print(f"task {task}  seeds {','.join(str(s) for s in seeds)}")
    print("  ".join(["method".ljust(width)] + dataset.domain_names + ["macro"]))
    for row in summary_rows:
        cells = [f"{float(v):.4f}" for v in row[3:]]
        print("  ".join([row[2].ljust(width)] + cells))
    return 0


# -- sweep ------------------------------------------------------------------------


_SWEEP_AXES = ("lambda", "mft_epochs", "taps")


def _sweep_values(cfg: Config) -> list[str]:
    raw = cfg.get("sweep.values").strip()
    values = [part.strip() for part in raw.split("|") if part.strip()]
    if not values:
        raise ConfigError("sweep.values must list at least one value "
                          "(separated by '|')")
    return values


def _apply_sweep_value(train_cfg: TrainConfig, axis: str,
                       value: str) -> tuple[TrainConfig, float]:
    """Returns the adjusted config plus the numeric x-coordinate for the curve."""
    if axis == "lambda":
        lam = float(value)
        return replace(train_cfg, lam=lam), lam
    if axis == "mft_epochs":
        epochs = int(value)
        return replace(train_cfg, mft_epochs=epochs), float(epochs)
    taps = tuple(int(part) for part in value.split(",") if part.strip())
    if not taps:
        raise ConfigError(f"empty tap list in sweep value {value!r}")
    return replace(train_cfg, taps=taps), float(len(taps))


def cmd_sweep(cfg: Config, out: Path) -> int:
    axis = cfg.get("sweep.axis")
    if axis not in _SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; "
                          f"expected one of {_SWEEP_AXES}")
    values = _sweep_values(cfg)
    methods = cfg.methods()
    if len(methods) != 1:
        raise ConfigError("sweep runs exactly one method at a time")
    method = methods[0]

    dataset = load_dataset(cfg)
    vocab = build_vocab(dataset, cfg.get_int("data.vocab_size"))
    enc_config = encoder_config_from(cfg, len(vocab))
    chash = cfg.hash()
    task = task_label(cfg)

    rows: list[tuple] = []
    xs: list[float] = []
    seeds_flat: list[int] = []
    macros: list[float] = []
    for value in values:
        for seed in cfg.seeds():
            train_cfg, x = _apply_sweep_value(train_config_from(cfg, seed),
                                              axis, value)
            train_cfg.validate()
            result = run_method(dataset, vocab, enc_config, train_cfg, method)
            macro = evaluate(result.models, dataset, vocab).macro
            rows.append((chash, task, method, axis, value, seed, fmt(macro)))
            xs.append(x)
            seeds_flat.append(seed)
            macros.append(macro)
    write_csv(out / "sweep.csv",
              ("config_hash", "task", "method", "axis", "value", "seed",
               "macro_accuracy"), rows)
    save_sweep_curve(xs, seeds_flat, macros, out / "sweep.png", axis)
    for row in rows:
        print(f"{axis}={row[4]} seed={row[5]} macro={float(row[6]):.4f}")
    return 0


# -- probe ------------------------------------------------------------------------


def _load_run_artifacts(cfg: Config, checkpoint_key: str):
    path = cfg.get(checkpoint_key)
    if not path:
        raise ConfigError(f"{checkpoint_key} must point at a checkpoint")
    state = load_checkpoint(path)
    dataset = load_dataset(cfg)
    vocab_path = Path(path).parent / "vocab.txt"
    if vocab_path.exists():
        vocab = Vocabulary.load(vocab_path)
    else:
        vocab = build_vocab(dataset, cfg.get_int("data.vocab_size"))
    if len(vocab) != state.config.vocab_size:
        raise CheckpointError(
            f"vocabulary size {len(vocab)} does not match the checkpoint's "
            f"{state.config.vocab_size}")
    return state, dataset, vocab


def cmd_probe(cfg: Config, out: Path) -> int:
    state, dataset, vocab = _load_run_artifacts(cfg, "probe.checkpoint")
    layer = cfg.get_int("probe.layer")
    augment = cfg.get_bool("probe.augment")
    train_x, train_y = pooled_features(state, dataset, vocab, layer, "train",
                                       add_domain_embedding=augment)
    test_x, test_y = pooled_features(state, dataset, vocab, layer, "test",
                                     add_domain_embedding=augment)
    if cfg.get_bool("probe.shuffle"):
        rng = np.random.default_rng(cfg.get_int("probe.seed"))
        train_y = rng.permutation(train_y)
        test_y = rng.permutation(test_y)
    accuracy = train_domain_probe(train_x, train_y, test_x, test_y,
                                  dataset.num_domains,
                                  steps=cfg.get_int("probe.steps"),
                                  lr=cfg.get_float("probe.lr"))
    write_csv(out / "probe.csv",
              ("config_hash", "task", "layer", "augmented", "shuffled",
               "accuracy"),
              [(cfg.hash(), task_label(cfg), layer,
                str(augment).lower(), cfg.get("probe.shuffle").lower(),
                fmt(accuracy))])
    print(f"layer {layer} domain-probe accuracy: {accuracy:.4f}")
    return 0


# -- typicality report -------------------------------------------------------------


def cmd_typicality_report(cfg: Config, out: Path) -> int:
    state, dataset, vocab = _load_run_artifacts(cfg, "report.checkpoint")
    top_n = cfg.get_int("report.top_n")
    if top_n < 1:
        raise ConfigError("report.top_n must be at least 1")
    prototypes = compute_prototypes(
        dataset, state, vocab, j=cfg.get_int("train.j_prototypes"),
        rng=rng_streams(cfg.seeds()[0])["kmeans"])
    table = compute_typicality_table(
        dataset, state, vocab, prototypes, cfg.get_float("train.alpha"),
        own_class_only=cfg.get_bool("train.own_class_only"))
    by_uid = {i.uid: i for i in dataset.split("train")}

    rows: list[tuple] = []
    chash = cfg.hash()
    for k in range(dataset.num_domains):
        members = sorted(
            (i for i in dataset.split("train") if i.domain == k),
            key=lambda i: (table.rows[i.uid][1], i.uid))
        n = min(top_n, len(members))
        if n < top_n:
            print(f"warning: domain {dataset.domain_names[k]} has only "
                  f"{len(members)} instances; clipping top_n to {n}",
                  file=sys.stderr)
        extremes = [("low", rank, inst) for rank, inst in enumerate(members[:n])]
        extremes += [("high", rank, inst)
                     for rank, inst in enumerate(reversed(members[-n:]))]
        for kind, rank, inst in extremes:
            raw, clamped = table.rows[inst.uid]
            rows.append((chash, dataset.domain_names[k], kind, rank, inst.uid,
                         fmt(raw), fmt(clamped), by_uid[inst.uid].text))
    write_csv(out / "typicality_report.csv",
              ("config_hash", "domain", "kind", "rank", "uid", "raw", "clamped",
               "text"), rows)
    table.save(out / "typicality.tsv")
    save_typicality_histogram([c for _, c in table.rows.values()],
                              out / "typicality.png", "typicality scores")
    for row in rows:
        print(f"{row[1]} {row[2]} #{row[3]} uid={row[4]} t={float(row[6]):.4f} "
              f"{row[7][:60]}")
    return 0


# -- synth-gen ---------------------------------------------------------------------


def cmd_synth_gen(cfg: Config, out: Path) -> int:
    dataset = synth_generate(synth_spec_from(cfg))
    write_corpus(dataset, out)
    counts = {split: len(dataset.split(split)) for split in ("train", "dev", "test")}
    print(f"wrote {counts['train']}/{counts['dev']}/{counts['test']} "
          f"train/dev/test instances for {dataset.num_domains} domains to {out}")
    return 0


# -- entry point -------------------------------------------------------------------


_COMMANDS = {
    "run": cmd_run,
    "sweep": cmd_sweep,
    "probe": cmd_probe,
    "typicality-report": cmd_typicality_report,
    "synth-gen": cmd_synth_gen,
}

_HELP = {
    "run": "train the configured methods across seeds and write metrics",
    "sweep": "rerun one method along a hyperparameter axis",
    "probe": "train a domain classifier on frozen hidden states",
    "typicality-report": "rank extreme-typicality training instances",
    "synth-gen": "generate the synthetic corpus as TSV files",
}


def _error_exit(category: str, exc: Exception) -> int:
    print(f"error: {category}: {exc}", file=sys.stderr)
    return {"config": 2, "data": 3, "checkpoint": 4}.get(category, 1)


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="metatune",
        description="Meta fine-tuning experiments on a miniature encoder.")
    subparsers = parser.add_subparsers(dest="command", required=True)
    for verb in _COMMANDS:
        sub = subparsers.add_parser(verb, help=_HELP[verb])
        sub.add_argument("--config", type=Path, default=None,
                         help="key-value config file")
        sub.add_argument("--set", dest="overrides", action="append",
                         default=[], metavar="KEY=VALUE",
                         help="override a config value (repeatable)")
        sub.add_argument("--out", type=Path, default=None,
                         help="output directory (overrides the config)")
    args = parser.parse_args(argv)

    try:
        cfg = load_config(args.config, args.overrides)
        out = prepare_out_dir(cfg, args.out)
        return _COMMANDS[args.command](cfg, out)
    except (ConfigError, SynthSpecError) as exc:
        return _error_exit("config", exc)
    except (ParseError, SchemaError, VocabularyError) as exc:
        return _error_exit("data", exc)
    except CheckpointError as exc:
        return _error_exit("checkpoint", exc)
    except MetatuneError as exc:
        return _error_exit("run", exc)


if __name__ == "__main__":
    sys.exit(main())
