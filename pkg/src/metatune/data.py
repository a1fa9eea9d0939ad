"""Corpora, vocabulary, batching, and the synthetic multi-domain task.

A corpus is a directory of tab-separated files (train.tsv required, dev.tsv and
test.tsv optional) with one instance per line:

    domain<TAB>label<TAB>segment1[<TAB>segment2]

Domain and label names are discovered from the training split; the other splits
must not introduce new names.  Tokenization is lowercased whitespace splitting.
Ids 0..3 are reserved for [PAD], [CLS], [SEP], [UNK] in every vocabulary.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ParseError, SchemaError, ShapeError, SynthSpecError

PAD, CLS, SEP, UNK = "[PAD]", "[CLS]", "[SEP]", "[UNK]"
PAD_ID, CLS_ID, SEP_ID, UNK_ID = 0, 1, 2, 3
RESERVED_TOKENS = (PAD, CLS, SEP, UNK)

SPLIT_NAMES = ("train", "dev", "test")


@dataclass(frozen=True)
class Instance:
    uid: int
    domain: int
    label: int
    text: str
    text2: str | None = None


@dataclass
class TokenBatch:
    """A batch of encoded instances; position 0 of every row is [CLS]."""

    ids: np.ndarray      # [B x T] int64
    mask: np.ndarray     # [B x T] 0/1 int64
    labels: np.ndarray   # [B]
    domains: np.ndarray  # [B]
    uids: np.ndarray     # [B]

    def __post_init__(self):
        b, t = self.ids.shape
        for name in ("labels", "domains", "uids"):
            if getattr(self, name).shape != (b,):
                raise ShapeError(f"{name} must have shape ({b},)")
        if self.mask.shape != (b, t):
            raise ShapeError(f"mask shape {self.mask.shape} != ids shape {(b, t)}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ShapeError("mask entries must be 0 or 1")
        if not np.all(self.mask[:, 0] == 1) or not np.all(self.ids[:, 0] == CLS_ID):
            raise ShapeError("position 0 must be an active [CLS] token")

    def __len__(self) -> int:
        return self.ids.shape[0]


def tokenize(text: str) -> list[str]:
    return text.lower().split()


class Vocabulary:
    """Token ids ordered by frequency (ties broken lexicographically)."""

    def __init__(self, tokens: list[str]):
        if list(tokens[:4]) != list(RESERVED_TOKENS):
            raise SchemaError("vocabulary must start with the four reserved tokens")
        self.id_to_token = list(tokens)
        self.token_to_id = {t: i for i, t in enumerate(tokens)}
        if len(self.token_to_id) != len(tokens):
            raise SchemaError("vocabulary contains duplicate tokens")

    def __len__(self) -> int:
        return len(self.id_to_token)

    def lookup(self, token: str) -> int:
        return self.token_to_id.get(token, UNK_ID)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.id_to_token), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        return cls(lines)


def build_vocab(dataset: "MultiDomainDataset", max_size: int) -> Vocabulary:
    """Count tokens in the training split and keep the most frequent.

    ``max_size`` bounds the total vocabulary including the four reserved ids.
    """
    if max_size < len(RESERVED_TOKENS):
        raise SchemaError(f"max_size must be at least {len(RESERVED_TOKENS)}")
    counts: dict[str, int] = {}
    for inst in dataset.split("train"):
        for seg in (inst.text, inst.text2):
            if seg is None:
                continue
            for tok in tokenize(seg):
                counts[tok] = counts.get(tok, 0) + 1
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    keep = [tok for tok, _ in ranked[: max_size - len(RESERVED_TOKENS)]]
    return Vocabulary(list(RESERVED_TOKENS) + keep)


def encode_instance(inst: Instance, vocab: Vocabulary, max_len: int) -> tuple[np.ndarray, np.ndarray]:
    """[CLS] tokens ([SEP] tokens2) padded to max_len; hard truncation keeps [CLS]."""
    body = [vocab.lookup(t) for t in tokenize(inst.text)]
    if inst.text2 is not None:
        body.append(SEP_ID)
        body.extend(vocab.lookup(t) for t in tokenize(inst.text2))
    seq = [CLS_ID] + body[: max_len - 1]
    ids = np.full(max_len, PAD_ID, dtype=np.int64)
    mask = np.zeros(max_len, dtype=np.int64)
    ids[: len(seq)] = seq
    mask[: len(seq)] = 1
    return ids, mask


def encode_batch(instances: list[Instance], vocab: Vocabulary, max_len: int) -> TokenBatch:
    """Encode instances together, trimming padding to the longest row in the batch."""
    rows = [encode_instance(inst, vocab, max_len) for inst in instances]
    ids = np.stack([r[0] for r in rows])
    mask = np.stack([r[1] for r in rows])
    width = max(2, int(mask.sum(axis=1).max()))
    return TokenBatch(
        ids=ids[:, :width],
        mask=mask[:, :width],
        labels=np.array([i.label for i in instances], dtype=np.int64),
        domains=np.array([i.domain for i in instances], dtype=np.int64),
        uids=np.array([i.uid for i in instances], dtype=np.int64),
    )


class MultiDomainDataset:
    """Instances grouped into train/dev/test over a shared domain and label space."""

    def __init__(self, domain_names: list[str], label_names: list[str],
                 splits: dict[str, list[Instance]]):
        self.domain_names = list(domain_names)
        self.label_names = list(label_names)
        self.splits = {name: list(splits.get(name, [])) for name in SPLIT_NAMES}

    @property
    def num_domains(self) -> int:
        return len(self.domain_names)

    @property
    def num_classes(self) -> int:
        return len(self.label_names)

    def split(self, name: str) -> list[Instance]:
        if name not in self.splits:
            raise SchemaError(f"unknown split {name!r}")
        return self.splits[name]

    def by_domain(self, split: str, domain: int) -> list[Instance]:
        return [i for i in self.split(split) if i.domain == domain]

    def cells(self, split: str) -> dict[tuple[int, int], list[Instance]]:
        """Instances keyed by (domain, label)."""
        out: dict[tuple[int, int], list[Instance]] = {}
        for inst in self.split(split):
            out.setdefault((inst.domain, inst.label), []).append(inst)
        return out


def _parse_line(line: str, lineno: int, path: Path) -> tuple[str, str, str, str | None]:
    parts = line.split("\t")
    if len(parts) not in (3, 4) or any(p == "" for p in parts[:3]):
        raise ParseError(f"{path.name}:{lineno}: expected domain<TAB>label<TAB>text[<TAB>text2]")
    domain, label, text = parts[0], parts[1], parts[2]
    text2 = parts[3] if len(parts) == 4 else None
    return domain, label, text, text2


def load_corpus(directory: str | Path) -> MultiDomainDataset:
    directory = Path(directory)
    train_path = directory / "train.tsv"
    if not train_path.exists():
        raise ParseError(f"missing {train_path}")

    raw: dict[str, list[tuple[str, str, str, str | None]]] = {}
    for split in SPLIT_NAMES:
        path = directory / f"{split}.tsv"
        rows: list[tuple[str, str, str, str | None]] = []
        if path.exists():
            with open(path, encoding="utf-8") as fh:
                for lineno, line in enumerate(fh, start=1):
                    line = line.rstrip("\n")
                    if not line:
                        continue
                    rows.append(_parse_line(line, lineno, path))
        raw[split] = rows

    domain_names = sorted({r[0] for r in raw["train"]})
    label_names = sorted({r[1] for r in raw["train"]})
    domain_index = {n: i for i, n in enumerate(domain_names)}
    label_index = {n: i for i, n in enumerate(label_names)}

    splits: dict[str, list[Instance]] = {}
    uid = 0
    for split in SPLIT_NAMES:
        insts = []
        for domain, label, text, text2 in raw[split]:
            if domain not in domain_index:
                raise SchemaError(f"{split}.tsv: unknown domain {domain!r}")
            if label not in label_index:
                raise SchemaError(f"{split}.tsv: unknown label {label!r}")
            insts.append(Instance(uid, domain_index[domain], label_index[label], text, text2))
            uid += 1
        splits[split] = insts
    return MultiDomainDataset(domain_names, label_names, splits)


def write_corpus(dataset: MultiDomainDataset, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for split in SPLIT_NAMES:
        lines = []
        for inst in dataset.split(split):
            fields = [
                dataset.domain_names[inst.domain],
                dataset.label_names[inst.label],
                inst.text,
            ]
            if inst.text2 is not None:
                fields.append(inst.text2)
            lines.append("\t".join(fields) + "\n")
        (directory / f"{split}.tsv").write_text("".join(lines), encoding="utf-8")


def subsample_train(dataset: MultiDomainDataset, fraction: float, seed: int) -> MultiDomainDataset:
    """Keep a seeded per-domain fraction of the training split; dev/test unchanged."""
    if not 0.0 < fraction <= 1.0:
        raise SynthSpecError(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    kept: list[Instance] = []
    for k in range(dataset.num_domains):
        pool = dataset.by_domain("train", k)
        n = max(1, int(round(fraction * len(pool))))
        order = rng.permutation(len(pool))[:n]
        kept.extend(pool[i] for i in sorted(order))
    return MultiDomainDataset(
        dataset.domain_names,
        dataset.label_names,
        {"train": kept, "dev": dataset.split("dev"), "test": dataset.split("test")},
    )


# -- synthetic multi-domain classification --------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    """Generator settings for the synthetic multi-domain classification task.

    Each instance mixes class-informative signal tokens with uninformative
    noise tokens.  A signal slot draws from the class's shared pool with
    probability ``transfer`` and from the (domain, class) private pool
    otherwise, so ``transfer`` controls how much of the label evidence is
    portable across domains.  A noise slot draws from a per-domain style
    pool with probability ``domain_noise_fraction`` and from the global
    noise pool otherwise; style tokens mark the domain without carrying any
    label information.  All pool families are disjoint.
    """

    num_domains: int = 3
    num_classes: int = 3
    shared_tokens_per_class: int = 30
    domain_tokens_per_class: int = 30
    noise_tokens: int = 300
    instances_per_domain: int = 2500
    transfer: float = 0.7
    signal_tokens_per_instance: int = 4
    noise_tokens_per_instance: int = 8
    label_noise: float = 0.0
    domain_noise_tokens: int = 0
    domain_noise_fraction: float = 0.0
    seed: int = 13
    shared_pool: tuple[tuple[str, ...], ...] | None = None
    domain_pool: tuple[tuple[tuple[str, ...], ...], ...] | None = None
    noise_pool: tuple[str, ...] | None = None

    def validate(self) -> None:
        if self.num_domains < 1 or self.num_classes < 2:
            raise SynthSpecError("need at least 1 domain and 2 classes")
        if not 0.0 <= self.transfer <= 1.0:
            raise SynthSpecError(f"transfer must be in [0, 1], got {self.transfer}")
        if not 0.0 <= self.label_noise < 1.0:
            raise SynthSpecError(f"label_noise must be in [0, 1), got {self.label_noise}")
        if min(self.shared_tokens_per_class, self.domain_tokens_per_class,
               self.noise_tokens, self.instances_per_domain,
               self.signal_tokens_per_instance) < 1:
            raise SynthSpecError("pool sizes, counts, and signal length must be positive")
        if self.noise_tokens_per_instance < 0:
            raise SynthSpecError("noise_tokens_per_instance must be >= 0")
        if not 0.0 <= self.domain_noise_fraction <= 1.0:
            raise SynthSpecError(
                f"domain_noise_fraction must be in [0, 1], got {self.domain_noise_fraction}")
        if self.domain_noise_fraction > 0.0 and self.domain_noise_tokens < 1:
            raise SynthSpecError(
                "domain_noise_fraction > 0 needs domain_noise_tokens >= 1")

    def pools(self) -> tuple[list[list[str]], list[list[list[str]]], list[str],
                             list[list[str]]]:
        """Materialize (shared, domain, noise, style) pools and check disjointness."""
        self.validate()
        if self.shared_pool is not None:
            shared = [list(p) for p in self.shared_pool]
        else:
            shared = [
                [f"sh{m}x{i}" for i in range(self.shared_tokens_per_class)]
                for m in range(self.num_classes)
            ]
        if self.domain_pool is not None:
            domain = [[list(p) for p in per_dom] for per_dom in self.domain_pool]
        else:
            domain = [
                [
                    [f"d{k}c{m}x{i}" for i in range(self.domain_tokens_per_class)]
                    for m in range(self.num_classes)
                ]
                for k in range(self.num_domains)
            ]
        noise = list(self.noise_pool) if self.noise_pool is not None else [
            f"nz{i}" for i in range(self.noise_tokens)
        ]
        style = [
            [f"dn{k}x{i}" for i in range(self.domain_noise_tokens)]
            for k in range(self.num_domains)
        ]
        flat: list[str] = [t for p in shared for t in p] + noise
        for per_dom in domain:
            for p in per_dom:
                flat.extend(p)
        for p in style:
            flat.extend(p)
        if len(set(flat)) != len(flat):
            raise SynthSpecError("token pools overlap")
        return shared, domain, noise, style

    def bayes_accuracy(self) -> float:
        """Best possible test accuracy: signal tokens identify the generating class
        exactly, so only label noise (a flip to a uniform class) is irreducible.
        Noise and style tokens are label-independent and do not move the ceiling."""
        m = self.num_classes
        return (1.0 - self.label_noise) + self.label_noise / m


def synth_generate(spec: SynthSpec) -> MultiDomainDataset:
    """Deterministically generate a corpus from the spec (same spec, same bytes)."""
    shared, domain_pools, noise, style = spec.pools()
    rng = np.random.default_rng(spec.seed)

    n = spec.instances_per_domain
    n_train = int(n * 0.8)
    n_dev = int(n * 0.1)
    counts = {"train": n_train, "dev": n_dev, "test": n - n_train - n_dev}

    domain_names = [f"d{k}" for k in range(spec.num_domains)]
    label_names = [f"c{m}" for m in range(spec.num_classes)]

    splits: dict[str, list[Instance]] = {}
    uid = 0
    for split in SPLIT_NAMES:
        insts = []
        for k in range(spec.num_domains):
            for _ in range(counts[split]):
                m = int(rng.integers(spec.num_classes))
                tokens: list[str] = []
                for _ in range(spec.signal_tokens_per_instance):
                    if rng.random() < spec.transfer:
                        pool = shared[m]
                    else:
                        pool = domain_pools[k][m]
                    tokens.append(pool[int(rng.integers(len(pool)))])
                for _ in range(spec.noise_tokens_per_instance):
                    if (spec.domain_noise_fraction > 0.0
                            and rng.random() < spec.domain_noise_fraction):
                        pool = style[k]
                    else:
                        pool = noise
                    tokens.append(pool[int(rng.integers(len(pool)))])
                perm = rng.permutation(len(tokens))
                tokens = [tokens[i] for i in perm]
                label = m
                if spec.label_noise > 0.0 and rng.random() < spec.label_noise:
                    label = int(rng.integers(spec.num_classes))
                insts.append(Instance(uid, k, label, " ".join(tokens)))
                uid += 1
        splits[split] = insts
    return MultiDomainDataset(domain_names, label_names, splits)
