"""Prototypes, typicality scores, label corruption, and the meta-training losses.

An instance's typicality blends how close its sentence embedding sits to its
own domain's class prototype with how close it sits to the other domains'
prototypes for the same class:

    raw = alpha * cos(e, own) + (1 - alpha) * mean over other domains of cos(e, other)

The cross-domain mean skips domains that have no prototype for the class and
renormalizes over the domains that do; with a single domain the score is just
the own-domain cosine.  Scores are clamped at zero, so they live in [0, 1].

The multi-prototype variant replaces each per-domain cosine with a
membership-weighted average over a candidate set of prototypes.  By default
the candidates are all (class, cluster) prototypes of a domain; a flag
restricts them to the instance's own class's clusters.

Typicality weights are computed once from the initial encoder and stay frozen
for the whole meta-training stage.  Scoring subtracts the corpus mean embedding
from instances and prototypes alike: raw sentence embeddings share one large
common direction that would otherwise push every cosine toward 1 and flatten
the weights into uselessness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .data import MultiDomainDataset, encode_batch
from .encoder import EncoderState, layer_pool, sentence_embedding
from .errors import (
    ConfigError,
    DegenerateVectorError,
    MembershipError,
    ParseError,
    StateError,
)
from .tensor import Tensor


def cosine(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine similarity, clipped into [-1, 1] to absorb float rounding."""
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        raise DegenerateVectorError("cosine undefined for zero-norm vectors")
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def clamp_score(raw: float) -> float:
    return max(raw, 0.0)


# -- prototypes -------------------------------------------------------------------


def kmeans(points: np.ndarray, j: int, rng: np.random.Generator,
           iters: int = 20) -> np.ndarray:
    """Lloyd's algorithm with k-means++ seeding; ties go to the lowest index.

    Requests for more centers than points fall back to one center per point.
    """
    n = points.shape[0]
    if n == 0:
        raise ConfigError("kmeans needs at least one point")
    j = min(j, n)
    chosen = [int(rng.integers(n))]
    for _ in range(1, j):
        d2 = np.min(
            [np.sum((points - points[c]) ** 2, axis=1) for c in chosen], axis=0
        )
        total = d2.sum()
        probs = np.full(n, 1.0 / n) if total == 0.0 else d2 / total
        chosen.append(int(rng.choice(n, p=probs)))
    centers = points[chosen].copy()
    for _ in range(iters):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)  # argmin takes the first (lowest) center on ties
        for c in range(j):
            members = points[assign == c]
            if len(members):
                centers[c] = members.mean(axis=0)
    return centers


@dataclass
class PrototypeSet:
    """Per-(domain, class) prototype vectors, possibly several per cell.

    ``center`` holds the corpus mean embedding.  Cosine geometry between raw
    encoder embeddings is dominated by one shared direction (every sentence
    embedding of an untrained encoder points almost the same way), which
    flattens all typicality scores toward 1.  Scoring therefore works on
    vectors with the center subtracted; the stored prototypes themselves stay
    plain per-cell means.
    """

    num_domains: int
    num_classes: int
    vectors: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    missing: tuple[tuple[int, int], ...] = ()
    reduced: tuple[tuple[int, int], ...] = ()
    center: np.ndarray | None = None

    def get(self, domain: int, label: int) -> np.ndarray | None:
        return self.vectors.get((domain, label))

    def max_prototypes(self) -> int:
        return max((v.shape[0] for v in self.vectors.values()), default=0)

    def centered(self) -> "PrototypeSet":
        """A copy shifted by ``center`` (identity when no center is set)."""
        if self.center is None:
            return self
        return PrototypeSet(
            self.num_domains, self.num_classes,
            {cell: arr - self.center for cell, arr in self.vectors.items()},
            missing=self.missing, reduced=self.reduced,
        )

    def save(self, path: str | Path) -> None:
        lines = [f"# domains={self.num_domains} classes={self.num_classes}\n"]
        if self.center is not None:
            vals = " ".join(repr(float(x)) for x in self.center)
            lines.append(f"# center: {vals}\n")
        for (k, m) in sorted(self.vectors):
            arr = self.vectors[(k, m)]
            for j in range(arr.shape[0]):
                vals = " ".join(repr(float(x)) for x in arr[j])
                lines.append(f"{k}\t{m}\t{j}\t{vals}\n")
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "PrototypeSet":
        rows: dict[tuple[int, int], list[tuple[int, np.ndarray]]] = {}
        num_domains = num_classes = 0
        center = None
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            if line.startswith("# center:"):
                center = np.array([float(x) for x in line[len("# center:"):].split()],
                                  dtype=np.float64)
                continue
            if line.startswith("#"):
                for part in line[1:].split():
                    key, _, value = part.partition("=")
                    if key == "domains":
                        num_domains = int(value)
                    elif key == "classes":
                        num_classes = int(value)
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"{path}:{lineno}: expected domain, class, index, values")
            k, m, j = int(parts[0]), int(parts[1]), int(parts[2])
            vec = np.array([float(x) for x in parts[3].split()], dtype=np.float64)
            rows.setdefault((k, m), []).append((j, vec))
        vectors = {
            cell: np.stack([v for _, v in sorted(items)])
            for cell, items in rows.items()
        }
        missing = tuple(
            (k, m)
            for k in range(num_domains)
            for m in range(num_classes)
            if (k, m) not in vectors
        )
        return cls(num_domains, num_classes, vectors, missing=missing, center=center)


def compute_prototypes(dataset: MultiDomainDataset, state: EncoderState, vocab,
                       j: int = 1, batch_size: int = 32,
                       rng: np.random.Generator | None = None,
                       split: str = "train") -> PrototypeSet:
    """Embed the split once (frozen encoder) and average or cluster per cell.

    Cells with no data are recorded as missing; cells with fewer instances
    than j get one prototype per instance and are recorded as reduced.
    """
    if j < 1:
        raise ConfigError("need at least one prototype per cell")
    rng = rng if rng is not None else np.random.default_rng(0)
    instances = dataset.split(split)
    embeddings: dict[int, np.ndarray] = {}
    for start in range(0, len(instances), batch_size):
        chunk = instances[start: start + batch_size]
        batch = encode_batch(chunk, vocab, state.config.max_len)
        vecs = sentence_embedding(state, batch)
        for inst, vec in zip(chunk, vecs):
            embeddings[inst.uid] = vec

    vectors: dict[tuple[int, int], np.ndarray] = {}
    reduced: list[tuple[int, int]] = []
    cells = dataset.cells(split)
    for k in range(dataset.num_domains):
        for m in range(dataset.num_classes):
            members = cells.get((k, m), [])
            if not members:
                continue
            points = np.stack([embeddings[i.uid] for i in members])
            if j == 1:
                vectors[(k, m)] = points.mean(axis=0, keepdims=True)
            else:
                if len(members) < j:
                    reduced.append((k, m))
                vectors[(k, m)] = kmeans(points, j, rng)
    missing = tuple(
        (k, m)
        for k in range(dataset.num_domains)
        for m in range(dataset.num_classes)
        if (k, m) not in vectors
    )
    center = np.mean(np.stack(list(embeddings.values())), axis=0)
    return PrototypeSet(dataset.num_domains, dataset.num_classes, vectors,
                        missing=missing, reduced=tuple(reduced), center=center)


# -- typicality --------------------------------------------------------------------


def _raw_single(e: np.ndarray, label: int, domain: int, prototypes: PrototypeSet,
                alpha: float) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    own = prototypes.get(domain, label)
    if own is None:
        raise ConfigError(f"no prototype for own domain {domain}, class {label}")
    own_cos = cosine(e, own[0])
    cross = [
        cosine(e, prototypes.get(k, label)[0])
        for k in range(prototypes.num_domains)
        if k != domain and prototypes.get(k, label) is not None
    ]
    if not cross:
        return own_cos
    return alpha * own_cos + (1.0 - alpha) * (sum(cross) / len(cross))


def typicality_single(e: np.ndarray, label: int, domain: int,
                      prototypes: PrototypeSet, alpha: float) -> float:
    """Single-prototype typicality, clamped into [0, 1]."""
    return clamp_score(_raw_single(e, label, domain, prototypes, alpha))


def _candidate_ids(prototypes: PrototypeSet, domain: int, label: int,
                   own_class_only: bool) -> list[tuple[int, int]]:
    """(class, cluster) pairs available in the instance's own domain."""
    out = []
    for m in range(prototypes.num_classes):
        if own_class_only and m != label:
            continue
        arr = prototypes.get(domain, m)
        if arr is None:
            continue
        out.extend((m, jj) for jj in range(arr.shape[0]))
    return sorted(out)


def _weighted_domain_cosine(e: np.ndarray, domain: int, candidates, memberships,
                            prototypes: PrototypeSet) -> float | None:
    num = 0.0
    den = 0.0
    for (m, jj) in candidates:
        arr = prototypes.get(domain, m)
        if arr is None or jj >= arr.shape[0]:
            continue
        beta = memberships[(m, jj)]
        num += beta * cosine(e, arr[jj])
        den += beta
    if den == 0.0:
        return None
    return num / den


def _raw_multi(e: np.ndarray, label: int, domain: int, prototypes: PrototypeSet,
               alpha: float, memberships: dict[tuple[int, int], float],
               own_class_only: bool) -> float:
    if not 0.0 < alpha < 1.0:
        raise ConfigError(f"alpha must be in (0, 1), got {alpha}")
    candidates = _candidate_ids(prototypes, domain, label, own_class_only)
    if not candidates:
        raise ConfigError(f"no prototype for own domain {domain}, class {label}")
    for cand in candidates:
        if cand not in memberships:
            raise MembershipError(f"no membership weight for prototype {cand}")
        if not memberships[cand] > 0.0:
            raise MembershipError(f"membership for {cand} must be > 0")
    own = _weighted_domain_cosine(e, domain, candidates, memberships, prototypes)
    cross = []
    for k in range(prototypes.num_domains):
        if k == domain:
            continue
        val = _weighted_domain_cosine(e, k, candidates, memberships, prototypes)
        if val is not None:
            cross.append(val)
    if not cross:
        return own
    return alpha * own + (1.0 - alpha) * (sum(cross) / len(cross))


def typicality_multi(e: np.ndarray, label: int, domain: int,
                     prototypes: PrototypeSet, alpha: float,
                     memberships: dict[tuple[int, int], float],
                     own_class_only: bool = False) -> float:
    """Membership-weighted typicality over per-class prototype clusters.

    ``memberships`` maps (class, cluster) to a strictly positive weight.  With
    a single candidate and any weight this reduces to the single-prototype
    score for that class.
    """
    return clamp_score(_raw_multi(e, label, domain, prototypes, alpha,
                                  memberships, own_class_only))


def distance_memberships(e: np.ndarray, domain: int, prototypes: PrototypeSet,
                         own_class_only: bool = False,
                         label: int | None = None) -> dict[tuple[int, int], float]:
    """beta = 1 / (1 + squared distance) against the own domain's prototypes."""
    if own_class_only and label is None:
        raise ConfigError("own_class_only memberships need the instance label")
    out: dict[tuple[int, int], float] = {}
    for m in range(prototypes.num_classes):
        if own_class_only and m != label:
            continue
        arr = prototypes.get(domain, m)
        if arr is None:
            continue
        for jj in range(arr.shape[0]):
            d2 = float(np.sum((e - arr[jj]) ** 2))
            out[(m, jj)] = 1.0 / (1.0 + d2)
    return out


@dataclass
class TypicalityTable:
    """Frozen per-instance weights used by the meta-training losses."""

    alpha: float
    rows: dict[int, tuple[float, float]] = field(default_factory=dict)  # uid -> (raw, clamped)

    def weight(self, uid: int) -> float:
        try:
            return self.rows[uid][1]
        except KeyError:
            raise StateError(f"no typicality score for instance {uid}") from None

    def weights_for(self, uids: np.ndarray) -> np.ndarray:
        return np.array([self.weight(int(u)) for u in uids], dtype=np.float64)

    def save(self, path: str | Path) -> None:
        lines = [f"# alpha={self.alpha!r}\n"]
        for uid in sorted(self.rows):
            raw, clamped = self.rows[uid]
            lines.append(f"{uid}\t{float(raw)!r}\t{float(clamped)!r}\n")
        Path(path).write_text("".join(lines), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "TypicalityTable":
        alpha = 0.5
        rows: dict[int, tuple[float, float]] = {}
        for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
            if not line:
                continue
            if line.startswith("#"):
                for part in line[1:].split():
                    key, _, value = part.partition("=")
                    if key == "alpha":
                        alpha = float(value)
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError(f"{path}:{lineno}: expected uid, raw, clamped")
            rows[int(parts[0])] = (float(parts[1]), float(parts[2]))
        return cls(alpha, rows)


def compute_typicality_table(dataset: MultiDomainDataset, state: EncoderState, vocab,
                             prototypes: PrototypeSet, alpha: float,
                             batch_size: int = 32, own_class_only: bool = False,
                             split: str = "train") -> TypicalityTable:
    """Score every instance of the split with the frozen encoder.

    Uses the single-prototype formula when every cell has one prototype and the
    distance-membership multi-prototype formula otherwise.
    """
    multi = prototypes.max_prototypes() > 1
    shifted = prototypes.centered()
    offset = prototypes.center if prototypes.center is not None else 0.0
    rows: dict[int, tuple[float, float]] = {}
    instances = dataset.split(split)
    for start in range(0, len(instances), batch_size):
        chunk = instances[start: start + batch_size]
        batch = encode_batch(chunk, vocab, state.config.max_len)
        vecs = sentence_embedding(state, batch)
        for inst, e in zip(chunk, vecs):
            e = e - offset
            if multi:
                memberships = distance_memberships(
                    e, inst.domain, shifted, own_class_only, inst.label
                )
                raw = _raw_multi(e, inst.label, inst.domain, shifted, alpha,
                                 memberships, own_class_only)
            else:
                raw = _raw_single(e, inst.label, inst.domain, shifted, alpha)
            rows[inst.uid] = (raw, clamp_score(raw))
    return TypicalityTable(alpha, rows)


# -- domain label corruption ---------------------------------------------------------


@dataclass
class CorruptionDistribution:
    """How corrupted domain labels are drawn: a batch shuffle of the true labels,
    a uniform draw, or a draw from the training split's domain frequencies."""

    mode: str
    num_domains: int
    probs: np.ndarray | None = None

    def __post_init__(self):
        if self.mode not in ("shuffle", "uniform", "empirical"):
            raise ConfigError(f"unknown corruption mode {self.mode!r}")
        if self.mode == "shuffle":
            if self.probs is not None:
                raise ConfigError("shuffle mode takes no probabilities")
        else:
            if self.probs is None:
                raise StateError(f"{self.mode} mode requires fitted probabilities")
            self.probs = np.asarray(self.probs, dtype=np.float64)
            if self.probs.shape != (self.num_domains,):
                raise ConfigError("probabilities must have one entry per domain")
            if np.any(self.probs < 0) or abs(self.probs.sum() - 1.0) > 1e-12:
                raise ConfigError("probabilities must be a distribution")

    @classmethod
    def shuffle(cls, num_domains: int) -> "CorruptionDistribution":
        return cls("shuffle", num_domains)

    @classmethod
    def uniform(cls, num_domains: int) -> "CorruptionDistribution":
        return cls("uniform", num_domains, np.full(num_domains, 1.0 / num_domains))

    @classmethod
    def empirical(cls, dataset: MultiDomainDataset,
                  split: str = "train") -> "CorruptionDistribution":
        """Maximum-likelihood fit: observed domain frequencies."""
        counts = np.zeros(dataset.num_domains)
        for inst in dataset.split(split):
            counts[inst.domain] += 1
        if counts.sum() == 0:
            raise StateError("cannot fit an empirical distribution to an empty split")
        return cls("empirical", dataset.num_domains, counts / counts.sum())


def corrupt_labels(domains: np.ndarray, dist: CorruptionDistribution,
                   rng: np.random.Generator) -> np.ndarray:
    """Draw corrupted domain labels z, unrelated to each instance's true domain.

    Shuffle mode permutes the batch's own labels, preserving their multiset;
    the other modes draw i.i.d. from the stored distribution.
    """
    domains = np.asarray(domains)
    if domains.ndim != 1 or len(domains) == 0:
        raise ConfigError("domains must be a non-empty vector")
    if domains.min() < 0 or domains.max() >= dist.num_domains:
        raise IndexError(f"domain labels must lie in [0, {dist.num_domains})")
    if dist.mode == "shuffle":
        return rng.permutation(domains)
    return rng.choice(dist.num_domains, size=len(domains), p=dist.probs)


# -- losses ----------------------------------------------------------------------------


def label_classification_loss(features: Tensor, labels: np.ndarray,
                              weights: np.ndarray, head_w: Tensor,
                              head_b: Tensor) -> Tensor:
    """Typicality-weighted cross-entropy of the label head on [CLS] features."""
    return T.weighted_cross_entropy(features @ head_w + head_b, labels, weights)


def domain_corruption_loss(pooled: Tensor, true_domains: np.ndarray,
                           corrupted: np.ndarray, weights: np.ndarray,
                           domain_emb: Tensor, head_w: Tensor,
                           head_b: Tensor) -> Tensor:
    """Weighted cross-entropy of a domain head fed h + E(true domain), scored
    against the corrupted labels z."""
    shifted = pooled + domain_emb[np.asarray(true_domains)]
    return T.weighted_cross_entropy(shifted @ head_w + head_b, corrupted, weights)


def skip_layer_corruption_loss(layer_states: list[Tensor], mask: np.ndarray,
                               taps: tuple[int, ...], state: EncoderState,
                               true_domains: np.ndarray, corrupted: np.ndarray,
                               weights: np.ndarray) -> tuple[Tensor, dict[int, float]]:
    """Mean of the per-tap corruption losses; also returns each tap's value."""
    if not taps:
        raise ConfigError("need at least one tapped layer")
    for tap in taps:
        if not 1 <= tap <= len(layer_states):
            raise ConfigError(f"tap {tap} outside layers 1..{len(layer_states)}")
    domain_emb = state.parameter("domain_emb")
    total = None
    per_layer: dict[int, float] = {}
    for tap in taps:
        pooled = layer_pool(layer_states[tap - 1], mask)
        piece = domain_corruption_loss(
            pooled, true_domains, corrupted, weights, domain_emb,
            state.parameter(f"domain_head_l{tap}_w"),
            state.parameter(f"domain_head_l{tap}_b"),
        )
        per_layer[tap] = piece.item()
        total = piece if total is None else total + piece
    return total * (1.0 / len(taps)), per_layer


def flipped_domain_loss(logits: Tensor, domains: np.ndarray,
                        rng: np.random.Generator | None = None) -> Tensor:
    """Cross-entropy against deliberately wrong domain labels.

    With two domains the target is the other one; with more, each target is a
    uniform draw over the other domains (rng required).
    """
    domains = np.asarray(domains)
    k = logits.data.shape[1]
    if k < 2:
        raise ConfigError("flipped domain loss needs at least 2 domains")
    if k == 2:
        targets = 1 - domains
    else:
        if rng is None:
            raise ConfigError("flipping with more than 2 domains needs an rng")
        shift = rng.integers(1, k, size=len(domains))
        targets = (domains + shift) % k
    return T.weighted_cross_entropy(logits, targets, np.ones(len(domains)))


def adversarial_domain_loss(logits: Tensor, domains: np.ndarray) -> Tensor:
    """Plain cross-entropy on the true domains.  The trainer routes the features
    through a gradient reversal, so minimizing the head maximizes encoder confusion."""
    domains = np.asarray(domains)
    return T.weighted_cross_entropy(logits, domains, np.ones(len(domains)))


@dataclass
class LossReport:
    """One training step's loss decomposition."""

    l_tlc: float
    l_tdc_per_layer: dict[int, float]
    l_sdc: float
    lam: float
    total: float

    def check_identities(self, tol: float = 1e-12) -> None:
        if self.l_tdc_per_layer:
            mean = sum(self.l_tdc_per_layer.values()) / len(self.l_tdc_per_layer)
        else:
            mean = 0.0
        if abs(self.l_sdc - mean) > tol:
            raise StateError(f"l_sdc {self.l_sdc} != mean per-layer {mean}")
        if abs(self.total - (self.l_tlc + self.lam * self.l_sdc)) > tol:
            raise StateError("total != l_tlc + lambda * l_sdc")
