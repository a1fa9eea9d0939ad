"""Two-stage training: meta-training across domains, then per-domain fine-tuning.

The meta stage freezes a typicality weight for every training instance, then
minimizes the weighted label loss plus lambda times the skip-layer corruption
loss over batches drawn uniformly from the pooled domains.  Afterwards the
domain embedding and domain heads are stripped, and each domain fine-tunes its
own copy of the remaining encoder with plain cross-entropy.

Baselines reuse the same loop: multi-task training is the meta stage with unit
weights and lambda 0 (and no fine-tuning stage), the adversarial baseline adds
a reversed-gradient domain loss on top of that, and the single-domain and
pooled baselines skip the meta stage entirely.

Every run is a pure function of (config, seed): parameter init, batch order,
corruption draws, and clustering each consume their own named random stream.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import tensor as T
from .data import MultiDomainDataset, TokenBatch, Vocabulary, encode_batch
from .encoder import (
    EncoderConfig,
    EncoderState,
    cls_feature,
    encode,
    init_encoder_state,
    is_domain_parameter,
    layer_pool,
)
from .errors import (
    ConfigError,
    EvaluationError,
    LabelSpaceError,
    ShapeError,
    StateError,
)
from .meta import (
    CorruptionDistribution,
    LossReport,
    PrototypeSet,
    TypicalityTable,
    adversarial_domain_loss,
    compute_prototypes,
    compute_typicality_table,
    corrupt_labels,
    flipped_domain_loss,
    label_classification_loss,
    skip_layer_corruption_loss,
)
from .tensor import Tensor

METHODS = ("s", "mix", "mtl", "adv", "mft_dc", "mft_tw", "mft_full")
MFT_METHODS = ("mft_dc", "mft_tw", "mft_full")

_STREAM_NAMES = ("init", "order", "corruption", "kmeans", "flip", "ft", "probe")


def rng_streams(seed: int) -> dict[str, np.random.Generator]:
    """One independent generator per consumer, all derived from a single seed.

    Rebuilding the dict always yields the same streams, so callers that only
    need one stream never perturb the others.
    """
    children = np.random.SeedSequence(seed).spawn(len(_STREAM_NAMES))
    return {name: np.random.default_rng(child)
            for name, child in zip(_STREAM_NAMES, children)}


@dataclass(frozen=True)
class TrainConfig:
    """Knobs for both training stages.

    ``unit_typicality`` forces every weight to 1 (the no-weighting ablation and
    the multi-task baseline); ``lam`` at 0 disables the corruption loss (the
    weighting-only ablation).  ``adv_weight`` above 0 adds the reversed-gradient
    domain loss used by the adversarial baseline.
    """

    alpha: float = 0.5
    lam: float = 0.1
    taps: tuple[int, ...] = (2, 4)
    j_prototypes: int = 1
    own_class_only: bool = False
    mft_epochs: int = 2
    ft_epochs: int = 4
    batch_size: int = 32
    learning_rate: float = 3e-4
    seed: int = 0
    corruption: str = "shuffle"
    unit_typicality: bool = False
    adv_weight: float = 0.0
    adv_mode: str = "reverse"
    stratified: bool = False
    reinit_label_head: bool = False

    def validate(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.lam < 0.0:
            raise ConfigError("lambda must be nonnegative")
        if self.mft_epochs < 0 or self.ft_epochs < 0:
            raise ConfigError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise ConfigError("batch size must be positive")
        if self.learning_rate <= 0.0:
            raise ConfigError("learning rate must be positive")
        if self.j_prototypes < 1:
            raise ConfigError("need at least one prototype per cell")
        if self.corruption not in ("shuffle", "uniform", "empirical"):
            raise ConfigError(f"unknown corruption mode {self.corruption!r}")
        if self.adv_weight < 0.0:
            raise ConfigError("adversarial weight must be nonnegative")
        if self.adv_mode not in ("reverse", "flip"):
            raise ConfigError(f"unknown adversarial mode {self.adv_mode!r}")


# -- optimizer --------------------------------------------------------------------


def adam_step(param: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray,
              step: int, lr: float, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One bias-corrected adaptive-moment update; returns (param, m, v)."""
    if not param.shape == grad.shape == m.shape == v.shape:
        raise ShapeError("parameter, gradient, and moment shapes must agree")
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** step)
    v_hat = v / (1.0 - beta2 ** step)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


class Adam:
    """Per-parameter moment state over a named tensor dict.

    Parameters whose gradient is absent for a step keep their moments and step
    count untouched; parameter order is name-sorted so updates are deterministic.
    """

    def __init__(self, params: dict[str, Tensor], lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = lr
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.moments = {name: (np.zeros_like(p.data), np.zeros_like(p.data))
                        for name, p in params.items()}
        self.steps = {name: 0 for name in params}

    def step(self) -> None:
        for name in sorted(self.params):
            p = self.params[name]
            if p.grad is None:
                continue
            self.steps[name] += 1
            m, v = self.moments[name]
            p.data, m, v = adam_step(p.data, p.grad, m, v, self.steps[name],
                                     self.lr, self.beta1, self.beta2, self.eps)
            self.moments[name] = (m, v)


# -- records and results ----------------------------------------------------------


@dataclass(frozen=True)
class StepRecord:
    stage: str  # "mft" or "ft"
    epoch: int
    step: int
    report: LossReport


@dataclass
class MetaTrainResult:
    model: EncoderState  # domain parameters already stripped
    records: list[StepRecord]
    typicality: TypicalityTable | None
    prototypes: PrototypeSet | None


@dataclass
class FineTuneResult:
    model: EncoderState
    records: list[StepRecord]
    accessed_uids: frozenset[int]


@dataclass
class MethodResult:
    method: str
    models: dict[int, EncoderState]  # domain -> the model evaluated on it
    meta_records: list[StepRecord]
    ft_records: dict[int, list[StepRecord]]
    typicality: TypicalityTable | None = None
    prototypes: PrototypeSet | None = None
    audits: dict[int, frozenset[int]] = field(default_factory=dict)
    meta_model: EncoderState | None = None  # shared model before any fine-tune


@dataclass
class EvalResult:
    per_domain: dict[int, float]
    macro: float
    seed: int = 0
    config_hash: str = ""

    def __post_init__(self):
        for domain, acc in self.per_domain.items():
            if not 0.0 <= acc <= 1.0:
                raise EvaluationError(f"accuracy for domain {domain} outside [0, 1]")


# -- batching ---------------------------------------------------------------------


def _batch_indices(num: int, batch_size: int, order: np.ndarray) -> list[np.ndarray]:
    return [order[start: start + batch_size] for start in range(0, num, batch_size)]


def _epoch_batches(instances, batch_size: int, rng: np.random.Generator,
                   stratified: bool) -> list[list]:
    """Batch index plan for one epoch.

    Uniform mode permutes the pooled instances, so larger domains fill
    proportionally more slots.  Stratified mode shuffles within each domain and
    deals instances round-robin before chopping into batches.
    """
    if not stratified:
        order = rng.permutation(len(instances))
        return [[instances[i] for i in chunk]
                for chunk in _batch_indices(len(instances), batch_size, order)]
    by_domain: dict[int, list] = {}
    for inst in instances:
        by_domain.setdefault(inst.domain, []).append(inst)
    queues = [
        [by_domain[k][i] for i in rng.permutation(len(by_domain[k]))]
        for k in sorted(by_domain)
    ]
    dealt = []
    for row in range(max(len(q) for q in queues)):
        for q in queues:
            if row < len(q):
                dealt.append(q[row])
    return [dealt[start: start + batch_size]
            for start in range(0, len(dealt), batch_size)]


# -- meta stage -------------------------------------------------------------------


def _corruption_distribution(cfg: TrainConfig,
                             dataset: MultiDomainDataset) -> CorruptionDistribution:
    if cfg.corruption == "shuffle":
        return CorruptionDistribution.shuffle(dataset.num_domains)
    if cfg.corruption == "uniform":
        return CorruptionDistribution.uniform(dataset.num_domains)
    return CorruptionDistribution.empirical(dataset)


def strip_domain_parameters(state: EncoderState) -> EncoderState:
    """Fresh state holding copies of everything except domain-specific tensors."""
    params = {name: Tensor(p.data.copy(), requires_grad=True)
              for name, p in state.params.items() if not is_domain_parameter(name)}
    return EncoderState(state.config, state.num_classes, state.num_domains,
                        (), params)


def _adversarial_term(state: EncoderState, hidden_last: Tensor, batch: TokenBatch,
                      cfg: TrainConfig, flip_rng: np.random.Generator) -> Tensor:
    pooled = layer_pool(hidden_last, batch.mask)
    w = state.parameter("adv_head_w")
    b = state.parameter("adv_head_b")
    if cfg.adv_mode == "reverse":
        logits = T.grad_reverse(pooled) @ w + b
        return adversarial_domain_loss(logits, batch.domains)
    logits = pooled @ w + b
    rng = flip_rng if state.num_domains > 2 else None
    return flipped_domain_loss(logits, batch.domains, rng=rng)


def mft_train(dataset: MultiDomainDataset, vocab: Vocabulary, state: EncoderState,
              cfg: TrainConfig) -> MetaTrainResult:
    """Meta-train a copy of ``state`` on the pooled training split.

    Typicality weights come from the encoder as passed in, before any update,
    and stay frozen.  The optimized objective is the weighted label loss plus
    lambda times the corruption loss (plus the adversarial term when enabled);
    the logged report always decomposes the first two pieces.
    """
    cfg.validate()
    if dataset.num_domains < 2:
        raise ConfigError("meta-training needs at least 2 domains; "
                          "corrupting a single domain label is undefined")
    streams = rng_streams(cfg.seed)

    typicality = None
    prototypes = None
    if not cfg.unit_typicality:
        prototypes = compute_prototypes(dataset, state, vocab,
                                        j=cfg.j_prototypes,
                                        batch_size=cfg.batch_size,
                                        rng=streams["kmeans"])
        typicality = compute_typicality_table(dataset, state, vocab, prototypes,
                                              cfg.alpha,
                                              batch_size=cfg.batch_size,
                                              own_class_only=cfg.own_class_only)

    work = state.copy()
    use_corruption = cfg.lam > 0.0
    if use_corruption:
        dist = _corruption_distribution(cfg, dataset)
    optimizer = Adam(work.params, cfg.learning_rate)
    train = dataset.split("train")
    records: list[StepRecord] = []
    step = 0
    for epoch in range(cfg.mft_epochs):
        for chunk in _epoch_batches(train, cfg.batch_size, streams["order"],
                                    cfg.stratified):
            batch = encode_batch(chunk, vocab, work.config.max_len)
            weights = (np.ones(len(batch)) if typicality is None
                       else typicality.weights_for(batch.uids))
            states = encode(work, batch)
            label_loss = label_classification_loss(
                cls_feature(states[-1]), batch.labels, weights,
                work.parameter("label_head_w"), work.parameter("label_head_b"))
            if use_corruption:
                z = corrupt_labels(batch.domains, dist, streams["corruption"])
                sdc_node, per_layer = skip_layer_corruption_loss(
                    states, batch.mask, cfg.taps, work, batch.domains, z, weights)
                core = label_loss + sdc_node * cfg.lam
                l_sdc = sdc_node.item()
            else:
                per_layer = {}
                l_sdc = 0.0
                core = label_loss
            objective = core
            if cfg.adv_weight > 0.0:
                objective = core + _adversarial_term(
                    work, states[-1], batch, cfg, streams["flip"]) * cfg.adv_weight
            work.zero_grad()
            objective.backward()
            optimizer.step()
            report = LossReport(label_loss.item(), per_layer, l_sdc,
                                cfg.lam if use_corruption else 0.0, core.item())
            records.append(StepRecord("mft", epoch, step, report))
            step += 1
    return MetaTrainResult(strip_domain_parameters(work), records,
                           typicality, prototypes)


# -- fine-tuning stage -------------------------------------------------------------


def fine_tune(state: EncoderState, dataset: MultiDomainDataset, vocab: Vocabulary,
              cfg: TrainConfig, domain: int | None = None) -> FineTuneResult:
    """Plain cross-entropy training of a copy of ``state`` on one domain's
    training split (or the pooled split when ``domain`` is None).

    Returns the set of instance uids actually read, so callers can audit that a
    domain's fine-tune never saw another domain's data.
    """
    cfg.validate()
    if state.has_domain_parameters():
        raise StateError("fine-tuning expects a model with domain parameters stripped")
    data = (dataset.split("train") if domain is None
            else dataset.by_domain("train", domain))
    if not data:
        raise ConfigError(f"no training data for domain {domain}")
    for inst in data:
        if not 0 <= inst.label < state.num_classes:
            raise LabelSpaceError(
                f"label {inst.label} outside the model's {state.num_classes} classes")

    work = state.copy()
    rng = rng_streams(cfg.seed)["ft"]
    if cfg.reinit_label_head:
        d = work.config.d_model
        work.params["label_head_w"] = Tensor(
            rng.normal(0.0, 0.02, size=(d, work.num_classes)), requires_grad=True)
        work.params["label_head_b"] = Tensor(
            np.zeros(work.num_classes), requires_grad=True)
    optimizer = Adam(work.params, cfg.learning_rate)
    records: list[StepRecord] = []
    accessed: set[int] = set()
    step = 0
    for epoch in range(cfg.ft_epochs):
        order = rng.permutation(len(data))
        for idx in _batch_indices(len(data), cfg.batch_size, order):
            chunk = [data[i] for i in idx]
            accessed.update(inst.uid for inst in chunk)
            batch = encode_batch(chunk, vocab, work.config.max_len)
            states = encode(work, batch)
            loss = label_classification_loss(
                cls_feature(states[-1]), batch.labels, np.ones(len(batch)),
                work.parameter("label_head_w"), work.parameter("label_head_b"))
            work.zero_grad()
            loss.backward()
            optimizer.step()
            value = loss.item()
            records.append(StepRecord("ft", epoch, step,
                                      LossReport(value, {}, 0.0, 0.0, value)))
            step += 1
    return FineTuneResult(work, records, frozenset(accessed))


# -- methods ----------------------------------------------------------------------


def _method_config(cfg: TrainConfig, method: str) -> TrainConfig:
    """Resolve a method name into the exact knob settings it trains with."""
    if method == "mtl":
        return replace(cfg, unit_typicality=True, lam=0.0, adv_weight=0.0)
    if method == "adv":
        return replace(cfg, unit_typicality=True, lam=0.0)
    if method == "mft_dc":
        return replace(cfg, unit_typicality=True, adv_weight=0.0)
    if method == "mft_tw":
        return replace(cfg, lam=0.0, adv_weight=0.0)
    if method == "mft_full":
        return replace(cfg, adv_weight=0.0)
    return cfg


def initial_state(enc_config: EncoderConfig, dataset: MultiDomainDataset,
                  cfg: TrainConfig, method: str) -> EncoderState:
    """Seed-determined init; heads beyond the shared stack exist only if used.

    The fixed draw order inside ``init_encoder_state`` keeps the shared
    parameters identical across methods under one seed.
    """
    eff = _method_config(cfg, method)
    uses_meta_stage = method not in ("s", "mix")
    taps = cfg.taps if uses_meta_stage and eff.lam > 0.0 else ()
    return init_encoder_state(enc_config, dataset.num_classes,
                              dataset.num_domains, taps=taps,
                              rng=rng_streams(cfg.seed)["init"],
                              adversary=uses_meta_stage and eff.adv_weight > 0.0)


def run_method(dataset: MultiDomainDataset, vocab: Vocabulary,
               enc_config: EncoderConfig, cfg: TrainConfig,
               method: str) -> MethodResult:
    """Train one method end to end and hand back its per-domain models."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; expected one of {METHODS}")
    eff = _method_config(cfg, method)
    init = initial_state(enc_config, dataset, cfg, method)
    domains = range(dataset.num_domains)

    if method == "s":
        results = {k: fine_tune(init, dataset, vocab, eff, domain=k)
                   for k in domains}
        return MethodResult(method, {k: r.model for k, r in results.items()},
                            [], {k: r.records for k, r in results.items()},
                            audits={k: r.accessed_uids for k, r in results.items()})
    if method == "mix":
        # One model on the pooled split; -1 keys the pooled fine-tune trace.
        result = fine_tune(init, dataset, vocab, eff, domain=None)
        return MethodResult(method, {k: result.model for k in domains},
                            [], {-1: result.records},
                            audits={-1: result.accessed_uids})

    meta = mft_train(dataset, vocab, init, eff)
    if method in ("mtl", "adv"):
        return MethodResult(method, {k: meta.model for k in domains},
                            meta.records, {}, meta.typicality, meta.prototypes,
                            meta_model=meta.model)
    results = {k: fine_tune(meta.model, dataset, vocab, eff, domain=k)
               for k in domains}
    return MethodResult(method, {k: r.model for k, r in results.items()},
                        meta.records, {k: r.records for k, r in results.items()},
                        meta.typicality, meta.prototypes,
                        audits={k: r.accessed_uids for k, r in results.items()},
                        meta_model=meta.model)


# -- evaluation --------------------------------------------------------------------


def _predict(state: EncoderState, batch: TokenBatch) -> np.ndarray:
    with T.no_grad():
        states = encode(state, batch)
        logits = (cls_feature(states[-1]) @ state.parameter("label_head_w")
                  + state.parameter("label_head_b"))
    return np.argmax(logits.data, axis=1)


def domain_accuracy(state: EncoderState, dataset: MultiDomainDataset,
                    vocab: Vocabulary, domain: int, split: str = "test",
                    batch_size: int = 64) -> float:
    instances = dataset.by_domain(split, domain)
    if not instances:
        raise EvaluationError(f"no {split} instances for domain {domain}")
    correct = 0
    for start in range(0, len(instances), batch_size):
        chunk = instances[start: start + batch_size]
        batch = encode_batch(chunk, vocab, state.config.max_len)
        correct += int(np.sum(_predict(state, batch) == batch.labels))
    return correct / len(instances)


def evaluate(models: dict[int, EncoderState] | EncoderState,
             dataset: MultiDomainDataset, vocab: Vocabulary,
             split: str = "test", batch_size: int = 64, seed: int = 0,
             config_hash: str = "") -> EvalResult:
    """Per-domain argmax accuracy plus the macro average.

    Accepts either one shared model or a per-domain dict of models.
    """
    if isinstance(models, EncoderState):
        models = {k: models for k in range(dataset.num_domains)}
    per_domain = {
        k: domain_accuracy(models[k], dataset, vocab, k, split, batch_size)
        for k in sorted(models)
    }
    if not per_domain:
        raise EvaluationError("no domains to evaluate")
    macro = sum(per_domain.values()) / len(per_domain)
    return EvalResult(per_domain, macro, seed, config_hash)


# -- domain probes -----------------------------------------------------------------


def pooled_features(state: EncoderState, dataset: MultiDomainDataset,
                    vocab: Vocabulary, layer: int, split: str,
                    batch_size: int = 64,
                    add_domain_embedding: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Mean-pooled hidden states at ``layer`` with their true domain labels."""
    if not 1 <= layer <= state.config.num_layers:
        raise ConfigError(f"layer {layer} outside 1..{state.config.num_layers}")
    if add_domain_embedding and "domain_emb" not in state.params:
        raise StateError("model carries no domain embedding to add")
    instances = dataset.split(split)
    if not instances:
        raise EvaluationError(f"no instances in split {split!r}")
    feats = []
    domains = []
    for start in range(0, len(instances), batch_size):
        chunk = instances[start: start + batch_size]
        batch = encode_batch(chunk, vocab, state.config.max_len)
        with T.no_grad():
            pooled = layer_pool(encode(state, batch)[layer - 1], batch.mask).data
        if add_domain_embedding:
            pooled = pooled + state.parameter("domain_emb").data[batch.domains]
        feats.append(pooled)
        domains.append(batch.domains)
    return np.concatenate(feats), np.concatenate(domains)


def train_domain_probe(train_x: np.ndarray, train_y: np.ndarray,
                       test_x: np.ndarray, test_y: np.ndarray,
                       num_domains: int, steps: int = 300,
                       lr: float = 0.05) -> float:
    """Fit a fresh affine domain classifier full-batch and return test accuracy."""
    if len(train_x) == 0 or len(test_x) == 0:
        raise EvaluationError("probe needs non-empty train and test sets")
    w = Tensor(np.zeros((train_x.shape[1], num_domains)), requires_grad=True)
    b = Tensor(np.zeros(num_domains), requires_grad=True)
    optimizer = Adam({"w": w, "b": b}, lr)
    x = Tensor(train_x)
    ones = np.ones(len(train_x))
    for _ in range(steps):
        loss = T.weighted_cross_entropy(x @ w + b, train_y, ones)
        w.grad = None
        b.grad = None
        loss.backward()
        optimizer.step()
    predictions = np.argmax(test_x @ w.data + b.data, axis=1)
    return float(np.mean(predictions == test_y))
