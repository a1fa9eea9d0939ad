"""Meta fine-tuning of a miniature text encoder across domains.

The package trains one shared encoder on several labeled domains with
typicality-weighted classification and domain-corruption losses, strips the
extra heads, and fine-tunes the result per domain.  Everything runs on a
from-scratch reverse-mode autodiff core over numpy arrays.
"""

from .data import (
    Instance,
    MultiDomainDataset,
    SynthSpec,
    TokenBatch,
    Vocabulary,
    build_vocab,
    encode_batch,
    load_corpus,
    subsample_train,
    synth_generate,
    write_corpus,
)
from .encoder import (
    EncoderConfig,
    EncoderState,
    encode,
    init_encoder_state,
    load_checkpoint,
    save_checkpoint,
    sentence_embedding,
)
from .errors import MetatuneError
from .meta import (
    CorruptionDistribution,
    LossReport,
    PrototypeSet,
    TypicalityTable,
    compute_prototypes,
    compute_typicality_table,
    corrupt_labels,
    cosine,
    typicality_multi,
    typicality_single,
)
from .tensor import Tensor, no_grad
from .trainer import (
    METHODS,
    EvalResult,
    TrainConfig,
    evaluate,
    fine_tune,
    mft_train,
    run_method,
    train_domain_probe,
)

__version__ = "0.1.0"

__all__ = [
    "CorruptionDistribution",
    "EncoderConfig",
    "EncoderState",
    "EvalResult",
    "Instance",
    "LossReport",
    "METHODS",
    "MetatuneError",
    "MultiDomainDataset",
    "PrototypeSet",
    "SynthSpec",
    "Tensor",
    "TokenBatch",
    "TrainConfig",
    "TypicalityTable",
    "Vocabulary",
    "build_vocab",
    "compute_prototypes",
    "compute_typicality_table",
    "corrupt_labels",
    "cosine",
    "encode",
    "encode_batch",
    "evaluate",
    "fine_tune",
    "init_encoder_state",
    "load_checkpoint",
    "load_corpus",
    "mft_train",
    "no_grad",
    "run_method",
    "save_checkpoint",
    "sentence_embedding",
    "subsample_train",
    "synth_generate",
    "train_domain_probe",
    "typicality_multi",
    "typicality_single",
    "write_corpus",
]
