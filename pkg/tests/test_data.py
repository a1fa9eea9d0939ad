"""Corpus IO, vocabulary, batching, and synthetic generator checks."""

import collections

import numpy as np
import pytest

from metatune import data as D
from metatune.errors import ParseError, SchemaError, ShapeError, SynthSpecError


def write_lines(path, lines):
    path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def small_corpus(tmp_path):
    write_lines(tmp_path / "train.tsv", [
        "books\tpos\tgreat plot",
        "books\tneg\tdull plot",
        "films\tpos\tgreat cast",
        "films\tneg\tbad cast\tvery bad",
    ])
    write_lines(tmp_path / "dev.tsv", ["books\tpos\tfine book"])
    write_lines(tmp_path / "test.tsv", ["films\tneg\tawful"])
    return D.load_corpus(tmp_path)


def test_load_corpus_basic(tmp_path):
    ds = small_corpus(tmp_path)
    assert ds.domain_names == ["books", "films"]
    assert ds.label_names == ["neg", "pos"]
    assert len(ds.split("train")) == 4
    first = ds.split("train")[0]
    assert (first.domain, first.label, first.text) == (0, 1, "great plot")
    pair = ds.split("train")[3]
    assert pair.text2 == "very bad"


def test_instance_ids_disjoint_across_splits(tmp_path):
    ds = small_corpus(tmp_path)
    uids = [i.uid for s in ("train", "dev", "test") for i in ds.split(s)]
    assert len(set(uids)) == len(uids)


def test_corpus_round_trip(tmp_path):
    ds = small_corpus(tmp_path)
    out = tmp_path / "copy"
    D.write_corpus(ds, out)
    again = D.load_corpus(out)
    for split in D.SPLIT_NAMES:
        assert [
            (i.domain, i.label, i.text, i.text2) for i in ds.split(split)
        ] == [
            (i.domain, i.label, i.text, i.text2) for i in again.split(split)
        ]


def test_malformed_line_reports_line_number(tmp_path):
    write_lines(tmp_path / "train.tsv", ["books\tpos\tok", "just one field"])
    with pytest.raises(ParseError) as e:
        D.load_corpus(tmp_path)
    assert "train.tsv:2" in str(e.value)


def test_unknown_label_in_dev_is_schema_error(tmp_path):
    write_lines(tmp_path / "train.tsv", ["books\tpos\tok", "books\tneg\tbad"])
    write_lines(tmp_path / "dev.tsv", ["books\tmaybe\thmm"])
    with pytest.raises(SchemaError):
        D.load_corpus(tmp_path)


def test_missing_train_split(tmp_path):
    with pytest.raises(ParseError):
        D.load_corpus(tmp_path)


# -- vocabulary -------------------------------------------------------------


def test_vocab_frequency_then_lexicographic(tmp_path):
    write_lines(tmp_path / "train.tsv", ["x\ty\ta a b", "x\tz\tc b"])
    ds = D.load_corpus(tmp_path)
    vocab = D.build_vocab(ds, max_size=10)
    # a appears twice, b twice (tie broken lexicographically), c once
    assert vocab.id_to_token[:4] == list(D.RESERVED_TOKENS)
    assert vocab.id_to_token[4:] == ["a", "b", "c"]


def test_vocab_counting_matches_counter(tmp_path):
    rng = np.random.default_rng(0)
    toks = [f"t{rng.integers(20)}" for _ in range(500)]
    write_lines(tmp_path / "train.tsv", [f"d\tl\t{' '.join(toks)}"])
    ds = D.load_corpus(tmp_path)
    vocab = D.build_vocab(ds, max_size=1000)
    counts = collections.Counter(toks)
    want = [t for t, _ in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))]
    assert vocab.id_to_token[4:] == want


def test_vocab_max_size_cuts_to_unk(tmp_path):
    write_lines(tmp_path / "train.tsv", ["x\ty\ta a b"])
    ds = D.load_corpus(tmp_path)
    vocab = D.build_vocab(ds, max_size=5)
    assert len(vocab) == 5
    assert vocab.lookup("a") == 4
    assert vocab.lookup("b") == D.UNK_ID


def test_vocab_save_load_round_trip(tmp_path):
    vocab = D.Vocabulary(list(D.RESERVED_TOKENS) + ["alpha", "beta"])
    vocab.save(tmp_path / "vocab.txt")
    again = D.Vocabulary.load(tmp_path / "vocab.txt")
    assert again.id_to_token == vocab.id_to_token


def test_vocab_is_case_insensitive_via_tokenize():
    assert D.tokenize("Great PLOT") == ["great", "plot"]


# -- instance encoding --------------------------------------------------------


def make_vocab(extra):
    return D.Vocabulary(list(D.RESERVED_TOKENS) + extra)


def test_encode_instance_single_segment():
    vocab = make_vocab(["hello", "world"])
    inst = D.Instance(0, 0, 0, "hello world hello")
    ids, mask = D.encode_instance(inst, vocab, max_len=6)
    assert ids.tolist() == [D.CLS_ID, 4, 5, 4, D.PAD_ID, D.PAD_ID]
    assert mask.tolist() == [1, 1, 1, 1, 0, 0]


def test_encode_instance_pair_joins_with_sep():
    vocab = make_vocab(["a", "b"])
    inst = D.Instance(0, 0, 0, "a", "b b")
    ids, _ = D.encode_instance(inst, vocab, max_len=8)
    assert ids.tolist()[:5] == [D.CLS_ID, 4, D.SEP_ID, 5, 5]


def test_encode_instance_truncation_keeps_cls():
    vocab = make_vocab(["a"])
    inst = D.Instance(0, 0, 0, " ".join(["a"] * 50))
    ids, mask = D.encode_instance(inst, vocab, max_len=4)
    assert ids.tolist() == [D.CLS_ID, 4, 4, 4]
    assert mask.sum() == 4


def test_encode_instance_unknown_token_maps_to_unk():
    vocab = make_vocab(["a"])
    ids, _ = D.encode_instance(D.Instance(0, 0, 0, "zzz a"), vocab, max_len=4)
    assert ids.tolist() == [D.CLS_ID, D.UNK_ID, 4, D.PAD_ID]


def test_encode_batch_trims_to_longest_row():
    vocab = make_vocab(["a", "b"])
    insts = [D.Instance(0, 0, 0, "a"), D.Instance(1, 1, 1, "a b a")]
    batch = D.encode_batch(insts, vocab, max_len=32)
    assert batch.ids.shape == (2, 4)
    assert batch.mask[0].tolist() == [1, 1, 0, 0]
    assert batch.uids.tolist() == [0, 1]


def test_token_batch_validates_cls_and_mask():
    ids = np.array([[D.CLS_ID, 4]])
    one = np.array([0])
    with pytest.raises(ShapeError):
        D.TokenBatch(ids, np.array([[1, 2]]), one, one, one)
    with pytest.raises(ShapeError):
        D.TokenBatch(np.array([[4, 4]]), np.array([[1, 1]]), one, one, one)


# -- synthetic task -------------------------------------------------------------


def test_synth_split_sizes_and_ids():
    spec = D.SynthSpec(num_domains=2, instances_per_domain=50, seed=1)
    ds = D.synth_generate(spec)
    assert len(ds.split("train")) == 80
    assert len(ds.split("dev")) == 10
    assert len(ds.split("test")) == 10
    uids = [i.uid for s in D.SPLIT_NAMES for i in ds.split(s)]
    assert len(set(uids)) == len(uids)


def test_synth_full_transfer_uses_only_shared_signal():
    spec = D.SynthSpec(num_domains=2, transfer=1.0, instances_per_domain=40, seed=2,
                       noise_tokens_per_instance=2)
    ds = D.synth_generate(spec)
    for inst in ds.split("train"):
        for tok in inst.text.split():
            assert tok.startswith(("sh", "nz"))


def test_synth_zero_transfer_never_uses_shared_signal():
    spec = D.SynthSpec(num_domains=2, transfer=0.0, instances_per_domain=40, seed=3)
    ds = D.synth_generate(spec)
    for inst in ds.split("train"):
        for tok in inst.text.split():
            assert not tok.startswith("sh")


def test_synth_label_frequencies_near_uniform():
    spec = D.SynthSpec(num_domains=1, num_classes=4, instances_per_domain=12500, seed=4)
    ds = D.synth_generate(spec)
    labels = np.array([i.label for i in ds.split("train")])
    freqs = np.bincount(labels, minlength=4) / labels.size
    assert np.abs(freqs - 0.25).max() < 0.02


def test_synth_signal_tokens_match_generating_class():
    # without label noise every signal token's pool class equals the label
    spec = D.SynthSpec(num_domains=2, instances_per_domain=30, seed=5)
    ds = D.synth_generate(spec)
    for inst in ds.split("train"):
        for tok in inst.text.split():
            if tok.startswith("sh"):
                assert int(tok[2: tok.index("x")]) == inst.label
            elif tok.startswith("d") and "c" in tok:
                assert int(tok[tok.index("c") + 1: tok.index("x")]) == inst.label


def test_synth_deterministic_bytes(tmp_path):
    spec = D.SynthSpec(num_domains=2, instances_per_domain=25, seed=6)
    a, b = tmp_path / "a", tmp_path / "b"
    D.write_corpus(D.synth_generate(spec), a)
    D.write_corpus(D.synth_generate(spec), b)
    for split in D.SPLIT_NAMES:
        assert (a / f"{split}.tsv").read_bytes() == (b / f"{split}.tsv").read_bytes()


def test_synth_pool_overlap_rejected():
    spec = D.SynthSpec(
        num_domains=1, num_classes=2,
        shared_pool=(("tok1",), ("tok2",)),
        noise_pool=("tok1",),
    )
    with pytest.raises(SynthSpecError):
        D.synth_generate(spec)


def test_synth_invalid_settings_rejected():
    with pytest.raises(SynthSpecError):
        D.SynthSpec(transfer=1.5).validate()
    with pytest.raises(SynthSpecError):
        D.SynthSpec(num_classes=1).validate()
    with pytest.raises(SynthSpecError):
        D.SynthSpec(label_noise=1.0).validate()


def test_synth_bayes_accuracy():
    assert D.SynthSpec(label_noise=0.0).bayes_accuracy() == 1.0
    spec = D.SynthSpec(label_noise=0.3, num_classes=3)
    assert abs(spec.bayes_accuracy() - (0.7 + 0.1)) < 1e-12


def test_synth_style_tokens_stay_in_their_domain():
    spec = D.SynthSpec(num_domains=3, instances_per_domain=60, seed=8,
                       domain_noise_tokens=10, domain_noise_fraction=0.5)
    ds = D.synth_generate(spec)
    for split in D.SPLIT_NAMES:
        for inst in ds.split(split):
            for tok in inst.text.split():
                if tok.startswith("dn"):
                    assert int(tok[2: tok.index("x")]) == inst.domain


def test_synth_style_fraction_matches_monte_carlo():
    spec = D.SynthSpec(num_domains=1, instances_per_domain=2500, seed=9,
                       noise_tokens_per_instance=8,
                       domain_noise_tokens=10, domain_noise_fraction=0.4)
    ds = D.synth_generate(spec)
    style = total = 0
    for inst in ds.split("train"):
        for tok in inst.text.split():
            if tok.startswith("dn"):
                style += 1
            elif tok.startswith("nz"):
                total += 1
    total += style
    assert abs(style / total - 0.4) < 0.02


def test_synth_zero_style_fraction_leaves_generation_untouched():
    base = D.SynthSpec(num_domains=2, instances_per_domain=25, seed=6)
    with_pool = D.SynthSpec(num_domains=2, instances_per_domain=25, seed=6,
                            domain_noise_tokens=10, domain_noise_fraction=0.0)
    a = D.synth_generate(base)
    b = D.synth_generate(with_pool)
    for split in D.SPLIT_NAMES:
        assert [i.text for i in a.split(split)] == [i.text for i in b.split(split)]


def test_synth_style_validation():
    with pytest.raises(SynthSpecError):
        D.SynthSpec(domain_noise_fraction=0.3).validate()
    with pytest.raises(SynthSpecError):
        D.SynthSpec(domain_noise_fraction=1.5, domain_noise_tokens=5).validate()
    D.SynthSpec(domain_noise_fraction=0.3, domain_noise_tokens=5).validate()


def test_subsample_train_is_per_domain_and_deterministic():
    ds = D.synth_generate(D.SynthSpec(num_domains=3, instances_per_domain=100, seed=7))
    sub1 = D.subsample_train(ds, 0.1, seed=9)
    sub2 = D.subsample_train(ds, 0.1, seed=9)
    assert [i.uid for i in sub1.split("train")] == [i.uid for i in sub2.split("train")]
    for k in range(3):
        assert len(sub1.by_domain("train", k)) == 8
    assert sub1.split("test") == ds.split("test")
    with pytest.raises(SynthSpecError):
        D.subsample_train(ds, 0.0, seed=1)
