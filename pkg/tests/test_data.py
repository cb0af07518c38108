import json
import warnings

import numpy as np
import pytest

from dropping.data import (PairDataset, PairInstance, SynthSpec, Vocabulary, class_weights,
                           few_shot_sample, genre_quotas, load_pairs, pair_swap_augment,
                           synth_task, tokenize)
from dropping.errors import ConfigurationError, InputError
from dropping.losses import evaluate


def write(path, text):
    path.write_text(text, encoding="utf-8")
    return path


def toy(n, labels=None, genres=None, pair_ids=None):
    insts = []
    for i in range(n):
        insts.append(PairInstance(("a", f"t{i % 7}"), ("b",), labels[i] if labels else i % 2,
                                  genres[i] if genres else None,
                                  pair_ids[i] if pair_ids else f"p{i}"))
    vocab = Vocabulary.build([s for x in insts for s in (x.sentence1, x.sentence2)])
    return PairDataset(insts, ("0", "1", "2")[: max(2, max(x.label for x in insts) + 1)], vocab)


# ---------------------------------------------------------------- tokenisation / vocab

def test_tokenize():
    assert tokenize("A man, playing GUITAR!") == ["a", "man", ",", "playing", "guitar", "!"]
    assert tokenize("don't") == ["don", "'", "t"]


def test_vocabulary_round_trip(tmp_path):
    v = Vocabulary.build([["b", "a", "b"], ["c"]])
    assert v.itos[0] == "<unk>" and v.itos[1] == "b"
    ids = v.encode(["a", "b", "zzz"])
    assert ids[2] == 0
    assert v.decode(v.encode(["a", "c", "b"])) == ["a", "c", "b"]
    v.dump(tmp_path / "vocab.txt")
    assert (tmp_path / "vocab.txt").read_text().splitlines()[1] == "b\t1"
    assert Vocabulary.load(tmp_path / "vocab.txt") == v


# ---------------------------------------------------------------- loaders

def test_load_two_row_tsv(tmp_path):
    p = write(tmp_path / "d.tsv", "yes\tA dog runs.\tAn animal moves.\nno\tA cat.\tA car.\n")
    ds = load_pairs(p)
    assert len(ds) == 2 and ds.label_names == ("no", "yes")
    assert ds.instances[0].label == 1 and ds.instances[0].sentence1 == ("a", "dog", "runs", ".")


def test_load_drops_unlabelled(tmp_path):
    p = write(tmp_path / "d.tsv", "a\tx y\tz\n-\tq\tr\nb\tu\tv\tfiction\n")
    ds = load_pairs(p)
    assert len(ds) == 2 and ds.report["dropped_unlabeled"] == 1
    assert ds.instances[1].genre == "fiction"


def test_load_mixed_file_warns_with_line_number(tmp_path):
    rows = ["a\tone two\tthree", "b\tfour\tfive", "broken row without tabs",
            "a\tsix\tseven", "b\teight\tnine"]
    p = write(tmp_path / "d.tsv", "\n".join(rows) + "\n")
    with pytest.warns(UserWarning, match=r"d\.tsv:3: malformed"):
        ds = load_pairs(p)
    assert len(ds) == 4


def test_load_all_malformed_is_input_error(tmp_path):
    p = write(tmp_path / "d.tsv", "nothing here\nnor here\n")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(InputError):
            load_pairs(p)


def test_load_snli_jsonl(tmp_path):
    rows = [{"gold_label": "entailment", "sentence1": "A b.", "sentence2": "C d", "genre": "g1"},
            {"gold_label": "-", "sentence1": "x", "sentence2": "y"},
            {"gold_label": "contradiction", "sentence1": "E", "sentence2": "F"},
            {"gold_label": "neutral", "sentence1": "G", "sentence2": "H"}]
    p = write(tmp_path / "d.jsonl", "\n".join(json.dumps(r) for r in rows) + "\n")
    ds = load_pairs(p, fmt="snli_jsonl")
    assert ds.label_names == ("contradiction", "entailment", "neutral")
    assert [x.label for x in ds.instances] == [1, 0, 2]
    assert ds.report["dropped_unlabeled"] == 1


def test_loading_twice_is_identical(tmp_path):
    p = write(tmp_path / "d.tsv", "a\tx y\tz\nb\tu\tv\na\tw\tx\n")
    a, b = load_pairs(p), load_pairs(p)
    assert a.instances == b.instances and a.vocab == b.vocab
    assert a.encoded()[0] == b.encoded()[0]


def test_shared_vocabulary_maps_oov_to_zero(tmp_path):
    train = load_pairs(write(tmp_path / "a.tsv", "a\tknown words\there\nb\tmore\twords\n"))
    test = load_pairs(write(tmp_path / "b.tsv", "a\tknown strange\there\n"),
                      vocab=train.vocab, label_names=train.label_names)
    s1, _, _ = test.encoded()
    assert s1[0][1] == 0 and s1[0][0] == train.vocab.stoi["known"]


# ---------------------------------------------------------------- augmentation / weights

def test_pair_swap_augment_counts():
    ds = toy(100)
    rng = np.random.default_rng(0)
    assert len(pair_swap_augment(ds, rng, 0.0)) == 100
    assert len(pair_swap_augment(ds, rng, 1.0)) == 200
    out = pair_swap_augment(ds, np.random.default_rng(3), 0.5)
    assert len(out) == 150
    extra = out.instances[100:]
    originals = {x.pair_id: x for x in ds.instances}
    for x in extra:
        src = originals[x.pair_id.removesuffix("~swap")]
        assert (x.sentence1, x.sentence2, x.label) == (src.sentence2, src.sentence1, src.label)
    assert len({x.pair_id for x in out.instances}) == 150


def test_class_weights_examples():
    np.testing.assert_allclose(class_weights(toy(10)).as_array(), [1.0, 1.0])
    w = class_weights(toy(100, labels=[1] * 36 + [0] * 64)).as_array()
    np.testing.assert_allclose(w, [0.72, 1.28], atol=1e-12)
    # 1:1:2 -> inverse frequency [4, 4, 2] scaled to mean 1
    w3 = class_weights(toy(8, labels=[0, 0, 1, 1, 2, 2, 2, 2])).as_array()
    np.testing.assert_allclose(w3, [1.2, 1.2, 0.6], atol=1e-12)
    assert abs(w3.mean() - 1) < 1e-12


def test_class_weights_missing_class():
    ds = toy(4, labels=[0, 0, 2, 2])
    with pytest.raises(InputError):
        class_weights(ds)


# ---------------------------------------------------------------- few-shot sampling

def test_few_shot_exact_count():
    few, rest = few_shot_sample(toy(1000), 0.03, rng=np.random.default_rng(1))
    assert len(few) == 30 and len(rest) == 970


def test_few_shot_genre_minimum():
    genres = [f"g{i // 1000}" for i in range(5000)]
    few, rest = few_shot_sample(toy(5000, genres=genres), 0.03, genre_min=100,
                                rng=np.random.default_rng(2))
    counts = {g: sum(x.genre == g for x in few.instances) for g in set(genres)}
    assert all(c >= 100 for c in counts.values())
    assert len(few) == 500 and len(rest) == 4500


def test_few_shot_uneven_genres_and_quota_errors():
    assert genre_quotas({"a": 900, "b": 100}, 300, 100) == {"a": 200, "b": 100}
    assert sum(genre_quotas({"a": 50, "b": 30, "c": 20}, 10, 0).values()) == 10
    with pytest.raises(ConfigurationError, match="tiny"):
        genre_quotas({"big": 500, "tiny": 40}, 100, 50)


def test_few_shot_keeps_pair_ids_together():
    pair_ids = [f"q{i // 3}" for i in range(300)]
    few, rest = few_shot_sample(toy(300, pair_ids=pair_ids), 0.1, rng=np.random.default_rng(5))
    a = {x.pair_id for x in few.instances}
    b = {x.pair_id for x in rest.instances}
    assert not a & b
    assert len(few) + len(rest) == 300 and len(few) == 30


def test_few_shot_validation():
    with pytest.raises(ConfigurationError):
        few_shot_sample(toy(10), 1.0)


# ---------------------------------------------------------------- synthetic tasks

def test_synth_deterministic_and_balanced():
    spec = SynthSpec(size=2000, noise=0.1)
    a = synth_task(spec, np.random.default_rng(9))
    b = synth_task(spec, np.random.default_rng(9))
    assert a.instances == b.instances
    frac = a.labels.mean()
    assert abs(frac - 0.5) <= 0.02
    assert len(a) == 2000 and a.n_classes == 2


def test_synth_rules_and_identity_pairs():
    from dropping.data import _relation, _score

    for rule in ("overlap_threshold", "order_sensitive"):
        spec = SynthSpec(rule=rule, shift=0.3)
        match, _ = _relation(spec)
        a = np.array([3, 7, 11, 2, 9])
        assert _score(spec, match, a, match[a]) == 1.0
    spec = SynthSpec()
    match, _ = _relation(spec)
    assert np.array_equal(match, np.arange(spec.vocab_size))  # shift 0: identity
    a = np.array([1, 2, 3, 4, 5])
    assert _score(spec, match, a, a) >= spec.threshold


def test_synth_shift_changes_rule_but_not_vocabulary():
    a = synth_task(SynthSpec(shift=0.0, size=200), np.random.default_rng(0))
    b = synth_task(SynthSpec(shift=0.8, size=200), np.random.default_rng(0))
    assert a.vocab == b.vocab
    from dropping.data import _relation

    m0, _ = _relation(SynthSpec(shift=0.0))
    m8, _ = _relation(SynthSpec(shift=0.8))
    assert (m0 != m8).mean() == pytest.approx(0.8, abs=0.05)


def test_synth_validation():
    with pytest.raises(ConfigurationError):
        SynthSpec(noise=0.5)
    with pytest.raises(ConfigurationError):
        SynthSpec(size=5)


def test_shift_zero_tasks_transfer_zero_shot(shift0_source):
    # the fixture model was trained on a shift-0 task drawn with seed 1
    other = synth_task(SynthSpec(size=1000), np.random.default_rng(3)).encoded()
    acc = evaluate(shift0_source.predict_proba(other[0], other[1]), other[2])["accuracy"]
    assert acc >= 90.0
