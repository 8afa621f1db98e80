import json

import pytest
from hypothesis import given, strategies as st

from fitcls.corpus import (BOS, EOS, PAD, SPECIALS, UNK, FitLabel, Review, Vocabulary, build_vocabulary,
                           build_vocabulary_from_tokens, dataset_checksum, dataset_stats, decode, encode,
                           generate_synthetic_corpus, load_reviews, load_reviews_counted, read_split, split,
                           split_sizes, tokenize, write_split)
from fitcls.errors import EmptyDatasetError, InputError


def _write_jsonl(path, records):
    path.write_text("\n".join(json.dumps(r) for r in records) + "\n", encoding="utf-8")


def test_tokenize_lowercases_and_splits_punctuation():
    assert tokenize("Runs SMALL, size up!") == ["runs", "small", ",", "size", "up", "!"]
    assert tokenize("it's 5'6\"") == ["it", "'", "s", "5", "'", "6", '"']
    assert tokenize("snake_case") == ["snake", "_", "case"]
    assert tokenize("   ") == []


def test_loader_keeps_valid_records_in_file_order(tmp_path):
    path = tmp_path / "mc.json"
    _write_jsonl(path, [
        {"fit": "small", "review_text": "Too tight.", "review_summary": "Tiny"},
        {"fit": "fit", "review_text": ""},
        {"fit": "large", "review_text": "Huge on me"},
        {"fit": "weird", "review_text": "ok"},
        {"review_text": "no label"},
        {"fit": "Fit", "review_text": "Perfect"},
    ])
    reviews, skipped = load_reviews_counted(path, "modcloth")
    assert skipped == 3
    assert [r.label for r in reviews] == [FitLabel.SMALL, FitLabel.LARGE, FitLabel.FIT]
    assert reviews[0].text == "Tiny Too tight."
    assert reviews[0].id == "modcloth-1"
    assert load_reviews(path, "modcloth", include_summary=False)[0].text == "Too tight."


def test_loader_reports_malformed_line(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"fit": "fit", "review_text": "ok"}\n{not json\n', encoding="utf-8")
    with pytest.raises(InputError, match="line 2"):
        load_reviews(path, "rtr")


def test_loader_rejects_files_without_usable_records(tmp_path):
    path = tmp_path / "empty.json"
    _write_jsonl(path, [{"fit": "fit"}])
    with pytest.raises(EmptyDatasetError):
        load_reviews(path, "rtr")
    with pytest.raises(InputError):
        load_reviews(path, "amazon")


def test_empty_review_text_rejected():
    with pytest.raises(InputError):
        Review("x", "   ", FitLabel.FIT)


def test_vocabulary_order_and_specials():
    vocab = build_vocabulary_from_tokens([["b", "a", "c"], ["a", "b"], ["a"]])
    assert vocab.tokens[:4] == SPECIALS
    assert (UNK, PAD, BOS, EOS) == (0, 1, 2, 3)
    # frequency descending, ties broken alphabetically
    assert vocab.tokens[4:] == ("a", "b", "c")
    assert vocab.freqs[4:] == (3, 2, 1)
    assert encode(["a", "zzz"], vocab) == [4, UNK]
    assert decode([4, 5], vocab) == ["a", "b"]


def test_vocabulary_thresholds():
    docs = [["a", "a", "b", "c"], ["a", "b"]]
    assert build_vocabulary_from_tokens(docs, min_freq=2).tokens[4:] == ("a", "b")
    assert build_vocabulary_from_tokens(docs, max_size=5).tokens[4:] == ("a",)
    with pytest.raises(EmptyDatasetError):
        build_vocabulary_from_tokens(docs, min_freq=10)
    with pytest.raises(InputError):
        build_vocabulary_from_tokens(docs, min_freq=0)


def test_vocabulary_round_trip_and_hash():
    vocab = build_vocabulary_from_tokens([["x", "y", "y"]])
    again = Vocabulary.from_dict(json.loads(json.dumps(vocab.to_dict())))
    assert again == vocab and again.hash == vocab.hash
    other = build_vocabulary_from_tokens([["x", "z", "z"]])
    assert other.hash != vocab.hash


@given(st.lists(st.lists(st.sampled_from(list("abcdefg")), max_size=8), min_size=1, max_size=10)
       .filter(lambda docs: any(docs)))
def test_encode_decode_round_trip_on_known_tokens(docs):
    vocab = build_vocabulary_from_tokens(docs)
    for doc in docs:
        assert decode(encode(doc, vocab), vocab) == doc


@pytest.mark.parametrize("n, expected", [(100, (76, 4, 20)), (300, (228, 12, 60)), (76059, (57805, 3042, 15212))])
def test_split_sizes(n, expected):
    assert split_sizes(n) == expected


@given(st.integers(min_value=20, max_value=5000))
def test_split_sizes_partition(n):
    train, val, test = split_sizes(n)
    assert train + val + test == n
    assert min(train, val, test) >= 0
    assert abs(test - 0.2 * n) <= 0.5
    assert abs(val - 0.05 * (n - test)) <= 0.5


def test_split_is_seeded_partition():
    reviews = generate_synthetic_corpus(300, 5)
    a, b, c = split(reviews, 1), split(reviews, 1), split(reviews, 2)
    assert a == b
    assert a.test != c.test
    assert a.counts() == {"train": 228, "validation": 12, "test": 60}
    ids = [r.id for r in a.train + a.validation + a.test]
    assert sorted(ids) == sorted(r.id for r in reviews)
    with pytest.raises(InputError):
        split(reviews[:10], 0)


def test_synthetic_corpus_balanced_and_deterministic():
    reviews = generate_synthetic_corpus(301, 9)
    assert reviews == generate_synthetic_corpus(301, 9)
    assert reviews != generate_synthetic_corpus(301, 10)
    counts = dataset_stats(reviews)["label_histogram"]
    assert sorted(counts.values()) == [100, 100, 101]
    with pytest.raises(InputError):
        generate_synthetic_corpus(10, 0)


def test_dataset_stats_fields():
    reviews = [Review("a", "Runs small.", FitLabel.SMALL), Review("b", "Fits", FitLabel.FIT)]
    stats = dataset_stats(reviews)
    assert stats["count"] == 2
    assert stats["avg_tokens"] == 2.0
    assert stats["vocab_size"] == 4
    assert stats["label_histogram"] == {"fit": 1, "small": 1, "large": 0}
    with pytest.raises(EmptyDatasetError):
        dataset_stats([])


def test_write_and_read_split(tmp_path):
    ds = split(generate_synthetic_corpus(300, 3), 3)
    meta = write_split(ds, tmp_path / "d", {"dataset_id": "syn"})
    first = (tmp_path / "d" / "meta.json").read_bytes()
    write_split(ds, tmp_path / "d", {"dataset_id": "syn"})
    assert (tmp_path / "d" / "meta.json").read_bytes() == first
    back, meta2 = read_split(tmp_path / "d")
    assert back == ds
    assert meta2 == meta
    assert meta["checksum"] == dataset_checksum(ds.train + ds.validation + ds.test)
    with pytest.raises(InputError):
        read_split(tmp_path / "missing")
