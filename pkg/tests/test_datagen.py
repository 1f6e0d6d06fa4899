import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vibser.datagen import (
    AGE_VALUES,
    EMOTIONS,
    EMPHASIS_VALUES,
    ENERGY_VALUES,
    GENDER_VALUES,
    PITCH_VALUES,
    SPEED_VALUES,
    TONE_VALUES,
    CorpusSpec,
    DatasetFormatError,
    DescriptorAttrs,
    corpora_equal,
    generate_corpus,
    read_dataset,
    render_descriptor_caption,
    split_folds,
    synth_features,
    word_list,
    write_dataset,
)

from oracles import frame_probe_accuracy


def small_spec(**kw):
    base = dict(n_utterances=40, n_layers=6, t_range=(12, 24), dim=16,
                vocab_size=60, content_layers=(0, 1), descriptor_layers=(4, 5), seed=3)
    base.update(kw)
    return CorpusSpec(**base)


# ---------------------------------------------------------------------------
# captions


def test_caption_template_fill():
    attrs = DescriptorAttrs(pitch="high", energy="high", speed="fast", age="young",
                            gender="female", tone="excited", emphasis="strong")
    caption = render_descriptor_caption(attrs, "happy")
    assert caption == ("a high pitched fast speech with strong emphasis spoken by a "
                       "young female in a excited tone").split()


def test_caption_deterministic():
    attrs = DescriptorAttrs("low", "medium", "slow", "senior", "male", "calm", "weak")
    assert render_descriptor_caption(attrs, "sad") == render_descriptor_caption(attrs, "sad")


def test_caption_distinct_over_rendered_attributes():
    # energy does not appear in the template, so distinctness holds over the
    # six rendered attributes: 3*3*2*3*2*4 = 432 distinct captions
    captions = set()
    combos = itertools.product(PITCH_VALUES, ENERGY_VALUES, SPEED_VALUES, AGE_VALUES,
                               GENDER_VALUES, TONE_VALUES, EMPHASIS_VALUES)
    for pitch, energy, speed, age, gender, tone, emphasis in combos:
        attrs = DescriptorAttrs(pitch, energy, speed, age, gender, tone, emphasis)
        captions.add(" ".join(render_descriptor_caption(attrs, "neutral")))
    assert len(captions) == 3 * 3 * 2 * 3 * 2 * 4 == 432


def test_attrs_validation():
    with pytest.raises(ValueError, match="pitch"):
        DescriptorAttrs("shrill", "low", "slow", "young", "male", "calm", "weak")
    with pytest.raises(ValueError, match="tone"):
        DescriptorAttrs("low", "low", "slow", "young", "male", "two words", "weak")


# ---------------------------------------------------------------------------
# corpus generation


def test_stratified_balanced_four_class():
    spec = small_spec(n_utterances=100)
    corpus = generate_corpus(spec)
    counts = {}
    for utt in corpus:
        counts[utt.emotion] = counts.get(utt.emotion, 0) + 1
    assert counts == {"happy": 25, "sad": 25, "angry": 25, "neutral": 25}


def test_generate_deterministic():
    spec = small_spec()
    assert corpora_equal(generate_corpus(spec), generate_corpus(spec))


def test_generate_requires_feasible_spec():
    with pytest.raises(ValueError, match="layers"):
        CorpusSpec(n_layers=3, content_layers=(0, 1), descriptor_layers=(2, 3)).validate()
    with pytest.raises(ValueError, match="overlap"):
        CorpusSpec(content_layers=(0, 1), descriptor_layers=(1, 2)).validate()


def test_transcript_lengths_and_vocab():
    corpus = generate_corpus(small_spec())
    words = set(word_list(60))
    for utt in corpus:
        assert 5 <= len(utt.transcript) <= 12
        assert set(utt.transcript) <= words


def test_planted_content_layers_probe_above_09():
    spec = small_spec(n_utterances=240, dim=16, noise_std=0.05)
    corpus = generate_corpus(spec)
    vocab = word_list(spec.vocab_size)
    c_acc = frame_probe_accuracy(corpus, spec.content_layers, vocab)
    q_acc = frame_probe_accuracy(corpus, spec.descriptor_layers, vocab)
    assert c_acc > 0.9
    assert q_acc < 0.1  # chance is ~1/vocab


def test_zero_noise_content_layers_depend_only_on_transcript():
    spec = small_spec(noise_std=0.0)
    transcript = list(word_list(spec.vocab_size)[:6])
    a1 = DescriptorAttrs("low", "low", "slow", "young", "male", "calm", "weak")
    a2 = DescriptorAttrs("high", "high", "fast", "senior", "female", "harsh", "strong")
    f1 = synth_features(transcript, a1, "happy", spec, noise_seed=1)
    f2 = synth_features(transcript, a2, "angry", spec, noise_seed=2)
    for layer in spec.content_layers:
        np.testing.assert_array_equal(f1[layer], f2[layer])


def test_zero_noise_descriptor_layers_depend_only_on_attrs_and_emotion():
    spec = small_spec(noise_std=0.0)
    words = word_list(spec.vocab_size)
    attrs = DescriptorAttrs("high", "low", "fast", "adult", "female", "bright", "strong")
    f1 = synth_features(list(words[:6]), attrs, "sad", spec, noise_seed=5)
    f2 = synth_features(list(words[6:12]), attrs, "sad", spec, noise_seed=6)
    for layer in spec.descriptor_layers:
        np.testing.assert_array_equal(f1[layer], f2[layer])


def test_noise_layers_uncorrelated_with_labels():
    spec = small_spec(n_utterances=1000, t_range=(12, 20), dim=16)
    corpus = generate_corpus(spec)
    noise_layers = [l for l in range(spec.n_layers)
                    if l not in spec.content_layers and l not in spec.descriptor_layers]
    pooled = np.stack([utt.features[noise_layers].mean(axis=(0, 1)) for utt in corpus])
    labels = sorted({u.emotion for u in corpus})
    worst = 0.0
    for lab in labels:
        y = np.array([1.0 if u.emotion == lab else 0.0 for u in corpus])
        for dim in range(pooled.shape[1]):
            r = np.corrcoef(pooled[:, dim], y)[0, 1]
            worst = max(worst, abs(float(r)))
    assert worst < 0.1


# ---------------------------------------------------------------------------
# folds


def test_folds_partition_ten_by_five():
    corpus = generate_corpus(small_spec(n_utterances=10))
    folds = split_folds(corpus, 5)
    test_ids = [frozenset(u.id for _, test in [f] for u in test) for f in folds]
    assert all(len(t) == 2 for t in test_ids)
    assert len(frozenset.union(*test_ids)) == 10


def test_folds_union_covers_corpus():
    corpus = generate_corpus(small_spec(n_utterances=23))
    folds = split_folds(corpus, 4)
    seen = set()
    for train, test in folds:
        ids = {u.id for u in test}
        assert not (ids & seen)
        seen |= ids
        assert {u.id for u in train} == {u.id for u in corpus} - ids
    assert seen == {u.id for u in corpus}


def test_fold_sizes_largest_first_101_by_5():
    corpus = generate_corpus(small_spec(n_utterances=101))
    sizes = [len(test) for _, test in split_folds(corpus, 5)]
    assert sizes == [21, 20, 20, 20, 20]


def test_folds_deterministic_given_seed():
    corpus = generate_corpus(small_spec(n_utterances=17))
    a = split_folds(corpus, 3, seed=9)
    b = split_folds(corpus, 3, seed=9)
    assert [[u.id for u in test] for _, test in a] == [[u.id for u in test] for _, test in b]


def test_folds_reject_oversized_k():
    corpus = generate_corpus(small_spec(n_utterances=4))
    with pytest.raises(ValueError, match="exceeds"):
        split_folds(corpus, 5)


# ---------------------------------------------------------------------------
# formats


def test_round_trip_value_identical(tmp_path):
    corpus = generate_corpus(small_spec(n_utterances=6))
    write_dataset(corpus, tmp_path / "ds")
    assert corpora_equal(corpus, read_dataset(tmp_path / "ds"))


def test_truncated_feature_file_reports_byte_counts(tmp_path):
    corpus = generate_corpus(small_spec(n_utterances=2))
    write_dataset(corpus, tmp_path / "ds")
    target = tmp_path / "ds" / "features" / f"{corpus[0].id}.serf"
    blob = target.read_bytes()
    target.write_bytes(blob[:-8])
    with pytest.raises(DatasetFormatError, match=r"expected \d+ bytes, got \d+"):
        read_dataset(tmp_path / "ds")


def test_unknown_emotion_rejected_with_field_name(tmp_path):
    corpus = generate_corpus(small_spec(n_utterances=2))
    write_dataset(corpus, tmp_path / "ds")
    manifest = tmp_path / "ds" / "manifest.jsonl"
    text = manifest.read_text().replace(f'"{corpus[0].emotion}"', '"joyful"', 1)
    manifest.write_text(text)
    with pytest.raises(DatasetFormatError, match="'emotion'"):
        read_dataset(tmp_path / "ds")


def test_write_is_byte_deterministic(tmp_path):
    spec = small_spec(n_utterances=4)
    for name in ("a", "b"):
        write_dataset(generate_corpus(spec), tmp_path / name)
    a = (tmp_path / "a" / "manifest.jsonl").read_bytes()
    b = (tmp_path / "b" / "manifest.jsonl").read_bytes()
    assert a == b
    for f in sorted((tmp_path / "a" / "features").iterdir()):
        assert f.read_bytes() == (tmp_path / "b" / "features" / f.name).read_bytes()


@given(st.integers(min_value=2, max_value=7), st.integers(min_value=0, max_value=50))
@settings(max_examples=15, deadline=None)
def test_fold_property_partition(k, seed):
    corpus = generate_corpus(small_spec(n_utterances=21, seed=1))
    folds = split_folds(corpus, k, seed=seed)
    all_test = [u.id for _, test in folds for u in test]
    assert sorted(all_test) == sorted(u.id for u in corpus)
