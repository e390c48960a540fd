import numpy as np
import pytest

from src.core.errors import EmptyText
from src.translation.embedder import HashingEmbedder, load_synonym_groups, tokenize


def test_tokenize_lowercases_and_splits():
    assert tokenize("Find & Book: NH007 flights!") == ["find", "book", "nh007", "flights"]
    assert tokenize("snake_case words") == ["snake", "case", "words"]


def test_synonym_groups_map_to_first_word():
    table = load_synonym_groups([["Book", "reserve"], ["flight", "airline"], []])
    assert table == {"book": "book", "reserve": "book", "flight": "flight", "airline": "flight"}


def test_same_text_same_vector(embedder):
    other = HashingEmbedder(embedder.dimension, embedder.seed, embedder.synonyms)
    np.testing.assert_array_equal(embedder.embed("book business class flights"),
                                  other.embed("book business class flights"))


def test_unit_norm(embedder):
    for text in ["flight", "find and book flights", "hotel near shibuya station"]:
        assert np.linalg.norm(embedder.embed(text)) == pytest.approx(1.0)


def test_order_and_case_do_not_matter(embedder):
    np.testing.assert_allclose(embedder.embed("Book Flight"), embedder.embed("flight, book!"))


def test_synonyms_collapse(embedder):
    np.testing.assert_allclose(embedder.embed("reserve airline"), embedder.embed("book flight"))


def test_seed_changes_vector(embedder):
    other = HashingEmbedder(embedder.dimension, embedder.seed + 1, embedder.synonyms)
    assert not np.allclose(embedder.embed("find and book flights"), other.embed("find and book flights"))


@pytest.mark.parametrize("text", ["", "   ", None])
def test_empty_text(embedder, text):
    with pytest.raises(EmptyText):
        embedder.embed(text)


def test_punctuation_only_uses_whole_text_hash(embedder):
    vector = embedder.embed("!!! ---")
    assert vector.shape == (64,)
    assert np.isclose(np.linalg.norm(vector), 1.0)
    assert np.count_nonzero(vector) == 1
    assert np.array_equal(vector, embedder.embed("  !!!   ---  "))


def test_batch_shape(embedder):
    batch = embedder.embed_batch(["flight", "hotel", "transfer"])
    assert batch.shape == (3, 64)
    np.testing.assert_allclose(batch[1], embedder.embed("hotel"))
    assert embedder.embed_batch([]).shape == (0, 64)


@pytest.mark.parametrize("dimension, seed", [(0, 7), (16, -1), (16, 2 ** 32)])
def test_invalid_parameters(dimension, seed):
    with pytest.raises(ValueError):
        HashingEmbedder(dimension, seed)


def test_from_config_defaults():
    embedder = HashingEmbedder.from_config({})
    assert (embedder.dimension, embedder.seed, embedder.synonyms) == (64, 7, {})
