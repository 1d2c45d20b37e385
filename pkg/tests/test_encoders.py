import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from kgdiag.encoders import (
    PAD_INDEX,
    UNK_INDEX,
    EncoderConfig,
    MultiFilterCnn,
    TokenizedDoc,
    Vocabulary,
    encode_chunked_pretrained,
    load_stopwords,
    preprocess,
)
from kgdiag.errors import ConfigError, EmptyDocError, EncoderError


class TestPreprocess:
    def test_lowercase_punct_stopwords(self):
        doc = preprocess("The patient has FEVER.", {"the", "has"})
        assert doc.tokens == ["patient", "fever"]

    def test_all_stopwords_raises(self):
        with pytest.raises(EmptyDocError):
            preprocess("the a of", {"the", "a", "of"})

    def test_punctuation_only_raises(self):
        with pytest.raises(EmptyDocError):
            preprocess("... !!! ---")

    def test_punctuation_splits_joined_words(self):
        assert preprocess("fever,chills").tokens == ["fever", "chills"]

    def test_truncation(self, caplog):
        doc = preprocess("a b c d e f", max_tokens=3)
        assert doc.tokens == ["a", "b", "c"]

    @given(st.text(alphabet="abc XYZ.,!-", max_size=60))
    @settings(max_examples=150, deadline=None)
    def test_idempotence(self, text):
        stop = {"b"}
        try:
            once = preprocess(text, stop)
        except EmptyDocError:
            return
        again = preprocess(" ".join(once.tokens), stop)
        assert again.tokens == once.tokens

    def test_stopword_file(self, tmp_path):
        path = tmp_path / "stop.txt"
        path.write_text("The\n\n a\n", encoding="utf-8")
        assert load_stopwords(path) == {"the", "a"}


class TestVocabulary:
    def test_reserved_rows_and_unk(self):
        vocab = Vocabulary.build([TokenizedDoc(["fever", "fever", "cough"])])
        ids = vocab.encode(TokenizedDoc(["fever", "mystery"]))
        assert ids[0].item() >= 2
        assert ids[1].item() == UNK_INDEX
        assert PAD_INDEX == 0 and UNK_INDEX == 1

    def test_frequency_then_lexicographic_order(self):
        vocab = Vocabulary.build([TokenizedDoc(["b", "b", "a", "c", "c"])])
        assert vocab.index["b"] == 2  # most frequent first
        assert vocab.index["c"] == 3
        assert vocab.index["a"] == 4

    def test_min_count_filter(self):
        vocab = Vocabulary.build([TokenizedDoc(["a", "a", "b"])], min_count=2)
        assert "a" in vocab.index and "b" not in vocab.index

    def test_save_load_round_trip(self, tmp_path):
        vocab = Vocabulary.build([TokenizedDoc(["x", "y", "z"])])
        path = tmp_path / "vocab.json"
        vocab.save(path)
        loaded = Vocabulary.load(path)
        assert loaded.index == vocab.index


class TestEncoderConfig:
    def test_even_kernel_rejected(self):
        with pytest.raises(ConfigError):
            EncoderConfig(kernel_sizes=(4,))

    def test_single_filter_truncates_kernels(self):
        config = EncoderConfig(kind="single_filter_cnn", kernel_sizes=(3, 5, 9))
        assert config.kernel_sizes == (3,)

    def test_output_dim(self):
        config = EncoderConfig(kernel_sizes=(3, 5), channels_per_kernel=7)
        assert config.cnn_output_dim == 14


class TestMultiFilterCnn:
    def test_identity_configuration_reproduces_embeddings(self):
        torch.manual_seed(0)
        d = 6
        cnn = MultiFilterCnn(
            vocab_size=30,
            embedding_dim=d,
            kernel_sizes=(1,),
            channels_per_kernel=d,
            dropout=0.0,
            activation="none",
        )
        with torch.no_grad():
            cnn.convs[0].weight.copy_(torch.eye(d).view(d, d, 1))
            cnn.convs[0].bias.zero_()
        ids = torch.randint(2, 30, (9,))
        out = cnn(ids)
        expected = cnn.embedding(ids)
        assert torch.allclose(out, expected, atol=1e-6)

    def test_shape_contract_two_kernels(self):
        cnn = MultiFilterCnn(50, 16, (3, 5), channels_per_kernel=11, dropout=0.0)
        out = cnn(torch.randint(2, 50, (4, 27)))
        assert out.shape == (4, 27, 22)

    def test_seq_shorter_than_kernel_is_legal(self):
        cnn = MultiFilterCnn(50, 8, (9,), channels_per_kernel=5, dropout=0.0)
        out = cnn(torch.randint(2, 50, (2,)))
        assert out.shape == (2, 5)

    @given(seq=st.integers(min_value=1, max_value=2048))
    @settings(max_examples=20, deadline=None)
    def test_shape_property_random_lengths(self, seq):
        cnn = MultiFilterCnn(40, 8, (3, 5), channels_per_kernel=4, dropout=0.0)
        out = cnn(torch.randint(2, 40, (seq,)))
        assert out.shape == (seq, 8)

    def test_gradient_matches_finite_differences(self):
        torch.manual_seed(1)
        cnn = MultiFilterCnn(
            20, embedding_dim=4, kernel_sizes=(3,), channels_per_kernel=3, dropout=0.0
        ).double()
        ids = torch.randint(2, 20, (6,))
        readout = torch.randn(6, 3, dtype=torch.float64)

        def scalar():
            return (cnn(ids) * readout).sum()

        scalar().backward()
        weight = cnn.convs[0].weight
        grads = weight.grad.clone()
        eps = 1e-6
        flat = weight.data.view(-1)
        flat_grad = grads.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            up = scalar().item()
            flat[i] = orig - eps
            down = scalar().item()
            flat[i] = orig
            fd = (up - down) / (2 * eps)
            denom = max(abs(fd), abs(flat_grad[i].item()), 1e-10)
            assert abs(fd - flat_grad[i].item()) / denom < 1e-4


class MockChunkEncoder:
    def __init__(self, hidden_size=5, constant=None):
        self.hidden_size = hidden_size
        self.constant = constant
        self.chunk_sizes = []

    def encode_tokens(self, tokens):
        self.chunk_sizes.append(len(tokens))
        if self.constant is not None:
            return np.full((len(tokens), self.hidden_size), self.constant)
        return np.arange(len(tokens) * self.hidden_size, dtype=np.float64).reshape(
            len(tokens), self.hidden_size
        )


class TestChunkedEncoder:
    def test_short_doc_single_chunk(self):
        encoder = MockChunkEncoder()
        doc = TokenizedDoc(["a"] * 40)
        out = encode_chunked_pretrained(doc, encoder, chunk_len=512)
        assert encoder.chunk_sizes == [40]
        assert out.shape == (40, 5)
        assert torch.allclose(out, torch.as_tensor(encoder.encode_tokens(doc.tokens), dtype=out.dtype))

    def test_thousand_tokens_two_chunks(self):
        encoder = MockChunkEncoder()
        doc = TokenizedDoc([f"t{i}" for i in range(1000)])
        out = encode_chunked_pretrained(doc, encoder, chunk_len=512)
        assert encoder.chunk_sizes == [512, 488]
        assert out.shape == (1000, 5)

    def test_constant_encoder_gives_constant_output(self):
        encoder = MockChunkEncoder(constant=3.25)
        out = encode_chunked_pretrained(TokenizedDoc(["x"] * 700), encoder, chunk_len=256)
        assert out.shape == (700, 5)
        assert torch.all(out == 3.25)

    def test_encoder_failure_wrapped(self):
        class Broken:
            hidden_size = 4

            def encode_tokens(self, tokens):
                raise RuntimeError("boom")

        with pytest.raises(EncoderError, match="offset 0"):
            encode_chunked_pretrained(TokenizedDoc(["a", "b"]), Broken(), 512)

    def test_row_count_mismatch_rejected(self):
        class OffByOne:
            hidden_size = 4

            def encode_tokens(self, tokens):
                return np.zeros((len(tokens) + 1, 4))

        with pytest.raises(EncoderError, match="rows"):
            encode_chunked_pretrained(TokenizedDoc(["a", "b"]), OffByOne(), 512)

    def test_bad_chunk_len_rejected(self):
        with pytest.raises(ConfigError):
            encode_chunked_pretrained(TokenizedDoc(["a"]), MockChunkEncoder(), 0)
