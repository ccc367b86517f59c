"""Tokenizer contracts, encoder invariants, and MLM behavior."""

import numpy as np
import pytest

from debiaskit import autodiff as ad
from debiaskit.encoder import (CLS_ID, PAD_ID, SEP_ID, UNK_ID, EncoderConfig,
                               EncoderModel, Vocabulary, build_vocab, encode,
                               mlm_logits, tokenize, tokenize_batch,
                               tokenize_pair)
from debiaskit.errors import EmptyText, IdOutOfRange
from debiaskit.trainer import Adam, mask_tokens
from debiaskit.objective import mlm_loss


@pytest.fixture(scope="module")
def vocab():
    return build_vocab(["the girl ate .", "a boy runs fast", "nurse is she",
                        "the dog sat down ."])


@pytest.fixture(scope="module")
def model(vocab):
    return EncoderModel(vocab, EncoderConfig(layers=2, heads=2, hidden_dim=16,
                                             ffn_dim=32, maxlen=12), seed=3)


class TestTokenizer:
    def test_basic_sentence(self, vocab):
        ids, mask = tokenize("The girl ate.", vocab, 12)
        toks = [vocab.tokens[i] for i in ids]
        assert toks[:6] == ["[CLS]", "the", "girl", "ate", ".", "[SEP]"]
        assert all(i == PAD_ID for i in ids[6:])
        assert mask == [1] * 6 + [0] * 6

    def test_empty_text(self, vocab):
        with pytest.raises(EmptyText):
            tokenize("   ", vocab, 12)

    def test_truncation(self, vocab):
        ids, mask = tokenize("the " * 40, vocab, 12)
        assert len(ids) == 12
        non_pad = [i for i in ids if i != PAD_ID]
        assert non_pad[-1] == SEP_ID
        assert len(non_pad) == 12

    def test_oov_becomes_unk(self, vocab):
        ids, _ = tokenize("the zebra ate.", vocab, 12)
        assert UNK_ID in ids

    def test_pair_layout(self, vocab):
        ids, mask = tokenize_pair("the girl ate.", "a boy runs", vocab, 12)
        seps = [k for k, i in enumerate(ids) if i == SEP_ID]
        assert ids[0] == CLS_ID and len(seps) == 2
        assert sum(mask) == seps[-1] + 1

    def test_vocab_round_trip(self, vocab, tmp_path):
        path = tmp_path / "vocab.txt"
        vocab.save(path)
        again = Vocabulary.load(path)
        assert again.tokens == vocab.tokens


class TestEncode:
    def test_identical_rows(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate .", "the girl ate ."], vocab, 12)
        out = encode(model, ids, mask)
        assert np.array_equal(out.pooled.data[0], out.pooled.data[1])

    def test_batch_permutation_equivariance(self, model, vocab):
        texts = ["the girl ate .", "a boy runs fast", "nurse is she"]
        ids, mask = tokenize_batch(texts, vocab, 12)
        out = encode(model, ids, mask).pooled.data
        perm = [2, 0, 1]
        out_p = encode(model, ids[perm], mask[perm]).pooled.data
        assert np.array_equal(out_p, out[perm])

    def test_pad_id_invariance(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate ."], vocab, 12)
        out = encode(model, ids, mask)
        tampered = ids.copy()
        tampered[0, -1] = UNK_ID  # mask still says PAD there
        out_t = encode(model, tampered, mask)
        real = mask[0] == 1
        assert np.array_equal(out.token_states.data[0, real],
                              out_t.token_states.data[0, real])
        assert np.array_equal(out.pooled.data, out_t.pooled.data)

    def test_id_out_of_range(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate ."], vocab, 12)
        ids[0, 1] = len(vocab)
        with pytest.raises(IdOutOfRange):
            encode(model, ids, mask)

    def test_pooler_identity(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate .", "a boy runs fast"], vocab, 12)
        out = encode(model, ids, mask)
        w, b = model.params["pooler_w"].data, model.params["pooler_b"].data
        manual = np.tanh(out.token_states.data[:, 0, :] @ w + b)
        assert np.max(np.abs(manual - out.pooled.data)) < 1e-12

    def test_dropout_paths_disabled_in_eval(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate ."], vocab, 12)
        a = encode(model, ids, mask).pooled.data
        b = encode(model, ids, mask).pooled.data
        assert np.array_equal(a, b)

    def test_train_mode_dropout_differs(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate ."], vocab, 12)
        a = encode(model, ids, mask, train=True, rng=np.random.default_rng(0))
        b = encode(model, ids, mask, train=True, rng=np.random.default_rng(1))
        assert not np.array_equal(a.pooled.data, b.pooled.data)


class TestMlmHead:
    def test_logit_shape_and_normalization(self, model, vocab):
        ids, mask = tokenize_batch(["the girl ate .", "a boy runs fast"], vocab, 12)
        out = encode(model, ids, mask)
        logits = mlm_logits(model, out.token_states)
        assert logits.data.shape == (2, 12, len(vocab))
        probs = ad.softmax(logits).data
        assert np.abs(probs.sum(axis=-1) - 1.0).max() < 1e-9

    def test_memorizes_tiny_corpus(self):
        sentences = [
            "the girl ate lunch .", "a boy runs fast .", "the nurse is she .",
            "the doctor is he .", "a dog sat down .", "the man reads books .",
            "a woman writes letters .", "the teacher walks home .",
            "a cat drinks milk .", "the engineer fixed it .",
        ]
        vocab = build_vocab(sentences)
        model = EncoderModel(vocab, EncoderConfig(layers=2, heads=2, hidden_dim=32,
                                                  ffn_dim=64, maxlen=10, dropout=0.0),
                             seed=0)
        ids, mask = tokenize_batch(sentences, vocab, 10)
        opt = Adam(model.parameters(), lr=3e-3)
        mask_rng = np.random.default_rng(5)
        for _ in range(500):
            corrupted, targets, positions = mask_tokens(ids, mask, 0.15, mask_rng,
                                                        vocab_size=len(vocab))
            if not positions:
                continue
            enc = encode(model, corrupted, mask)
            loss = mlm_loss(mlm_logits(model, enc.token_states), ids, positions)
            ad.backward(loss)
            opt.step({n: p.grad for n, p in model.parameters().items()
                      if p.grad is not None})

        # score recovery on fresh maskings
        rng = np.random.default_rng(123)
        hits = total = 0
        for _ in range(20):
            corrupted, targets, positions = mask_tokens(ids, mask, 0.15, rng,
                                                        vocab_size=len(vocab))
            if not positions:
                continue
            enc = encode(model, corrupted, mask)
            logits = mlm_logits(model, enc.token_states).data
            for r, c in positions:
                total += 1
                hits += int(logits[r, c].argmax() == ids[r, c])
        assert total > 50
        assert hits / total >= 0.9
