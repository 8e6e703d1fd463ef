"""Unit tests for the shared backbone, embedders and positional encodings."""

import numpy as np
import pytest

from omnic import autodiff as ad
from omnic.encoder import (
    EncoderConfig,
    ModalityBatch,
    ModalitySample,
    OmniEncoder,
    positional_encoding,
)
from omnic.errors import ConfigError, ContractError, DataError


@pytest.fixture(scope="module")
def cfg():
    return EncoderConfig()


@pytest.fixture(scope="module")
def enc(cfg):
    return OmniEncoder(cfg, seed=0)


def image_sample(rng, cfg, label=0):
    return ModalitySample("image", rng.random((3, *cfg.image_size)), label=label)


def audio_sample(rng, cfg, label=0):
    return ModalitySample("audio", rng.random((1, *cfg.audio_size)), label=label)


def text_sample(rng, cfg, label=0):
    return ModalitySample("text", rng.integers(0, 256, cfg.text_len), label=label)


class TestConfig:
    def test_defaults_validate(self, cfg):
        assert cfg.validate() is cfg

    def test_patch_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            EncoderConfig(image_size=(30, 32), image_patch=(8, 8)).validate()

    def test_head_dim_divisibility_enforced(self):
        with pytest.raises(ConfigError):
            EncoderConfig(embed_dim=64, n_heads=5).validate()

    def test_seq_len(self, cfg):
        assert cfg.seq_len("image") == 16
        assert cfg.seq_len("audio") == 16
        assert cfg.seq_len("text") == 16


class TestBatchContracts:
    def test_mixed_modalities_rejected(self, cfg):
        rng = np.random.default_rng(0)
        with pytest.raises(ContractError):
            ModalityBatch("image", [image_sample(rng, cfg), text_sample(rng, cfg)])

    def test_unknown_tag_rejected(self):
        with pytest.raises(ContractError):
            ModalitySample("video", np.zeros(3))

    def test_wrong_payload_shape_rejected(self, enc, cfg):
        bad = ModalitySample("image", np.zeros((3, 8, 8)))
        with pytest.raises(DataError):
            enc.encode(ModalityBatch("image", [bad]))

    def test_out_of_vocab_token_rejected(self, enc, cfg):
        bad = ModalitySample("text", np.full(cfg.text_len, cfg.vocab_size, dtype=np.int64))
        with pytest.raises(DataError):
            enc.encode(ModalityBatch("text", [bad]))

    def test_empty_batch_rejected(self, enc):
        with pytest.raises(ContractError):
            enc.encode(ModalityBatch("image", []))


class TestPositionalEncoding:
    def test_1d_shape_and_range(self):
        pe = positional_encoding("1d", 10, 8)
        assert pe.shape == (10, 8)
        assert np.abs(pe).max() <= 1.0

    def test_1d_position_zero_is_alternating(self):
        pe = positional_encoding("1d", 4, 6)
        np.testing.assert_allclose(pe[0], [0, 1, 0, 1, 0, 1])

    def test_1d_distinct_rows(self):
        pe = positional_encoding("1d", 16, 8)
        dists = np.linalg.norm(pe[:, None] - pe[None, :], axis=-1)
        assert dists[~np.eye(16, dtype=bool)].min() > 1e-3

    def test_2d_is_row_col_concat(self):
        pe = positional_encoding("2d", (3, 4), 8)
        row_pe = positional_encoding("1d", 3, 4)
        col_pe = positional_encoding("1d", 4, 4)
        grid = pe.reshape(3, 4, 8)
        np.testing.assert_allclose(grid[:, 0, :4], row_pe)
        np.testing.assert_allclose(grid[0, :, 4:], col_pe)

    def test_2d_requires_d_multiple_of_4(self):
        with pytest.raises(ConfigError):
            positional_encoding("2d", (2, 2), 6)

    def test_unknown_kind(self):
        with pytest.raises(ConfigError):
            positional_encoding("3d", (2, 2), 8)


class TestPatchify:
    def test_patchify_blocks_are_exact(self, enc, cfg):
        rng = np.random.default_rng(1)
        payload = rng.random((3, *cfg.image_size))
        patches = enc._patchify(payload, "image")
        ph, pw = cfg.image_patch
        gw = cfg.image_size[1] // pw
        # patch (row 1, col 2) must equal the corresponding payload block
        got = patches[1 * gw + 2].reshape(3, ph, pw)
        np.testing.assert_array_equal(got, payload[:, ph : 2 * ph, 2 * pw : 3 * pw])

    def test_patchify_embed_rejects_text(self, enc, cfg):
        rng = np.random.default_rng(2)
        with pytest.raises(ContractError):
            enc.patchify_embed(text_sample(rng, cfg))


class TestForward:
    def test_cls_shape_per_modality(self, enc, cfg):
        rng = np.random.default_rng(3)
        for make in (image_sample, audio_sample, text_sample):
            batch = ModalityBatch(make(rng, cfg).tag, [make(rng, cfg) for _ in range(4)])
            out = enc.encode(batch)
            assert out.shape == (4, cfg.embed_dim)

    def test_forward_deterministic(self, enc, cfg):
        rng = np.random.default_rng(4)
        batch = ModalityBatch("image", [image_sample(rng, cfg) for _ in range(2)])
        with ad.no_grad():
            a = enc.encode(batch).data.copy()
            b = enc.encode(batch).data.copy()
        np.testing.assert_array_equal(a, b)

    def test_batch_independence(self, enc, cfg):
        """Each sample's CLS must not depend on its batch companions."""
        rng = np.random.default_rng(5)
        samples = [image_sample(rng, cfg) for _ in range(3)]
        with ad.no_grad():
            together = enc.encode(ModalityBatch("image", samples)).data
            alone = enc.encode(ModalityBatch("image", samples[:1])).data
        np.testing.assert_allclose(together[0], alone[0], atol=1e-5)

    def test_project_shapes(self, enc, cfg):
        rng = np.random.default_rng(6)
        batch = ModalityBatch("audio", [audio_sample(rng, cfg) for _ in range(3)])
        cls = enc.encode(batch)
        z = enc.project(cls, "audio")
        assert z.shape == (3, cfg.proj_dim)

    def test_shared_head_mode_single_head(self, cfg):
        enc = OmniEncoder(EncoderConfig(head_mode="shared"), seed=0)
        assert set(enc.heads) == {"shared"}
        rng = np.random.default_rng(7)
        cls = enc.encode(ModalityBatch("text", [text_sample(rng, cfg)]))
        assert enc.project(cls, "text").shape == (1, cfg.proj_dim)

    def test_attention_recorded_and_row_stochastic(self, enc, cfg):
        rng = np.random.default_rng(8)
        batch = ModalityBatch("image", [image_sample(rng, cfg) for _ in range(2)])
        with ad.no_grad():
            enc.encode(batch, record_attention=True)
        attn = enc.last_attention()
        T = cfg.seq_len("image") + 1
        assert attn.shape == (2, cfg.n_heads, T, T)
        np.testing.assert_allclose(attn.sum(axis=-1), np.ones((2, cfg.n_heads, T)), atol=1e-6)


class TestParameters:
    def test_no_duplicate_names(self, enc):
        names = [n for n, _ in enc.named_parameters()]
        assert len(names) == len(set(names))

    def test_backbone_subset_of_all(self, enc):
        all_ids = {id(p) for _, p in enc.named_parameters()}
        for name, p in enc.named_backbone_parameters():
            assert id(p) in all_ids, name

    def test_backbone_hash_tracks_weights(self, enc):
        h0 = enc.backbone_hash()
        orig = enc.cls_token.data[0]
        enc.cls_token.data[0] += 1.0
        h1 = enc.backbone_hash()
        enc.cls_token.data[0] = orig
        assert h0 != h1
        assert enc.backbone_hash() == h0

    def test_same_seed_same_weights(self, cfg):
        a = OmniEncoder(cfg, seed=11)
        b = OmniEncoder(cfg, seed=11)
        for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
            assert na == nb
            np.testing.assert_array_equal(pa.data, pb.data)

    def test_different_seed_different_weights(self, cfg):
        a = OmniEncoder(cfg, seed=0)
        b = OmniEncoder(cfg, seed=1)
        assert a.backbone_hash() != b.backbone_hash()
