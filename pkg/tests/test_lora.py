import numpy as np
import pytest

from implite import lora, testing
from implite.container import ModelManifest, read_container, write_container
from implite.errors import ConsistencyError
from implite.llm import Decoder
from implite.model_config import DecoderConfig
from implite.tensor import Tensor
from implite.weights import WeightSet


@pytest.fixture()
def model_parts():
    meta = testing.tiny_metadata(d_model=32, n_layers=1, n_heads=2, image_res=28,
                                 vit_layers=1, context_len=64)
    tensors = testing.tiny_weights(meta, seed=1)
    return meta, tensors


def test_zero_b_is_identity(model_parts):
    meta, tensors = model_parts
    manifest = ModelManifest(meta)
    target = "llm.blocks.0.attn.wq.weight"
    d = tensors[target].shape[0]
    ad = lora.LoraAdapter(target, np.ones((4, d), np.float32), np.zeros((d, 4), np.float32), 8.0)
    _, merged = lora.merge_lora(manifest, tensors, {target: ad})
    assert merged[target].data == tensors[target].data
    others = [n for n in tensors if n != target]
    assert all(merged[n].data == tensors[n].data for n in others)


def test_alpha_equal_rank_gives_plain_ba():
    # alpha/r = 1: delta is exactly B @ A, checked against a dense oracle
    rng = np.random.default_rng(2)
    a = rng.normal(size=(256, 8)).astype(np.float32)
    b = rng.normal(size=(8, 256)).astype(np.float32)
    ad = lora.LoraAdapter("w", a, b, alpha=256.0)
    assert ad.rank == 256
    dense = (b.astype(np.float64) @ a.astype(np.float64)).astype(np.float32)
    assert np.allclose(ad.delta(), dense, atol=1e-6)


def test_merge_matches_dense_oracle_on_toy_weights(model_parts):
    meta, tensors = model_parts
    target = "llm.blocks.0.mlp.fc2.weight"
    d_out, d_in = tensors[target].shape
    rng = np.random.default_rng(3)
    ad = lora.LoraAdapter(
        target,
        rng.normal(size=(4, d_in)).astype(np.float32),
        rng.normal(size=(d_out, 4)).astype(np.float32),
        alpha=2.0,
    )
    _, merged = lora.merge_lora(ModelManifest(meta), tensors, {target: ad})
    expect = tensors[target].to_numpy() + (2.0 / 4.0) * (ad.b @ ad.a)
    assert np.allclose(merged[target].to_numpy(), expect, atol=1e-5)


def test_negation_roundtrip(model_parts):
    meta, tensors = model_parts
    manifest = ModelManifest(meta)
    adapters = testing.random_adapters(
        _indexed(manifest, tensors), rank=4, alpha=8.0, seed=4
    )
    _, merged = lora.merge_lora(manifest, tensors, adapters)
    negated = {n: ad.negated() for n, ad in adapters.items()}
    _, restored = lora.merge_lora(manifest, merged, negated)
    for name in adapters:
        diff = np.abs(restored[name].to_numpy() - tensors[name].to_numpy()).max()
        assert diff <= 1e-6


def test_merged_forward_equals_runtime_adapter_forward(model_parts):
    meta, tensors = model_parts
    manifest = _indexed(ModelManifest(meta), tensors)
    adapters = testing.random_adapters(manifest, rank=4, alpha=8.0, seed=5)
    cfg = DecoderConfig.from_metadata(meta)
    _, merged = lora.merge_lora(manifest, tensors, adapters)
    dec_merged = Decoder(WeightSet(merged), cfg)
    dec_runtime = Decoder(WeightSet(tensors, adapters=adapters), cfg)
    ids = np.random.default_rng(6).integers(0, cfg.vocab_size, size=7).tolist()
    out_merged = dec_merged.full_logits(dec_merged.embed(ids))
    out_runtime = dec_runtime.full_logits(dec_runtime.embed(ids))
    assert np.abs(out_merged - out_runtime).max() <= 1e-5


def test_dim_mismatch_rejected(model_parts):
    meta, tensors = model_parts
    target = "llm.blocks.0.attn.wq.weight"
    ad = lora.LoraAdapter(target, np.zeros((2, 5), np.float32), np.zeros((7, 2), np.float32), 2.0)
    with pytest.raises(ConsistencyError, match="dims"):
        lora.merge_lora(ModelManifest(meta), tensors, {target: ad})


def test_absent_target_rejected(model_parts):
    meta, tensors = model_parts
    ad = lora.LoraAdapter("nope", np.zeros((2, 4), np.float32), np.zeros((4, 2), np.float32), 2.0)
    with pytest.raises(ConsistencyError, match="nope"):
        lora.merge_lora(ModelManifest(meta), tensors, {"nope": ad})


def test_quantized_target_rejected(model_parts):
    from implite import quant

    meta, tensors = model_parts
    target = "llm.blocks.0.attn.wq.weight"
    tensors = dict(tensors)
    tensors[target] = quant.quantize_tensor(tensors[target].to_numpy(), "q8_0")
    ad = lora.LoraAdapter(
        target, np.zeros((2, 32), np.float32), np.zeros((32, 2), np.float32), 2.0
    )
    with pytest.raises(ConsistencyError, match="q8_0"):
        lora.merge_lora(ModelManifest(meta), tensors, {target: ad})


def test_f16_base_stays_f16(model_parts):
    meta, tensors = model_parts
    target = "llm.blocks.0.attn.wv.weight"
    tensors = dict(tensors)
    tensors[target] = Tensor.from_numpy(tensors[target].to_numpy().astype(np.float16))
    d = tensors[target].shape[0]
    rng = np.random.default_rng(7)
    ad = lora.LoraAdapter(
        target,
        rng.normal(size=(2, d)).astype(np.float32),
        rng.normal(size=(d, 2)).astype(np.float32),
        2.0,
    )
    _, merged = lora.merge_lora(ModelManifest(meta), tensors, {target: ad})
    assert merged[target].dtype == "f16"


def test_provenance_recorded(model_parts):
    meta, tensors = model_parts
    target = "llm.blocks.0.attn.wq.weight"
    d = tensors[target].shape[0]
    ad = lora.LoraAdapter(target, np.zeros((2, d), np.float32), np.zeros((d, 2), np.float32), 2.0)
    manifest2, _ = lora.merge_lora(ModelManifest(meta), tensors, {target: ad})
    assert target in manifest2.metadata["lora.merged_targets"]
    # existing keys unchanged
    assert {k: v for k, v in manifest2.metadata.items() if k != "lora.merged_targets"} == meta


def test_adapter_file_roundtrip(tmp_path, model_parts):
    meta, tensors = model_parts
    manifest = _indexed(ModelManifest(meta), tensors)
    adapters = testing.random_adapters(manifest, rank=3, alpha=6.0, seed=8)
    path = tmp_path / "ad.npz"
    lora.save_adapters(path, adapters)
    loaded = lora.load_adapters(path)
    assert set(loaded) == set(adapters)
    for name in adapters:
        assert np.array_equal(loaded[name].a, adapters[name].a)
        assert np.array_equal(loaded[name].b, adapters[name].b)
        assert loaded[name].alpha == adapters[name].alpha


def test_merge_through_files(tmp_path, model_parts):
    meta, tensors = model_parts
    base = tmp_path / "base.impb"
    write_container(ModelManifest(meta), tensors, base)
    manifest, loader = read_container(base)
    with loader:
        loaded = loader.load_all()
    adapters = testing.random_adapters(manifest, rank=2, alpha=4.0, seed=9)
    m2, t2 = lora.merge_lora(manifest, loaded, adapters)
    out = tmp_path / "merged.impb"
    write_container(ModelManifest(dict(m2.metadata)), t2, out)
    m3, loader3 = read_container(out)
    loader3.close()
    assert "lora.merged_targets" in m3.metadata


def _indexed(manifest: ModelManifest, tensors) -> ModelManifest:
    from implite.container import build_index

    if not manifest.tensor_index:
        manifest.tensor_index = build_index(tensors)
    return manifest
