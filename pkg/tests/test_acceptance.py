"""Acceptance suite: one test per release criterion, each printing a PASS line.

Run with `pytest tests/test_acceptance.py -v -s` to see the per-criterion
lines. Everything runs on tiny randomly initialized models (<= 2 layers,
d_model <= 64, vocab <= 512) in seconds on a laptop CPU.
"""

import json
import statistics
import subprocess
import sys

import numpy as np
import pytest

from implite import cli, lora, ops, quant, testing, tokenizer as tok
from implite.container import ModelManifest, build_index, read_container, write_container
from implite.errors import BoundsError, FormatError
from implite.llm import Decoder, GenerationConfig
from implite.model_config import DecoderConfig, VitConfig
from implite.profiler import profile_inference, StageTimings, total_latency
from implite.runner import ImpModel
from implite.vision import MODE_PAD, VisionEncoder, preprocess_image
from implite.weights import WeightSet


def _pass(line: str) -> None:
    print(f"\nACCEPTANCE PASS: {line}")


def test_latency_recomposition_from_reference_row():
    """Stage model recomposes the reference 3B@384 16-bit GPU total within 0.01 s."""
    st = StageTimings.from_rates(
        t_ve=0.045, s_prompt=6125.18, s_gen=97.91, n_prompt=41 + 729, n_gen=64, t_other=0.0
    )
    total = total_latency(st)
    assert total == pytest.approx(0.824, abs=5e-4)
    assert abs(total - 0.83) < 0.01
    _pass(f"latency recomposition: {total:.3f}s vs reference 0.83s (|diff| < 0.01)")


def test_visual_token_arithmetic_on_toy_vit():
    """encode_image yields exactly 576, 729, 196 tokens for the deployed configs."""
    for res, patch, expect in ((336, 14, 576), (384, 14, 729), (196, 14, 196)):
        meta = testing.tiny_metadata(image_res=res, patch_size=patch, vit_layers=2, d_vit=32)
        tensors = testing.tiny_weights(meta, seed=res)
        encoder = VisionEncoder(WeightSet(tensors), VitConfig.from_metadata(meta))
        img = preprocess_image(
            testing.random_rgb(res), MODE_PAD, res, (0.5, 0.5, 0.5), (0.5, 0.5, 0.5)
        )
        out = encoder(img)
        assert out.n_tokens == expect
        assert out.features.shape == (expect, 32)
    _pass("visual tokens: (336,14)->576, (384,14)->729, (196,14)->196")


def test_kv_cache_equivalence_twenty_random_models():
    """Incremental decode matches full-sequence recompute within 1e-4 everywhere."""
    worst = 0.0
    rng = np.random.default_rng(2024)
    for trial in range(20):
        d_model = int(rng.choice([32, 48, 64]))
        n_heads = int(rng.choice([2, 4]))
        n_layers = int(rng.choice([1, 2]))
        meta = testing.tiny_metadata(
            d_model=d_model, n_layers=n_layers, n_heads=n_heads,
            context_len=64, image_res=28, vit_layers=1,
        )
        tensors = testing.tiny_weights(meta, seed=1000 + trial)
        dec = Decoder(WeightSet(tensors), DecoderConfig.from_metadata(meta))
        ids = rng.integers(0, meta["llm.vocab_size"], size=int(rng.integers(4, 12))).tolist()
        full = dec.full_logits(dec.embed(ids))
        cache, logits = dec.prefill(dec.embed(ids[:1]))
        incremental = [logits]
        for t in ids[1:]:
            incremental.append(dec.decode_step(cache, t))
        diff = np.abs(np.stack(incremental) - full).max()
        worst = max(worst, float(diff))
        assert diff <= 1e-4
    _pass(f"KV-cache equivalence on 20 random models (worst max-abs {worst:.2e} <= 1e-4)")


def test_quantization_bounds_thousand_blocks():
    """Reconstruction error within amax/254 (q8_0) and amax/14 (q4_0); sizes exact."""
    rng = np.random.default_rng(7)
    violations = 0
    for _ in range(1000):
        scale = float(rng.uniform(0.05, 4.0))
        w = (rng.uniform(-1, 1, size=32) * scale).astype(np.float32)
        amax = float(np.abs(w).max())
        for dtype, denom in (("q8_0", 254.0), ("q4_0", 14.0)):
            deq = quant.dequantize_array(quant.quantize_tensor(w, dtype))
            if np.abs(w - deq).max() > amax / denom:
                violations += 1
    assert violations == 0
    n = 8 * 96
    assert quant.quantize_tensor(np.zeros((8, 96), np.float32), "q8_0").nbytes == 34 * n // 32
    assert quant.quantize_tensor(np.zeros((8, 96), np.float32), "q4_0").nbytes == 18 * n // 32
    _pass("quantization: 0/1000 bound violations; bytes = 34*n/32 and 18*n/32 exactly")


def test_quantized_matvec_against_dequant_oracle():
    """Blockwise kernel equals dequantize-then-matmul within 1e-5 over 1000 cases."""
    rng = np.random.default_rng(11)
    worst = 0.0
    for case in range(1000):
        dtype = "q8_0" if case % 2 == 0 else "q4_0"
        m = int(rng.integers(1, 10))
        k = int(rng.integers(1, 5)) * 32
        w = rng.uniform(-0.8, 0.8, size=(m, k)).astype(np.float32)
        x = rng.uniform(-0.8, 0.8, size=k).astype(np.float32)
        qw = quant.quantize_tensor(w, dtype)
        got = quant.quantized_matvec(qw, x)
        oracle = ops.matmul(quant.dequantize_tensor(qw).to_numpy(), x.reshape(-1, 1)).reshape(-1)
        worst = max(worst, float(np.abs(got - oracle).max()))
        assert worst <= 1e-5
    _pass(f"quantized matvec vs oracle over 1000 cases (worst {worst:.2e} <= 1e-5)")


def test_lora_merge_criteria():
    """Zero-B identity, merged == runtime-adapter forward (1e-5), negation (1e-6)."""
    meta = testing.tiny_metadata(d_model=48, n_layers=2, n_heads=4, context_len=64,
                                 image_res=28, vit_layers=1)
    tensors = testing.tiny_weights(meta, seed=5)
    manifest = ModelManifest(dict(meta), build_index(tensors))
    cfg = DecoderConfig.from_metadata(meta)

    # zero-B adapters change nothing, byte for byte
    zero = {
        name: lora.LoraAdapter(
            name,
            np.ones((4, tensors[name].shape[1]), np.float32),
            np.zeros((tensors[name].shape[0], 4), np.float32),
            8.0,
        )
        for name in lora.default_lora_targets(manifest)
    }
    _, merged_zero = lora.merge_lora(manifest, tensors, zero)
    assert all(merged_zero[n].data == tensors[n].data for n in tensors)

    # merged forward equals runtime-adapter forward
    adapters = testing.random_adapters(manifest, rank=4, alpha=8.0, seed=6)
    _, merged = lora.merge_lora(manifest, tensors, adapters)
    dec_merged = Decoder(WeightSet(merged), cfg)
    dec_runtime = Decoder(WeightSet(tensors, adapters=adapters), cfg)
    ids = np.random.default_rng(8).integers(0, cfg.vocab_size, size=8).tolist()
    diff = np.abs(
        dec_merged.full_logits(dec_merged.embed(ids))
        - dec_runtime.full_logits(dec_runtime.embed(ids))
    ).max()
    assert diff <= 1e-5

    # merging the negated adapters restores the base weights
    negated = {n: ad.negated() for n, ad in adapters.items()}
    _, restored = lora.merge_lora(manifest, merged, negated)
    worst = max(
        float(np.abs(restored[n].to_numpy() - tensors[n].to_numpy()).max()) for n in adapters
    )
    assert worst <= 1e-6
    _pass(
        f"LoRA: zero-B byte-identical; merged vs runtime {diff:.2e} <= 1e-5; "
        f"negation roundtrip {worst:.2e} <= 1e-6"
    )


def test_container_roundtrip_and_error_paths(tmp_path):
    """Write/read is exact; corrupted magic and truncation raise the right errors."""
    meta = testing.tiny_metadata(d_model=32, n_layers=1, image_res=28, vit_layers=1)
    tensors = testing.tiny_weights(meta, seed=9)
    path = tmp_path / "m.impb"
    write_container(ModelManifest(meta), tensors, path)
    manifest, loader = read_container(path)
    with loader:
        for name, t in tensors.items():
            got = loader.load(name)
            assert (got.shape, got.dtype, got.data) == (t.shape, t.dtype, t.data)
    assert manifest.metadata == meta

    corrupted = bytearray(path.read_bytes())
    corrupted[:4] = b"XXXX"
    bad = tmp_path / "bad.impb"
    bad.write_bytes(bytes(corrupted))
    with pytest.raises(FormatError):
        read_container(bad)

    truncated = tmp_path / "trunc.impb"
    truncated.write_bytes(path.read_bytes()[:-16])
    with pytest.raises(BoundsError, match=manifest.tensor_index[-1].name):
        read_container(truncated)
    _pass("container: exact roundtrip; bad magic -> format error; truncation -> bounds error")


def _random_text(rng: np.random.Generator) -> str:
    # mixed scripts: ASCII, Latin-1, CJK, emoji, combining marks, control chars
    ranges = [
        (0x20, 0x7E),
        (0x00, 0x1F),
        (0xA0, 0xFF),
        (0x370, 0x3FF),
        (0x4E00, 0x4FFF),
        (0x1F300, 0x1F5FF),
        (0x300, 0x36F),
    ]
    n = int(rng.integers(0, 48))
    chars = []
    for _ in range(n):
        lo, hi = ranges[int(rng.integers(0, len(ranges)))]
        chars.append(chr(int(rng.integers(lo, hi + 1))))
    return "".join(chars)


def test_tokenizer_roundtrip_ten_thousand_strings():
    """decode(encode(s)) == s over 10,000 random mixed-script strings."""
    spec = tok.load_tokenizer(ModelManifest(testing.tiny_metadata()))
    rng = np.random.default_rng(123)
    failures = 0
    for _ in range(10_000):
        s = _random_text(rng)
        if tok.decode(spec, tok.encode(spec, s)) != s:
            failures += 1
    assert failures == 0
    _pass("tokenizer roundtrip: 0/10000 failures (multi-byte and special characters included)")


def test_profiler_consistency_and_monotonicity(tmp_path):
    """Recomposition within 5%; counts exact; 729 -> 196 drops N_prompt by 533 and T_prompt."""
    p384 = testing.build_tiny_model(tmp_path / "m384.impb", seed=0, image_res=384)
    p196 = testing.build_tiny_model(tmp_path / "m196.impb", seed=0, image_res=196)
    m384, m196 = ImpModel.load(p384), ImpModel.load(p196)
    img = testing.random_rgb(21)
    cfg = GenerationConfig(max_new_tokens=2, temperature=0.0, stop_ids=frozenset())

    st = profile_inference(m384, img, "the same text prompt", cfg)
    assert total_latency(st) == pytest.approx(st.t_total, rel=0.05)

    # count accounting is exact
    turn = m384.run("the same text prompt", img, cfg)
    assert turn.n_prompt == turn.n_text_tokens + turn.n_visual_tokens

    runs384 = [profile_inference(m384, img, "the same text prompt", cfg) for _ in range(10)]
    runs196 = [profile_inference(m196, img, "the same text prompt", cfg) for _ in range(10)]
    n384, n196 = runs384[0].n_prompt, runs196[0].n_prompt
    assert n384 - n196 == 533
    med384 = statistics.median(r.t_prompt for r in runs384)
    med196 = statistics.median(r.t_prompt for r in runs196)
    assert med196 < med384
    _pass(
        f"profiler: recomposition within 5%; N_prompt {n384}-{n196}=533; "
        f"median T_prompt {med196:.4f}s < {med384:.4f}s over 10 trials"
    )


def test_end_to_end_determinism_and_quantized_agreement(tmp_path, capsys):
    """Greedy CLI runs are identical across 5 invocations; q8_0 agrees >= 90% with f32."""
    model_path = str(tmp_path / "e2e.impb")
    testing.build_tiny_model(model_path, seed=0)

    argv = ["run", "--model", model_path, "--prompt", "tell me something",
            "--max-new-tokens", "16", "--no-stop", "--json"]
    outputs = []
    for _ in range(5):
        assert cli.main(argv) == 0
        outputs.append(json.loads(capsys.readouterr()[0])["token_ids"])
    assert all(o == outputs[0] for o in outputs)

    # same invocation through the installed console entry point
    proc = subprocess.run(
        [sys.executable, "-m", "implite.cli", *argv],
        capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == 0
    assert json.loads(proc.stdout)["token_ids"] == outputs[0]

    # q8_0 greedy agreement with the f32 parent over 64 steps
    manifest, loader = read_container(model_path)
    with loader:
        tensors = loader.load_all()
    qmanifest, qtensors = quant.quantize_model(manifest, tensors, "q8_0")
    qpath = tmp_path / "e2e.q8.impb"
    write_container(qmanifest, qtensors, qpath)

    cfg = GenerationConfig(max_new_tokens=64, temperature=0.0, stop_ids=frozenset())
    f32_ids = ImpModel.load(model_path).run("tell me something", None, cfg).token_ids
    q8_ids = ImpModel.load(str(qpath)).run("tell me something", None, cfg).token_ids
    assert len(f32_ids) == len(q8_ids) == 64
    agreement = float(np.mean([a == b for a, b in zip(f32_ids, q8_ids)]))
    assert agreement >= 0.90
    _pass(
        f"end-to-end: 5 identical greedy CLI runs; q8_0 vs f32 agreement "
        f"{agreement:.0%} >= 90% over 64 steps"
    )
