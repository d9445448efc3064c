"""End-to-end model runtime: load a container, hold conversations, time the stages.

A loaded ImpModel is immutable and shared; each Conversation owns one KV
cache and is strictly sequential. Every user turn records wall time spent
in visual encoding, prompt prefill, and the decode loop, which is what the
profiler and the chat server report.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import llm, tokenizer as tok, vision
from .container import read_container
from .errors import TemplateError
from .model_config import (
    ConnectorConfig,
    DecoderConfig,
    IMAGE_PLACEHOLDER,
    VitConfig,
    image_norm_constants,
)
from .weights import WeightSet


@dataclass
class TurnResult:
    token_ids: list[int]
    text: str
    n_prompt: int
    n_gen: int
    n_text_tokens: int
    n_visual_tokens: int
    t_visual: float
    t_prefill: float
    t_decode: float
    t_wall: float
    timestamps: list[float] = field(default_factory=list)


class ImpModel:
    """A container loaded for inference; read-only and shareable across threads."""

    def __init__(self, manifest, weights: WeightSet, path: str, size_bytes: int):
        self.manifest = manifest
        self.weights = weights
        self.path = path
        self.size_bytes = size_bytes
        self.tokenizer = tok.load_tokenizer(manifest)
        self.vit_cfg = VitConfig.from_metadata(manifest.metadata)
        self.llm_cfg = DecoderConfig.from_metadata(manifest.metadata)
        self.connector_cfg = ConnectorConfig.from_metadata(manifest.metadata)
        self.image_mean, self.image_std = image_norm_constants(manifest.metadata)
        self.encoder = vision.VisionEncoder(weights, self.vit_cfg)
        self.decoder = llm.Decoder(weights, self.llm_cfg)
        self.n_visual_tokens = vision.n_visual_tokens(
            self.vit_cfg.image_res, self.vit_cfg.patch_size
        )

    @classmethod
    def load(cls, path, adapters: dict | None = None) -> "ImpModel":
        """Read a container; projection weights stay quantized, tables go float.

        Quantized projections run through the blockwise kernel; tensors with
        lookup semantics (embedding table, position table) are dequantized
        to float the first time the WeightSet serves them as arrays.
        """
        manifest, loader = read_container(path)
        with loader:
            tensors = loader.load_all()
        weights = WeightSet(tensors, adapters=adapters)
        size_bytes = Path(path).stat().st_size
        return cls(manifest, weights, str(path), size_bytes)

    @property
    def name(self) -> str:
        return str(self.manifest.metadata.get("model.name", Path(self.path).stem))

    @property
    def precision(self) -> str:
        """Nominal precision: the quantization stamp, else the lowest-bit dtype present."""
        stamp = self.manifest.metadata.get("quant.dtype")
        if stamp:
            return str(stamp)
        present = {e.dtype for e in self.manifest.tensor_index}
        for dtype in ("q4_0", "q8_0", "f16", "f32"):
            if dtype in present:
                return dtype
        return "f32"

    def preprocess(self, image_rgb, mode: str = vision.MODE_PAD) -> vision.PreprocessedImage:
        return vision.preprocess_image(
            image_rgb, mode, self.vit_cfg.image_res, self.image_mean, self.image_std
        )

    def encode_image(self, image_rgb, mode: str = vision.MODE_PAD) -> np.ndarray:
        """Preprocess + ViT + connector: image to LLM-space embeddings [N_v, d_model]."""
        pre = self.preprocess(image_rgb, mode)
        tokens = self.encoder(pre)
        return llm.project_visual(tokens, self.weights, self.connector_cfg)

    def new_conversation(self) -> "Conversation":
        return Conversation(self)

    def run(
        self,
        prompt: str,
        image_rgb=None,
        cfg: llm.GenerationConfig | None = None,
        mode: str = vision.MODE_PAD,
        on_text=None,
    ) -> TurnResult:
        """Single-shot generation in a fresh conversation."""
        return self.new_conversation().user_turn(prompt, image_rgb, cfg, mode, on_text)


def render_turn(template: str, prompt: str, has_image: bool) -> str:
    """Fill the chat template; drop the image placeholder on text-only turns."""
    if has_image and template.count(IMAGE_PLACEHOLDER) != 1:
        raise TemplateError(
            f"template must contain exactly one {IMAGE_PLACEHOLDER!r} placeholder "
            f"when an image is supplied, found {template.count(IMAGE_PLACEHOLDER)}"
        )
    text = template.replace("{prompt}", prompt)
    if not has_image:
        text = text.replace(IMAGE_PLACEHOLDER, "")
    return text


class Conversation:
    """Chat state: one KV cache, alternating turns, per-turn stage timings."""

    def __init__(self, model: ImpModel):
        self.model = model
        self.cache = model.decoder.new_cache()
        self.history: list[dict] = []
        self._first_turn = True

    def _turn_token_ids(self, text: str, has_image: bool) -> list[int]:
        spec = self.model.tokenizer
        rendered = render_turn(self.model.llm_cfg.template, text, has_image)
        if not self._first_turn:
            rendered = "\n" + rendered
        ids: list[int] = [spec.special_tokens["bos"]] if self._first_turn else []
        if has_image:
            before, after = rendered.split(IMAGE_PLACEHOLDER, 1)
            ids += tok.encode(spec, before)
            ids.append(spec.special_tokens["image"])
            ids += tok.encode(spec, after)
        else:
            ids += tok.encode(spec, rendered)
        return ids

    def prime_turn(
        self,
        user_text: str,
        assistant_text: str = "",
        image_rgb=None,
        mode: str = vision.MODE_PAD,
    ) -> None:
        """Append an already-completed exchange to the context without generating."""
        model = self.model
        visual = model.encode_image(image_rgb, mode) if image_rgb is not None else None
        ids = self._turn_token_ids(user_text, has_image=visual is not None)
        if assistant_text:
            ids = ids + tok.encode(model.tokenizer, assistant_text)
        embeds, _ = llm.assemble_prompt(
            ids, visual, model.decoder.embed_table, model.tokenizer.special_tokens["image"]
        )
        model.decoder.prefill(embeds, self.cache)
        self._first_turn = False
        self.history.append({"role": "user", "text": user_text, "image": image_rgb is not None})
        if assistant_text:
            self.history.append({"role": "assistant", "text": assistant_text, "image": False})

    def user_turn(
        self,
        text: str,
        image_rgb=None,
        cfg: llm.GenerationConfig | None = None,
        mode: str = vision.MODE_PAD,
        on_text=None,
    ) -> TurnResult:
        """Process one user message and generate the assistant reply."""
        model = self.model
        if cfg is None:
            cfg = llm.GenerationConfig(stop_ids=frozenset({model.tokenizer.special_tokens["eos"]}))
        wall_start = time.perf_counter()

        t_visual = 0.0
        visual = None
        if image_rgb is not None:
            t0 = time.perf_counter()
            visual = model.encode_image(image_rgb, mode)
            t_visual = time.perf_counter() - t0

        ids = self._turn_token_ids(text, has_image=visual is not None)
        n_text = len(ids) - (1 if visual is not None else 0)
        embeds, n_prompt = llm.assemble_prompt(
            ids, visual, model.decoder.embed_table, model.tokenizer.special_tokens["image"]
        )

        t0 = time.perf_counter()
        _, first_logits = model.decoder.prefill(embeds, self.cache)
        t_prefill = time.perf_counter() - t0

        stream = tok.TokenStream(model.tokenizer)
        pieces: list[str] = []

        def emit(token_id: int) -> None:
            piece = stream.feed(token_id)
            pieces.append(piece)
            if on_text is not None:
                on_text(token_id, piece)

        gen = llm.generate(model.decoder, self.cache, first_logits, cfg, on_token=emit)
        tail = stream.flush()
        if tail:
            pieces.append(tail)
            if on_text is not None:
                on_text(-1, tail)
        text_out = "".join(pieces)

        self._first_turn = False
        self.history.append({"role": "user", "text": text, "image": image_rgb is not None})
        self.history.append({"role": "assistant", "text": text_out, "image": False})

        return TurnResult(
            token_ids=gen.token_ids,
            text=text_out,
            n_prompt=n_prompt,
            n_gen=gen.n_gen,
            n_text_tokens=n_text,
            n_visual_tokens=0 if visual is None else visual.shape[0],
            t_visual=t_visual,
            t_prefill=t_prefill,
            t_decode=gen.elapsed,
            t_wall=time.perf_counter() - wall_start,
            timestamps=gen.timestamps,
        )

    @property
    def context_used(self) -> int:
        return self.cache.length

    def remaining_context(self) -> int:
        return self.model.llm_cfg.context_len - self.cache.length
