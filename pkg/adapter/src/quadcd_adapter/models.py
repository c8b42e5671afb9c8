"""Vision-language models the adapter can host.

Three loaders share one contract: a model owns a tokenizer vocabulary,
a dataset-mean fill color, and a `logits(image, tokens)` forward pass
where image None means a text-only pass with no image tokens at all.

- "stub": a deterministic numpy model.  Logits are a seeded bigram table
  over a fixed word list plus, per color word, evidence proportional to
  how much of the visible image matches that color prototype.  Filled
  pixels match no prototype, so masking genuinely removes evidence.
- "tiny-llava": a small randomly initialized but real LLaVA-style
  architecture (CLIP vision tower + Llama text model) built in process
  with a real tokenizer, for smoke-testing the full model path without
  downloading weights.
- "hf:<checkpoint>": a pretrained checkpoint loaded from disk or the
  hub; same forward recipe as tiny-llava.
"""

from __future__ import annotations

import hashlib

import numpy as np

from quadcd_adapter.images import COLOR_PROTOTYPES, color_coverage


class ModelLoadError(RuntimeError):
    """A model or segmenter failed to load at startup."""


class VisionLanguageModel:
    """Contract: vocab, dataset_mean, and per-context forward passes."""

    name = "model"
    vocab: tuple[str, ...] = ()
    dataset_mean: tuple[float, float, float] = (0.5, 0.5, 0.5)

    def logits(self, image: np.ndarray | None, tokens: tuple[int, ...]) -> np.ndarray:
        raise NotImplementedError

    def logits_batch(self, contexts) -> list[np.ndarray]:
        """Forward several (image, tokens) contexts.

        Default is sequential; models that can batch on their device
        override this.
        """
        return [self.logits(image, tokens) for image, tokens in contexts]


STUB_VOCAB = (
    "<s>",
    "a",
    "photo",
    "of",
    "the",
    "red",
    "green",
    "blue",
    "yellow",
    "thing",
    "and",
    "</s>",
)
# logit bonus per unit of image coverage; large enough that a visible
# object of modest size dominates the bigram prior
STUB_VIS_GAIN = 8.0


def _seeded_rng(tag: str) -> np.random.Generator:
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "big"))


class StubModel(VisionLanguageModel):
    """Deterministic bigram-plus-color-evidence model over STUB_VOCAB."""

    name = "stub"
    dataset_mean = (0.5, 0.5, 0.5)

    def __init__(self, seed: int = 0):
        self.seed = seed
        self.vocab = STUB_VOCAB
        rng = _seeded_rng(f"quadcd-adapter-stub:{seed}")
        self._bigram = rng.normal(0.0, 0.5, (len(self.vocab), len(self.vocab)))
        self._color_ids = {
            word: self.vocab.index(word) for word in COLOR_PROTOTYPES if word in self.vocab
        }

    def logits(self, image: np.ndarray | None, tokens: tuple[int, ...]) -> np.ndarray:
        prev = tokens[-1] if tokens else 0
        if not (0 <= prev < len(self.vocab)):
            raise ValueError(f"token {prev} outside vocab of {len(self.vocab)}")
        row = self._bigram[prev].copy()
        if image is not None:
            for word, proto in COLOR_PROTOTYPES.items():
                coverage = color_coverage(image, proto)
                if coverage:
                    row[self._color_ids[word]] += STUB_VIS_GAIN * coverage
        return row


TINY_WORDS = (
    "<unk>",
    "<s>",
    "</s>",
    "<image>",
    "a",
    "photo",
    "of",
    "the",
    "red",
    "green",
    "blue",
    "yellow",
    "thing",
    "and",
)


class HFVisionLanguageModel(VisionLanguageModel):
    """LLaVA-style transformers model behind the adapter contract.

    Visual contexts get `n_image_tokens` image placeholders after BOS;
    the non-visual context is a plain text forward with no image tokens.
    Contexts sharing a prompt are batched in one device call.
    """

    def __init__(self, model, tokenizer, image_processor, device, model_name):
        import torch

        self._torch = torch
        self.model = model.to(device).eval()
        self.tokenizer = tokenizer
        self.image_processor = image_processor
        self.device = device
        self.name = model_name
        ids_to_tokens = {i: t for t, i in tokenizer.get_vocab().items()}
        if sorted(ids_to_tokens) != list(range(len(ids_to_tokens))):
            raise ModelLoadError(f"{model_name}: tokenizer ids are not contiguous")
        self.vocab = tuple(ids_to_tokens[i] for i in range(len(ids_to_tokens)))
        self.dataset_mean = tuple(
            float(c) for c in getattr(image_processor, "image_mean", (0.5, 0.5, 0.5))
        )
        self.bos_id = int(tokenizer.bos_token_id)
        self.image_token_id = int(model.config.image_token_index)
        vision = model.config.vision_config
        patches = (vision.image_size // vision.patch_size) ** 2
        strategy = getattr(model.config, "vision_feature_select_strategy", "default")
        self.n_image_tokens = patches + (1 if strategy == "full" else 0)

    def _input_ids(self, has_image: bool, tokens) -> list[int]:
        head = [self.image_token_id] * self.n_image_tokens if has_image else []
        return [self.bos_id] + head + list(tokens)

    def _pixels(self, image: np.ndarray):
        as_uint8 = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
        out = self.image_processor(images=as_uint8, return_tensors="pt")
        return out["pixel_values"].to(self.device)

    def logits(self, image: np.ndarray | None, tokens: tuple[int, ...]) -> np.ndarray:
        return self.logits_batch([(image, tokens)])[0]

    def logits_batch(self, contexts) -> list[np.ndarray]:
        torch = self._torch
        results: list[np.ndarray | None] = [None] * len(contexts)
        groups: dict[tuple[bool, tuple[int, ...]], list[int]] = {}
        for i, (image, tokens) in enumerate(contexts):
            groups.setdefault((image is not None, tuple(tokens)), []).append(i)
        for (has_image, tokens), members in groups.items():
            ids = self._input_ids(has_image, tokens)
            input_ids = torch.tensor([ids] * len(members), device=self.device)
            pixel_values = None
            if has_image:
                pixel_values = torch.cat(
                    [self._pixels(contexts[i][0]) for i in members]
                )
            with torch.no_grad():
                out = self.model(input_ids=input_ids, pixel_values=pixel_values)
            rows = out.logits[:, -1, :].to(torch.float64).cpu().numpy()
            for member, row in zip(members, rows):
                results[member] = np.array(row, dtype=np.float64)
        return results  # type: ignore[return-value]


def _build_tiny_llava(seed: int, device: str) -> HFVisionLanguageModel:
    try:
        import torch
        from tokenizers import Tokenizer
        from tokenizers.models import WordLevel
        from tokenizers.pre_tokenizers import WhitespaceSplit
        from transformers import (
            CLIPImageProcessor,
            CLIPVisionConfig,
            LlamaConfig,
            LlavaConfig,
            LlavaForConditionalGeneration,
            PreTrainedTokenizerFast,
        )
    except ImportError as exc:
        raise ModelLoadError(
            f"tiny-llava needs torch and transformers installed: {exc}"
        ) from None

    word_ids = {w: i for i, w in enumerate(TINY_WORDS)}
    tok = Tokenizer(WordLevel(word_ids, unk_token="<unk>"))
    tok.pre_tokenizer = WhitespaceSplit()
    tokenizer = PreTrainedTokenizerFast(
        tokenizer_object=tok,
        unk_token="<unk>",
        bos_token="<s>",
        eos_token="</s>",
        additional_special_tokens=["<image>"],
    )
    image_processor = CLIPImageProcessor(
        do_resize=True,
        size={"shortest_edge": 32},
        do_center_crop=True,
        crop_size={"height": 32, "width": 32},
        do_rescale=True,
        do_normalize=True,
        image_mean=[0.5, 0.5, 0.5],
        image_std=[0.5, 0.5, 0.5],
    )
    vision = CLIPVisionConfig(
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=2,
        image_size=32,
        patch_size=16,
    )
    text = LlamaConfig(
        vocab_size=len(TINY_WORDS),
        hidden_size=32,
        intermediate_size=64,
        num_hidden_layers=2,
        num_attention_heads=2,
        num_key_value_heads=2,
        max_position_embeddings=512,
    )
    config = LlavaConfig(
        vision_config=vision,
        text_config=text,
        image_token_index=word_ids["<image>"],
        vision_feature_select_strategy="default",
        vision_feature_layer=-1,
    )
    torch.manual_seed(seed)
    model = LlavaForConditionalGeneration(config)
    return HFVisionLanguageModel(
        model, tokenizer, image_processor, device, f"tiny-llava:{seed}"
    )


def _load_hf_checkpoint(checkpoint: str, device: str) -> HFVisionLanguageModel:
    try:
        from transformers import AutoImageProcessor, AutoModelForImageTextToText, AutoTokenizer
    except ImportError as exc:
        raise ModelLoadError(
            f"hf checkpoints need torch and transformers installed: {exc}"
        ) from None
    try:
        model = AutoModelForImageTextToText.from_pretrained(checkpoint)
        tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        image_processor = AutoImageProcessor.from_pretrained(checkpoint)
    except Exception as exc:
        raise ModelLoadError(f"cannot load checkpoint {checkpoint!r}: {exc}") from None
    return HFVisionLanguageModel(model, tokenizer, image_processor, device, checkpoint)


def _parse_seed(identifier: str, tail: str) -> int:
    if not tail:
        return 0
    try:
        return int(tail)
    except ValueError:
        raise ModelLoadError(f"bad seed in model identifier {identifier!r}") from None


def load_model(identifier: str, device: str = "cpu") -> VisionLanguageModel:
    """Resolve a model identifier from AdapterConfig."""
    kind, _, tail = identifier.partition(":")
    if kind == "stub":
        return StubModel(seed=_parse_seed(identifier, tail))
    if kind == "tiny-llava":
        return _build_tiny_llava(_parse_seed(identifier, tail), device)
    if kind == "hf":
        if not tail:
            raise ModelLoadError("hf model identifier needs a checkpoint path")
        return _load_hf_checkpoint(tail, device)
    raise ModelLoadError(f"unknown model identifier {identifier!r}")
