"""
Checkpoint-backed adapters for the backend contracts.

torch and transformers are optional (``pip install .[reference]``) and are only
imported when one of these adapters is constructed. Loaded models are cached per
(checkpoint, device) so every tray worker gets a cheap, independent adapter.
"""

import base64
import io
import logging
from functools import lru_cache
from typing import List

import numpy as np
from langchain_core.messages import HumanMessage, SystemMessage
from PIL import Image

from .backends import DetectorBackend, SegmenterBackend, VerifierBackend
from .errors import BackendError, ConfigurationError
from .models import Candidate, LabelMask, Taxonomy
from .prompts import TrayPrompts

logger = logging.getLogger(__name__)


def _require_transformers():
    try:
        import torch
        import transformers
    except ImportError as e:
        raise ConfigurationError(
            "reference backends need torch and transformers: pip install '.[reference]'"
        ) from e
    return torch, transformers


@lru_cache(maxsize=None)
def _load_grounding_dino(checkpoint: str, device: str):
    torch, transformers = _require_transformers()
    logger.info(f"🔧 Loading detector checkpoint {checkpoint} on {device}")
    processor = transformers.AutoProcessor.from_pretrained(checkpoint)
    model = transformers.AutoModelForZeroShotObjectDetection.from_pretrained(checkpoint).to(device)
    model.eval()
    return processor, model


@lru_cache(maxsize=None)
def _load_llava_next(checkpoint: str, device: str):
    torch, transformers = _require_transformers()
    logger.info(f"🔧 Loading verifier checkpoint {checkpoint} on {device}")
    dtype = torch.float16 if device.startswith("cuda") else torch.float32
    processor = transformers.LlavaNextProcessor.from_pretrained(checkpoint)
    model = transformers.LlavaNextForConditionalGeneration.from_pretrained(checkpoint, torch_dtype=dtype).to(device)
    model.eval()
    return processor, model


@lru_cache(maxsize=None)
def _load_mask2former(checkpoint: str, device: str):
    torch, transformers = _require_transformers()
    logger.info(f"🔧 Loading segmenter checkpoint {checkpoint} on {device}")
    processor = transformers.AutoImageProcessor.from_pretrained(checkpoint)
    model = transformers.Mask2FormerForUniversalSegmentation.from_pretrained(checkpoint).to(device)
    model.eval()
    return processor, model


class GroundingDinoDetector(DetectorBackend):
    """Open-vocabulary detector returning every query box, unfiltered.

    The model predicts normalized (center_x, center_y, width, height) boxes; they
    are mapped to absolute corner format as
    x_min = (cx - w/2) * W, y_min = (cy - h/2) * H, x_max = (cx + w/2) * W,
    y_max = (cy + h/2) * H. box_score is the highest token probability of a query,
    text_score the highest probability among the prompt's content tokens.
    """

    name = "reference-detector"

    def __init__(self, checkpoint: str, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.device = device
        self.processor, self.model = _load_grounding_dino(checkpoint, device)

    def detect(self, image: np.ndarray, text_prompt: str) -> List[Candidate]:
        torch, _ = _require_transformers()
        height, width = image.shape[:2]
        prompt = TrayPrompts.normalize_detection_prompt(text_prompt)
        try:
            inputs = self.processor(images=Image.fromarray(image), text=prompt, return_tensors="pt").to(self.device)
            with torch.no_grad():
                outputs = self.model(**inputs)
        except Exception as e:
            raise BackendError(f"detector inference failed: {e}") from e

        input_ids = inputs["input_ids"][0].tolist()
        ignored = set(self.processor.tokenizer.all_special_ids)
        ignored.update(self.processor.tokenizer.convert_tokens_to_ids(["."]))
        content = [i for i, token in enumerate(input_ids) if token not in ignored]

        probs = outputs.logits.sigmoid()[0][:, :len(input_ids)]
        box_scores = probs.max(dim=-1).values
        text_scores = probs[:, content].max(dim=-1).values if content else box_scores
        boxes = outputs.pred_boxes[0]

        candidates = []
        for (cx, cy, w, h), box_score, text_score in zip(boxes.tolist(), box_scores.tolist(), text_scores.tolist()):
            candidates.append(Candidate(
                x_min=(cx - w / 2) * width,
                y_min=(cy - h / 2) * height,
                x_max=(cx + w / 2) * width,
                y_max=(cy + h / 2) * height,
                box_score=min(1.0, max(0.0, box_score)),
                text_score=min(1.0, max(0.0, text_score)),
            ))
        return candidates


class LlavaNextVerifier(VerifierBackend):
    name = "reference-verifier"

    def __init__(self, checkpoint: str, device: str = "cpu", max_new_tokens: int = 64):
        self.checkpoint = checkpoint
        self.device = device
        self.max_new_tokens = max_new_tokens
        self.processor, self.model = _load_llava_next(checkpoint, device)

    def answer(self, image: np.ndarray, question: str) -> str:
        torch, _ = _require_transformers()
        conversation = [
            {"role": "user", "content": [{"type": "image"}, {"type": "text", "text": question}]},
        ]
        try:
            prompt = self.processor.apply_chat_template(conversation, add_generation_prompt=True)
            inputs = self.processor(images=Image.fromarray(image), text=prompt, return_tensors="pt").to(self.device)
            with torch.no_grad():
                output = self.model.generate(**inputs, max_new_tokens=self.max_new_tokens, do_sample=False)
        except Exception as e:
            raise BackendError(f"verifier inference failed: {e}") from e
        prompt_length = inputs["input_ids"].shape[1]
        text = self.processor.decode(output[0][prompt_length:], skip_special_tokens=True).strip()
        if not text:
            raise BackendError("verifier returned an empty answer")
        return text


class ChatModelVerifier(VerifierBackend):
    """Verifier backed by a LangChain chat model that accepts image content"""

    name = "chat-verifier"

    def __init__(self, model: str, llm=None):
        if llm is None:
            from langchain_anthropic import ChatAnthropic
            llm = ChatAnthropic(model=model)
        self.llm = llm

    def answer(self, image: np.ndarray, question: str) -> str:
        buffer = io.BytesIO()
        Image.fromarray(image).save(buffer, format="PNG")
        encoded = base64.b64encode(buffer.getvalue()).decode("ascii")

        messages = [
            SystemMessage(content=TrayPrompts.VERIFY_SYSTEM),
            HumanMessage(content=[
                {"type": "image_url", "image_url": {"url": f"data:image/png;base64,{encoded}"}},
                {"type": "text", "text": question},
            ]),
        ]
        try:
            response = self.llm.invoke(messages)
        except Exception as e:
            raise BackendError(f"chat verifier failed: {e}") from e

        content = response.content
        if isinstance(content, list):
            content = " ".join(
                part.get("text", "") if isinstance(part, dict) else str(part) for part in content
            )
        text = str(content).strip()
        if not text:
            raise BackendError("chat verifier returned an empty answer")
        return text


class Mask2FormerSegmenter(SegmenterBackend):
    """Semantic segmentation with a fine-tuned Mask2Former checkpoint.

    The checkpoint's label ids must equal the taxonomy class ids (background 0).
    """

    name = "reference-segmenter"

    def __init__(self, checkpoint: str, device: str = "cpu"):
        self.checkpoint = checkpoint
        self.device = device
        self.processor, self.model = _load_mask2former(checkpoint, device)

    def segment(self, image: np.ndarray, taxonomy: Taxonomy) -> LabelMask:
        torch, _ = _require_transformers()
        height, width = image.shape[:2]
        num_labels = getattr(self.model.config, "num_labels", None)
        if num_labels is not None and num_labels != taxonomy.num_classes:
            raise BackendError(
                f"checkpoint {self.checkpoint} predicts {num_labels} labels, "
                f"taxonomy {taxonomy.name} has {taxonomy.num_classes}"
            )
        try:
            inputs = self.processor(images=Image.fromarray(image), return_tensors="pt").to(self.device)
            with torch.no_grad():
                outputs = self.model(**inputs)
            semantic = self.processor.post_process_semantic_segmentation(outputs, target_sizes=[(height, width)])[0]
        except Exception as e:
            raise BackendError(f"segmenter inference failed: {e}") from e
        labels = semantic.cpu().numpy().astype(np.int64)
        try:
            return LabelMask(labels=labels, taxonomy=taxonomy)
        except ValueError as e:
            raise BackendError(f"segmenter produced labels outside {taxonomy.name}: {e}") from e
