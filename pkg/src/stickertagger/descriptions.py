"""Attribute-oriented description generation.

A sticker is described along four attributes (content, style, role, action) by
a vision-language chat service, prompted over multiple turns. Two clients are
provided: an HTTP client for OpenAI-compatible chat endpoints and an offline
stub that templates replies from synthetic metadata, so a whole corpus can be
described with zero network access. Records are cached to JSON-Lines and a
small trainable text encoder turns the four strings into vectors.
"""

from __future__ import annotations

import base64
import hashlib
import io
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Protocol

import numpy as np
import torch
from PIL import Image
from torch import nn

from .data import StickerImage

PROMPT_SYSTEM = "This is a sticker used in conversation..."
PROMPT_TEXT_PRESENCE = "Please determine if there is text in the sticker."
PROMPT_TEXT_CONTENT = "Only give the text content in the sticker without other unrelated words."
PROMPT_ATTRIBUTES = (
    "Consider the text in the sticker and provide a brief sentence in English "
    "to describe the style, role, and action of the sticker."
)
PROMPT_FORMAT = (
    "Summarize your answers as four labeled lines, exactly in this form:\n"
    "Content: <text content, or none>\n"
    "Style: <style>\n"
    "Role: <role>\n"
    "Action: <action>"
)

_LABELS = ("content", "style", "role", "action")


class DescriptionError(Exception):
    pass


@dataclass(frozen=True)
class PromptTurn:
    role: str  # "system" or "user"
    text: str


def build_prompt_turns(sticker: StickerImage) -> list[PromptTurn]:
    """The scripted conversation: a system turn plus three instructions
    (text presence, text extraction, style/role/action). The texts do not
    depend on the sticker; the image rides alongside the first user turn."""
    del sticker
    return [
        PromptTurn("system", PROMPT_SYSTEM),
        PromptTurn("user", PROMPT_TEXT_PRESENCE),
        PromptTurn("user", PROMPT_TEXT_CONTENT),
        PromptTurn("user", PROMPT_ATTRIBUTES),
    ]


def prompt_turn_hash(turns: list[PromptTurn]) -> str:
    digest = hashlib.sha256()
    for turn in turns:
        digest.update(turn.role.encode("utf-8"))
        digest.update(b"\x1f")
        digest.update(turn.text.encode("utf-8"))
        digest.update(b"\x1e")
    return digest.hexdigest()


@dataclass
class AttributeDescriptions:
    content: str
    style: str
    role: str
    action: str
    source_model: str
    prompt_hash: str
    flagged: bool = False  # true when the reply needed the fallback parse

    def fields(self) -> tuple[str, str, str, str]:
        return (self.content, self.style, self.role, self.action)

    def to_record(self, sticker_id: str) -> dict:
        return {
            "id": sticker_id,
            "content": self.content,
            "style": self.style,
            "role": self.role,
            "action": self.action,
            "source_model": self.source_model,
            "prompt_hash": self.prompt_hash,
            "flagged": self.flagged,
        }

    @classmethod
    def from_record(cls, rec: dict) -> "AttributeDescriptions":
        return cls(
            content=rec["content"],
            style=rec["style"],
            role=rec["role"],
            action=rec["action"],
            source_model=rec["source_model"],
            prompt_hash=rec["prompt_hash"],
            flagged=bool(rec.get("flagged", False)),
        )


def parse_attribute_reply(reply: str) -> tuple[dict[str, str], bool]:
    """Extract the four labeled lines from a chat reply.

    Replies that carry no labels at all fall back to content = whole reply,
    "unknown" elsewhere; any missing field sets the flag.
    """
    found: dict[str, str] = {}
    for line in reply.splitlines():
        head, sep, tail = line.partition(":")
        if not sep:
            continue
        key = head.strip().lower()
        if key in _LABELS and key not in found and tail.strip():
            found[key] = tail.strip()
    if not found:
        body = reply.strip()
        return (
            {
                "content": body if body else "unknown",
                "style": "unknown",
                "role": "unknown",
                "action": "unknown",
            },
            True,
        )
    fields = {k: found.get(k, "unknown") for k in _LABELS}
    return fields, len(found) < len(_LABELS)


class ChatClient(Protocol):
    model_name: str

    def run_turns(self, turns: list[PromptTurn], sticker: StickerImage) -> list[str]:
        """Plays the conversation, returning one reply per user turn."""
        ...


@dataclass
class StubChatClient:
    """Deterministic offline client that reads synthetic metadata.

    The final reply is the labeled-line block built verbatim from meta:
    content <- content/text, style <- style/color, role <- role/shape,
    action <- action/glyph, with fixed placeholders when absent.
    """

    model_name: str = "stub"
    calls: int = 0

    def run_turns(self, turns: list[PromptTurn], sticker: StickerImage) -> list[str]:
        self.calls += 1
        meta = sticker.meta
        content = meta.get("content", meta.get("text", "none"))
        style = meta.get("style", meta.get("color", "plain"))
        role = meta.get("role", meta.get("shape", "unknown"))
        action = meta.get("action", meta.get("glyph", "none"))
        has_text = "yes" if ("content" in meta or "text" in meta) else "no"
        sentence = f"The sticker has a {style} style, depicts a {role}, and shows {action}."
        labeled = f"Content: {content}\nStyle: {style}\nRole: {role}\nAction: {action}"
        replies = [has_text, content, sentence, labeled]
        n_user = sum(1 for t in turns if t.role == "user")
        return replies[:n_user] if n_user <= len(replies) else replies + [labeled] * (
            n_user - len(replies)
        )


def _png_base64(sticker: StickerImage) -> str:
    arr = np.clip(np.round(sticker.pixels * 255.0), 0, 255).astype(np.uint8)
    img = Image.fromarray(arr.transpose(1, 2, 0))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return base64.b64encode(buf.getvalue()).decode("ascii")


class HttpChatClient:
    """OpenAI-compatible vision chat client.

    Sends the scripted turns one at a time, feeding each assistant reply back
    into the message list. Auth is a bearer token read from ``api_key_env``;
    ``transport`` is injectable for tests and must behave like
    transport(url, headers, payload) -> response dict.
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: str = "STICKER_CHAT_API_KEY",
        retries: int = 3,
        timeout: float = 60.0,
        transport: Callable[[str, dict, dict], dict] | None = None,
    ) -> None:
        if retries < 1:
            raise DescriptionError(f"retries must be >= 1, got {retries}")
        self.base_url = base_url.rstrip("/")
        self.model_name = model
        self.api_key_env = api_key_env
        self.retries = retries
        self.timeout = timeout
        self.transport = transport if transport is not None else self._requests_transport

    def _requests_transport(self, url: str, headers: dict, payload: dict) -> dict:
        import requests

        resp = requests.post(url, headers=headers, json=payload, timeout=self.timeout)
        resp.raise_for_status()
        return resp.json()

    def _post(self, messages: list[dict]) -> str:
        url = f"{self.base_url}/chat/completions"
        headers = {"Content-Type": "application/json"}
        token = os.environ.get(self.api_key_env, "")
        if token:
            headers["Authorization"] = f"Bearer {token}"
        payload = {"model": self.model_name, "messages": messages}
        last_exc: Exception | None = None
        for _ in range(self.retries):
            try:
                data = self.transport(url, headers, payload)
                return str(data["choices"][0]["message"]["content"])
            except Exception as exc:  # noqa: BLE001 - every transport error is retryable here
                last_exc = exc
        raise DescriptionError(
            f"chat endpoint failed after {self.retries} attempts: {last_exc}"
        )

    def run_turns(self, turns: list[PromptTurn], sticker: StickerImage) -> list[str]:
        image_part = {
            "type": "image_url",
            "image_url": {"url": f"data:image/png;base64,{_png_base64(sticker)}"},
        }
        messages: list[dict] = []
        replies: list[str] = []
        image_pending = True
        for turn in turns:
            if turn.role == "system":
                messages.append({"role": "system", "content": turn.text})
                continue
            content: list[dict] = [{"type": "text", "text": turn.text}]
            if image_pending:
                content.append(image_part)
                image_pending = False
            messages.append({"role": "user", "content": content})
            reply = self._post(messages)
            replies.append(reply)
            messages.append({"role": "assistant", "content": reply})
        return replies


class DescriptionCache:
    """JSON-Lines store of description records keyed by sticker id.

    Single writer, append only; loading tolerates re-appended ids by keeping
    the latest record.
    """

    def __init__(self, path: str | Path) -> None:
        self.path = Path(path)
        self._records: dict[str, AttributeDescriptions] = {}
        if self.path.exists():
            for lineno, line in enumerate(
                self.path.read_text(encoding="utf-8").splitlines(), 1
            ):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._records[rec["id"]] = AttributeDescriptions.from_record(rec)
                except (json.JSONDecodeError, KeyError) as exc:
                    raise DescriptionError(
                        f"{self.path}:{lineno}: corrupt cache line: {exc}"
                    ) from exc

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, sticker_id: str) -> bool:
        return sticker_id in self._records

    def get(self, sticker_id: str) -> AttributeDescriptions | None:
        return self._records.get(sticker_id)

    def put(self, sticker_id: str, desc: AttributeDescriptions) -> None:
        self._records[sticker_id] = desc
        with self.path.open("a", encoding="utf-8") as fh:
            fh.write(json.dumps(desc.to_record(sticker_id), sort_keys=True) + "\n")


def describe(
    sticker: StickerImage,
    client: ChatClient,
    cache: DescriptionCache | None = None,
) -> AttributeDescriptions:
    """Run the multi-turn conversation (or hit the cache) and parse the reply.

    The scripted turns are extended with a final formatting instruction asking
    for the labeled-line reply that parse_attribute_reply expects.
    """
    if cache is not None:
        hit = cache.get(sticker.id)
        if hit is not None:
            return hit
    turns = build_prompt_turns(sticker) + [PromptTurn("user", PROMPT_FORMAT)]
    try:
        replies = client.run_turns(turns, sticker)
    except Exception as exc:
        raise DescriptionError(f"sticker {sticker.id!r}: {exc}") from exc
    if not replies:
        raise DescriptionError(f"sticker {sticker.id!r}: client returned no replies")
    fields, flagged = parse_attribute_reply(replies[-1])
    desc = AttributeDescriptions(
        content=fields["content"],
        style=fields["style"],
        role=fields["role"],
        action=fields["action"],
        source_model=client.model_name,
        prompt_hash=prompt_turn_hash(turns),
        flagged=flagged,
    )
    if cache is not None:
        cache.put(sticker.id, desc)
    return desc


def describe_corpus(
    items: list[StickerImage],
    client: ChatClient,
    cache: DescriptionCache | None = None,
) -> dict[str, AttributeDescriptions]:
    """Describe every sticker, id-sorted for a stable cache file order."""
    out: dict[str, AttributeDescriptions] = {}
    for sticker in sorted(items, key=lambda s: s.id):
        out[sticker.id] = describe(sticker, client, cache)
    return out


# --- text encoding ---


def _fnv1a32(data: bytes) -> int:
    h = 0x811C9DC5
    for b in data:
        h ^= b
        h = (h * 0x01000193) & 0xFFFFFFFF
    return h


def hash_token_ids(text: str, vocab_size: int, max_len: int) -> list[int]:
    """Hash-bucketed token ids: FNV-1a over each lowercased whitespace token,
    mapped to 1..vocab_size-1. Id 0 is the pad/placeholder; an empty string
    encodes as [0]."""
    words = text.lower().split()
    if not words:
        return [0]
    ids = [1 + _fnv1a32(w.encode("utf-8")) % (vocab_size - 1) for w in words]
    return ids[:max_len]


class TextEncoder(nn.Module):
    """Small trainable text encoder: hash-bucket embeddings, learned
    positions, a 2-layer transformer, mean pooling over token positions."""

    def __init__(
        self,
        d_text: int = 64,
        vocab_size: int = 512,
        max_len: int = 32,
        num_layers: int = 2,
        num_heads: int = 4,
    ) -> None:
        super().__init__()
        if vocab_size < 2:
            raise DescriptionError(f"vocab_size must be >= 2, got {vocab_size}")
        self.d_text = d_text
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.embedding = nn.Embedding(vocab_size, d_text)
        self.positions = nn.Parameter(torch.zeros(max_len, d_text))
        layer = nn.TransformerEncoderLayer(
            d_model=d_text,
            nhead=num_heads,
            dim_feedforward=4 * d_text,
            dropout=0.0,
            activation="gelu",
            batch_first=True,
            norm_first=True,
        )
        self.encoder = nn.TransformerEncoder(
            layer, num_layers=num_layers, enable_nested_tensor=False
        )

    def forward(self, texts: list[str]) -> torch.Tensor:
        """Encodes each string independently; returns (len(texts), d_text)."""
        pooled = []
        for text in texts:
            ids = torch.tensor(
                hash_token_ids(text, self.vocab_size, self.max_len), dtype=torch.long
            )
            x = self.embedding(ids) + self.positions[: ids.shape[0]]
            out = self.encoder(x.unsqueeze(0))
            pooled.append(out.mean(dim=1).squeeze(0))
        return torch.stack(pooled, dim=0)


@dataclass
class DescriptionEmbeddings:
    """Four vectors in fixed order (content, style, role, action)."""

    vectors: torch.Tensor  # (4, d_text)

    def __post_init__(self) -> None:
        if self.vectors.shape[0] != 4:
            raise DescriptionError(
                f"expected 4 description vectors, got {self.vectors.shape[0]}"
            )
        if not torch.isfinite(self.vectors).all():
            raise DescriptionError("description embeddings contain non-finite values")


def encode_descriptions(
    desc: AttributeDescriptions, encoder: TextEncoder
) -> DescriptionEmbeddings:
    return DescriptionEmbeddings(vectors=encoder(list(desc.fields())))
