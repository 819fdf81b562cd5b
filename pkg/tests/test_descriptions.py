import json

import numpy as np
import pytest
import torch

from stickertagger.data import StickerImage
from stickertagger.descriptions import (
    AttributeDescriptions,
    DescriptionCache,
    DescriptionError,
    HttpChatClient,
    PromptTurn,
    StubChatClient,
    TextEncoder,
    build_prompt_turns,
    describe,
    describe_corpus,
    encode_descriptions,
    hash_token_ids,
    parse_attribute_reply,
    prompt_turn_hash,
)


def _sticker(sid="s0", meta=None):
    return StickerImage(
        id=sid, pixels=np.zeros((3, 8, 8), dtype=np.float32), meta=meta or {}
    )


# --- prompt turns ---


def test_turn_texts():
    turns = build_prompt_turns(_sticker())
    assert turns[0].role == "system"
    assert turns[1].text == "Please determine if there is text in the sticker."
    assert turns[2].text == (
        "Only give the text content in the sticker without other unrelated words."
    )
    assert "a brief sentence in English to describe the style, role, and action" in turns[3].text


def test_turns_are_sticker_independent():
    a = build_prompt_turns(_sticker("a", {"shape": "cat"}))
    b = build_prompt_turns(_sticker("b", {"color": "red"}))
    assert [t.text for t in a] == [t.text for t in b]
    assert [t.role for t in a] == [t.role for t in b]


def test_prompt_hash_tracks_turn_texts():
    turns = build_prompt_turns(_sticker())
    same = build_prompt_turns(_sticker("other"))
    assert prompt_turn_hash(turns) == prompt_turn_hash(same)
    changed = list(turns)
    changed[1] = PromptTurn("user", turns[1].text + "!")
    assert prompt_turn_hash(changed) != prompt_turn_hash(turns)
    reordered = [turns[1], turns[0]] + turns[2:]
    assert prompt_turn_hash(reordered) != prompt_turn_hash(turns)


# --- reply parsing ---


def test_parse_labeled_reply():
    fields, flagged = parse_attribute_reply(
        "Content: none\nStyle: cartoon\nRole: cat\nAction: waving"
    )
    assert fields == {
        "content": "none", "style": "cartoon", "role": "cat", "action": "waving"
    }
    assert flagged is False


def test_parse_unlabeled_reply_falls_back_to_content():
    fields, flagged = parse_attribute_reply("a happy dog")
    assert fields["content"] == "a happy dog"
    assert fields["style"] == fields["role"] == fields["action"] == "unknown"
    assert flagged is True


def test_parse_partial_labels_flags():
    fields, flagged = parse_attribute_reply("Role: dog\nsome chatter")
    assert fields["role"] == "dog"
    assert fields["content"] == "unknown"
    assert flagged is True


def test_parse_is_case_insensitive_and_keeps_first():
    fields, flagged = parse_attribute_reply(
        "CONTENT: hi\ncontent: second\nstyle: flat\nrole: bird\naction: flying"
    )
    assert fields["content"] == "hi"
    assert flagged is False


def test_parse_empty_reply():
    fields, flagged = parse_attribute_reply("")
    assert fields["content"] == "unknown"
    assert flagged is True


# --- describe with the stub ---


def test_stub_emits_meta_verbatim():
    client = StubChatClient()
    desc = describe(_sticker(meta={"shape": "cat", "action": "peeking"}), client)
    assert desc.role == "cat"
    assert desc.action == "peeking"
    assert desc.style == "plain"
    assert desc.content == "none"
    assert desc.source_model == "stub"
    assert desc.flagged is False
    assert len(desc.prompt_hash) == 64


def test_cache_prevents_second_client_call(tmp_path):
    client = StubChatClient()
    cache = DescriptionCache(tmp_path / "cache.jsonl")
    sticker = _sticker(meta={"color": "red"})
    first = describe(sticker, client, cache)
    second = describe(sticker, client, cache)
    assert client.calls == 1
    assert first == second


def test_cache_round_trip_through_file(tmp_path):
    path = tmp_path / "cache.jsonl"
    sticker = _sticker(meta={"shape": "star", "glyph": "dots"})
    original = describe(sticker, StubChatClient(), DescriptionCache(path))
    fresh_client = StubChatClient()
    reloaded = describe(sticker, fresh_client, DescriptionCache(path))
    assert fresh_client.calls == 0
    assert reloaded == original


def test_cache_rejects_corrupt_lines(tmp_path):
    path = tmp_path / "cache.jsonl"
    path.write_text('{"id": "a", "content": "x"\n', encoding="utf-8")
    with pytest.raises(DescriptionError, match="corrupt"):
        DescriptionCache(path)


def test_describe_corpus_is_offline_and_sorted(tmp_path):
    stickers = [_sticker(f"s{i}", {"shape": "circle"}) for i in (3, 1, 2)]
    cache = DescriptionCache(tmp_path / "cache.jsonl")
    out = describe_corpus(stickers, StubChatClient(), cache)
    assert sorted(out.keys()) == ["s1", "s2", "s3"]
    ids = [
        json.loads(line)["id"]
        for line in (tmp_path / "cache.jsonl").read_text().splitlines()
    ]
    assert ids == ["s1", "s2", "s3"]


# --- HTTP client ---


def _ok_response(text):
    return {"choices": [{"message": {"content": text}}]}


def test_http_client_plays_turns_and_attaches_image_once(monkeypatch):
    monkeypatch.setenv("STICKER_CHAT_API_KEY", "sekrit")
    seen = []

    def transport(url, headers, payload):
        seen.append((url, headers, json.loads(json.dumps(payload))))
        return _ok_response(f"reply {len(seen)}")

    client = HttpChatClient("http://chat.local/v1", "vlm-x", transport=transport)
    desc = describe(_sticker(), client)
    assert desc.source_model == "vlm-x"
    # 4 user turns -> 4 posts, growing message list each time
    assert len(seen) == 4
    url, headers, payload = seen[0]
    assert url == "http://chat.local/v1/chat/completions"
    assert headers["Authorization"] == "Bearer sekrit"
    assert payload["model"] == "vlm-x"
    assert payload["messages"][0]["role"] == "system"
    image_parts = [
        part
        for _, _, pl in seen
        for msg in pl["messages"]
        if isinstance(msg["content"], list)
        for part in msg["content"]
        if part["type"] == "image_url"
    ]
    assert all(p["image_url"]["url"].startswith("data:image/png;base64,") for p in image_parts)
    # the image is attached to the first user turn only
    first_payload_parts = [
        part
        for msg in seen[0][2]["messages"]
        if isinstance(msg["content"], list)
        for part in msg["content"]
    ]
    assert sum(1 for p in first_payload_parts if p["type"] == "image_url") == 1
    last_messages = seen[-1][2]["messages"]
    assert sum(1 for m in last_messages if m["role"] == "assistant") == 3


def test_http_client_retries_then_succeeds():
    attempts = {"n": 0}

    def flaky(url, headers, payload):
        attempts["n"] += 1
        if attempts["n"] < 3:
            raise ConnectionError("boom")
        return _ok_response("Content: hi\nStyle: s\nRole: r\nAction: a")

    client = HttpChatClient("http://x", "m", retries=3, transport=flaky)
    reply = client._post([{"role": "user", "content": "hello"}])
    assert reply.startswith("Content: hi")
    assert attempts["n"] == 3


def test_http_client_failure_carries_sticker_id():
    def broken(url, headers, payload):
        raise ConnectionError("refused")

    client = HttpChatClient("http://x", "m", retries=2, transport=broken)
    with pytest.raises(DescriptionError, match="'s0'"):
        describe(_sticker("s0"), client)


# --- text encoder ---


def test_hash_token_ids_frozen_values():
    # FNV-1a("cat") = 108289031, checked against the published "a" vector
    assert hash_token_ids("cat", vocab_size=512, max_len=8) == [1 + 108289031 % 511]
    assert hash_token_ids("cat", 512, 8) == [467]
    assert hash_token_ids("peeking", 512, 8) == [24]
    assert hash_token_ids("", 512, 8) == [0]
    assert hash_token_ids("Cat CAT cat", 512, 8) == [467, 467, 467]
    assert len(hash_token_ids("a b c d e", 512, 3)) == 3


def test_encoder_shapes_and_determinism():
    torch.manual_seed(0)
    enc = TextEncoder(d_text=16, vocab_size=128, max_len=8)
    desc = AttributeDescriptions("a cat", "flat", "cat", "waving", "stub", "0" * 64)
    emb1 = encode_descriptions(desc, enc)
    emb2 = encode_descriptions(desc, enc)
    assert emb1.vectors.shape == (4, 16)
    assert torch.equal(emb1.vectors, emb2.vectors)
    assert torch.isfinite(emb1.vectors).all()


def test_identical_strings_identical_embeddings():
    torch.manual_seed(1)
    enc = TextEncoder(d_text=16, vocab_size=128)
    a = AttributeDescriptions("x", "y", "z", "w", "stub", "0" * 64)
    b = AttributeDescriptions("x", "y", "z", "w", "other-model", "1" * 64)
    assert torch.equal(encode_descriptions(a, enc).vectors, encode_descriptions(b, enc).vectors)


def test_permuting_strings_permutes_vectors():
    torch.manual_seed(2)
    enc = TextEncoder(d_text=16, vocab_size=128)
    a = AttributeDescriptions("one", "two", "three", "four", "stub", "0" * 64)
    b = AttributeDescriptions("two", "one", "three", "four", "stub", "0" * 64)
    va = encode_descriptions(a, enc).vectors
    vb = encode_descriptions(b, enc).vectors
    assert torch.equal(va[0], vb[1])
    assert torch.equal(va[1], vb[0])
    assert torch.equal(va[2], vb[2])
    assert torch.equal(va[3], vb[3])


def test_empty_string_encodes_placeholder():
    torch.manual_seed(3)
    enc = TextEncoder(d_text=16, vocab_size=128)
    desc = AttributeDescriptions("", "style", "role", "action", "stub", "0" * 64)
    emb = encode_descriptions(desc, enc)
    assert torch.isfinite(emb.vectors).all()
