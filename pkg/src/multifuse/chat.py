"""CHAT (.cha) transcript parsing, cleaning and word-level tokenization."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np

PAD, UNK, CLS, SEP = 0, 1, 2, 3
RESERVED = {"[PAD]": PAD, "[UNK]": UNK, "[CLS]": CLS, "[SEP]": SEP}

_TIER = re.compile(r"^\*([A-Za-z0-9]{3}):\s?(.*)$")
_BULLET = re.compile("\x15[^\x15]*\x15")
# a retracing code scopes over the preceding <...> group or the preceding word
_RETRACED = re.compile(r"(?:<[^<>]*>|\S+)\s*\[/[/?\-]*\]")
_BRACKET = re.compile(r"\[[^\]]*\]")
_ANGLE = re.compile(r"[<>\[\]]")  # also unbalanced brackets
_FILLER = re.compile(r"(?<!\S)&\S*")
_PAUSE = re.compile(r"\(\.{1,3}\)")
_XXX = re.compile(r"(?<!\S)xxx(?!\S)", re.IGNORECASE)
_TERMINATOR = re.compile(r'(?<!\S)\+[./"!?,<^]*[.?!]')
_LINKER = re.compile(r"(?<!\S)\+\S*")
_SPACE = re.compile(r"\s+")
_WORD = re.compile(r"[^\s.?!,;:]+")


class ChatParseError(ValueError):
    def __init__(self, line_no: int, line: str, source: str = ""):
        where = f"{source}:" if source else "line "
        super().__init__(f"{where}{line_no}: unrecognized CHAT line {line!r}")
        self.line_no = line_no


@dataclass(frozen=True)
class Transcript:
    utterances: tuple[tuple[str, str], ...]
    source_id: str = ""

    @property
    def text(self) -> str:
        return " ".join(t for _, t in self.utterances if t)


@dataclass(frozen=True)
class TokenSequence:
    ids: np.ndarray
    attention_mask: np.ndarray
    vocab_size: int


def clean_utterance(text: str) -> str:
    # removals can expose new markers (e.g. "<&um>"), so run to a fixed point
    while True:
        cleaned = _clean_once(text)
        if cleaned == text:
            return cleaned
        text = cleaned


def _clean_once(text: str) -> str:
    text = _BULLET.sub(" ", text)
    text = _RETRACED.sub(" ", text)
    text = _BRACKET.sub(" ", text)
    text = _ANGLE.sub(" ", text)
    text = _FILLER.sub(" ", text)
    text = _PAUSE.sub(" ", text)
    text = _XXX.sub(" ", text)
    text = _TERMINATOR.sub(" .", text)
    text = _LINKER.sub(" ", text)
    text = text.replace("\x15", " ")
    return _SPACE.sub(" ", text).strip().lower()


def parse_chat(raw: str, speakers: Iterable[str] = ("PAR",), source_id: str = "") -> Transcript:
    """Collect cleaned main-tier utterances for ``speakers`` in file order."""
    wanted = set(speakers)
    tiers: list[list[str]] = []  # [speaker, payload]; speaker None for dependent tiers
    current: list | None = None
    for no, line in enumerate(raw.splitlines(), start=1):
        line = line.lstrip("﻿")
        if not line.strip():
            continue
        if line.startswith("@"):
            current = None
        elif line.startswith("*"):
            m = _TIER.match(line)
            if m is None:
                raise ChatParseError(no, line, source_id)
            current = [m.group(1), m.group(2)]
            tiers.append(current)
        elif line.startswith("%"):
            current = [None, ""]
        elif line.startswith("\t"):
            if current is None:
                # continuation of a header line
                continue
            current[1] += " " + line.strip()
        else:
            raise ChatParseError(no, line, source_id)

    utterances = tuple(
        (spk, clean_utterance(payload)) for spk, payload in tiers if spk in wanted
    )
    return Transcript(utterances, source_id)


def read_chat(path, speakers: Iterable[str] = ("PAR",)) -> Transcript:
    path = Path(path)
    return parse_chat(path.read_text(encoding="utf-8"), speakers, source_id=path.stem)


# ---------------------------------------------------------------- tokens

def words(text: str) -> list[str]:
    return _WORD.findall(text)


def build_vocab(texts: Iterable[str], min_count: int = 1) -> dict[str, int]:
    """Word -> id, reserved ids first, remaining words by descending frequency."""
    counts = Counter(w for t in texts for w in words(t))
    vocab = dict(RESERVED)
    for word, n in sorted(counts.items(), key=lambda kv: (-kv[1], kv[0])):
        if n >= min_count:
            vocab[word] = len(vocab)
    return vocab


def tokenize(transcript: Transcript | str, vocab: dict[str, int], max_len: int = 128) -> TokenSequence:
    if max_len < 2:
        raise ValueError("tokenize: max_len must be >= 2")
    text = transcript.text if isinstance(transcript, Transcript) else transcript
    body = [vocab.get(w, UNK) for w in words(text)][: max_len - 2]
    seq = [CLS] + body + [SEP]
    ids = np.full(max_len, PAD, dtype=np.int64)
    ids[: len(seq)] = seq
    mask = np.zeros(max_len, dtype=np.int64)
    mask[: len(seq)] = 1
    return TokenSequence(ids, mask, max(vocab.values()) + 1)


def detokenize(seq: TokenSequence, vocab: dict[str, int]) -> list[str]:
    inverse = {i: w for w, i in vocab.items()}
    return [inverse[i] for i, m in zip(seq.ids.tolist(), seq.attention_mask.tolist())
            if m and i not in (PAD, CLS, SEP)]


def write_tokens_jsonl(records: Iterable[tuple[str, Transcript, TokenSequence]], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for sid, tr, seq in records:
            fh.write(json.dumps({
                "id": sid,
                "text": tr.text,
                "ids": seq.ids.tolist(),
                "mask": seq.attention_mask.tolist(),
            }) + "\n")


def read_tokens_jsonl(path, vocab_size: int) -> dict[str, TokenSequence]:
    out = {}
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            out[rec["id"]] = TokenSequence(
                np.asarray(rec["ids"], dtype=np.int64),
                np.asarray(rec["mask"], dtype=np.int64),
                vocab_size,
            )
    return out


def tokenize_directory(in_dir, out_path, speakers=("PAR",), max_len: int = 128,
                       vocab: dict[str, int] | None = None) -> dict[str, int]:
    """Parse every .cha file in ``in_dir`` and write ``tokens.jsonl``.

    Builds the vocabulary from these files when none is given; returns it.
    A ``vocab.json`` is written next to the output.
    """
    transcripts = [read_chat(p, speakers) for p in sorted(Path(in_dir).glob("*.cha"))]
    if vocab is None:
        vocab = build_vocab(t.text for t in transcripts)
    write_tokens_jsonl(((t.source_id, t, tokenize(t, vocab, max_len)) for t in transcripts), out_path)
    Path(out_path).with_name("vocab.json").write_text(json.dumps(vocab, indent=1))
    return vocab
