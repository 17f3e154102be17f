from __future__ import annotations

import json
from importlib.resources import files
from pathlib import Path


class CorpusError(ValueError):
    pass


def bundled_corpus_path() -> Path:
    """The 200-line synthetic question corpus shipped with the package."""
    return Path(str(files("splitleak.data").joinpath("corpus.jsonl")))


def load_corpus(path) -> list:
    """Prompts from a JSON Lines file with a string ``text`` field per line."""
    path = Path(path)
    if not path.is_file():
        raise CorpusError(f"corpus file not found: {path}")
    prompts = []
    with path.open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{path}:{lineno}: malformed JSON ({exc.msg})") from None
            if not isinstance(obj, dict) or not isinstance(obj.get("text"), str):
                raise CorpusError(f"{path}:{lineno}: missing string field 'text'")
            prompts.append(obj["text"])
    return prompts
