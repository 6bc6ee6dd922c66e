from __future__ import annotations

import contextlib
import shutil
from pathlib import Path
from unittest import mock

import pytest

from lesionkb.config import RunConfig
from lesionkb.store import LUNG_IRRELEVANT, LUNG_RELATED, Rule

DEMO = Path(__file__).resolve().parent.parent / "fixtures" / "demo"


class ScriptProvider:
    """Answers through a plain function of the request and keeps every request it saw."""

    def __init__(self, fn):
        self.fn = fn
        self.requests = []

    def generate(self, request):
        self.requests.append(request)
        return self.fn(request)


def make_rule(text: str, polarity: str = LUNG_RELATED, vector=None, pattern: str = "pattern") -> Rule:
    rule = Rule.create(polarity, pattern, text)
    return rule.with_embedding(vector) if vector is not None else rule


class _Tap:
    def __init__(self, inner, seen):
        self.inner, self.seen = inner, seen

    def generate(self, request):
        self.seen.append(request)
        return self.inner.generate(request)


@contextlib.contextmanager
def tapped_requests():
    """Collect every request the CLI sends to its configured provider."""
    seen = []
    original = RunConfig.make_provider

    def make_provider(self):
        return _Tap(original(self), seen)

    with mock.patch.object(RunConfig, "make_provider", make_provider):
        yield seen


def demo_extract_args(root: Path, out: Path, *extra: str) -> list[str]:
    return ["extract", "--config", str(root / "config.ini"), "--reports", str(root / "reports.jsonl"),
            "--rules", str(root / "rules.jsonl"), "--external", str(root / "external_kb.jsonl"),
            "--train", str(root / "train.jsonl"), "--out", str(out / "findings.jsonl"),
            "--audit", str(out / "audit.jsonl"), "--jobs", "1", *extra]


@pytest.fixture
def demo_dir(tmp_path) -> Path:
    """A private copy of the shipped demo corpus."""
    target = tmp_path / "demo"
    shutil.copytree(DEMO, target)
    return target


__all__ = ["DEMO", "LUNG_IRRELEVANT", "LUNG_RELATED", "ScriptProvider", "demo_extract_args", "make_rule",
           "tapped_requests"]
