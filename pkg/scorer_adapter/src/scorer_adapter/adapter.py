"""Scorer-protocol server around a sequence-classification model.

Wire protocol (newline-delimited JSON on stdin/stdout):
  startup   -> {"ready": true, "scorer_id": "..."}
  request   -> {"id": "...", "code": "..."}
  response  -> {"id": "...", "p_ai": 0.xx}
Exactly one response per request line, in request order. Requests that
cannot be scored get {"id": ..., "p_ai": null, "error": "..."}. Malformed
input lines are reported on stderr; stdout stays protocol-clean.

Two model backends: a stub with fixed logits (no dependencies, for
protocol tests) and a transformer checkpoint loaded lazily through the
`transformers` library, truncated/padded to 512 tokens.
"""

from __future__ import annotations

import argparse
import json
import math
import queue
import sys
import threading
from dataclasses import dataclass
from typing import Optional, Sequence

MAX_SEQUENCE_LENGTH = 512


@dataclass
class AdapterConfig:
    checkpoint: Optional[str] = None
    stub_logits: Optional[tuple[float, float]] = None  # (human, ai)
    max_seq_len: int = MAX_SEQUENCE_LENGTH
    batch_size: int = 8
    device: str = "cpu"
    ai_label_index: int = 1
    scorer_id: str = "scorer-adapter"

    def __post_init__(self):
        if (self.checkpoint is None) == (self.stub_logits is None):
            raise ValueError("exactly one of checkpoint or stub_logits is required")
        if self.max_seq_len != MAX_SEQUENCE_LENGTH:
            raise ValueError(f"max sequence length is fixed at {MAX_SEQUENCE_LENGTH}")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


class StubModel:
    """Fixed-logit model: every input scores softmax(logits)[ai]."""

    def __init__(self, logits: tuple[float, float], ai_index: int = 1):
        human, ai = logits
        z = ai - human if ai_index == 1 else human - ai
        self.p_ai = 1.0 / (1.0 + math.exp(-z))

    def score(self, codes: Sequence[str]) -> list[float]:
        return [self.p_ai for _ in codes]


class TransformerModel:
    """Checkpoint-backed classifier; softmax probability of the AI class."""

    def __init__(self, checkpoint: str, max_seq_len: int, device: str, ai_index: int):
        import torch
        from transformers import AutoModelForSequenceClassification, AutoTokenizer

        self._torch = torch
        self.tokenizer = AutoTokenizer.from_pretrained(checkpoint)
        self.model = AutoModelForSequenceClassification.from_pretrained(checkpoint)
        self.model.to(device)
        self.model.eval()
        self.max_seq_len = max_seq_len
        self.device = device
        self.ai_index = ai_index

    def score(self, codes: Sequence[str]) -> list[float]:
        torch = self._torch
        enc = self.tokenizer(list(codes), truncation=True, padding=True,
                             max_length=self.max_seq_len, return_tensors="pt")
        enc = {k: v.to(self.device) for k, v in enc.items()}
        with torch.no_grad():
            logits = self.model(**enc).logits
            probs = torch.softmax(logits, dim=-1)
        return [float(p[self.ai_index]) for p in probs]


def load_model(config: AdapterConfig):
    if config.stub_logits is not None:
        return StubModel(config.stub_logits, config.ai_label_index)
    return TransformerModel(config.checkpoint, config.max_seq_len,
                            config.device, config.ai_label_index)


def _emit(stdout, obj: dict) -> None:
    stdout.write(json.dumps(obj, sort_keys=True) + "\n")
    stdout.flush()


def _score_batch(model, batch: list[dict], stdout, stderr) -> None:
    """One response per request, request order preserved."""
    codes = []
    scorable = []
    for req in batch:
        code = req.get("code")
        if isinstance(code, str):
            scorable.append(req)
            codes.append(code)
    try:
        scores = model.score(codes) if codes else []
        by_id: dict[int, float] = {id(req): s for req, s in zip(scorable, scores)}
    except Exception as exc:  # scoring failure hits the whole batch's items
        print(f"scorer-adapter: batch scoring failed: {exc}", file=stderr)
        by_id = {}
    for req in batch:
        p = by_id.get(id(req))
        if p is None:
            reason = ("missing code field" if not isinstance(req.get("code"), str)
                      else "scoring failed")
            _emit(stdout, {"error": reason, "id": req.get("id"), "p_ai": None})
        else:
            _emit(stdout, {"id": req.get("id"), "p_ai": p})


def serve(config: AdapterConfig, stdin=None, stdout=None, stderr=None) -> int:
    """Protocol loop: ready line first, then adaptive batches until EOF.

    A reader thread feeds a queue; each batch takes whatever is already
    buffered (up to batch_size), so single requests are answered without
    waiting for a full batch.
    """
    stdin = stdin if stdin is not None else sys.stdin
    stdout = stdout if stdout is not None else sys.stdout
    stderr = stderr if stderr is not None else sys.stderr

    model = load_model(config)  # before the ready line: load errors exit nonzero
    _emit(stdout, {"ready": True, "scorer_id": config.scorer_id})

    lines: "queue.Queue[Optional[str]]" = queue.Queue()

    def pump():
        for line in stdin:
            lines.put(line)
        lines.put(None)

    threading.Thread(target=pump, daemon=True).start()

    eof = False
    while not eof:
        first = lines.get()
        if first is None:
            break
        batch_lines = [first]
        while len(batch_lines) < config.batch_size:
            try:
                nxt = lines.get_nowait()
            except queue.Empty:
                break
            if nxt is None:
                eof = True
                break
            batch_lines.append(nxt)
        batch = []
        for line in batch_lines:
            if not line.strip():
                continue
            try:
                batch.append(json.loads(line))
            except json.JSONDecodeError as exc:
                print(f"scorer-adapter: skipping malformed request line: {exc}",
                      file=stderr)
        if batch:
            _score_batch(model, batch, stdout, stderr)
    return 0


def _parse_logits(text: str) -> tuple[float, float]:
    parts = text.split(",")
    if len(parts) != 2:
        raise argparse.ArgumentTypeError("expected HUMAN,AI logits, e.g. 0.0,1.5")
    return float(parts[0]), float(parts[1])


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="scorer-adapter", description=__doc__)
    backend = p.add_mutually_exclusive_group(required=True)
    backend.add_argument("--checkpoint", help="transformer checkpoint path or hub id")
    backend.add_argument("--stub-logits", type=_parse_logits, metavar="HUMAN,AI",
                         help="serve fixed logits instead of a model")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--device", default="cpu")
    p.add_argument("--ai-label-index", type=int, default=1)
    p.add_argument("--scorer-id", default=None)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    scorer_id = args.scorer_id or (
        "stub" if args.stub_logits is not None else f"model:{args.checkpoint}")
    try:
        config = AdapterConfig(
            checkpoint=args.checkpoint, stub_logits=args.stub_logits,
            batch_size=args.batch_size, device=args.device,
            ai_label_index=args.ai_label_index, scorer_id=scorer_id,
        )
        return serve(config)
    except Exception as exc:
        # fatal before the ready line; the client sees a clean failure
        print(f"scorer-adapter: fatal: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
