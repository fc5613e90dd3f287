"""Reference fine-tuning recipe for the code-provenance classifier.

Trains a sequence-classification head on top of a pretrained code encoder
(GraphCodeBERT-class) from labeled NDJSON rows {"code": ..., "label":
"ai"|"human"}. This is a documented recipe, not part of the test suite:
it needs GPU-scale resources and network access to fetch the base
checkpoint.

Usage:
    python -m scorer_adapter.finetune --labeled data.ndjson --out-dir ckpt/
"""

from __future__ import annotations

import argparse
import json
from pathlib import Path

DEFAULT_BASE = "microsoft/graphcodebert-base"


def load_labeled(path):
    rows = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                obj = json.loads(line)
                rows.append((obj["code"], 1 if obj["label"] == "ai" else 0))
    return rows


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--labeled", required=True, help="NDJSON rows of {code, label}")
    p.add_argument("--base", default=DEFAULT_BASE)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--learning-rate", type=float, default=1e-5)
    p.add_argument("--weight-decay", type=float, default=0.005)
    p.add_argument("--warmup-steps", type=int, default=1000)
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=365)
    args = p.parse_args(argv)

    import torch
    from transformers import (
        AutoModelForSequenceClassification,
        AutoTokenizer,
        Trainer,
        TrainingArguments,
        set_seed,
    )

    set_seed(args.seed)
    rows = load_labeled(args.labeled)
    split = int(len(rows) * (1 - args.eval_fraction))
    train_rows, eval_rows = rows[:split], rows[split:]

    tokenizer = AutoTokenizer.from_pretrained(args.base)

    class CodeDataset(torch.utils.data.Dataset):
        def __init__(self, data):
            self.data = data

        def __len__(self):
            return len(self.data)

        def __getitem__(self, idx):
            code, label = self.data[idx]
            enc = tokenizer(code, truncation=True, padding="max_length", max_length=512)
            return {k: torch.tensor(v) for k, v in enc.items()} | {
                "labels": torch.tensor(label)
            }

    model = AutoModelForSequenceClassification.from_pretrained(args.base, num_labels=2)
    training_args = TrainingArguments(
        output_dir=args.out_dir,
        num_train_epochs=args.epochs,
        per_device_train_batch_size=args.batch_size,
        per_device_eval_batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        weight_decay=args.weight_decay,
        warmup_steps=args.warmup_steps,
        optim="adamw_hf",
        logging_steps=100,
        eval_strategy="epoch",
        save_strategy="epoch",
        load_best_model_at_end=True,
        seed=args.seed,
        data_seed=args.seed,
    )
    trainer = Trainer(model=model, args=training_args,
                      train_dataset=CodeDataset(train_rows),
                      eval_dataset=CodeDataset(eval_rows))
    trainer.train()
    trainer.save_model(str(Path(args.out_dir) / "best"))
    tokenizer.save_pretrained(str(Path(args.out_dir) / "best"))
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
