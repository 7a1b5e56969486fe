#!/usr/bin/env python3
"""Transformer encoder worker for `[encoder] kind = "process"`.

Speaks JSON lines on stdin/stdout. Every request carries a "cmd":

  initialize   {"settings": {...}}           fresh model for one seed
  train_epoch  {"batches": [[{"segments": [...], "label": i}, ...], ...],
                "class_weights": [...]}      -> {"loss": mean batch loss}
  predict      {"inputs": [[segment, ...], ...]} -> {"probabilities": [[...], ...]}
  snapshot     {"path": dir, "epoch": n}     save model and tokenizer
  restore      {"path": dir}                 load a saved snapshot
  shutdown

Replies are {"ok": true, ...} or {"ok": false, "error": "..."}. Inputs with
two segments are encoded as a sentence pair; one segment as a single text.

Usage: python scripts/hf_encoder_worker.py --model microsoft/deberta-v3-base
"""

import argparse
import json
import random
import sys


class Worker:
    def __init__(self, model_name, device):
        import torch

        self.torch = torch
        self.model_name = model_name
        self.device = torch.device(device or ("cuda" if torch.cuda.is_available() else "cpu"))
        self.model = None
        self.tokenizer = None
        self.optimizer = None
        self.scheduler = None
        self.settings = None

    def _encode(self, inputs):
        firsts = [s[0] for s in inputs]
        seconds = [s[1] if len(s) > 1 else None for s in inputs]
        pair = all(s is not None for s in seconds)
        enc = self.tokenizer(
            firsts,
            seconds if pair else None,
            truncation="longest_first" if pair else True,
            max_length=self.settings["max_input_length"],
            padding=True,
            return_tensors="pt",
        )
        return {k: v.to(self.device) for k, v in enc.items()}

    def initialize(self, req):
        from transformers import (
            AutoModelForSequenceClassification,
            AutoTokenizer,
            get_linear_schedule_with_warmup,
        )

        s = req["settings"]
        self.settings = s
        random.seed(s["seed"])
        self.torch.manual_seed(s["seed"])
        self.tokenizer = AutoTokenizer.from_pretrained(self.model_name)
        if s["added_special_tokens"]:
            self.tokenizer.add_special_tokens({"additional_special_tokens": s["added_special_tokens"]})
        self.model = AutoModelForSequenceClassification.from_pretrained(
            self.model_name,
            num_labels=s["num_labels"],
            hidden_dropout_prob=s["dropout"],
        )
        self.model.resize_token_embeddings(len(self.tokenizer))
        self.model.to(self.device)
        self.optimizer = self.torch.optim.AdamW(
            self.model.parameters(), lr=s["learning_rate"], weight_decay=s["weight_decay"]
        )
        total = max(1, s["total_steps"])
        self.scheduler = get_linear_schedule_with_warmup(
            self.optimizer, int(total * s["warmup_ratio"]), total
        )
        return {}

    def train_epoch(self, req):
        torch = self.torch
        weights = torch.tensor(req["class_weights"], dtype=torch.float, device=self.device)
        loss_fn = torch.nn.CrossEntropyLoss(weight=weights)
        self.model.train()
        losses = []
        for batch in req["batches"]:
            enc = self._encode([ex["segments"] for ex in batch])
            labels = torch.tensor([ex["label"] for ex in batch], device=self.device)
            logits = self.model(**enc).logits
            loss = loss_fn(logits, labels)
            loss.backward()
            self.optimizer.step()
            self.scheduler.step()
            self.optimizer.zero_grad()
            losses.append(loss.item())
        return {"loss": sum(losses) / max(1, len(losses))}

    def predict(self, req):
        torch = self.torch
        self.model.eval()
        out = []
        inputs = req["inputs"]
        with torch.no_grad():
            for i in range(0, len(inputs), 32):
                enc = self._encode(inputs[i : i + 32])
                probs = torch.softmax(self.model(**enc).logits, dim=-1)
                out.extend(probs.cpu().tolist())
        return {"probabilities": out}

    def snapshot(self, req):
        self.model.save_pretrained(req["path"])
        self.tokenizer.save_pretrained(req["path"])
        return {}

    def restore(self, req):
        from transformers import AutoModelForSequenceClassification

        self.model = AutoModelForSequenceClassification.from_pretrained(req["path"]).to(self.device)
        return {}


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--model", default="microsoft/deberta-v3-base")
    parser.add_argument("--device", default=None)
    args = parser.parse_args()

    worker = Worker(args.model, args.device)
    for line in sys.stdin:
        if not line.strip():
            continue
        try:
            req = json.loads(line)
            cmd = req.get("cmd")
            if cmd == "shutdown":
                break
            handler = getattr(worker, cmd, None) if cmd in {
                "initialize", "train_epoch", "predict", "snapshot", "restore"
            } else None
            if handler is None:
                reply = {"ok": False, "error": f"unknown command {cmd!r}"}
            else:
                reply = {"ok": True, **handler(req)}
        except Exception as exc:
            reply = {"ok": False, "error": f"{type(exc).__name__}: {exc}"}
        sys.stdout.write(json.dumps(reply) + "\n")
        sys.stdout.flush()
    return 0


if __name__ == "__main__":
    sys.exit(main())
