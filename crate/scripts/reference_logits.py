#!/usr/bin/env python3
"""Produce golden logits for a GPT-2 checkpoint with the Hugging Face reference.

Usage:
  reference_logits.py --model DIR --out goldens.json [--prompts prompts.txt]
  reference_logits.py --make-tiny DIR [--dtype f16]

The golden file is {"cases": [{"text", "ids", "logits"}]}, with logits for
every position as a [positions][vocab] list ("text" only for prompt cases).
"""
import argparse
import json
import os

import torch
from transformers import GPT2Config, GPT2LMHeadModel, GPT2TokenizerFast

DEFAULT_PROMPTS = [
    "The capital of France is",
    "In 1492, Columbus sailed",
    "My favorite breakfast is coffee and",
    "Water boils at a temperature of",
    "The quick brown fox jumps over the",
]


def make_tiny(out_dir, dtype):
    torch.manual_seed(1234)
    cfg = GPT2Config(n_layer=2, n_embd=32, n_head=4, n_inner=96, vocab_size=64,
                     n_positions=32, activation_function="gelu_new",
                     initializer_range=0.2)
    model = GPT2LMHeadModel(cfg).eval()
    with torch.no_grad():
        for name, p in model.named_parameters():
            # non-trivial LN and biases so the parity check covers them
            if name.endswith("bias") or ".ln_" in name:
                p.add_(0.1 * torch.randn_like(p))
    if dtype == "f16":
        model = model.half().float()
        save = model.half()
    else:
        save = model
    os.makedirs(out_dir, exist_ok=True)
    save.save_pretrained(out_dir, safe_serialization=True)
    model = model.float()
    rng = torch.Generator().manual_seed(7)
    cases = []
    for n in (1, 5, 17, 32):
        ids = torch.randint(0, 64, (n,), generator=rng)
        with torch.no_grad():
            logits = model(ids[None]).logits[0]
        cases.append({"ids": ids.tolist(), "logits": logits.tolist()})
    with open(os.path.join(out_dir, "goldens.json"), "w") as f:
        json.dump({"cases": cases}, f)


def goldens(model_dir, out, prompts):
    tok = GPT2TokenizerFast.from_pretrained(model_dir)
    model = GPT2LMHeadModel.from_pretrained(model_dir, torch_dtype=torch.float32).eval()
    cases = []
    for text in prompts:
        ids = tok(text)["input_ids"]
        with torch.no_grad():
            logits = model(torch.tensor([ids])).logits[0]
        cases.append({"text": text, "ids": ids, "logits": logits.tolist()})
    with open(out, "w") as f:
        json.dump({"cases": cases}, f)


if __name__ == "__main__":
    ap = argparse.ArgumentParser()
    ap.add_argument("--model")
    ap.add_argument("--out")
    ap.add_argument("--prompts")
    ap.add_argument("--make-tiny")
    ap.add_argument("--dtype", default="f32")
    a = ap.parse_args()
    if a.make_tiny:
        make_tiny(a.make_tiny, a.dtype)
    else:
        prompts = DEFAULT_PROMPTS
        if a.prompts:
            prompts = [l.rstrip("\n") for l in open(a.prompts) if l.strip()]
        goldens(a.model, a.out, prompts)
