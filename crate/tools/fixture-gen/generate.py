#!/usr/bin/env python3
"""Generate the committed test fixtures for the lora-compose crates.

Builds a tiny GPT-2-layout base model, trains LoRA adapters (r=4, alpha=64,
targets c_attn/c_proj) with PEFT on three small synthetic Q&A domains plus a
merged math+medicine corpus, and exports reference logits and mean NLL values
computed with the `transformers` implementation.

Usage: python3 generate.py --out <dir> --seed <int>
"""

import argparse
import hashlib
import json
import random
from pathlib import Path

import torch
from peft import LoraConfig, get_peft_model
from safetensors.torch import save_file
from transformers import GPT2Config, GPT2LMHeadModel

DIMS = dict(d_model=32, n_layer=2, n_head=4, vocab_size=256, n_positions=64)
RANK = 4
ALPHA = 64
MAX_LEN = 64
TRAIN_STEPS = 150
LR = 2e-3
BATCH = 16


def math_items(rng, k):
    out = []
    for _ in range(k):
        a, b = rng.randint(2, 99), rng.randint(2, 99)
        op = rng.choice(["plus", "minus", "times"])
        val = a + b if op == "plus" else a - b if op == "minus" else a * b
        out.append(f"Q: What is {a} {op} {b}? A: {val}.")
    return out


def medicine_items(rng, k):
    conds = {
        "flu": "fever, cough and fatigue",
        "asthma": "wheezing and short breath",
        "anemia": "pale skin and weakness",
        "migraine": "throbbing head pain",
        "diabetes": "thirst and frequent urination",
        "gout": "painful swollen joints",
    }
    qs = ["What are the symptoms of {c}?", "How does {c} present?", "Signs of {c}?"]
    out = []
    for _ in range(k):
        c = rng.choice(sorted(conds))
        out.append(f"Q: {rng.choice(qs).format(c=c)} A: {conds[c].capitalize()}.")
    return out


def finance_items(rng, k):
    out = []
    for _ in range(k):
        p = rng.choice([100, 200, 500, 1000, 2000])
        r = rng.randint(1, 9)
        y = rng.randint(1, 5)
        kind = rng.choice(["interest", "stock", "bond"])
        if kind == "interest":
            out.append(f"Q: Simple interest on ${p} at {r}% for {y} years? A: ${p * r * y // 100}.")
        elif kind == "stock":
            out.append(f"Q: A stock bought at ${p} rises {r}%. Value? A: ${p + p * r // 100}.")
        else:
            out.append(f"Q: A ${p} bond pays {r}% yearly. Coupon? A: ${p * r // 100}.")
    return out


def encode(text):
    return list(text.encode("utf-8"))[:MAX_LEN]


def dataset_json(seqs):
    return {"max_seq_len": MAX_LEN, "vocab_bound": DIMS["vocab_size"], "sequences": seqs}


def make_base(seed):
    torch.manual_seed(seed)
    cfg = GPT2Config(
        vocab_size=DIMS["vocab_size"],
        n_positions=DIMS["n_positions"],
        n_embd=DIMS["d_model"],
        n_layer=DIMS["n_layer"],
        n_head=DIMS["n_head"],
        activation_function="gelu",
        resid_pdrop=0.0,
        embd_pdrop=0.0,
        attn_pdrop=0.0,
        initializer_range=0.1,
        layer_norm_epsilon=1e-5,
        tie_word_embeddings=True,
    )
    model = GPT2LMHeadModel(cfg)
    # perturb norms/biases so every tensor carries signal
    with torch.no_grad():
        for name, p in model.named_parameters():
            if "ln_" in name or name.endswith("bias"):
                p.add_(0.05 * torch.randn_like(p))
    return model.double().eval()


def base_tensors(model):
    sd = model.state_dict()
    out = {}
    for k, v in sd.items():
        if k.startswith("lm_head") or k.endswith(".attn.bias") or k.endswith(".attn.masked_bias"):
            continue
        out[k] = v.detach().to(torch.float32).contiguous()
    return out


def mean_nll(model, seqs):
    total, count = 0.0, 0
    with torch.no_grad():
        for s in seqs:
            ids = torch.tensor([s])
            logits = model(ids).logits[0].double()
            logp = torch.log_softmax(logits, dim=-1)
            tgt = ids[0, 1:]
            total += float(-logp[:-1].gather(1, tgt[:, None]).sum())
            count += len(s) - 1
    return total / count, count


def train_adapter(base, seqs, seed):
    torch.manual_seed(seed)
    model = GPT2LMHeadModel(base.config)
    model.load_state_dict(base.state_dict())
    model = model.float()
    cfg = LoraConfig(
        r=RANK,
        lora_alpha=ALPHA,
        target_modules=["c_attn", "c_proj"],
        lora_dropout=0.0,
        fan_in_fan_out=True,
        bias="none",
    )
    peft_model = get_peft_model(model, cfg)
    opt = torch.optim.AdamW([p for p in peft_model.parameters() if p.requires_grad], lr=LR)
    rng = random.Random(seed)
    peft_model.train()
    for _ in range(TRAIN_STEPS):
        batch = [rng.choice(seqs) for _ in range(BATCH)]
        loss = 0.0
        for s in batch:
            ids = torch.tensor([s])
            loss = loss + peft_model(ids, labels=ids).loss
        loss = loss / BATCH
        opt.zero_grad()
        loss.backward()
        opt.step()
        if not torch.isfinite(loss):
            raise SystemExit(f"training diverged (seed {seed})")
    peft_model.eval()
    tensors = {}
    for name, p in peft_model.named_parameters():
        if "lora_" in name:
            # exported naming: base_model.model.<module>.lora_X.weight (no adapter infix)
            tensors[name.replace(".default", "")] = p.detach().to(torch.float32).contiguous()
    merged = peft_model.merge_and_unload().double().eval()
    return tensors, merged


def digest(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--out", required=True)
    ap.add_argument("--seed", type=int, default=7)
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed
    meta = {
        "d_model": str(DIMS["d_model"]),
        "n_layer": str(DIMS["n_layer"]),
        "n_head": str(DIMS["n_head"]),
        "vocab_size": str(DIMS["vocab_size"]),
        "n_positions": str(DIMS["n_positions"]),
        "layer_norm_epsilon": "1e-05",
    }

    base = make_base(seed)
    save_file(base_tensors(base), str(out / "base.safetensors"), metadata=meta)
    # reference numbers use the f32-rounded weights actually written to disk
    base.load_state_dict({k: v.double() for k, v in base_tensors(base).items()}, strict=False)

    rng = random.Random(seed)
    probe = [rng.randrange(DIMS["vocab_size"]) for _ in range(16)]
    with torch.no_grad():
        probe_logits = base(torch.tensor([probe])).logits[0]
    (out / "probe.json").write_text(
        json.dumps({"tokens": probe, "logits": [[float(x) for x in row] for row in probe_logits]})
    )

    gens = {"math": math_items, "medicine": medicine_items, "finance": finance_items}
    train, test = {}, {}
    for i, (name, gen) in enumerate(gens.items()):
        r = random.Random(seed * 100 + i)
        train[name] = [encode(t) for t in gen(r, 300)]
        test[name] = [encode(t) for t in gen(r, 40)]
    train["math_medicine"] = train["math"] + train["medicine"]
    test["math_medicine"] = test["math"] + test["medicine"]
    for name, seqs in test.items():
        (out / f"{name}_test.json").write_text(json.dumps(dataset_json(seqs)))

    refs = {}
    for name, seqs in test.items():
        nll, count = mean_nll(base, seqs)
        refs[f"base/{name}_test"] = {"mean_nll": nll, "token_count": count}

    adapters = []
    for i, name in enumerate(["math", "medicine", "finance", "math_medicine"]):
        tensors, merged = train_adapter(base, train[name], seed * 10 + i)
        path = out / f"{name}.safetensors"
        save_file(tensors, str(path), metadata={"format": "pt"})
        (out / f"{name}.json").write_text(
            json.dumps({"r": RANK, "lora_alpha": ALPHA, "target_modules": ["c_attn", "c_proj"]})
        )
        adapters.append({"name": name, "file": path.name, "r": RANK, "lora_alpha": ALPHA})
        nll, count = mean_nll(merged, test[name])
        refs[f"{name}/{name}_test"] = {"mean_nll": nll, "token_count": count}

    files = sorted(p.name for p in out.iterdir() if p.name != "manifest.json")
    manifest = {
        "generator_seed": seed,
        "dims": DIMS,
        "activation": "gelu_erf",
        "training": {"steps": TRAIN_STEPS, "lr": LR, "batch": BATCH, "optimizer": "AdamW"},
        "adapters": adapters,
        "reference_mean_nll": refs,
        "digests": {f: digest(out / f) for f in files},
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2))


if __name__ == "__main__":
    main()
