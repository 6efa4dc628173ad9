#!/usr/bin/env python3
"""Generate the tiny T5 test checkpoints and their PyTorch reference outputs.

Run from this directory:  python3 make_tiny_t5.py
Writes tiny_t5/ (relu, tied head, scaled decoder outputs) and tiny_t5_gated/
(gated-gelu, separate lm_head stored in the file, unscaled outputs), each with
config.json, model.safetensors, tokenizer.json and reference.json.
References are computed entirely in float64 (the stock layer norm computes its
variance in float32, which is patched out here).
The C++ backend tests compare against reference.json.
"""
import collections
import csv
import json
import math
import os
import re
import inspect
import textwrap

import torch
from tokenizers import Regex, Tokenizer, decoders, normalizers, pre_tokenizers, processors
from tokenizers.models import Unigram
from safetensors.torch import load_file, save_file
from transformers import T5Config, T5ForConditionalGeneration
from transformers.models.t5 import modeling_t5


def _rms_norm_f64(self, hidden_states):
    variance = hidden_states.pow(2).mean(-1, keepdim=True)
    return self.weight * (hidden_states * torch.rsqrt(variance + self.variance_epsilon))


modeling_t5.T5LayerNorm.forward = _rms_norm_f64


def _attention_without_f32_softmax():
    # same forward, minus the cast of attention scores to float32
    src = textwrap.dedent(inspect.getsource(modeling_t5.T5Attention.forward))
    assert "softmax(scores.float()" in src
    src = src.replace("softmax(scores.float()", "softmax(scores")
    scope = dict(vars(modeling_t5))
    exec(src, scope)
    return scope["forward"]


modeling_t5.T5Attention.forward = _attention_without_f32_softmax()

HERE = os.path.dirname(os.path.abspath(__file__))
N_EXTRA = 10


def corpus_words():
    words = collections.Counter()
    for name in ("commits_ternary.csv", "commits_binary.csv"):
        with open(os.path.join(HERE, name), newline="") as f:
            for row in csv.DictReader(f):
                for w in row["message"].split():
                    words[w.strip(".,:;()!?")] += 1
    extra = ("This commit is The sky blue secure insecure safe fix corrective adaptive "
             "perfective bug feature update security vulnerability").split()
    for w in extra:
        words[w] += 3
    return words


def build_vocab():
    words = corpus_words()
    total = sum(words.values())
    pieces = collections.OrderedDict()
    for w, c in sorted(words.items(), key=lambda kv: (-kv[1], kv[0])):
        if w:
            pieces["▁" + w] = math.log(c / total)
    chars = sorted({ch for w in words for ch in w} | set(".,:;()!?-'\"/_0123456789"))
    for ch in chars:
        pieces.setdefault(ch, -12.0)
        pieces.setdefault("▁" + ch, -12.5)
    for sub in ("ing", "ed", "s", "er", "re", "un", "fix", "up", "date"):
        pieces.setdefault(sub, -9.0)
    pieces.setdefault("▁", -4.0)
    vocab = [("<pad>", 0.0), ("</s>", 0.0), ("<unk>", 0.0)]
    vocab += list(pieces.items())
    vocab += [("<extra_id_%d>" % i, 0.0) for i in reversed(range(N_EXTRA))]
    return vocab


def build_tokenizer(vocab):
    tok = Tokenizer(Unigram(vocab, unk_id=2, byte_fallback=False))
    tok.normalizer = normalizers.Sequence([normalizers.Replace(Regex(" {2,}"), " ")])
    tok.pre_tokenizer = pre_tokenizers.Metaspace(replacement="▁", prepend_scheme="always", split=True)
    tok.decoder = decoders.Metaspace(replacement="▁", prepend_scheme="always", split=True)
    specials = ["<pad>", "</s>", "<unk>"] + ["<extra_id_%d>" % i for i in reversed(range(N_EXTRA))]
    tok.add_special_tokens(specials)
    tok.post_processor = processors.TemplateProcessing(
        single="$A </s>", pair="$A </s> $B </s>", special_tokens=[("</s>", 1)])
    return tok


PROMPTS = [
    "Fixed critical bug in user authentication. This commit is <extra_id_0>.",
    "Clean up the man page, remove the reference to scrub mode This commit is <extra_id_0>.",
    "The sky is <extra_id_0>",
    "a <extra_id_0>",
    "Sanitize  user input   to prevent SQL injection This commit is <extra_id_0>.",
]

TOKENIZE_ONLY = [
    "Fixed critical bug in user authentication.",
    "zebra qwxz unknownword!!",
    "  leading and trailing spaces  ",
    "Update_dependencies v2.3.1 (hotfix)",
    "naïve café",
    "<extra_id_1> between <extra_id_0> sentinels",
    "",
]

LM_CASE = {
    "input": "Fixed critical bug in <extra_id_0> authentication.",
    "target": "<extra_id_0> user <extra_id_1>",
}


def make(outdir, ff_proj, tie):
    torch.manual_seed(1234)
    vocab = build_vocab()
    tok = build_tokenizer(vocab)
    cfg = T5Config(
        vocab_size=len(vocab), d_model=32, d_kv=8, d_ff=48, num_layers=2, num_decoder_layers=2,
        num_heads=4, relative_attention_num_buckets=8, relative_attention_max_distance=20,
        dropout_rate=0.0, feed_forward_proj=ff_proj, tie_word_embeddings=tie,
        decoder_start_token_id=0, pad_token_id=0, eos_token_id=1, layer_norm_epsilon=1e-6)
    model = T5ForConditionalGeneration(cfg)
    with torch.no_grad():
        # default init is tiny; widen it so logits are not all ~uniform
        for name, p in model.named_parameters():
            if "layer_norm" in name:
                p.copy_(1.0 + 0.1 * torch.randn_like(p))
            else:
                p.copy_(0.3 * torch.randn_like(p))
        if not tie:
            # a checkpoint with its own output projection (t5 v1.1 layout)
            head = torch.nn.Linear(cfg.d_model, cfg.vocab_size, bias=False)
            head.weight.copy_(0.3 * torch.randn_like(head.weight))
            model.lm_head = head
    os.makedirs(outdir, exist_ok=True)
    model.save_pretrained(outdir, safe_serialization=True)
    if not tie:
        path = os.path.join(outdir, "model.safetensors")
        tensors = load_file(path)
        tensors["lm_head.weight"] = model.lm_head.weight.detach().clone().contiguous()
        save_file(tensors, path, metadata={"format": "pt"})
    tok.save(os.path.join(outdir, "tokenizer.json"))

    model = model.double().eval()
    extra0 = tok.token_to_id("<extra_id_0>")
    assert model.config.scale_decoder_outputs == tie
    assert tie or model.lm_head.weight.data_ptr() != model.shared.weight.data_ptr()
    ref = {"num_parameters": sum(p.numel() for p in model.parameters()),
           "extra_id_0": extra0, "tokenize": [], "mask": []}
    for text in TOKENIZE_ONLY + PROMPTS:
        ref["tokenize"].append({"text": text, "ids": tok.encode(text).ids})
    with torch.no_grad():
        for text in PROMPTS:
            ids = tok.encode(text).ids
            out = model(input_ids=torch.tensor([ids]),
                        decoder_input_ids=torch.tensor([[0, extra0]]),
                        output_hidden_states=True)
            h = out.decoder_hidden_states[-1][0, 1]
            logp = torch.log_softmax(out.logits[0, 1], dim=-1)
            ref["mask"].append({"text": text, "ids": ids, "h": h.tolist(), "logprobs": logp.tolist()})

    enc = tok.encode(LM_CASE["input"]).ids
    tgt = tok.encode(LM_CASE["target"]).ids
    model.zero_grad()
    out = model(input_ids=torch.tensor([enc]), labels=torch.tensor([tgt]))
    out.loss.backward()
    grads = {}
    for name, p in model.named_parameters():
        if any(k in name for k in ("final_layer_norm", "relative_attention_bias", "block.1.layer.2.DenseReluDense.wo",
                                   "block.0.layer.0.SelfAttention.q", "block.1.layer.1.EncDecAttention.v", "shared", "lm_head")):
            grads[name] = p.grad.reshape(-1).tolist()
    ref["lm"] = {"input_ids": enc, "labels": tgt, "loss": out.loss.item(), "grads": grads}
    with open(os.path.join(outdir, "reference.json"), "w") as f:
        json.dump(ref, f)


if __name__ == "__main__":
    make(os.path.join(HERE, "tiny_t5"), "relu", True)
    make(os.path.join(HERE, "tiny_t5_gated"), "gated-gelu", False)
