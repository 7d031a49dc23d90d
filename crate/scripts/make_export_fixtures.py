"""Build the small exported-model fixtures used by the adapter tests.

Each export is a tiny BPE tokenizer plus an ONNX graph computing
mean(embedding[ids]) @ W + b. Reference scores come from numpy in float64.

    python3 scripts/make_export_fixtures.py crates/core/tests/fixtures/exports
"""

import json
import os
import sys

import numpy as np
import onnx
from onnx import TensorProto, helper, numpy_helper
from tokenizers import Tokenizer, models, pre_tokenizers, processors, trainers

CATEGORIES = [
    "Architecture", "Build", "Code", "Defect", "Design", "Documentation", "Infrastructure",
    "People", "Process", "Requirement", "Service", "Test", "Automation",
]

WORDS = (
    "refactor the legacy module cleanup hack workaround temporary fix later todo debt "
    "build pipeline flaky test coverage missing docs outdated design smell duplicated code "
    "service timeout infrastructure config deploy release process requirement unclear people "
    "onboarding architecture layering automation script broken defect crash memory leak parser"
).split()

SPECIALS = ["<unk>", "<s>", "</s>", "<pad>"]
DIM = 8


def corpus(rng, n):
    return [" ".join(rng.choice(WORDS, size=rng.integers(3, 25))) for _ in range(n)]


def build_tokenizer(rng):
    tok = Tokenizer(models.BPE(unk_token="<unk>"))
    tok.pre_tokenizer = pre_tokenizers.Whitespace()
    trainer = trainers.BpeTrainer(vocab_size=160, special_tokens=SPECIALS, show_progress=False)
    tok.train_from_iterator(corpus(rng, 400), trainer=trainer)
    tok.post_processor = processors.TemplateProcessing(
        single="<s> $A </s>", special_tokens=[("<s>", 1), ("</s>", 2)]
    )
    return tok


def parity_texts(rng):
    texts = corpus(rng, 58)
    texts += [
        "zzz qqq unseen words everywhere",
        "debt",
        "Refactor: the Legacy module, again!",
        " ".join(["debt"] * 700),
        " ".join(rng.choice(WORDS, size=900)),
        "émoji-free ünïcode text",
    ]
    return texts


def graph(vocab, width, with_mask, seed):
    rng = np.random.default_rng(seed)
    emb = rng.normal(0.0, 1.0, size=(vocab, DIM)).astype(np.float32)
    w = rng.normal(0.0, 0.7, size=(DIM, width)).astype(np.float32)
    b = rng.normal(0.0, 0.1, size=(width,)).astype(np.float32)

    inits = [
        numpy_helper.from_array(emb, "embedding"),
        numpy_helper.from_array(w, "head_w"),
        numpy_helper.from_array(b, "head_b"),
    ]
    inputs = [helper.make_tensor_value_info("input_ids", TensorProto.INT64, [1, "L"])]
    nodes = [helper.make_node("Gather", ["embedding", "input_ids"], ["tok"], axis=0)]
    if with_mask:
        inputs.append(helper.make_tensor_value_info("attention_mask", TensorProto.INT64, [1, "L"]))
        inits.append(numpy_helper.from_array(np.array([2], dtype=np.int64), "axis2"))
        inits.append(numpy_helper.from_array(np.array([1], dtype=np.int64), "axis1"))
        nodes += [
            helper.make_node("Cast", ["attention_mask"], ["maskf"], to=TensorProto.FLOAT),
            helper.make_node("Unsqueeze", ["maskf", "axis2"], ["mask3"]),
            helper.make_node("Mul", ["tok", "mask3"], ["masked"]),
            helper.make_node("ReduceSum", ["masked", "axis1"], ["summed"], keepdims=0),
            helper.make_node("ReduceSum", ["mask3", "axis1"], ["count"], keepdims=0),
            helper.make_node("Div", ["summed", "count"], ["pooled"]),
        ]
    else:
        nodes.append(helper.make_node("ReduceMean", ["tok"], ["pooled"], axes=[1], keepdims=0))
    nodes += [
        helper.make_node("MatMul", ["pooled", "head_w"], ["proj"]),
        helper.make_node("Add", ["proj", "head_b"], ["logits"]),
    ]
    out = helper.make_tensor_value_info("logits", TensorProto.FLOAT, [1, width])
    g = helper.make_graph(nodes, "tiny_classifier", inputs, [out], initializer=inits)
    model = helper.make_model(g, opset_imports=[helper.make_opsetid("", 13)], producer_name="fixture")
    onnx.checker.check_model(model)
    return model, emb.astype(np.float64), w.astype(np.float64), b.astype(np.float64)


def reference(ids, emb, w, b):
    z = emb[np.array(ids)].mean(axis=0) @ w + b
    if z.shape[0] == 1:
        return [float(1.0 / (1.0 + np.exp(-z[0])))]
    e = np.exp(z - z.max())
    return [float(v) for v in e / e.sum()]


def write_export(out, name, tok, width, with_mask, seed, card):
    path = os.path.join(out, name)
    os.makedirs(path, exist_ok=True)
    model, emb, w, b = graph(tok.get_vocab_size(), width, with_mask, seed)
    onnx.save(model, os.path.join(path, "model.onnx"))
    tok.no_truncation()
    tok.save(os.path.join(path, "tokenizer.json"))

    tok.enable_truncation(max_length=512)
    rng = np.random.default_rng(seed + 1)
    with open(os.path.join(path, "parity.jsonl"), "w") as f:
        for text in parity_texts(rng):
            scores = reference(tok.encode(text).ids, emb, w, b)
            key = {"score": scores[0]} if width == 1 else {"scores": scores}
            f.write(json.dumps({"text": text, **key}) + "\n")
    tok.no_truncation()
    with open(os.path.join(path, "card.json"), "w") as f:
        json.dump(card, f, indent=2)
        f.write("\n")


def main():
    out = sys.argv[1] if len(sys.argv) > 1 else "crates/core/tests/fixtures/exports"
    rng = np.random.default_rng(7)
    tok = build_tokenizer(rng)
    stamp = "2026-01-01T00:00:00Z"
    write_export(out, "td", tok, 1, True, 11, {
        "task": "td", "category": None, "labels": ["false", "true"], "exported_at": stamp,
        "base_model": "tiny-fixture", "max_length": 512,
    })
    write_export(out, "multiclass", tok, 13, False, 12, {
        "task": "multiclass", "category": None, "labels": CATEGORIES, "exported_at": stamp,
        "base_model": "tiny-fixture", "max_length": 512,
    })
    write_export(out, "bad_head", tok, 3, False, 13, {
        "task": "multiclass", "category": None, "labels": ["a", "b", "c"], "exported_at": stamp,
    })


if __name__ == "__main__":
    main()
