"""Acceptance suite: one test per criterion, summarized as PASS/FAIL lines at the end of the run."""

import hashlib
import json
import math
import struct
import time
from pathlib import Path

import numpy as np
import pytest

from selfq import autodiff as ad
from selfq import gradcheck
from selfq.autodiff import Graph, Tensor
from selfq.checkpoint import load_checkpoint, save_checkpoint
from selfq.cli import main as cli_main
from selfq.data import (Conversation, SqPolicy, assign_turn_kinds, conversation_to_json, parse_conversation,
                        render, render_caption, write_records)
from selfq.images import save_grid
from selfq.language import Vocab
from selfq.lora import merge, unmerge
from selfq.model import AdapterSettings, ModelConfig, VisionLanguageModel, param_group
from selfq.sampler import answer, self_question
from selfq.synthetic import make_corpus
from selfq.trainer import Example, Trainer, TrainPlan
from selfq.vision import ImageTokens, PrototypeBank, VisionConfig, em_cluster, enhance_tokens

from conftest import small_model

GOLDEN = Path(__file__).parent / "golden"


# ---------------------------------------------------------------------------
# 1. gradient suite


def test_c1_gradient_suite(record_property):
    t0 = time.perf_counter()
    results = gradcheck.run_suite(seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(results, key=lambda r: r.max_error)
    record_property("detail", f"{len(results)} ops, worst {worst.op} {worst.max_error:.2e}, {elapsed:.2f}s")
    assert all(r.checks >= 5 for r in results)
    assert all(r.max_error < 1e-4 for r in results), [(r.op, r.max_error) for r in results if not r.ok]
    assert elapsed < 60.0


# ---------------------------------------------------------------------------
# 2. prototype extractor against a scalar oracle


def _lin(W, b, x):
    return [sum(x[i] * W[j][i] for i in range(len(x))) + b[j] for j in range(len(W))]


def _ln(x, g, b, eps=1e-8):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(v - mu) / math.sqrt(var + eps) * g[i] + b[i] for i, v in enumerate(x)]


def _params(linear):
    return linear.weight.data.tolist(), linear.bias.data.tolist()


def _oracle(bank, Z, T):
    K, L = len(bank.C.data), len(Z)
    kq = [_ln(_lin(*_params(bank.k_proj), z), bank.k_norm.gamma.data, bank.k_norm.beta.data) for z in Z]
    vq = [_ln(_lin(*_params(bank.v_proj), z), bank.v_norm.gamma.data, bank.v_norm.beta.data) for z in Z]
    C = bank.C.data.tolist()
    for _ in range(T):
        qc = [_lin(*_params(bank.q_proj), c) for c in C]
        M = []
        for j in range(K):
            logits = [sum(qc[j][e] * kq[i][e] for e in range(len(qc[j]))) for i in range(L)]
            top = max(logits)
            ex = [math.exp(s - top) for s in logits]
            M.append([e / sum(ex) for e in ex])
        C = [[sum(M[j][i] * vq[i][e] for i in range(L)) for e in range(len(vq[0]))] for j in range(K)]
    out = []
    for z in Z:
        mix = [0.0] * len(z)
        for c in C:
            cos = sum(a * b for a, b in zip(z, c)) / max(math.sqrt(sum(a * a for a in z) * sum(b * b for b in c)),
                                                         1e-8)
            mix = [m + cos * cv / K for m, cv in zip(mix, c)]
        out.append([a + b for a, b in zip(z, _lin(*_params(bank.z_proj), mix))])
    return M, C, out


def test_c2_prototype_oracle(record_property):
    rng = np.random.default_rng(7)
    cfg = VisionConfig(d_vision=4, n_heads=2, K=2, d_model=4)
    bank = PrototypeBank(cfg, rng)
    for lin in (bank.q_proj, bank.k_proj, bank.v_proj, bank.z_proj):
        lin.weight.data = rng.normal(0, 0.7, lin.weight.shape)
        lin.bias.data = rng.normal(0, 0.3, lin.bias.shape)
    for ln in (bank.k_norm, bank.v_norm):
        ln.gamma.data = rng.normal(1, 0.2, 4)
        ln.beta.data = rng.normal(0, 0.2, 4)
    Z = rng.standard_normal((3, 4))
    worst = 0.0
    for T in (1, 2):
        M, C = em_cluster(bank, ImageTokens(Tensor(Z), False), T)
        enh = enhance_tokens(bank, ImageTokens(Tensor(Z), False), C)
        Mo, Co, Eo = _oracle(bank, Z.tolist(), T)
        for got, want in ((M.data, Mo), (C.data, Co), (enh.Z.data, Eo)):
            worst = max(worst, float(np.abs(got - np.array(want)).max()))
        assert np.abs(M.data.sum(axis=1) - 1.0).max() <= 1e-12
    bank.z_proj.weight.data = np.zeros((4, 4))
    bank.z_proj.bias.data = np.zeros(4)
    _, C = em_cluster(bank, ImageTokens(Tensor(Z), False))
    same = np.array_equal(enhance_tokens(bank, ImageTokens(Tensor(Z), False), C).Z.data, Z)
    record_property("detail", f"max |diff| {worst:.1e}; zero z_proj identity {same}")
    assert worst <= 1e-10
    assert same


# ---------------------------------------------------------------------------
# 3. template golden files and turn-kind statistics


def test_c3_template_golden(record_property):
    vocab = Vocab()
    cases = json.loads((GOLDEN / "cases.json").read_text(encoding="utf-8"))
    for case in cases:
        conv = parse_conversation(case["conversation"])
        if case["stage"] == "pretrain":
            seq = render_caption(conv, vocab)
        else:
            kinds = assign_turn_kinds(conv, SqPolicy(case["delta"], case["seed"]))
            assert kinds == case["kinds"], case["name"]
            seq = render(conv, kinds, vocab)
        ids = (GOLDEN / f"{case['name']}.ids").read_text()
        mask = (GOLDEN / f"{case['name']}.mask").read_text()
        assert " ".join(map(str, seq.token_ids)) + "\n" == ids, case["name"]
        assert "".join("1" if m else "0" for m in seq.loss_mask) + "\n" == mask, case["name"]
    assert len([c for c in cases if c["stage"] == "finetune"]) >= 6
    assert {c["delta"] for c in cases} >= {0.0, 0.5, 1.0}

    # 1001 conversations x 10 drawn turns = 10,010 turns after the first
    policy = SqPolicy(0.5, 7)
    drawn = vusr = 0
    for i in range(1001):
        conv = Conversation(f"syn-{i}", "x.npy", [("q", "a")] * 11)
        kinds = assign_turn_kinds(conv, policy)
        assert kinds[0] == "usr"
        drawn += 10
        vusr += kinds.count("vusr")
    frac = vusr / drawn
    record_property("detail", f"{len(cases)} golden files byte-exact; vusr fraction {frac:.4f} over {drawn} turns")
    assert 0.48 <= frac <= 0.52


# ---------------------------------------------------------------------------
# 4. LoRA algebra and trainable-set audit


def test_c4_lora_algebra(record_property):
    rng = np.random.default_rng(3)
    vocab = Vocab()
    base = small_model(seed=5, adapters=False)
    adapted = small_model(seed=5, adapters=False)
    adapted.attach_adapters(9)
    ids = [vocab.bos] + list(rng.integers(0, 256, 12)) + [vocab.image] + list(rng.integers(0, 256, 6))
    px = rng.uniform(0, 1, (32, 32, 3))
    fresh_same = np.array_equal(base.logits(ids, base.image_features(px)).data,
                                adapted.logits(ids, adapted.image_features(px)).data)

    for aset in adapted.adapter_sets:
        for a in aset.adapters.values():
            a.B.data = rng.normal(0, 0.05, a.B.shape)
    inputs = [([vocab.bos] + list(rng.integers(0, 256, int(rng.integers(1, 30)))) + [vocab.image]
               + list(rng.integers(0, 256, int(rng.integers(0, 20)))), rng.uniform(0, 1, (32, 32, 3)))
              for _ in range(20)]
    before = [adapted.logits(i, adapted.image_features(p)).data for i, p in inputs]
    for aset in adapted.adapter_sets:
        merge(aset)
    worst = max(float(np.abs(adapted.logits(i, adapted.image_features(p)).data - b).max())
                for (i, p), b in zip(inputs, before))
    for aset in adapted.adapter_sets:
        unmerge(aset)

    # expected trainable names, built from the configuration alone
    cfg = adapted.config
    expected = set()
    for tower, n in (("vision", cfg.vision.n_layers), ("lm", cfg.lm.n_layers)):
        for i in range(n):
            for s in ("attn.q", "attn.k", "attn.v", "attn.o", "mlp.fc1", "mlp.fc2"):
                expected |= {f"{tower}.blocks.{i}.{s}.lora_A", f"{tower}.blocks.{i}.{s}.lora_B"}
    expected |= {"lm.head.lora_A", "lm.head.lora_B"}
    names = [n for n, _ in adapted.named_parameters()]
    expected |= {n for n in names if n.startswith(("proto.", "projector."))}
    train, frozen = TrainPlan.finetune().partition(adapted)
    record_property("detail", f"fresh identical {fresh_same}; merged max diff {worst:.1e}; "
                              f"{len(train)} trainable / {len(frozen)} frozen")
    assert fresh_same
    assert worst <= 1e-10
    assert set(train) == expected
    assert not any(n.startswith(("vision.", "lm.")) and "lora" not in n for n in train)


# ---------------------------------------------------------------------------
# 5. freeze audit


def test_c5_freeze_audit(record_property):
    model = small_model(seed=2, adapters=False)
    convs, imgs = make_corpus(4, seed=2)
    data = [Example(render_caption(c, model.vocab), imgs[c.id]) for c in convs]
    init = {n: p.data.copy() for n, p in model.named_parameters()}
    tr = Trainer(model, TrainPlan.pretrain(batch_size=2, epochs=5))
    tr.train(data)
    assert tr.step_count == 10
    changed, frozen_ok = [], True
    for n, p in model.named_parameters():
        if n.startswith(("vision.", "lm.")):
            frozen_ok &= np.array_equal(p.data, init[n])
        else:
            changed.append(not np.array_equal(p.data, init[n]))
    tower_params = [n for n in init if n.startswith(("proto.", "projector."))]
    moved = sum(changed)
    record_property("detail", f"towers bit-identical {frozen_ok}; {moved}/{len(changed)} proto/projector tensors moved")
    assert frozen_ok
    assert len(changed) == len(tower_params) and all(changed)


# ---------------------------------------------------------------------------
# 6 + 7. overfit-and-recall, with the loss decomposition audited on every batch


def _roles(ids, vocab):
    """Question / answer learning targets, recomputed from the token stream."""
    q, a = [False] * len(ids), [False] * len(ids)
    state = None
    for i, t in enumerate(ids):
        if t == vocab.vusr:
            state = "q"
            continue
        if t == vocab.aswr:
            state = "a"
            continue
        if t == vocab.usr:
            state = None
            continue
        if state == "q":
            q[i] = True
        elif state == "a":
            a[i] = True
        if t == vocab.delim:
            state = None
    return q, a


def _components(model, ex):
    """Question-term and answer-term NLL over the full (un-gathered) head output, each / union count."""
    vocab = model.vocab
    ids = ex.seq.token_ids
    logits = model.logits(ids, model.image_features(ex.pixels)).data
    p = ids.index(vocab.image)
    L_v = model.n_image_tokens
    q_role, a_role = _roles(ids, vocab)
    q_sum = a_sum = 0.0
    n = 0
    for i in range(1, len(ids)):
        if not (q_role[i] or a_role[i]):
            continue
        row = (i - 1) if i < p else (i - 1 + L_v - 1)
        z = logits[row]
        top = z.max()
        nll = -(z[ids[i]] - top - math.log(np.exp(z - top).sum()))
        n += 1
        if q_role[i]:
            q_sum += nll
        else:
            a_sum += nll
    return q_sum / n, a_sum / n


class AuditedTrainer(Trainer):
    def __init__(self, *a, **kw):
        super().__init__(*a, **kw)
        self.decomp_err = 0.0

    def step(self, batch, total_steps=None):
        q = a = 0.0
        for ex in batch:
            qi, ai = _components(self.model, ex)
            q += qi / len(batch)
            a += ai / len(batch)
        rep = super().step(batch, total_steps)
        self.decomp_err = max(self.decomp_err, abs(rep.loss_total - (q + a)),
                              abs(rep.loss_q - q), abs(rep.loss_a - a))
        return rep


@pytest.fixture(scope="module")
def overfit():
    cfg = ModelConfig(adapters=AdapterSettings(llm_rank=16, llm_alpha=32.0, vit_rank=8, vit_alpha=16.0))
    model = VisionLanguageModel(cfg)
    model.attach_adapters(1)
    convs, imgs = make_corpus(8, turns=2)
    kinds = ["usr", "vusr"]
    data = [Example(render(c, kinds, model.vocab), imgs[c.id]) for c in convs]
    plan = TrainPlan.finetune(batch_size=8, epochs=2000, max_steps=2000, target_loss=0.01,
                              lr_groups={"adapters": 3e-3, "proto": 1e-3, "projector": 1e-3})
    tr = AuditedTrainer(model, plan)
    first_below = []
    t0 = time.perf_counter()
    reports = tr.train(data, on_step=lambda r: first_below.append((r.step, time.perf_counter() - t0))
                       if r.loss_total < 0.05 and not first_below else None)
    return dict(model=model, convs=convs, imgs=imgs, kinds=kinds, reports=reports, trainer=tr,
                first_below=first_below[0] if first_below else None)


def test_c6_overfit_and_recall(overfit, record_property):
    model, convs, imgs = overfit["model"], overfit["convs"], overfit["imgs"]
    hit = overfit["first_below"]
    ans_ok = q_ok = free_ok = free_n = 0
    n_answers = 0
    for c in convs:
        px, history = imgs[c.id], []
        asked = False
        for (q, a), k in zip(c.turns, overfit["kinds"]):
            n_answers += 1
            ans_ok += answer(model, px, q, history=history) == a
            if k == "vusr" and self_question(model, px, history=history) == q:
                asked = True
            free_n += 1
            free_ok += answer(model, px, q) == a
            history.append((k, q, a))
        q_ok += asked
    step, secs = hit if hit else (None, None)
    record_property("detail", f"loss<0.05 at step {step} ({secs and round(secs)}s); answers {ans_ok}/{n_answers}; "
                              f"self-questions {q_ok}/{len(convs)} images; "
                              f"history-free answers {free_ok}/{free_n}")
    assert hit is not None and step <= 2000 and secs < 600
    assert ans_ok == n_answers
    assert q_ok == len(convs)


def test_c7_loss_decomposition(overfit, record_property):
    tr = overfit["trainer"]
    record_property("detail", f"max |union - (question + answer)| {tr.decomp_err:.1e} over {tr.step_count} batches")
    assert tr.step_count > 0
    assert tr.decomp_err <= 1e-12


# ---------------------------------------------------------------------------
# 8. determinism via the command line


def _workspace(root: Path, max_steps=None) -> Path:
    root.mkdir(parents=True, exist_ok=True)
    (root / "images").mkdir(exist_ok=True)
    convs, imgs = make_corpus(4, seed=11, turns=3)
    (root / "convs.json").write_text(json.dumps([conversation_to_json(c) for c in convs]))
    for k, v in imgs.items():
        save_grid(root / "images" / f"{k}.npy", v)
    extra = "" if max_steps is None else f"max_steps = {max_steps}\n"
    (root / "run.toml").write_text(f"""seed = 5
[model.adapters]
llm_rank = 4
llm_alpha = 8.0
vit_rank = 2
vit_alpha = 4.0
[data]
conversations = "convs.json"
image_dir = "images"
records = "out/ft.rec"
pretrain_records = "out/pt.rec"
delta = 0.5
[train.pretrain]
batch_size = 2
epochs = 2
[train.finetune]
batch_size = 2
epochs = 2
{extra}[io]
checkpoint_dir = "ck"
metrics = "out/metrics.jsonl"
""")
    return root / "run.toml"


def _run(cfg: Path, *stages, resume=False):
    assert cli_main(["data", "prepare", "--config", str(cfg)]) == 0
    for s in stages:
        assert cli_main([s, "--config", str(cfg)] + (["--resume"] if resume else [])) == 0


def test_c8_determinism(tmp_path, record_property):
    a = _workspace(tmp_path / "a")
    b = _workspace(tmp_path / "b")
    _run(a, "pretrain", "finetune")
    _run(b, "pretrain", "finetune")
    files = ["ck/pretrain.ckpt", "ck/finetune.ckpt", "out/metrics.jsonl", "out/ft.rec", "out/pt.rec"]
    same = {f: (a.parent / f).read_bytes() == (b.parent / f).read_bytes() for f in files}

    # interrupted run: finetune stops after 2 steps, then resumes without the cap
    c = _workspace(tmp_path / "c", max_steps=2)
    _run(c, "pretrain", "finetune")
    assert load_checkpoint(c.parent / "ck/finetune.ckpt").step == 2
    _workspace(tmp_path / "c")
    assert cli_main(["finetune", "--config", str(c), "--resume"]) == 0
    resumed = {f: (a.parent / f).read_bytes() == (c.parent / f).read_bytes()
               for f in ("ck/finetune.ckpt", "out/metrics.jsonl")}
    # and the file itself survives a load/save cycle unchanged
    ck = load_checkpoint(a.parent / "ck/finetune.ckpt")
    save_checkpoint(tmp_path / "again.ckpt", ck.model, ck.trainer())
    cycle = (tmp_path / "again.ckpt").read_bytes() == (a.parent / "ck/finetune.ckpt").read_bytes()
    record_property("detail", f"repeat runs identical {all(same.values())}; resume identical "
                              f"{all(resumed.values())}; save/load/save identical {cycle}")
    assert all(same.values()), same
    assert all(resumed.values()), resumed
    assert cycle


# ---------------------------------------------------------------------------
# 9. gradient reaches the deepest vision block


def test_c9_end_to_end_gradient(record_property):
    model = small_model(seed=4)
    convs, imgs = make_corpus(2, seed=4)
    ex = Example(render(convs[0], ["usr", "vusr"], model.vocab), imgs[convs[0].id])
    tr = Trainer(model, TrainPlan.finetune(batch_size=1, lr_groups={"adapters": 1e-2, "proto": 1e-3,
                                                                     "projector": 1e-3}))
    deepest = model.config.vision.n_layers - 1
    names = [n for n in tr.trainable if n.startswith(f"vision.blocks.{deepest}.") and "lora" in n]

    def grads():
        for p in tr.trainable.values():
            p.grad = None
        loss, g, _, _ = tr.sample_loss(ex)
        g.backward(loss)
        return {n: tr.trainable[n].grad for n in names}

    g0 = grads()
    tr.step([ex])
    g1 = grads()
    b_ok = all(np.all(np.isfinite(g0[n])) and np.abs(g0[n]).max() > 0 for n in names if n.endswith("lora_B"))
    all_ok = all(np.all(np.isfinite(g1[n])) and np.abs(g1[n]).max() > 0 for n in names)
    record_property("detail", f"{len(names)} adapter tensors in vision block {deepest}; B grads nonzero at init "
                              f"{b_ok}; all nonzero after one step {all_ok}")
    assert len(names) == 12
    assert b_ok and all_ok
