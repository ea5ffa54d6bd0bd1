import numpy as np
import pytest
import torch

from epiforge.adapt import (
    FinetuneConfig,
    LinearHead,
    PMFModel,
    PMTModel,
    attach_head,
    finetune_pmf_proto,
    finetune_pmt,
    lr_search,
    pmf_support_loss,
    pmt_support_loss,
    predict,
    stratified_split,
)
from epiforge.dataset import ImageCache, generate_synthetic
from epiforge.encoder import EncoderConfig, encode, init_encoder, states_equal
from epiforge.episodes import build_test_tasks
from epiforge.fewshot import proto_logits, prototypes
from probes import LinearProbe, correctable_support, fragile_support


@pytest.fixture(scope="module")
def task_data(tmp_path_factory):
    index = generate_synthetic(tmp_path_factory.mktemp("adapt"), 3, 3, 10, seed=4)
    cache = ImageCache(index)
    enc = init_encoder(EncoderConfig(embed_dim=16, depth=1, heads=2), seed=0)
    out = []
    for seed in range(5):
        task = build_test_tasks(index, 10, 1, seed)[0]
        out.append((cache.eval_batch(task.support_entries), np.array(task.support_labels),
                    cache.eval_batch(task.query_entries)))
    return enc, out


def test_finetune_config_invariants():
    for bad in ({"holdout_fraction": 0.0}, {"holdout_fraction": 1.0}, {"lr_candidates": ()}, {"optimizer": "sgd"}):
        with pytest.raises(ValueError):
            FinetuneConfig(**bad)


def test_head_from_orthonormal_support():
    q, _ = np.linalg.qr(np.random.default_rng(0).standard_normal((8, 3)))
    feats = q.T  # three orthonormal rows, one shot each
    head = attach_head(8, 3, feats, [0, 1, 2])
    assert tuple(head.weight.shape) == (3, 8) and tuple(head.bias.shape) == (3,)
    assert head.logits(feats).argmax(1).tolist() == [0, 1, 2]


def test_zero_support_features():
    head = attach_head(5, 3, np.zeros((6, 5)), [0, 0, 1, 1, 2, 2])
    assert not head.weight.any() and not head.bias.any()
    logits = head.logits(np.random.default_rng(1).standard_normal((4, 5)))
    assert torch.equal(logits, torch.zeros_like(logits))


def test_attach_head_errors():
    with pytest.raises(ValueError):
        attach_head(4, 2, np.zeros((3, 5)), [0, 1, 1])
    with pytest.raises(ValueError):
        attach_head(4, 3, np.zeros((3, 4)), [0, 1, 1])


def test_equal_norm_prototypes_agree():
    rng = np.random.default_rng(2)
    protos = rng.standard_normal((4, 6))
    protos /= np.linalg.norm(protos, axis=1, keepdims=True)
    head = attach_head(6, 4, protos, [0, 1, 2, 3])
    queries = torch.as_tensor(rng.standard_normal((200, 6)))
    a = head.logits(queries).argmax(1)
    b = proto_logits(prototypes(protos, [0, 1, 2, 3], 4), queries).argmax(1)
    assert torch.equal(a, b)


def test_identity_features_analytic_argmax():
    head = LinearHead(torch.eye(3, dtype=torch.float64), torch.zeros(3, dtype=torch.float64))
    x = np.array([[0.1, 0.9, 0.0], [2.0, -1.0, 1.0], [0.0, 0.0, 5.0]])
    assert head.logits(x).argmax(1).tolist() == [1, 0, 2]


def test_lr_zero_and_zero_steps_identity(task_data):
    enc, tasks = task_data
    xs, ys, _ = tasks[0]
    head = attach_head(16, 3, encode(enc, xs), ys)
    for lr, steps in ((0.0, 5), (1e-3, 0)):
        e2, h2 = finetune_pmt(enc, head, xs, ys, lr, steps)
        assert e2 is enc and h2 is head
        assert finetune_pmf_proto(enc, xs, ys, lr, steps) is enc


def test_caller_state_untouched(task_data):
    enc, tasks = task_data
    xs, ys, _ = tasks[0]
    before = {k: v.clone() for k, v in enc.parameters.items()}
    head = attach_head(16, 3, encode(enc, xs), ys)
    w0 = head.weight.clone()
    finetune_pmt(enc, head, xs, ys, 1e-2, 3)
    PMFModel(enc, 3).fit(xs, ys, 1e-2, 3)
    assert all(torch.equal(enc.parameters[k], before[k]) for k in before)
    assert torch.equal(head.weight, w0) and enc.optimizer_state == {} and enc.step_count == 0


def test_pmf_prototypes_follow_encoder(task_data):
    enc, tasks = task_data
    xs, ys, _ = tasks[1]
    plain = PMFModel(enc, 3).fit(xs, ys, 0.0, 5)
    tuned = PMFModel(enc, 3).fit(xs, ys, 1e-3, 2)
    assert not states_equal(plain.encoder, tuned.encoder)
    assert not torch.equal(plain.prototypes.prototypes, tuned.prototypes.prototypes)


def test_pmt_lr0_matches_prototype_head(task_data):
    enc, tasks = task_data
    xs, ys, xq = tasks[2]
    model = PMTModel(enc, 3).fit(xs, ys, 0.0, 5)
    want = attach_head(16, 3, encode(enc, xs), ys).logits(encode(enc, xq)).argmax(1).numpy()
    assert np.array_equal(predict(model, xq), want)


def test_predict_shape_and_purity(task_data):
    enc, tasks = task_data
    xs, ys, xq = tasks[0]
    for m in (PMTModel(enc, 3), PMFModel(enc, 3)):
        fitted = m.fit(xs, ys, 1e-3, 2)
        out = predict(fitted, np.concatenate([xq, xq[:1]]))
        assert len(out) == len(xq) + 1 and out[0] == out[-1]
        assert np.array_equal(predict(fitted, xq), out[:-1])
        with pytest.raises(RuntimeError):
            m.predict(xq)


def test_support_loss_decreases_median(task_data):
    enc, tasks = task_data
    pmt_delta, pmf_delta = [], []
    for xs, ys, _ in tasks:
        head = attach_head(16, 3, encode(enc, xs), ys)
        e2, h2 = finetune_pmt(enc, head, xs, ys, 1e-3, 10)
        pmt_delta.append(pmt_support_loss(e2, h2, xs, ys) - pmt_support_loss(enc, head, xs, ys))
        e3 = finetune_pmf_proto(enc, xs, ys, 1e-3, 10, 3)
        pmf_delta.append(pmf_support_loss(e3, xs, ys, 3) - pmf_support_loss(enc, xs, ys, 3))
    assert np.median(pmt_delta) <= 0 and np.median(pmf_delta) <= 0


def test_trace_records_steps(task_data):
    enc, tasks = task_data
    xs, ys, _ = tasks[0]
    trace = []
    PMTModel(enc, 3).fit(xs, ys, 1e-3, 3, trace=trace)
    assert [r["step"] for r in trace] == [0, 1, 2] and all(r["lr"] == 1e-3 for r in trace)


def test_stratified_split():
    y = np.repeat([0, 1, 2], [5, 10, 4])
    fit, hold = stratified_split(y, 0.2, seed=3)
    assert sorted(np.concatenate([fit, hold]).tolist()) == list(range(19))
    assert np.bincount(y[hold]).tolist() == [1, 2, 1]
    assert np.array_equal(hold, stratified_split(y, 0.2, seed=3)[1])
    with pytest.raises(ValueError):
        stratified_split(np.array([0, 1, 1]), 0.5, seed=0)


def test_lr_search_singleton():
    x, y, _ = correctable_support()
    assert lr_search(LinearProbe(2), x, y, FinetuneConfig(lr_candidates=(1e-3,))) == 1e-3


@pytest.mark.parametrize("seed", range(3))
def test_lr_search_correctable_and_fragile(seed):
    x, y, _ = correctable_support(seed=seed)
    scores = {}
    cfg = FinetuneConfig(lr_candidates=(0.0, 1e-3), steps=1000, seed=seed)
    assert lr_search(LinearProbe(2), x, y, cfg, scores=scores) == 1e-3
    assert scores[1e-3] > scores[0.0]
    x, y, _ = fragile_support(seed=seed)
    scores = {}
    cfg = FinetuneConfig(lr_candidates=(0.0, 1e-2), steps=20, seed=seed)
    assert lr_search(LinearProbe(2), x, y, cfg, scores=scores) == 0.0
    assert scores[0.0] > scores[1e-2]


def test_lr_search_ties_go_small_and_stay_in_set(task_data):
    x, y, _ = correctable_support()
    cfg = FinetuneConfig(lr_candidates=(1e-2, 1e-3, 5e-3), steps=1000)
    scores = {}
    best = lr_search(LinearProbe(2), x, y, cfg, scores=scores)
    assert best in cfg.lr_candidates
    top = max(scores.values())
    assert best == min(lr for lr, s in scores.items() if s == top)
    assert lr_search(LinearProbe(2), x, y, cfg) == best
