import math
from decimal import Decimal

import numpy as np
import pytest

from binmask import analysis as A
from binmask.masking import MaskingConfig
from binmask.model import BERT_BASE, MaskPlan, block_maskable_count
from binmask.training import TrainConfig, evaluate, finetune, model_from_checkpoint, model_from_masks, train_masks

from oracles import bert_base_param_count, de_casteljau, s_loops, vote_ref

# -------------------------------------------------------------- dissimilarity


def test_s_hand_examples():
    z4 = np.zeros(4, np.uint8)
    assert A.dissimilarity_s(z4, [1, 1, 0, 0], z4, [1, 0, 1, 0]) == 0.5
    assert A.dissimilarity_s([0, 0], [1, 0], [0, 0], [0, 1]) == 1.0
    assert A.dissimilarity_s(z4, [1, 0, 0, 1], z4, [1, 0, 0, 1]) == 0.0
    with pytest.raises(A.UndefinedResultError):
        A.dissimilarity_s(z4, z4, z4, z4)
    with pytest.raises(ValueError):
        A.dissimilarity_s([0, 2], [0, 1], [0, 0], [0, 1])


def test_s_matches_loops_and_is_symmetric(rng):
    for _ in range(20):
        i = (rng.random(50) < 0.3).astype(np.uint8)
        t1 = i ^ (rng.random(50) < 0.2)
        t2 = i ^ (rng.random(50) < 0.2)
        if not (t1 != i).any() and not (t2 != i).any():
            continue
        s = A.dissimilarity_s(i, t1, i, t2)
        assert s == s_loops(i, t1, i, t2)
        assert s == A.dissimilarity_s(i, t2, i, t1)
        assert 0 <= s <= 1


def test_mask_set_diff_on_trained_artifacts(pretrained, cls_task):
    def run(seed):
        cfg = TrainConfig(lr=3e-3, regime="mask", seed=seed, max_epochs=2, patience=2,
                          masking=MaskingConfig(init_sparsity=0.1, seed=0), plan=MaskPlan.parse("all", 2))
        return train_masks(pretrained, cls_task, cfg)[0]

    a, b = run(1), run(2)
    d = A.mask_set_diff(a, b)
    assert d.shared_init and set(d.layers) == set(a.masks)
    init = A.initial_masks(a)
    num = sum(int((a.masks[n] != b.masks[n]).sum()) for n in d.layers)
    den = sum(int((a.masks[n] != init[n]).sum()) + int((b.masks[n] != init[n]).sum()) for n in d.layers)
    assert d.overall == num / den
    assert A.mask_set_diff(a, a).overall == 0.0
    cols, rows = A.mask_stats(a)
    assert cols[0] == "layer" and len(rows) == len(a.masks)


# ------------------------------------------------------------------- memory


def test_memory_goldens():
    plan = MaskPlan.parse("2-11", 12, mask_classifier=True)
    rep = A.memory_report(BERT_BASE, plan, [("t", 2)])
    assert rep.pretrained_params == bert_base_param_count() == 109_482_240
    assert rep.pretrained_kb == Decimal("437928.96")
    assert rep.mask_bits_per_task == 71_368_704
    assert rep.mask_kb_per_task == Decimal("8921.088")
    assert block_maskable_count(BERT_BASE) == 7_077_888
    assert rep.mask_bits_per_task == 10 * 7_077_888 + 768 * 768
    assert rep.mask_kb_per_task / rep.pretrained_kb < Decimal("0.021")


def test_memory_table_rows():
    plan = MaskPlan.parse("2-11", 12)
    tasks = [("MRPC", 2), ("SST2", 2), ("TREC", 6), ("AG", 4), ("POS", 49)]
    rows = {r["task"]: r for r in A.memory_report(BERT_BASE, plan, tasks).rows}
    assert rows["MRPC"]["ft_params_added"] == 1536
    assert rows["MRPC"]["mask_float_params_added"] == 1536
    assert rows["MRPC"]["mask_bits_added"] == 71_368_704 + 1536
    assert rows["MRPC"]["mask_kb_added"] == Decimal("8921.088") + Decimal("0.192")
    assert rows["SST2"]["ft_params_added"] == 1536 + 109_482_240
    assert rows["SST2"]["mask_float_params_added"] == 0
    assert rows["TREC"]["mask_float_params_added"] == 4608 and rows["TREC"]["ft_kb_added"] == Decimal("437947.392")
    assert rows["AG"]["mask_kb_added"] == Decimal("8921.088") + Decimal("0.384")
    assert rows["POS"]["mask_float_params_added"] == 37_632
    assert rows["POS"]["mask_kb_added"] == Decimal("8921.088") + Decimal("4.704")


# ---------------------------------------------------------------- ensembles


def _onehot_logits(labels, k):
    out = np.full((len(labels), k), -1.0)
    out[np.arange(len(labels)), labels] = 1.0
    return out


def test_majority_vote_examples():
    assert A.majority_vote([[1], [1], [2], [0]])[0] == 1
    assert A.majority_vote([[0], [0], [1], [1]])[0] == 0
    assert A.majority_vote([[2], [1], [2], [1]])[0] == 1


def test_ensemble_modes_on_four_models(rng):
    k, n = 3, 40
    labels = rng.integers(0, k, size=(4, n))
    labels[:, 0] = [2, 2, 1, 1]  # forced tie
    outs = [_onehot_logits(l, k) for l in labels]
    got = A.combine_predictions(outs, "labels")
    assert got.tolist() == [vote_ref(col) for col in labels.T.tolist()]
    assert got[0] == 1

    logits = [rng.standard_normal((n, k)) * 3 for _ in range(4)]
    mean_l = [[sum(m[i][c] for m in logits) / 4 for c in range(k)] for i in range(n)]
    assert A.combine_predictions(logits, "logits").tolist() == [int(np.argmax(r)) for r in mean_l]

    def sm(row):
        e = [math.exp(v) for v in row]
        return [v / sum(e) for v in e]

    mean_p = [[sum(sm(m[i])[c] for m in logits) / 4 for c in range(k)] for i in range(n)]
    assert A.combine_predictions(logits, "probs").tolist() == [int(np.argmax(r)) for r in mean_p]


def test_logits_and_probs_can_disagree():
    # model 0 is very confident in class 0, the others mildly prefer class 1
    m = [np.array([[10.0, 0.0]]), np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]]), np.array([[0.0, 1.0]])]
    assert A.combine_predictions(m, "logits")[0] == 0
    assert A.combine_predictions(m, "probs")[0] == 1
    assert A.combine_predictions(m, "labels")[0] == 1


def test_ensemble_errors_and_identity(pretrained, cls_task):
    with pytest.raises(ValueError):
        A.combine_predictions([np.zeros((2, 3))], "logits")
    with pytest.raises(ValueError):
        A.combine_predictions([np.zeros((2, 3)), np.zeros((2, 4))], "logits")
    with pytest.raises(ValueError):
        A.combine_predictions([np.zeros((2, 3))] * 2, "median")
    ck, _ = finetune(pretrained, cls_task, TrainConfig(lr=1e-3, max_epochs=1, patience=1))
    m = model_from_checkpoint(ck)
    for mode in A.ENSEMBLE_MODES:
        gold, pred = A.ensemble_predict([m, m, m], cls_task, mode)
        single = A.model_logits(m, cls_task.split("dev"), "classification").argmax(-1)
        assert np.array_equal(pred, single)


# ------------------------------------------------------------ linear paths


def _endpoints(pretrained, cls_task):
    ck, _ = finetune(pretrained, cls_task, TrainConfig(lr=1e-3, seed=1, max_epochs=2))
    cfg = TrainConfig(lr=3e-3, regime="mask", seed=1, max_epochs=2,
                      masking=MaskingConfig(seed=1), plan=MaskPlan.parse("all", 2))
    art, _ = train_masks(pretrained, cls_task, cfg)
    return ck, art


def test_interpolation_scalars_and_symmetry(rng):
    w0 = {"x": np.array([2.0], np.float32)}
    w1 = {"x": np.array([4.0], np.float32)}
    assert A.interpolate_params(w0, w1, 0.5)["x"][0] == 3.0
    a = {"x": rng.standard_normal(500).astype(np.float32)}
    b = {"x": rng.standard_normal(500).astype(np.float32)}
    for g in list(rng.random(50)) + [0.1, 0.3, 0.5, 0.7, 1e-9, 0.0, 1.0]:
        assert np.array_equal(A.interpolate_params(a, b, g)["x"], A.interpolate_params(b, a, 1 - g)["x"])
    assert np.array_equal(A.interpolate_params(a, b, 0.0)["x"], a["x"])
    with pytest.raises(ValueError):
        A.interpolate_params(a, b, 1.5)
    with pytest.raises(ValueError):
        A.PathSpec(a, {"y": b["x"]}, None)


def test_path_endpoints_match_independent_evaluation(pretrained, cls_task):
    ck, art = _endpoints(pretrained, cls_task)
    ft_model = model_from_checkpoint(ck)
    mk_model = model_from_masks(pretrained, art)
    spec = A.PathSpec(A.dense_endpoint(pretrained, ck), A.dense_endpoint(pretrained, art), ft_model.cfg)
    rows = A.eval_path(spec, cls_task, points=11)
    assert [r[0] for r in rows] == sorted(r[0] for r in rows) and len(rows) == 11
    assert rows[0][2] == evaluate(ft_model, cls_task)
    assert rows[-1][2] == evaluate(mk_model, cls_task)
    # materialized dense model and masked model agree bitwise on logits
    ids = np.array([[1, 5, 6, 7, 2]])
    assert np.array_equal(A.interpolate_linear(spec, 1.0).logits(ids).data, mk_model.logits(ids).data)
    swapped = A.eval_path(spec.swapped(), cls_task, points=11)
    assert [r[1:] for r in swapped] == [r[1:] for r in reversed(rows)]


# ---------------------------------------------------------------- curves


def test_bernstein_examples():
    assert A.bernstein(4, 0.5)[4] == 0.0625
    for n in (1, 2, 4, 7):
        for t in np.linspace(0, 1, 101):
            assert abs(A.bernstein(n, t).sum() - 1.0) <= 1e-12


def test_bezier_matches_de_casteljau(rng):
    pts = [{"w": rng.standard_normal(6).astype(np.float32)} for _ in range(5)]
    curve = A.CurveSpec(pts, None)
    for t in (0.0, 0.13, 0.5, 0.77, 1.0):
        ref = de_casteljau([p["w"] for p in pts], t)
        assert np.max(np.abs(A.bezier_params(curve, t)["w"] - ref)) < 1e-6
    assert np.array_equal(A.bezier_params(curve, 0.0)["w"], pts[0]["w"])
    assert np.array_equal(A.bezier_params(curve, 1.0)["w"], pts[-1]["w"])
    flat = A.CurveSpec([{"w": np.full(3, 0.7, np.float32)} for _ in range(5)], None)
    assert np.allclose(A.bezier_params(flat, 0.42)["w"], 0.7, atol=1e-7)


def test_straight_curve_lies_on_line(pretrained, cls_task):
    ck, art = _endpoints(pretrained, cls_task)
    spec = A.PathSpec(A.dense_endpoint(pretrained, ck), A.dense_endpoint(pretrained, art), model_from_checkpoint(ck).cfg)
    curve = A.CurveSpec.straight(spec, 3)
    assert curve.n_bends == 3 and curve.degree == 4
    for t in (0.25, 0.6):
        lin = A.interpolate_params(spec.w0, spec.w1, t)
        bez = A.bezier_params(curve, t)
        assert max(float(np.max(np.abs(lin[n] - bez[n]))) for n in lin) < 1e-5


def test_train_bezier_freezes_endpoints(pretrained, cls_task):
    ck, art = _endpoints(pretrained, cls_task)
    spec = A.PathSpec(A.dense_endpoint(pretrained, ck), A.dense_endpoint(pretrained, art), model_from_checkpoint(ck).cfg)
    curve = A.CurveSpec.straight(spec, 3)
    same = A.train_bezier(curve, cls_task, A.CurveTrainConfig(max_steps=0))
    assert all(np.array_equal(p[n], q[n]) for p, q in zip(curve.points, same.points) for n in p)
    trained = A.train_bezier(curve, cls_task, A.CurveTrainConfig(lr=1e-3, epochs=100, max_steps=100, batch_size=16))
    for i in (0, -1):
        assert all(np.array_equal(curve.points[i][n], trained.points[i][n]) for n in curve.points[i])
    assert any(not np.array_equal(curve.points[2][n], trained.points[2][n]) for n in curve.points[2])
    # input curve not modified in place
    assert np.array_equal(curve.points[2]["pooler.weight"], same.points[2]["pooler.weight"])


# -------------------------------------------------------------- embeddings


def test_dump_embeddings(tmp_path, pretrained, cls_task):
    ck, _ = finetune(pretrained, cls_task, TrainConfig(lr=1e-3, max_epochs=1, patience=1))
    m = model_from_checkpoint(ck)
    n = A.dump_cls_embeddings(m, cls_task, tmp_path / "e.tsv")
    lines = (tmp_path / "e.tsv").read_text().splitlines()
    assert n == len(lines) == len(cls_task.split("dev"))
    lab, vec = lines[0].split("\t")
    assert int(lab) == cls_task.split("dev")[0][1] and len(vec.split()) == m.cfg.hidden
    first = (tmp_path / "e.tsv").read_bytes()
    A.dump_cls_embeddings(m, cls_task, tmp_path / "e.tsv")
    assert (tmp_path / "e.tsv").read_bytes() == first
