import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from decdistill import autograd as ag
from decdistill.autograd import DiffArray
from decdistill.boxes import box_loss
from decdistill.losses import (
    LossConfig,
    LossReport,
    attn_distill_cross,
    attn_distill_self,
    bce_soft,
    detection_loss,
    entropy_floor,
    pred_distill,
    pred_distill_floor,
    total_distill,
)
from decdistill.matching import GtAssignment

probs01 = st.floats(0.0, 1.0, allow_nan=False)


def _row_stochastic(rng, shape):
    x = rng.uniform(size=shape)
    return x / x.sum(axis=-1, keepdims=True)


# -- bce ---------------------------------------------------------------------------------


def test_bce_examples():
    assert bce_soft(np.array([0.5]), np.array([0.5])) == pytest.approx(math.log(2), abs=1e-12)
    assert bce_soft(np.array([1 - 1e-12]), np.array([1.0])) == pytest.approx(0.0, abs=1e-6)
    assert bce_soft(np.array([0.8]), np.array([0.5])) == pytest.approx(0.916290731874155, abs=1e-12)


def test_bce_mean_over_classes():
    v = bce_soft(np.array([0.8, 0.5]), np.array([0.5, 0.5]))
    assert v == pytest.approx((0.916290731874155 + math.log(2)) / 2, abs=1e-12)


def test_bce_shape_mismatch():
    with pytest.raises(ValueError):
        bce_soft(np.array([0.5, 0.5]), np.array([0.5, 0.5, 0.5]))
    with pytest.raises(ValueError):
        bce_soft(np.full((3, 2), 0.5), np.full((4, 2), 0.5))


@given(st.lists(st.tuples(probs01, probs01), min_size=1, max_size=6))
def test_bce_never_below_entropy_floor(pairs):
    s = np.array([p for p, _ in pairs])
    t = np.array([q for _, q in pairs])
    assert bce_soft(s, t) - entropy_floor(t) >= -1e-12


def test_bce_diffarray_matches_numpy(rng):
    s = rng.uniform(0.05, 0.95, size=(2, 3, 4))
    t = rng.uniform(size=(2, 3, 4))
    np.testing.assert_allclose(bce_soft(DiffArray(s), t).values, bce_soft(s, t), atol=1e-14)


# -- detection loss ----------------------------------------------------------------------


def test_detection_perfect_predictions_give_zero():
    probs = np.zeros((1, 3, 2))
    probs[0, 1, 1] = 1.0
    gt_box = np.array([[0.5, 0.5, 0.2, 0.3]])
    boxes = np.tile(gt_box, (1, 3, 1))
    loss = detection_loss([DiffArray(probs)], [DiffArray(boxes)], [(np.array([1]), gt_box)], [[GtAssignment([1])]])
    # clamping leaves a residual of about -ln(1 - 1e-7) per class entry
    assert loss.item() < 1e-6


def test_detection_empty_gt_is_background_bce(rng):
    probs = rng.uniform(0.05, 0.95, size=(1, 4, 3))
    boxes = rng.uniform(0.2, 0.8, size=(1, 4, 4))
    gts = [(np.zeros(0, dtype=np.int64), np.zeros((0, 4)))]
    loss = detection_loss([DiffArray(probs)], [DiffArray(boxes)], gts, [[GtAssignment([])]])
    assert loss.item() == pytest.approx(bce_soft(probs[0], np.zeros(3)).sum(), abs=1e-12)


def test_detection_single_query_composes_oracles():
    p = np.array([[[0.3, 0.6]]])
    b = np.array([[[0.45, 0.5, 0.3, 0.2]]])
    gt_b = np.array([[0.5, 0.55, 0.25, 0.2]])
    loss = detection_loss([DiffArray(p)], [DiffArray(b)], [(np.array([0]), gt_b)], [[GtAssignment([0])]])
    expected = bce_soft(p[0, 0], np.array([1.0, 0.0])) + box_loss(b[0, 0], gt_b[0])
    assert loss.item() == pytest.approx(expected, abs=1e-12)


def test_detection_mean_over_batch_sum_over_layers(rng):
    probs = [rng.uniform(0.1, 0.9, size=(2, 3, 2)) for _ in range(2)]
    boxes = [rng.uniform(0.2, 0.8, size=(2, 3, 4)) for _ in range(2)]
    gts = [(np.array([1]), rng.uniform(0.3, 0.6, size=(1, 4))), (np.array([0, 1]), rng.uniform(0.3, 0.6, size=(2, 4)))]
    asg = [[GtAssignment([2]), GtAssignment([0, 1])], [GtAssignment([0]), GtAssignment([2, 1])]]
    full = detection_loss([DiffArray(p) for p in probs], [DiffArray(b) for b in boxes], gts, asg).item()
    parts = 0.0
    for k in range(2):
        for b in range(2):
            parts += detection_loss([DiffArray(probs[k][b : b + 1])], [DiffArray(boxes[k][b : b + 1])], [gts[b]],
                                    [[asg[k][b]]]).item()
    assert full == pytest.approx(parts / 2, abs=1e-12)


# -- prediction distillation -------------------------------------------------------------


def test_pred_distill_self_copy_hits_entropy_floor(rng):
    tp = [rng.uniform(0.05, 0.95, size=(2, 4, 3)) for _ in range(2)]
    tb = [rng.uniform(0.2, 0.8, size=(2, 4, 4)) for _ in range(2)]
    ident = [np.tile(np.arange(4), (2, 1))] * 2
    loss = pred_distill([DiffArray(p) for p in tp], [DiffArray(b) for b in tb], tp, tb, ident).item()
    assert loss - pred_distill_floor(tp, ident) == pytest.approx(0.0, abs=1e-10)


def test_pred_distill_single_query_reduces_to_one_term():
    sp, tp = np.array([[0.7, 0.2]]), np.array([[0.5, 0.1]])
    sb, tb = np.array([[0.4, 0.5, 0.2, 0.2]]), np.array([[0.45, 0.5, 0.2, 0.25]])
    loss = pred_distill([DiffArray(sp)], [DiffArray(sb)], [tp], [tb], [np.array([0])], mu_cls=20.0)
    assert loss.item() == pytest.approx(20 * bce_soft(sp[0], tp[0]) + box_loss(sb[0], tb[0]), abs=1e-12)


def test_pred_distill_linear_in_layers(rng):
    sp, sb = rng.uniform(0.1, 0.9, size=(3, 2)), rng.uniform(0.2, 0.8, size=(3, 4))
    tp, tb = rng.uniform(0.1, 0.9, size=(5, 2)), rng.uniform(0.2, 0.8, size=(5, 4))
    idx = np.array([4, 0, 2])
    one = pred_distill([DiffArray(sp)], [DiffArray(sb)], [tp], [tb], [idx]).item()
    two = pred_distill([DiffArray(sp)] * 2, [DiffArray(sb)] * 2, [tp] * 2, [tb] * 2, [idx] * 2).item()
    assert two == pytest.approx(2 * one, rel=1e-14)


def test_pred_distill_index_out_of_range(rng):
    with pytest.raises(IndexError):
        pred_distill([DiffArray(np.full((2, 2), 0.5))], [DiffArray(np.full((2, 4), 0.5))], [np.full((2, 2), 0.5)],
                     [np.full((2, 4), 0.5)], [np.array([0, 2])])


# -- attention distillation ----------------------------------------------------------------


def test_attention_identity_is_zero(rng):
    sa = [_row_stochastic(rng, (2, 4, 3, 3)) for _ in range(2)]
    ca = [_row_stochastic(rng, (2, 4, 3, 16)) for _ in range(2)]
    ident = [np.tile(np.arange(3), (2, 1))] * 2
    assert attn_distill_self([DiffArray(m) for m in sa], sa, ident).item() == 0.0
    assert attn_distill_cross([DiffArray(m) for m in ca], ca, ident).item() == 0.0


@pytest.mark.parametrize("n_layers", [1, 2, 3])
def test_constant_offset_gives_layer_count(rng, n_layers):
    t = [_row_stochastic(rng, (1, 2, 3, 3)) for _ in range(n_layers)]
    s = [DiffArray(m + 0.01) for m in t]
    ident = [np.arange(3)] * n_layers
    assert attn_distill_self(s, t, ident).item() == pytest.approx(n_layers, rel=1e-9)
    tc = [_row_stochastic(rng, (1, 2, 3, 8)) for _ in range(n_layers)]
    sc = [DiffArray(m - 0.02) for m in tc]
    assert attn_distill_cross(sc, tc, ident, lambda_ca=1e4).item() == pytest.approx(4 * n_layers, rel=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(1, 5), st.integers(0, 4))
def test_gather_equivalence(seed, n_s, extra):
    rng = np.random.default_rng(seed)
    n_t = n_s + extra
    idx = rng.choice(n_t, size=(2, n_s), replace=True)
    t_sa = _row_stochastic(rng, (2, 2, n_t, n_t))
    t_ca = _row_stochastic(rng, (2, 2, n_t, 6))
    s_sa = _row_stochastic(rng, (2, 2, n_s, n_s))
    s_ca = _row_stochastic(rng, (2, 2, n_s, 6))
    sliced_sa = np.stack([t_sa[b][:, idx[b]][:, :, idx[b]] for b in range(2)])
    sliced_ca = np.stack([t_ca[b][:, idx[b]] for b in range(2)])
    ident = np.tile(np.arange(n_s), (2, 1))
    a = attn_distill_self([DiffArray(s_sa)], [t_sa], [idx]).item()
    b = attn_distill_self([DiffArray(s_sa)], [sliced_sa], [ident]).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)
    a = attn_distill_cross([DiffArray(s_ca)], [t_ca], [idx]).item()
    b = attn_distill_cross([DiffArray(s_ca)], [sliced_ca], [ident]).item()
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)


def test_attention_shape_errors(rng):
    with pytest.raises(ValueError, match="head count"):
        attn_distill_self([DiffArray(np.ones((1, 2, 2, 2)))], [np.ones((1, 4, 2, 2))], [np.arange(2)])
    with pytest.raises(ValueError, match="teacher and student must share the token grid"):
        attn_distill_cross([DiffArray(np.ones((1, 2, 2, 8)))], [np.ones((1, 2, 2, 16))], [np.arange(2)])


def test_teacher_maps_receive_no_gradient(rng):
    t = DiffArray(_row_stochastic(rng, (1, 2, 3, 3)), requires_grad=True)
    s = DiffArray(_row_stochastic(rng, (1, 2, 3, 3)), requires_grad=True)
    ag.backward(attn_distill_self([s], [t.values], [np.arange(3)]))
    assert s.grad.any() and not t.grad.any()


def test_aux_identity_permutation_invariance(rng):
    # permuting teacher queries together with the aux queries they seed
    perm = rng.permutation(4)
    tp, tb = rng.uniform(0.1, 0.9, size=(4, 2)), rng.uniform(0.2, 0.8, size=(4, 4))
    sp, sb = rng.uniform(0.1, 0.9, size=(4, 2)), rng.uniform(0.2, 0.8, size=(4, 4))
    t_sa, s_sa = _row_stochastic(rng, (1, 2, 4, 4)), _row_stochastic(rng, (1, 2, 4, 4))
    ident = np.arange(4)
    base = pred_distill([DiffArray(sp)], [DiffArray(sb)], [tp], [tb], [ident]).item()
    permuted = pred_distill([DiffArray(sp[perm])], [DiffArray(sb[perm])], [tp[perm]], [tb[perm]], [ident]).item()
    assert permuted == pytest.approx(base, rel=1e-13)
    base = attn_distill_self([DiffArray(s_sa)], [t_sa], [ident]).item()
    pp = np.ix_([0], [0, 1], perm, perm)
    permuted = attn_distill_self([DiffArray(s_sa[pp])], [t_sa[pp]], [ident]).item()
    assert permuted == pytest.approx(base, rel=1e-13)


# -- total ---------------------------------------------------------------------------------------


def test_config_rejects_negative_weights_and_unknown_modes():
    with pytest.raises(ValueError):
        LossConfig(mu_cls=-1)
    with pytest.raises(ValueError):
        LossConfig(constraint_mode="sometimes")
    with pytest.raises(ValueError):
        LossConfig(student_matching="greedy")
    cfg = LossConfig()
    assert (cfg.mu_cls, cfg.l1_weight, cfg.giou_weight, cfg.lambda_sa, cfg.lambda_ca) == (20, 5, 2, 1e4, 1e4)
    assert LossConfig.from_dict(cfg.to_dict()) == cfg


def test_total_with_all_flags_off_is_detection():
    cfg = LossConfig.baseline()
    rep = total_distill({"detection": 2.5, "l_pred": 1.0, "l_sa": 3.0, "l_ca": 4.0}, {}, cfg)
    assert rep.total == 2.5
    assert rep.values()["l_pred"] == 0.0


def test_total_without_aux_group():
    cfg = LossConfig(fixed=False)
    rep = total_distill({"detection": 1.0, "l_pred": 2.0, "l_sa": 3.0, "l_ca": 4.0}, {}, cfg)
    assert rep.total == 10.0 and rep.aux_detection == 0.0


@given(st.lists(st.floats(0, 100), min_size=8, max_size=8), st.booleans(), st.booleans(), st.booleans())
def test_total_is_enabled_weighted_sum(v, use_pred, use_sa, use_ca):
    cfg = LossConfig(use_pred=use_pred, use_sa=use_sa, use_ca=use_ca)
    names = ("detection", "l_pred", "l_sa", "l_ca")
    student = dict(zip(names, v[:4]))
    aux = dict(zip(names, v[4:]))
    rep = total_distill(student, aux, cfg)
    on = {"detection": True, "l_pred": use_pred, "l_sa": use_sa, "l_ca": use_ca}
    expected = sum(student[n] + aux[n] for n in names if on[n])
    assert rep.total == pytest.approx(expected, rel=1e-12, abs=1e-12)
    vals = rep.values()
    assert vals["total"] == pytest.approx(sum(vals[c] for c in LossReport.COLUMNS[:-1]), rel=1e-12, abs=1e-12)


def test_report_columns_match_csv_layout():
    assert LossReport.COLUMNS == (
        "detection", "l_pred", "l_sa", "l_ca", "aux_detection", "aux_l_pred", "aux_l_sa", "aux_l_ca", "total",
    )
