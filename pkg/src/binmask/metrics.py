"""Evaluation metrics: accuracy, error rate, Matthews correlation, token micro-F1."""
import math

import numpy as np


def _flat(y_true, y_pred):
    t = np.asarray(y_true).reshape(-1)
    p = np.asarray(y_pred).reshape(-1)
    if t.shape != p.shape:
        raise ValueError(f"y_true {t.shape} and y_pred {p.shape} differ")
    return t, p


def accuracy(y_true, y_pred) -> float:
    t, p = _flat(y_true, y_pred)
    if t.size == 0:
        return 0.0
    return float(np.count_nonzero(t == p)) / t.size


def error_rate(y_true, y_pred) -> float:
    return 1.0 - accuracy(y_true, y_pred)


def mcc(y_true, y_pred) -> float:
    """Matthews correlation from the K-class confusion matrix; 0 when undefined.

    With two classes this is ``(TP*TN - FP*FN) / sqrt((TP+FP)(TP+FN)(TN+FP)(TN+FN))``.
    """
    t, p = _flat(y_true, y_pred)
    if t.size == 0:
        return 0.0
    classes = np.union1d(t, p)
    ti = np.searchsorted(classes, t)
    pi = np.searchsorted(classes, p)
    k = len(classes)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (ti, pi), 1)
    s = int(cm.sum())
    c = int(np.trace(cm))
    t_k = cm.sum(axis=1)
    p_k = cm.sum(axis=0)
    num = c * s - int(np.dot(p_k, t_k))
    den = (s * s - int(np.dot(p_k, p_k))) * (s * s - int(np.dot(t_k, t_k)))
    if den == 0:
        return 0.0
    return num / math.sqrt(den)


def mcc_from_counts(tp, tn, fp, fn) -> float:
    den = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if den == 0:
        return 0.0
    return (tp * tn - fp * fn) / math.sqrt(den)


def micro_f1(y_true, y_pred, exclude=()) -> float:
    """Token-level micro-F1. Labels in ``exclude`` count as negatives.

    With no excluded label every token is a positive and micro-F1 equals accuracy.
    """
    t, p = _flat(y_true, y_pred)
    ex = np.asarray(list(exclude))
    tpos = ~np.isin(t, ex)
    ppos = ~np.isin(p, ex)
    tp = int(np.count_nonzero(tpos & ppos & (t == p)))
    n_pred = int(np.count_nonzero(ppos))
    n_true = int(np.count_nonzero(tpos))
    if tp == 0:
        return 0.0
    prec = tp / n_pred
    rec = tp / n_true
    return 2 * prec * rec / (prec + rec)


METRICS = {"accuracy": accuracy, "mcc": mcc, "micro_f1": micro_f1, "error_rate": error_rate}
