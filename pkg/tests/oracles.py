"""Independent reference computations shared by the test modules."""
import itertools

import numpy as np

from susl import diffcore as dc

FD_STEP = 1e-5


def rel_err(a, b, floor=1e-4):
    # entries smaller than ``floor`` are compared on an absolute scale;
    # a relative error on a 1e-9 gradient is finite-difference noise
    a, b = np.asarray(a), np.asarray(b)
    return np.max(np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b))))


def tape_grad(fn, *arrays):
    with dc.Tape() as tape:
        leaves = [dc.leaf(a) for a in arrays]
        out = fn(*leaves)
        tape.backward(out)
    return [l.grad for l in leaves]


def fd_grads(fn, *arrays):
    arrays = [np.array(a, dtype=float) for a in arrays]

    def value():
        return float(fn(*[dc.const(a) for a in arrays]).values)

    return [dc.numerical_grad(value, a, FD_STEP) for a in arrays]


def brute_force_acc(pred, truth, K, T):
    """Best accuracy over all T**K many-to-one cluster->class maps."""
    pred, truth = np.asarray(pred), np.asarray(truth)
    best = -1.0
    for mapping in itertools.product(range(T), repeat=K):
        acc = float(np.mean(np.asarray(mapping)[pred] == truth))
        best = max(best, acc)
    return best
