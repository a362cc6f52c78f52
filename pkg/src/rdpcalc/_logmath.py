import numpy as np


def lse(x, axis=None):
    """``log(sum(exp(x)))`` along ``axis``; rows that are all ``-inf`` give ``-inf``."""
    m = np.max(x, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(x - m), axis=axis, keepdims=True)) + m
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def safe_log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)
