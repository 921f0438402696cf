# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled pairwise-distance sums (row-major, fixed summation order)."""

from libc.math cimport sqrt

import numpy as np


def cross_distance_sum(const double[:, ::1] a, const double[:, ::1] b):
    """Sum over all (i, j) of ||a_i - b_j||."""
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0, row, acc, diff
    if b.shape[1] != d:
        raise ValueError("dimension mismatch")
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(m):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - b[j, k]
                    acc = acc + diff * diff
                row = row + sqrt(acc)
            total = total + row
    return total


def self_distance_sum(const double[:, ::1] a):
    """Sum over all ordered pairs (i, j) of ||a_i - a_j|| (diagonal is zero)."""
    cdef Py_ssize_t n = a.shape[0], d = a.shape[1]
    cdef Py_ssize_t i, j, k
    cdef double total = 0.0, row, acc, diff
    with nogil:
        for i in range(n):
            row = 0.0
            for j in range(i + 1, n):
                acc = 0.0
                for k in range(d):
                    diff = a[i, k] - a[j, k]
                    acc = acc + diff * diff
                row = row + sqrt(acc)
            total = total + row
    return 2.0 * total
