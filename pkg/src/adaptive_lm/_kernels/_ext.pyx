# distutils: language = c++
# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pure``. Semantics are identical."""
import numpy as np

from libc.stdint cimport int32_t, int64_t
from libcpp.unordered_map cimport unordered_map
from libcpp.pair cimport pair as cpair
from libcpp.vector cimport vector
from cython.operator cimport dereference as deref

ctypedef fused real:
    float
    double


def _scatter(real[:, ::1] target, const int64_t[::1] index, const real[:, ::1] src):
    cdef Py_ssize_t i, j, row
    cdef Py_ssize_t n = index.shape[0]
    cdef Py_ssize_t d = target.shape[1]
    with nogil:
        for i in range(n):
            row = index[i]
            for j in range(d):
                target[row, j] += src[i, j]


def scatter_add_rows(target, index, src):
    """``target[index[i]] += src[i]`` for every i, accumulating duplicates."""
    if target.ndim != 2 or not target.flags.c_contiguous or target.dtype not in (np.float32, np.float64):
        np.add.at(target, index, src)
        return
    idx = np.ascontiguousarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= target.shape[0]):
        raise IndexError("scatter index out of range")
    values = np.ascontiguousarray(src, dtype=target.dtype).reshape(idx.shape[0], target.shape[1])
    _scatter(target, idx, values)


cdef inline int64_t _key(int64_t a, int64_t b):
    return (a << 32) | (b & 0xFFFFFFFF)


cdef class BpeSegmenter:
    """Applies ranked merges to a word given as a sequence of integer symbol ids."""

    cdef unordered_map[int64_t, cpair[int64_t, int32_t]] table

    def __init__(self, merges):
        cdef int64_t rank = 0
        cdef int64_t k
        for a, b, new in merges:
            k = _key(a, b)
            if self.table.count(k) == 0:
                self.table[k] = cpair[int64_t, int32_t](rank, new)
            rank += 1

    def segment(self, symbols):
        cdef vector[int32_t] word
        cdef vector[int32_t] out
        cdef Py_ssize_t i, n
        cdef int64_t best_rank, k
        cdef int32_t a = 0, b = 0, new = 0
        cdef unordered_map[int64_t, cpair[int64_t, int32_t]].iterator it
        for s in symbols:
            word.push_back(s)
        while word.size() > 1:
            best_rank = -1
            n = word.size()
            for i in range(n - 1):
                k = _key(word[i], word[i + 1])
                it = self.table.find(k)
                if it != self.table.end():
                    if best_rank < 0 or deref_rank(it) < best_rank:
                        best_rank = deref_rank(it)
                        a = word[i]
                        b = word[i + 1]
                        new = deref_new(it)
            if best_rank < 0:
                break
            out.clear()
            i = 0
            while i < n:
                if i + 1 < n and word[i] == a and word[i + 1] == b:
                    out.push_back(new)
                    i += 2
                else:
                    out.push_back(word[i])
                    i += 1
            word.swap(out)
        result = np.empty(word.size(), dtype=np.int32)
        cdef int32_t[::1] view = result
        for i in range(<Py_ssize_t>word.size()):
            view[i] = word[i]
        return result


cdef inline int64_t deref_rank(unordered_map[int64_t, cpair[int64_t, int32_t]].iterator it):
    return deref(it).second.first


cdef inline int32_t deref_new(unordered_map[int64_t, cpair[int64_t, int32_t]].iterator it):
    return deref(it).second.second
