# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled counterparts of the loops in ``_kernels_py``."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def render_notes(notes, Py_ssize_t n_frames, Py_ssize_t n_pitches):
    cdef cnp.int64_t[:, ::1] nv = np.ascontiguousarray(
        np.asarray(notes, dtype=np.int64).reshape(-1, 3))
    onset_arr = np.zeros((n_frames, n_pitches), dtype=np.float32)
    frame_arr = np.zeros((n_frames, n_pitches), dtype=np.float32)
    cdef float[:, ::1] onset = onset_arr
    cdef float[:, ::1] frame = frame_arr
    cdef Py_ssize_t k, t, col, on, off
    for k in range(nv.shape[0]):
        col = nv[k, 0]
        on = nv[k, 1]
        off = nv[k, 2]
        onset[on, col] = 1.0
        for t in range(on, off):
            frame[t, col] = 1.0
    return onset_arr, frame_arr


def decode_rolls(onset, frame, double onset_threshold, double frame_threshold):
    cdef double[:, ::1] o = np.ascontiguousarray(onset, dtype=np.float64)
    cdef double[:, ::1] f = np.ascontiguousarray(frame, dtype=np.float64)
    cdef Py_ssize_t n_frames = o.shape[0]
    cdef Py_ssize_t n_pitches = o.shape[1]
    cdef Py_ssize_t col, t, start, n = 0, cap = 64
    cdef double cur
    cdef bint fires
    out_arr = np.empty((cap, 3), dtype=np.int64)
    cdef cnp.int64_t[:, ::1] out = out_arr
    for col in range(n_pitches):
        start = -1
        for t in range(n_frames):
            cur = o[t, col]
            fires = (cur > onset_threshold
                     and (t == 0 or cur > o[t - 1, col])
                     and (t == n_frames - 1 or cur >= o[t + 1, col]))
            if fires or (start >= 0 and f[t, col] < frame_threshold) :
                if start >= 0:
                    if n == cap:
                        cap *= 2
                        out_arr = np.resize(out_arr, (cap, 3))
                        out = out_arr
                    out[n, 0] = col
                    out[n, 1] = start
                    out[n, 2] = t
                    n += 1
                start = t if fires else -1
        if start >= 0:
            if n == cap:
                cap *= 2
                out_arr = np.resize(out_arr, (cap, 3))
                out = out_arr
            out[n, 0] = col
            out[n, 1] = start
            out[n, 2] = n_frames
            n += 1
    return out_arr[:n].copy()


def max_matching(adjacency):
    cdef cnp.uint8_t[:, ::1] adj = np.ascontiguousarray(adjacency, dtype=np.uint8)
    cdef Py_ssize_t n_ref = adj.shape[0]
    cdef Py_ssize_t n_est = adj.shape[1]
    match_est_arr = np.full(n_est, -1, dtype=np.int64)
    match_ref_arr = np.full(n_ref, -1, dtype=np.int64)
    visited_arr = np.zeros(n_est, dtype=np.uint8)
    parent_arr = np.full(n_est, -1, dtype=np.int64)
    stack_node_arr = np.empty(n_ref + 1, dtype=np.int64)
    stack_pos_arr = np.empty(n_ref + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] match_est = match_est_arr
    cdef cnp.int64_t[::1] match_ref = match_ref_arr
    cdef cnp.uint8_t[::1] visited = visited_arr
    cdef cnp.int64_t[::1] parent = parent_arr
    cdef cnp.int64_t[::1] snode = stack_node_arr
    cdef cnp.int64_t[::1] spos = stack_pos_arr
    cdef Py_ssize_t root, depth, i, j, found, prev
    for root in range(n_ref):
        visited[:] = 0
        depth = 0
        snode[0] = root
        spos[0] = 0
        found = -1
        while depth >= 0 and found < 0:
            i = snode[depth]
            j = spos[depth]
            if j >= n_est:
                depth -= 1
                continue
            spos[depth] = j + 1
            if not adj[i, j] or visited[j]:
                continue
            visited[j] = 1
            parent[j] = i
            if match_est[j] < 0:
                found = j
            else:
                depth += 1
                snode[depth] = match_est[j]
                spos[depth] = 0
        j = found
        while j >= 0:
            i = parent[j]
            prev = match_ref[i]
            match_ref[i] = j
            match_est[j] = i
            j = prev
    rows = np.flatnonzero(match_ref_arr >= 0)
    return np.stack([rows, match_ref_arr[rows]], axis=1).astype(np.int64).reshape(-1, 2)
