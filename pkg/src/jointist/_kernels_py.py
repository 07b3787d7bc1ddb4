"""Pure-Python reference kernels.

Same signatures as the compiled ``_kernels`` extension; used when the
extension is not built or when ``JOINTIST_PURE_PYTHON=1``.
"""

import numpy as np


def render_notes(notes, n_frames, n_pitches):
    """Rasterize ``(column, on_frame, off_frame)`` triples into rolls.

    Returns float32 ``(onset, frame)`` arrays of shape ``(n_frames, n_pitches)``.
    Callers guarantee ``0 <= on < off <= n_frames``.
    """
    onset = np.zeros((n_frames, n_pitches), dtype=np.float32)
    frame = np.zeros((n_frames, n_pitches), dtype=np.float32)
    for col, on, off in np.asarray(notes, dtype=np.int64).reshape(-1, 3).tolist():
        onset[on, col] = 1.0
        frame[on:off, col] = 1.0
    return onset, frame


def decode_rolls(onset, frame, onset_threshold, frame_threshold):
    """Onset-filtered note decoding.

    An onset fires at a local maximum of the onset posterior (strictly above
    the previous frame, not below the next) that exceeds ``onset_threshold``.
    The note then lasts while the frame posterior stays at or above
    ``frame_threshold``; a fresh onset on an active pitch closes the old note.

    Returns an int64 array of ``(column, on_frame, off_frame)`` rows.
    """
    onset = np.asarray(onset, dtype=np.float64)
    frame = np.asarray(frame, dtype=np.float64)
    n_frames, n_pitches = onset.shape
    out = []
    for col in range(n_pitches):
        o = onset[:, col].tolist()
        f = frame[:, col].tolist()
        start = -1
        for t in range(n_frames):
            cur = o[t]
            fires = (
                cur > onset_threshold
                and (t == 0 or cur > o[t - 1])
                and (t == n_frames - 1 or cur >= o[t + 1])
            )
            if fires:
                if start >= 0:
                    out.append((col, start, t))
                start = t
            elif start >= 0 and f[t] < frame_threshold:
                out.append((col, start, t))
                start = -1
        if start >= 0:
            out.append((col, start, n_frames))
    return np.array(out, dtype=np.int64).reshape(-1, 3)


def max_matching(adjacency):
    """Maximum-cardinality bipartite matching by augmenting paths.

    ``adjacency[i, j]`` is nonzero when reference ``i`` may pair with
    estimate ``j``. Returns an int64 array of matched ``(i, j)`` rows.
    """
    adj = np.asarray(adjacency, dtype=bool)
    n_ref, n_est = adj.shape
    neighbours = [np.flatnonzero(adj[i]).tolist() for i in range(n_ref)]
    match_est = [-1] * n_est
    match_ref = [-1] * n_ref
    for root in range(n_ref):
        if not neighbours[root]:
            continue
        visited = [False] * n_est
        # iterative DFS: stack of (ref node, next neighbour position)
        parent_est = {}
        stack = [[root, 0]]
        found = -1
        while stack and found < 0:
            top = stack[-1]
            i, pos = top
            if pos >= len(neighbours[i]):
                stack.pop()
                continue
            top[1] += 1
            j = neighbours[i][pos]
            if visited[j]:
                continue
            visited[j] = True
            parent_est[j] = i
            if match_est[j] < 0:
                found = j
            else:
                stack.append([match_est[j], 0])
        # flip the augmenting path
        j = found
        while j >= 0:
            i = parent_est[j]
            prev = match_ref[i]
            match_ref[i] = j
            match_est[j] = i
            j = prev
    pairs = [(i, j) for i, j in enumerate(match_ref) if j >= 0]
    return np.array(pairs, dtype=np.int64).reshape(-1, 2)
