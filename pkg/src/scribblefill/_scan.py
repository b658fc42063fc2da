"""JIT-compiled windowed Hamming k-NN scan.

One linear pass per pixel over the candidates inside its spatial window,
keeping the K best by (distance, index). Popcount goes through the LLVM
ctpop intrinsic, which lowers to a single instruction on x86-64.
"""

import warnings

import numpy as np

with warnings.catch_warnings():
    warnings.filterwarnings("ignore", message=".*TBB.*")
    from numba import njit, prange, types
    from numba.extending import intrinsic

from llvmlite import ir


@intrinsic
def _popcount64(typingctx, v):
    sig = types.uint64(types.uint64)

    def codegen(context, builder, signature, args):
        fn = builder.module.declare_intrinsic("llvm.ctpop", [ir.IntType(64)])
        return builder.call(fn, [args[0]])

    return sig, codegen


@njit(cache=True, parallel=True)
def _scan_words(codes, K, width, height, radius):
    """codes: (n, words) uint64. Returns (neighbors (n, K) int64, counts (n,))."""
    n, words = codes.shape
    out = np.full((n, K), -1, dtype=np.int64)
    counts = np.zeros(n, dtype=np.int64)
    for i in prange(n):
        qy = i // width
        qx = i - qy * width
        y0 = max(0, qy - radius)
        y1 = min(height - 1, qy + radius)
        x0 = max(0, qx - radius)
        x1 = min(width - 1, qx + radius)
        best_d = np.empty(K, dtype=np.int64)
        best_j = np.empty(K, dtype=np.int64)
        cnt = 0
        worst = np.int64(1 << 30)
        for y in range(y0, y1 + 1):
            j0 = y * width + x0
            j1 = y * width + x1
            for j in range(j0, j1 + 1):
                if j == i:
                    continue
                if words == 1:
                    d = np.int64(_popcount64(codes[i, 0] ^ codes[j, 0]))
                else:
                    acc = np.uint64(0)
                    for w in range(words):
                        acc += _popcount64(codes[i, w] ^ codes[j, w])
                    d = np.int64(acc)
                if cnt < K:
                    p = cnt
                    while p > 0 and best_d[p - 1] > d:
                        best_d[p] = best_d[p - 1]
                        best_j[p] = best_j[p - 1]
                        p -= 1
                    best_d[p] = d
                    best_j[p] = j
                    cnt += 1
                    if cnt == K:
                        worst = best_d[K - 1]
                elif d < worst:
                    # equal distances keep the earlier (lower) index: skip on ==
                    p = K - 1
                    while p > 0 and best_d[p - 1] > d:
                        best_d[p] = best_d[p - 1]
                        best_j[p] = best_j[p - 1]
                        p -= 1
                    best_d[p] = d
                    best_j[p] = j
                    worst = best_d[K - 1]
            if worst == 0:
                # K exact matches found; nothing can displace them
                break
        counts[i] = cnt
        out[i, :cnt] = best_j[:cnt]
    return out, counts


def batch_knn_hamming(codes: np.ndarray, K: int, width: int, height: int,
                      radius: int):
    """Windowed Hamming k-NN for every pixel at once.

    Returns (neighbors, counts): neighbors is (n, K) int64 padded with -1
    where fewer than K candidates exist inside the window.
    """
    codes = np.ascontiguousarray(codes, dtype=np.uint64)
    return _scan_words(codes, int(K), int(width), int(height), int(radius))
