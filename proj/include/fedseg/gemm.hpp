#pragma once

#include <algorithm>
#include <cstdint>
#include <vector>

#include "fedseg/parallel.hpp"

namespace fedseg::detail {

// Dense row-major kernels sized for this workload: M (output channels) is
// small, N (spatial) is large, K is channels x kernel taps. Inner loops are
// written so the vectorized result is bit-identical to the scalar one:
// per-output accumulation order over k is fixed, and reduction kernels use
// an explicit 8-lane summation tree.

inline constexpr int kGemmMR = 4;
inline constexpr int kGemmNR = 16;
inline constexpr std::int64_t kParallelFlops = 1 << 21;

// C[M x N] = (or +=) A[M x K] * B[K x N]
inline void gemm_nn(const double* A, const double* B, double* C, int M, int K, int N,
                    bool accumulate) {
    const std::int64_t flops = 2LL * M * K * N;
    const int n_tiles = (N + kGemmNR - 1) / kGemmNR;

    auto tile_range = [=](std::int64_t t0, std::int64_t t1) {
        for (std::int64_t t = t0; t < t1; ++t) {
            const int n0 = static_cast<int>(t) * kGemmNR;
            const int nb = std::min(kGemmNR, N - n0);
            for (int m0 = 0; m0 < M; m0 += kGemmMR) {
                const int mb = std::min(kGemmMR, M - m0);
                if (mb == kGemmMR && nb == kGemmNR) {
                    double acc[kGemmMR][kGemmNR];
                    if (accumulate) {
                        for (int r = 0; r < kGemmMR; ++r)
                            for (int j = 0; j < kGemmNR; ++j)
                                acc[r][j] = C[(m0 + r) * static_cast<std::size_t>(N) + n0 + j];
                    } else {
                        for (int r = 0; r < kGemmMR; ++r)
                            for (int j = 0; j < kGemmNR; ++j) acc[r][j] = 0.0;
                    }
                    const double* a0 = A + (m0 + 0) * static_cast<std::size_t>(K);
                    const double* a1 = A + (m0 + 1) * static_cast<std::size_t>(K);
                    const double* a2 = A + (m0 + 2) * static_cast<std::size_t>(K);
                    const double* a3 = A + (m0 + 3) * static_cast<std::size_t>(K);
                    for (int k = 0; k < K; ++k) {
                        const double* brow = B + k * static_cast<std::size_t>(N) + n0;
                        const double av0 = a0[k], av1 = a1[k], av2 = a2[k], av3 = a3[k];
                        for (int j = 0; j < kGemmNR; ++j) {
                            const double bv = brow[j];
                            acc[0][j] += av0 * bv;
                            acc[1][j] += av1 * bv;
                            acc[2][j] += av2 * bv;
                            acc[3][j] += av3 * bv;
                        }
                    }
                    for (int r = 0; r < kGemmMR; ++r)
                        for (int j = 0; j < kGemmNR; ++j) C[(m0 + r) * static_cast<std::size_t>(N) + n0 + j] = acc[r][j];
                } else {
                    double acc[kGemmMR][kGemmNR];
                    for (int r = 0; r < mb; ++r)
                        for (int j = 0; j < nb; ++j)
                            acc[r][j] = accumulate
                                            ? C[(m0 + r) * static_cast<std::size_t>(N) + n0 + j]
                                            : 0.0;
                    for (int r = 0; r < mb; ++r) {
                        const double* arow = A + (m0 + r) * static_cast<std::size_t>(K);
                        for (int k = 0; k < K; ++k) {
                            const double av = arow[k];
                            const double* brow = B + k * static_cast<std::size_t>(N) + n0;
                            for (int j = 0; j < nb; ++j) acc[r][j] += av * brow[j];
                        }
                    }
                    for (int r = 0; r < mb; ++r)
                        for (int j = 0; j < nb; ++j)
                            C[(m0 + r) * static_cast<std::size_t>(N) + n0 + j] = acc[r][j];
                }
            }
        }
    };

    if (flops >= kParallelFlops)
        parallel_for(n_tiles, tile_range);
    else
        tile_range(0, n_tiles);
}

// dst[cols x rows] = src[rows x cols]^T, blocked for cache.
inline void transpose(const double* src, double* dst, int rows, int cols) {
    constexpr int TB = 32;
    for (int r0 = 0; r0 < rows; r0 += TB) {
        const int r1 = std::min(rows, r0 + TB);
        for (int c0 = 0; c0 < cols; c0 += TB) {
            const int c1 = std::min(cols, c0 + TB);
            for (int r = r0; r < r1; ++r)
                for (int c = c0; c < c1; ++c)
                    dst[static_cast<std::size_t>(c) * rows + r] =
                        src[static_cast<std::size_t>(r) * cols + c];
        }
    }
}

// Scratch buffers reused across calls within a thread.
inline std::vector<double>& scratch(int which) {
    static thread_local std::vector<double> bufs[4];
    return bufs[which];
}

}  // namespace fedseg::detail
