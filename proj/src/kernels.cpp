#include "dynsel/kernels.hpp"

#include <omp.h>

#include <algorithm>
#include <atomic>
#include <vector>

namespace dynsel::kernels {

namespace {
std::atomic<Exec> g_exec{Exec::Parallel};
std::atomic<int> g_threads{0};

inline int effective_threads() {
    int n = g_threads.load(std::memory_order_relaxed);
    return n > 0 ? n : omp_get_max_threads();
}

constexpr std::size_t kSumChunk = 1024;
}  // namespace

void set_exec(Exec mode) { g_exec.store(mode, std::memory_order_relaxed); }
Exec exec() { return g_exec.load(std::memory_order_relaxed); }
void set_threads(int n) { g_threads.store(n, std::memory_order_relaxed); }
int threads() { return g_threads.load(std::memory_order_relaxed); }

// ---------------------------------------------------------------------------
// serial reference
// ---------------------------------------------------------------------------

namespace serial {

void matmul(const double* a, const double* b, double* c, int n, int k, int m,
            bool accumulate) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            const double* ai = a + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) acc += ai[p] * b[static_cast<std::size_t>(p) * m + j];
            double* out = c + static_cast<std::size_t>(i) * m + j;
            *out = accumulate ? *out + acc : acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k,
               bool accumulate) {
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            const double* ai = a + static_cast<std::size_t>(i) * m;
            const double* bj = b + static_cast<std::size_t>(j) * m;
            for (int p = 0; p < m; ++p) acc += ai[p] * bj[p];
            double* out = c + static_cast<std::size_t>(i) * k + j;
            *out = accumulate ? *out + acc : acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m,
               bool accumulate) {
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int p = 0; p < n; ++p)
                acc += a[static_cast<std::size_t>(p) * k + i] * b[static_cast<std::size_t>(p) * m + j];
            double* out = c + static_cast<std::size_t>(i) * m + j;
            *out = accumulate ? *out + acc : acc;
        }
    }
}

void conv1d_forward(const double* x, const double* w, double* y, int rows,
                    int li, int f, int k, int pad, int lo) {
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<std::size_t>(r) * li;
        for (int fi = 0; fi < f; ++fi) {
            const double* wf = w + static_cast<std::size_t>(fi) * k;
            double* yr = y + (static_cast<std::size_t>(r) * f + fi) * lo;
            for (int t = 0; t < lo; ++t) {
                double acc = 0.0;
                int j0 = std::max(0, pad - t);
                int j1 = std::min(k, li + pad - t);
                for (int j = j0; j < j1; ++j) acc += xr[t + j - pad] * wf[j];
                yr[t] = acc;
            }
        }
    }
}

void conv1d_backward_input(const double* gy, const double* w, double* gx,
                           int rows, int li, int f, int k, int pad, int lo) {
    for (int r = 0; r < rows; ++r) {
        double* gxr = gx + static_cast<std::size_t>(r) * li;
        for (int s = 0; s < li; ++s) {
            double acc = 0.0;
            for (int fi = 0; fi < f; ++fi) {
                const double* wf = w + static_cast<std::size_t>(fi) * k;
                const double* gyr = gy + (static_cast<std::size_t>(r) * f + fi) * lo;
                int j0 = std::max(0, s + pad - lo + 1);
                int j1 = std::min(k, s + pad + 1);
                for (int j = j0; j < j1; ++j) acc += gyr[s - j + pad] * wf[j];
            }
            gxr[s] += acc;
        }
    }
}

void conv1d_backward_weight(const double* gy, const double* x, double* gw,
                            int rows, int li, int f, int k, int pad, int lo) {
    for (int fi = 0; fi < f; ++fi) {
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int r = 0; r < rows; ++r) {
                const double* xr = x + static_cast<std::size_t>(r) * li;
                const double* gyr = gy + (static_cast<std::size_t>(r) * f + fi) * lo;
                int t0 = std::max(0, pad - j);
                int t1 = std::min(lo, li + pad - j);
                for (int t = t0; t < t1; ++t) acc += gyr[t] * xr[t + j - pad];
            }
            gw[static_cast<std::size_t>(fi) * k + j] += acc;
        }
    }
}

double sum(const double* x, std::size_t n) {
    std::size_t nchunks = (n + kSumChunk - 1) / kSumChunk;
    double total = 0.0;
    for (std::size_t c = 0; c < nchunks; ++c) {
        std::size_t lo = c * kSumChunk;
        std::size_t hi = std::min(n, lo + kSumChunk);
        double part = 0.0;
        for (std::size_t i = lo; i < hi; ++i) part += x[i];
        total += part;
    }
    return total;
}

}  // namespace serial

// ---------------------------------------------------------------------------
// OpenMP variants: identical per-element arithmetic, work split over
// independent outputs (or fixed chunks for reductions).
// ---------------------------------------------------------------------------

namespace parallel {

void matmul(const double* a, const double* b, double* c, int n, int k, int m,
            bool accumulate) {
    int nt = effective_threads();
#pragma omp parallel for num_threads(nt) schedule(static)
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            const double* ai = a + static_cast<std::size_t>(i) * k;
            for (int p = 0; p < k; ++p) acc += ai[p] * b[static_cast<std::size_t>(p) * m + j];
            double* out = c + static_cast<std::size_t>(i) * m + j;
            *out = accumulate ? *out + acc : acc;
        }
    }
}

void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k,
               bool accumulate) {
    int nt = effective_threads();
#pragma omp parallel for num_threads(nt) schedule(static)
    for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            const double* ai = a + static_cast<std::size_t>(i) * m;
            const double* bj = b + static_cast<std::size_t>(j) * m;
            for (int p = 0; p < m; ++p) acc += ai[p] * bj[p];
            double* out = c + static_cast<std::size_t>(i) * k + j;
            *out = accumulate ? *out + acc : acc;
        }
    }
}

void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m,
               bool accumulate) {
    int nt = effective_threads();
#pragma omp parallel for num_threads(nt) schedule(static)
    for (int i = 0; i < k; ++i) {
        for (int j = 0; j < m; ++j) {
            double acc = 0.0;
            for (int p = 0; p < n; ++p)
                acc += a[static_cast<std::size_t>(p) * k + i] * b[static_cast<std::size_t>(p) * m + j];
            double* out = c + static_cast<std::size_t>(i) * m + j;
            *out = accumulate ? *out + acc : acc;
        }
    }
}

void conv1d_forward(const double* x, const double* w, double* y, int rows,
                    int li, int f, int k, int pad, int lo) {
    int nt = effective_threads();
#pragma omp parallel for num_threads(nt) schedule(static)
    for (int r = 0; r < rows; ++r) {
        const double* xr = x + static_cast<std::size_t>(r) * li;
        for (int fi = 0; fi < f; ++fi) {
            const double* wf = w + static_cast<std::size_t>(fi) * k;
            double* yr = y + (static_cast<std::size_t>(r) * f + fi) * lo;
            for (int t = 0; t < lo; ++t) {
                double acc = 0.0;
                int j0 = std::max(0, pad - t);
                int j1 = std::min(k, li + pad - t);
                for (int j = j0; j < j1; ++j) acc += xr[t + j - pad] * wf[j];
                yr[t] = acc;
            }
        }
    }
}

void conv1d_backward_input(const double* gy, const double* w, double* gx,
                           int rows, int li, int f, int k, int pad, int lo) {
    int nt = effective_threads();
#pragma omp parallel for num_threads(nt) schedule(static)
    for (int r = 0; r < rows; ++r) {
        double* gxr = gx + static_cast<std::size_t>(r) * li;
        for (int s = 0; s < li; ++s) {
            double acc = 0.0;
            for (int fi = 0; fi < f; ++fi) {
                const double* wf = w + static_cast<std::size_t>(fi) * k;
                const double* gyr = gy + (static_cast<std::size_t>(r) * f + fi) * lo;
                int j0 = std::max(0, s + pad - lo + 1);
                int j1 = std::min(k, s + pad + 1);
                for (int j = j0; j < j1; ++j) acc += gyr[s - j + pad] * wf[j];
            }
            gxr[s] += acc;
        }
    }
}

void conv1d_backward_weight(const double* gy, const double* x, double* gw,
                            int rows, int li, int f, int k, int pad, int lo) {
    int nt = effective_threads();
#pragma omp parallel for num_threads(nt) schedule(static) collapse(2)
    for (int fi = 0; fi < f; ++fi) {
        for (int j = 0; j < k; ++j) {
            double acc = 0.0;
            for (int r = 0; r < rows; ++r) {
                const double* xr = x + static_cast<std::size_t>(r) * li;
                const double* gyr = gy + (static_cast<std::size_t>(r) * f + fi) * lo;
                int t0 = std::max(0, pad - j);
                int t1 = std::min(lo, li + pad - j);
                for (int t = t0; t < t1; ++t) acc += gyr[t] * xr[t + j - pad];
            }
            gw[static_cast<std::size_t>(fi) * k + j] += acc;
        }
    }
}

double sum(const double* x, std::size_t n) {
    std::size_t nchunks = (n + kSumChunk - 1) / kSumChunk;
    std::vector<double> parts(nchunks, 0.0);
    int nt = effective_threads();
    long long nc = static_cast<long long>(nchunks);
#pragma omp parallel for num_threads(nt) schedule(static)
    for (long long c = 0; c < nc; ++c) {
        std::size_t lo = static_cast<std::size_t>(c) * kSumChunk;
        std::size_t hi = std::min(n, lo + kSumChunk);
        double part = 0.0;
        for (std::size_t i = lo; i < hi; ++i) part += x[i];
        parts[static_cast<std::size_t>(c)] = part;
    }
    double total = 0.0;
    for (double p : parts) total += p;
    return total;
}

}  // namespace parallel

// ---------------------------------------------------------------------------
// dispatch
// ---------------------------------------------------------------------------

void matmul(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate) {
    if (exec() == Exec::Parallel) parallel::matmul(a, b, c, n, k, m, accumulate);
    else serial::matmul(a, b, c, n, k, m, accumulate);
}
void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k, bool accumulate) {
    if (exec() == Exec::Parallel) parallel::matmul_nt(a, b, c, n, m, k, accumulate);
    else serial::matmul_nt(a, b, c, n, m, k, accumulate);
}
void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m, bool accumulate) {
    if (exec() == Exec::Parallel) parallel::matmul_tn(a, b, c, n, k, m, accumulate);
    else serial::matmul_tn(a, b, c, n, k, m, accumulate);
}
void conv1d_forward(const double* x, const double* w, double* y, int rows, int li, int f, int k,
                    int pad, int lo) {
    if (exec() == Exec::Parallel) parallel::conv1d_forward(x, w, y, rows, li, f, k, pad, lo);
    else serial::conv1d_forward(x, w, y, rows, li, f, k, pad, lo);
}
void conv1d_backward_input(const double* gy, const double* w, double* gx, int rows, int li, int f,
                           int k, int pad, int lo) {
    if (exec() == Exec::Parallel)
        parallel::conv1d_backward_input(gy, w, gx, rows, li, f, k, pad, lo);
    else serial::conv1d_backward_input(gy, w, gx, rows, li, f, k, pad, lo);
}
void conv1d_backward_weight(const double* gy, const double* x, double* gw, int rows, int li, int f,
                            int k, int pad, int lo) {
    if (exec() == Exec::Parallel)
        parallel::conv1d_backward_weight(gy, x, gw, rows, li, f, k, pad, lo);
    else serial::conv1d_backward_weight(gy, x, gw, rows, li, f, k, pad, lo);
}
double sum(const double* x, std::size_t n) {
    return exec() == Exec::Parallel ? parallel::sum(x, n) : serial::sum(x, n);
}

}  // namespace dynsel::kernels
