#pragma once

#include <cstddef>

// Low-level numeric kernels. Every kernel has a serial reference
// implementation and an OpenMP variant; the unqualified entry points
// dispatch on the process-wide execution mode. Parallel variants are
// bit-identical to the serial ones for any thread count: work is split
// over independent output elements (matmul/conv) or over fixed-size
// chunks combined in index order (reductions), so the floating-point
// evaluation order never depends on the schedule.
namespace dynsel::kernels {

enum class Exec { Serial, Parallel };

void set_exec(Exec mode);
Exec exec();

// 0 means "let the OpenMP runtime decide".
void set_threads(int n);
int threads();

// c[n,m] = a[n,k] * b[k,m]; accumulate adds into c instead of overwriting.
void matmul(const double* a, const double* b, double* c, int n, int k, int m,
            bool accumulate = false);
// c[n,k] = a[n,m] * b[k,m]^T
void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k,
               bool accumulate = false);
// c[k,m] = a[n,k]^T * b[n,m]
void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m,
               bool accumulate = false);

// y[r,f,t] = sum_j x[r, t+j-pad] * w[f,j] over valid indices.
// x is rows x li, w is f x k, y is rows x f x lo.
void conv1d_forward(const double* x, const double* w, double* y, int rows,
                    int li, int f, int k, int pad, int lo);
// gx[r,s] += sum over (f, j) with t = s - j + pad in [0, lo)
void conv1d_backward_input(const double* gy, const double* w, double* gx,
                           int rows, int li, int f, int k, int pad, int lo);
// gw[f,j] += sum over (r, t)
void conv1d_backward_weight(const double* gy, const double* x, double* gw,
                            int rows, int li, int f, int k, int pad, int lo);

// Deterministic chunked sum: partial sums over fixed 1024-element chunks,
// combined in chunk order.
double sum(const double* x, std::size_t n);

namespace serial {
void matmul(const double* a, const double* b, double* c, int n, int k, int m,
            bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k,
               bool accumulate = false);
void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m,
               bool accumulate = false);
void conv1d_forward(const double* x, const double* w, double* y, int rows,
                    int li, int f, int k, int pad, int lo);
void conv1d_backward_input(const double* gy, const double* w, double* gx,
                           int rows, int li, int f, int k, int pad, int lo);
void conv1d_backward_weight(const double* gy, const double* x, double* gw,
                            int rows, int li, int f, int k, int pad, int lo);
double sum(const double* x, std::size_t n);
}  // namespace serial

namespace parallel {
void matmul(const double* a, const double* b, double* c, int n, int k, int m,
            bool accumulate = false);
void matmul_nt(const double* a, const double* b, double* c, int n, int m, int k,
               bool accumulate = false);
void matmul_tn(const double* a, const double* b, double* c, int n, int k, int m,
               bool accumulate = false);
void conv1d_forward(const double* x, const double* w, double* y, int rows,
                    int li, int f, int k, int pad, int lo);
void conv1d_backward_input(const double* gy, const double* w, double* gx,
                           int rows, int li, int f, int k, int pad, int lo);
void conv1d_backward_weight(const double* gy, const double* x, double* gw,
                            int rows, int li, int f, int k, int pad, int lo);
double sum(const double* x, std::size_t n);
}  // namespace parallel

}  // namespace dynsel::kernels
