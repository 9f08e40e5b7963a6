#pragma once

// Dense double-precision inner loops behind the tensor ops. A scalar
// reference implementation is always present; vector variants are compiled
// per target and picked once at startup from the CPU feature set.

#include <cstddef>
#include <optional>
#include <string_view>
#include <vector>

namespace aalb::kernels {

enum class Backend { Scalar, Avx2, Neon };

std::string_view backend_name(Backend b);
std::optional<Backend> parse_backend(std::string_view name);

// All matrices are row-major and densely packed.
struct KernelTable {
  Backend backend;
  double (*dot)(const double* a, const double* b, std::size_t n);
  // y += alpha * x
  void (*axpy)(std::size_t n, double alpha, const double* x, double* y);
  // out = a * b elementwise
  void (*hadamard)(std::size_t n, const double* a, const double* b, double* out);
  // C[m x n] = A[m x k] * B[k x n]
  void (*matmul_nn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c);
  // C[m x n] = A[m x k] * B[n x k]^T
  void (*matmul_nt)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c);
  // C[m x n] = A[k x m]^T * B[k x n]
  void (*matmul_tn)(std::size_t m, std::size_t k, std::size_t n, const double* a,
                    const double* b, double* c);
};

const KernelTable& scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
const KernelTable& avx2_table();
#endif
#if defined(__aarch64__)
const KernelTable& neon_table();
#endif

bool backend_supported(Backend b);
std::vector<Backend> supported_backends();
const KernelTable& table_for(Backend b);

/// Active table. Chosen on first use: the AALB_KERNELS environment variable
/// if set (scalar | avx2 | neon), otherwise the widest supported backend.
const KernelTable& active();
Backend active_backend();
/// Throws aalb::ConfigError if the backend is not available on this CPU.
void select_backend(Backend b);

}  // namespace aalb::kernels
