#include <atomic>
#include <cstdlib>
#include <string>

#include "aalb/kernels.hpp"
#include "aalb/tensor.hpp"

namespace aalb::kernels {

std::string_view backend_name(Backend b) {
  switch (b) {
    case Backend::Scalar: return "scalar";
    case Backend::Avx2: return "avx2";
    case Backend::Neon: return "neon";
  }
  return "unknown";
}

std::optional<Backend> parse_backend(std::string_view name) {
  if (name == "scalar") return Backend::Scalar;
  if (name == "avx2") return Backend::Avx2;
  if (name == "neon") return Backend::Neon;
  return std::nullopt;
}

bool backend_supported(Backend b) {
  switch (b) {
    case Backend::Scalar: return true;
    case Backend::Avx2:
#if defined(__x86_64__) || defined(_M_X64)
      return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
      return false;
#endif
    case Backend::Neon:
#if defined(__aarch64__)
      return true;
#else
      return false;
#endif
  }
  return false;
}

std::vector<Backend> supported_backends() {
  std::vector<Backend> out;
  for (auto b : {Backend::Scalar, Backend::Avx2, Backend::Neon}) {
    if (backend_supported(b)) out.push_back(b);
  }
  return out;
}

const KernelTable& table_for(Backend b) {
  if (!backend_supported(b)) {
    throw ConfigError("kernel backend '" + std::string(backend_name(b)) +
                      "' is not supported on this CPU");
  }
  switch (b) {
#if defined(__x86_64__) || defined(_M_X64)
    case Backend::Avx2: return avx2_table();
#endif
#if defined(__aarch64__)
    case Backend::Neon: return neon_table();
#endif
    default: return scalar_table();
  }
}

namespace {

const KernelTable* initial_table() {
  if (const char* env = std::getenv("AALB_KERNELS")) {
    auto b = parse_backend(env);
    if (!b) throw ConfigError(std::string("AALB_KERNELS: unknown backend '") + env + "'");
    return &table_for(*b);
  }
  auto all = supported_backends();
  return &table_for(all.back());
}

std::atomic<const KernelTable*>& slot() {
  static std::atomic<const KernelTable*> current{initial_table()};
  return current;
}

}  // namespace

const KernelTable& active() { return *slot().load(std::memory_order_acquire); }

Backend active_backend() { return active().backend; }

void select_backend(Backend b) { slot().store(&table_for(b), std::memory_order_release); }

}  // namespace aalb::kernels
