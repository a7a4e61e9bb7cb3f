#include <cstdlib>
#include <cstring>

#include "capsbench/kernels.hpp"

namespace capsbench::kernels {

bool avx2_available() {
#if defined(__x86_64__) || defined(_M_X64)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

const Kernels& select() {
  const char* forced = std::getenv("CAPSBENCH_KERNELS");
  if (forced != nullptr) {
    if (std::strcmp(forced, "scalar") == 0) return scalar_table();
#if defined(__x86_64__) || defined(_M_X64)
    if (std::strcmp(forced, "avx2") == 0 && avx2_available()) return avx2_table();
#endif
  }
#if defined(__x86_64__) || defined(_M_X64)
  if (avx2_available()) return avx2_table();
#endif
  return scalar_table();
}

}  // namespace

const Kernels& active() {
  static const Kernels& chosen = select();
  return chosen;
}

}  // namespace capsbench::kernels
