#include "labdyn/parallel.hpp"

#include <stdexcept>

namespace labdyn {

namespace {
std::atomic<int> g_threads{1};
}

int num_threads() noexcept { return g_threads.load(); }

void set_num_threads(int n) {
  if (n < 1) throw std::invalid_argument("thread count must be >= 1");
  g_threads.store(n);
}

}  // namespace labdyn
