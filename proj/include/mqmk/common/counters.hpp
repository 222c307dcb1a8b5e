#pragma once

#include <cstdint>

namespace mqmk {

// Instrumented backbone pass counts, in sample units: a batched forward over
// B samples adds B. Batch counts are tracked alongside so per-batch
// contracts (one forward + one backward) stay checkable.
struct PassCounters {
  std::uint64_t forward_samples = 0;
  std::uint64_t backward_samples = 0;
  std::uint64_t forward_batches = 0;
  std::uint64_t backward_batches = 0;

  void add_forward(std::uint64_t batch) {
    forward_samples += batch;
    forward_batches += 1;
  }
  void add_backward(std::uint64_t batch) {
    backward_samples += batch;
    backward_batches += 1;
  }
  void reset() { *this = PassCounters{}; }

  PassCounters& operator+=(const PassCounters& o) {
    forward_samples += o.forward_samples;
    backward_samples += o.backward_samples;
    forward_batches += o.forward_batches;
    backward_batches += o.backward_batches;
    return *this;
  }
};

}  // namespace mqmk
