#pragma once

#include <torch/torch.h>

#include <cstdint>
#include <string_view>

namespace avedit {

// FNV-1a, 64 bit. Used for bit-exact equality digests, not for security.
class Fnv1a {
 public:
  void update(const void* data, size_t size) {
    const auto* p = static_cast<const uint8_t*>(data);
    for (size_t i = 0; i < size; ++i) {
      state_ ^= p[i];
      state_ *= 0x100000001b3ULL;
    }
  }
  void update(std::string_view s) { update(s.data(), s.size()); }
  void update(const torch::Tensor& t) {
    auto c = t.detach().contiguous();
    const int64_t ndim = c.dim();
    update(&ndim, sizeof(ndim));
    for (auto s : c.sizes()) update(&s, sizeof(s));
    update(c.data_ptr(), static_cast<size_t>(c.numel()) * c.element_size());
  }
  template <typename T>
    requires std::is_arithmetic_v<T>
  void update_value(T v) {
    update(&v, sizeof(v));
  }
  uint64_t digest() const { return state_; }

 private:
  uint64_t state_ = 0xcbf29ce484222325ULL;
};

}  // namespace avedit
