#pragma once

#include <vector>

#include "detcid/synthesis.hpp"

namespace detcid::testing {

/// `n` synthetic 64x64 images with 1 to 3 cells each.
inline std::vector<synthesis::AnnotatedImage> toy_images(int n, std::uint64_t seed, int first = 0) {
  static const auto pool = synthesis::make_toy_pool(synthesis::ToyPoolConfig{});
  synthesis::SynthesisConfig cfg = synthesis::toy_synthesis_config();
  cfg.seed = seed;
  std::vector<synthesis::AnnotatedImage> out;
  for (int i = first; i < first + n; ++i) {
    auto s = synthesis::synthesize_indexed(pool, cfg, static_cast<std::uint64_t>(i));
    synthesis::AnnotatedImage a;
    a.id = std::to_string(i);
    a.image = std::move(s.image);
    a.masks = std::move(s.truth);
    out.push_back(std::move(a));
  }
  return out;
}

}  // namespace detcid::testing
