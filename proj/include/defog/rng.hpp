#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace defog {

/// Labeled child streams derived from one root seed. Each consumer (mask
/// sampling, env dropping, policy sampling, ...) gets its own stream, so adding
/// or removing draws in one never shifts another.
class SeedTree {
public:
  explicit SeedTree(std::uint64_t root) : root_(root) {}

  std::uint64_t root() const { return root_; }

  /// Seed for the child labeled `label`.
  std::uint64_t derive(std::string_view label) const;
  /// Seed for the `index`-th child under `label`.
  std::uint64_t derive(std::string_view label, std::uint64_t index) const;

  SeedTree child(std::string_view label) const { return SeedTree(derive(label)); }
  SeedTree child(std::string_view label, std::uint64_t index) const {
    return SeedTree(derive(label, index));
  }

  std::mt19937_64 engine(std::string_view label) const {
    return std::mt19937_64(derive(label));
  }

private:
  std::uint64_t root_;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Text round-trip of the engine's full state.
std::string engine_state(const std::mt19937_64& engine);
void restore_engine_state(std::mt19937_64& engine, const std::string& state);

}  // namespace defog
