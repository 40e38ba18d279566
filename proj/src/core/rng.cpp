#include "defog/rng.hpp"

#include <sstream>

#include "defog/errors.hpp"

namespace defog {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

namespace {

// FNV-1a; labels are short fixed strings so quality only needs to be decent
// before the splitmix finalizer.
std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : label) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

}  // namespace

std::uint64_t SeedTree::derive(std::string_view label) const {
  return splitmix64(root_ ^ splitmix64(hash_label(label)));
}

std::uint64_t SeedTree::derive(std::string_view label, std::uint64_t index) const {
  return splitmix64(derive(label) + splitmix64(index + 0x632be59bd9b4e019ULL));
}

std::string engine_state(const std::mt19937_64& engine) {
  std::ostringstream os;
  os << engine;
  return os.str();
}

void restore_engine_state(std::mt19937_64& engine, const std::string& state) {
  std::istringstream is(state);
  is >> engine;
  require(!is.fail(), ErrorKind::Format, "corrupt random engine state");
}

}  // namespace defog
