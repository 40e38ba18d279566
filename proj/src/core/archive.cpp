#include "defog/archive.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "defog/errors.hpp"

namespace defog {

static_assert(std::endian::native == std::endian::little,
              "archive arrays are stored little-endian; big-endian hosts are unsupported");

namespace {

constexpr char kMagic[8] = {'D', 'E', 'F', 'O', 'G', 'A', 'R', 'C'};
constexpr std::uint32_t kContainerVersion = 1;

std::size_t dtype_size(Archive::DType t) {
  switch (t) {
    case Archive::DType::F32: return 4;
    case Archive::DType::I32: return 4;
    case Archive::DType::U8: return 1;
    case Archive::DType::I64: return 8;
  }
  fail(ErrorKind::Format, "unknown array dtype");
}

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t n) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < n; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
void append_pod(std::vector<std::uint8_t>& out, const T& v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof(T));
}

class Reader {
public:
  explicit Reader(const std::vector<std::uint8_t>& buf) : buf_(buf) {}

  template <typename T>
  T pod() {
    T v;
    std::memcpy(&v, take(sizeof(T)), sizeof(T));
    return v;
  }

  const std::uint8_t* take(std::size_t n) {
    if (n > buf_.size() - pos_) fail(ErrorKind::Format, "archive truncated");
    const auto* p = buf_.data() + pos_;
    pos_ += n;
    return p;
  }

  std::size_t pos() const { return pos_; }

private:
  const std::vector<std::uint8_t>& buf_;
  std::size_t pos_ = 0;
};

template <typename T>
Archive::Array make_array(Archive::DType dtype, std::span<const T> values) {
  Archive::Array a;
  a.dtype = dtype;
  a.bytes.resize(values.size_bytes());
  if (!values.empty()) std::memcpy(a.bytes.data(), values.data(), values.size_bytes());
  return a;
}

template <typename T>
std::vector<T> read_array(const Archive::Array& a, Archive::DType expected, const std::string& name) {
  require(a.dtype == expected, ErrorKind::Format, "array '" + name + "' has unexpected dtype");
  std::vector<T> out(a.bytes.size() / sizeof(T));
  if (!out.empty()) std::memcpy(out.data(), a.bytes.data(), a.bytes.size());
  return out;
}

}  // namespace

std::size_t Archive::Array::count() const { return bytes.size() / dtype_size(dtype); }

void Archive::put_f32(const std::string& name, std::span<const float> values) {
  arrays_[name] = make_array(DType::F32, values);
}
void Archive::put_i32(const std::string& name, std::span<const std::int32_t> values) {
  arrays_[name] = make_array(DType::I32, values);
}
void Archive::put_i64(const std::string& name, std::span<const std::int64_t> values) {
  arrays_[name] = make_array(DType::I64, values);
}
void Archive::put_u8(const std::string& name, std::span<const std::uint8_t> values) {
  arrays_[name] = make_array(DType::U8, values);
}

const Archive::Array& Archive::at(const std::string& name) const {
  auto it = arrays_.find(name);
  if (it == arrays_.end()) fail(ErrorKind::Format, "archive has no array '" + name + "'");
  return it->second;
}

std::vector<float> Archive::get_f32(const std::string& name) const {
  return read_array<float>(at(name), DType::F32, name);
}
std::vector<std::int32_t> Archive::get_i32(const std::string& name) const {
  return read_array<std::int32_t>(at(name), DType::I32, name);
}
std::vector<std::int64_t> Archive::get_i64(const std::string& name) const {
  return read_array<std::int64_t>(at(name), DType::I64, name);
}
std::vector<std::uint8_t> Archive::get_u8(const std::string& name) const {
  return read_array<std::uint8_t>(at(name), DType::U8, name);
}

std::vector<std::string> Archive::names() const {
  std::vector<std::string> out;
  for (const auto& [k, _] : arrays_) out.push_back(k);
  return out;
}

void Archive::save(const std::string& path) const {
  std::vector<std::uint8_t> buf;
  buf.insert(buf.end(), std::begin(kMagic), std::end(kMagic));
  append_pod(buf, kContainerVersion);
  append_pod(buf, static_cast<std::uint64_t>(manifest.size()));
  buf.insert(buf.end(), manifest.begin(), manifest.end());
  append_pod(buf, static_cast<std::uint32_t>(arrays_.size()));
  for (const auto& [name, arr] : arrays_) {
    append_pod(buf, static_cast<std::uint16_t>(name.size()));
    buf.insert(buf.end(), name.begin(), name.end());
    append_pod(buf, static_cast<std::uint8_t>(arr.dtype));
    append_pod(buf, static_cast<std::uint64_t>(arr.count()));
    buf.insert(buf.end(), arr.bytes.begin(), arr.bytes.end());
  }
  append_pod(buf, fnv1a(buf.data(), buf.size()));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorKind::Io, "cannot open '" + path + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
  if (!out) fail(ErrorKind::Io, "failed writing '" + path + "'");
}

Archive Archive::load(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorKind::Io, "cannot open '" + path + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  if (buf.size() < sizeof(kMagic) + 8 || std::memcmp(buf.data(), kMagic, sizeof(kMagic)) != 0) {
    fail(ErrorKind::Format, "'" + path + "' is not a defog archive");
  }
  const std::size_t body = buf.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, buf.data() + body, sizeof(stored));

  Reader r(buf);
  r.take(sizeof(kMagic));
  const auto version = r.pod<std::uint32_t>();
  require(version == kContainerVersion, ErrorKind::Format,
          "unsupported archive container version " + std::to_string(version));

  Archive a;
  const auto mlen = r.pod<std::uint64_t>();
  const auto* m = r.take(mlen);
  a.manifest.assign(reinterpret_cast<const char*>(m), mlen);
  const auto n = r.pod<std::uint32_t>();
  for (std::uint32_t i = 0; i < n; ++i) {
    const auto name_len = r.pod<std::uint16_t>();
    const auto* np = r.take(name_len);
    std::string name(reinterpret_cast<const char*>(np), name_len);
    Array arr;
    arr.dtype = static_cast<DType>(r.pod<std::uint8_t>());
    const auto count = r.pod<std::uint64_t>();
    const std::size_t width = dtype_size(arr.dtype);
    require(count <= buf.size() / width, ErrorKind::Format, "archive truncated");
    const auto* data = r.take(count * width);
    arr.bytes.assign(data, data + count * width);
    a.arrays_[name] = std::move(arr);
  }
  require(r.pos() == body, ErrorKind::Format, "archive truncated or has trailing data");
  require(fnv1a(buf.data(), body) == stored, ErrorKind::Format, "archive checksum mismatch");
  return a;
}

}  // namespace defog
