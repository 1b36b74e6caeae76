#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>

#include "actdec/activation.hpp"

namespace actdec {

namespace {

constexpr char kMagic[4] = {'A', 'E', 'N', 'T'};
constexpr std::size_t kHeaderSize = 4 + 3 * 4 + 8;

template <typename T>
void put_le(std::vector<std::uint8_t>& out, T v) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

template <typename T>
T get_le(const std::uint8_t* p) {
  T v = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i) v |= static_cast<T>(p[i]) << (8 * i);
  return v;
}

}  // namespace

std::vector<std::uint8_t> serialize_entropy_vector(const EntropyVector& ev) {
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  put_le(out, static_cast<std::uint32_t>(ev.layer));
  put_le(out, static_cast<std::uint32_t>(ev.prompt_len));
  put_le(out, static_cast<std::uint32_t>(ev.entropy.size()));
  put_le(out, ev.prompt_hash);
  for (double e : ev.entropy) put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(e)));
  return out;
}

EntropyVector deserialize_entropy_vector(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw std::runtime_error("bad magic: expected \"AENT\"");
  }
  if (bytes.size() < kHeaderSize) throw std::runtime_error("entropy cache header truncated");
  const std::uint8_t* p = bytes.data() + 4;
  EntropyVector ev;
  ev.layer = get_le<std::uint32_t>(p);
  ev.prompt_len = get_le<std::uint32_t>(p + 4);
  const auto vocab = get_le<std::uint32_t>(p + 8);
  ev.prompt_hash = get_le<std::uint64_t>(p + 12);
  if (bytes.size() != kHeaderSize + std::size_t{vocab} * 4) {
    throw std::runtime_error("entropy cache size mismatch");
  }
  ev.entropy.resize(vocab);
  p = bytes.data() + kHeaderSize;
  for (std::uint32_t v = 0; v < vocab; ++v) ev.entropy[v] = std::bit_cast<float>(get_le<std::uint32_t>(p + 4 * v));
  return ev;
}

void save_entropy_vector(const EntropyVector& ev, const std::filesystem::path& path) {
  const auto bytes = serialize_entropy_vector(ev);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

EntropyVector load_entropy_vector(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open entropy cache " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_entropy_vector(bytes);
}

}  // namespace actdec
