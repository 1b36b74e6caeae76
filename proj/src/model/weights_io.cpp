// TTM1 layout (all integers little-endian):
//   "TTM1"
//   u32 num_layers, hidden_dim, num_heads, vocab_size, max_context
//   f32 tensors in ModelWeights::for_each_tensor order
//   vocab_size x { u32 byte_length, bytes }
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "actdec/model.hpp"

namespace actdec {

namespace {

constexpr char kMagic[4] = {'T', 'T', 'M', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int shift = 0; shift < 32; shift += 8) out.push_back(static_cast<std::uint8_t>(v >> shift));
}

class Reader {
public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  void need(std::size_t n, const char* what) const {
    if (bytes_.size() - pos_ < n) {
      throw ModelFormatError(std::string("size mismatch: file ends inside ") + what + " (offset " +
                             std::to_string(pos_) + ", need " + std::to_string(n) + " more bytes)");
    }
  }

  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
    pos_ += 4;
    return v;
  }

  void floats(std::vector<float>& out) {
    need(out.size() * 4, "weight payload");
    for (float& f : out) {
      std::uint32_t bits = 0;
      for (int i = 0; i < 4; ++i) bits |= std::uint32_t{bytes_[pos_ + i]} << (8 * i);
      f = std::bit_cast<float>(bits);
      pos_ += 4;
    }
  }

  std::string string(std::size_t n) {
    need(n, "vocabulary");
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

private:
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> serialize_model(const TinyTransformer& model) {
  const auto& s = model.spec();
  std::vector<std::uint8_t> out(std::begin(kMagic), std::end(kMagic));
  for (auto v : {s.num_layers, s.hidden_dim, s.num_heads, s.vocab_size, s.max_context}) put_u32(out, v);
  ModelWeights::for_each_tensor(model.weights(), [&](const std::vector<float>& t) {
    for (float f : t) put_u32(out, std::bit_cast<std::uint32_t>(f));
  });
  for (const auto& piece : model.tokenizer().vocab()) {
    put_u32(out, static_cast<std::uint32_t>(piece.size()));
    out.insert(out.end(), piece.begin(), piece.end());
  }
  return out;
}

TinyTransformer deserialize_model(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMagic, 4) != 0) {
    throw ModelFormatError("bad magic: expected \"TTM1\"");
  }
  Reader r(bytes.subspan(4));
  ModelSpec spec;
  spec.num_layers = r.u32("header");
  spec.hidden_dim = r.u32("header");
  spec.num_heads = r.u32("header");
  spec.vocab_size = r.u32("header");
  spec.max_context = r.u32("header");
  try {
    spec.validate();
  } catch (const std::invalid_argument& e) {
    throw ModelFormatError(std::string("invalid header: ") + e.what());
  }
  // Reject headers whose payload cannot fit before allocating it.
  const std::size_t d = spec.hidden_dim, v = spec.vocab_size;
  const std::size_t per_block = 4 * d + 3 * d * d + 3 * d + d * d + d + 2 * 4 * d * d + 4 * d + d;
  const std::size_t floats = 2 * v * d + std::size_t{spec.max_context} * d + spec.num_layers * per_block + 2 * d;
  r.need(floats * 4, "weight payload");

  ModelWeights w = ModelWeights::zeros(spec);
  ModelWeights::for_each_tensor(w, [&](std::vector<float>& t) { r.floats(t); });

  std::vector<std::string> vocab;
  vocab.reserve(v);
  for (std::size_t i = 0; i < v; ++i) vocab.push_back(r.string(r.u32("vocabulary")));
  if (r.remaining() != 0) {
    throw ModelFormatError("size mismatch: " + std::to_string(r.remaining()) + " trailing bytes after vocabulary");
  }
  return TinyTransformer(spec, std::move(w), Tokenizer(std::move(vocab)));
}

void save_model(const TinyTransformer& model, const std::filesystem::path& path) {
  const auto bytes = serialize_model(model);
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("failed writing " + path.string());
}

TinyTransformer load_model(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open model file " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_model(bytes);
}

}  // namespace actdec
