#include "pccforge/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace pccforge {

namespace {

void put_u64(std::ostream& out, std::uint64_t v) {
  char bytes[8];
  for (int i = 0; i < 8; ++i) bytes[i] = static_cast<char>((v >> (8 * i)) & 0xffu);
  out.write(bytes, 8);
}

void put_string(std::ostream& out, const std::string& s) {
  put_u64(out, s.size());
  out.write(s.data(), static_cast<std::streamsize>(s.size()));
}

class Reader {
 public:
  Reader(std::istream& in, const std::filesystem::path& path) : in_(in), path_(path) {}

  std::uint64_t u64() {
    unsigned char bytes[8];
    read(reinterpret_cast<char*>(bytes), 8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(bytes[i]) << (8 * i);
    return v;
  }

  std::string string() {
    const std::uint64_t n = u64();
    if (n > (1u << 20)) fail("string length out of range");
    std::string s(n, '\0');
    read(s.data(), static_cast<std::streamsize>(n));
    return s;
  }

  double f64() { return std::bit_cast<double>(u64()); }

  [[noreturn]] void fail(const std::string& what) const {
    throw FormatError("checkpoint " + path_.string() + ": " + what);
  }

 private:
  void read(char* dst, std::streamsize n) {
    if (!in_.read(dst, n)) fail("truncated file");
  }
  std::istream& in_;
  const std::filesystem::path& path_;
};

}  // namespace

const std::string& Checkpoint::meta(const std::string& key) const {
  auto it = metadata.find(key);
  if (it == metadata.end()) throw FormatError("checkpoint metadata is missing '" + key + "'");
  return it->second;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write checkpoint " + path.string());
  out << kCheckpointMagic << '\n';
  put_u64(out, checkpoint.metadata.size());
  for (const auto& [k, v] : checkpoint.metadata) {
    put_string(out, k);
    put_string(out, v);
  }
  const ParamStore& params = checkpoint.params;
  put_u64(out, params.size());
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& m = params.value(i);
    put_string(out, params.name(i));
    put_u64(out, static_cast<std::uint64_t>(m.rows()));
    put_u64(out, static_cast<std::uint64_t>(m.cols()));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) put_u64(out, std::bit_cast<std::uint64_t>(m(r, c)));
  }
  if (!out) throw IoError("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  std::string magic;
  std::getline(in, magic);
  if (magic != kCheckpointMagic) throw FormatError("checkpoint " + path.string() + ": bad header '" + magic + "'");
  Reader reader(in, path);
  Checkpoint ckpt;
  const std::uint64_t meta = reader.u64();
  for (std::uint64_t i = 0; i < meta; ++i) {
    std::string k = reader.string();
    ckpt.metadata[k] = reader.string();
  }
  const std::uint64_t arrays = reader.u64();
  for (std::uint64_t i = 0; i < arrays; ++i) {
    std::string name = reader.string();
    const std::uint64_t rows = reader.u64();
    const std::uint64_t cols = reader.u64();
    if (rows * cols > (1ull << 32)) reader.fail("array '" + name + "' too large");
    Matrix m(static_cast<Index>(rows), static_cast<Index>(cols));
    for (Index r = 0; r < m.rows(); ++r)
      for (Index c = 0; c < m.cols(); ++c) m(r, c) = reader.f64();
    if (!m.allFinite()) reader.fail("array '" + name + "' contains non-finite values");
    ckpt.params.add(name, std::move(m));
  }
  return ckpt;
}

}  // namespace pccforge
