#include "mhl/checkpoint.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>

#include "mhl/error.hpp"
#include "mhl/hash.hpp"

namespace mhl {
namespace {

constexpr char kMagic[8] = {'M', 'H', 'L', 'C', 'K', 'P', 'T', '\0'};

template <class T>
void put(std::string& out, T v) {
  if constexpr (std::endian::native == std::endian::big) {
    auto b = std::bit_cast<std::array<char, sizeof(T)>>(v);
    std::reverse(b.begin(), b.end());
    out.append(b.data(), sizeof(T));
  } else {
    char b[sizeof(T)];
    std::memcpy(b, &v, sizeof(T));
    out.append(b, sizeof(T));
  }
}

class Cursor {
 public:
  explicit Cursor(const std::string& s) : s_(s) {}

  template <class T>
  T get() {
    need(sizeof(T));
    std::array<char, sizeof(T)> b;
    std::memcpy(b.data(), s_.data() + pos_, sizeof(T));
    if constexpr (std::endian::native == std::endian::big) std::reverse(b.begin(), b.end());
    pos_ += sizeof(T);
    return std::bit_cast<T>(b);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string r = s_.substr(pos_, n);
    pos_ += n;
    return r;
  }

  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (s_.size() - pos_ < n) throw_data("checkpoint: truncated file");
  }

  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

const Eigen::VectorXd& Checkpoint::blob(const std::string& name) const {
  for (const auto& [n, v] : blobs)
    if (n == name) return v;
  throw_data("checkpoint: missing blob '" + name + "'");
}

bool Checkpoint::has_blob(const std::string& name) const {
  for (const auto& [n, v] : blobs)
    if (n == name) return true;
  return false;
}

std::string serialize_checkpoint(const Checkpoint& ck) {
  nlohmann::json header = ck.header;
  header["blobs"] = nlohmann::json::array();
  for (const auto& [name, v] : ck.blobs) header["blobs"].push_back({{"name", name}, {"size", v.size()}});
  const std::string h = header.dump();

  std::string out(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, Checkpoint::kVersion);
  put<std::uint64_t>(out, h.size());
  out += h;
  for (const auto& [name, v] : ck.blobs)
    for (Eigen::Index i = 0; i < v.size(); ++i) put<double>(out, v(i));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  Cursor in(bytes);
  if (in.bytes(sizeof(kMagic)) != std::string(kMagic, sizeof(kMagic))) throw_data("checkpoint: bad magic");
  const auto version = in.get<std::uint32_t>();
  if (version != Checkpoint::kVersion)
    throw_data("checkpoint: unsupported version " + std::to_string(version));
  const auto hlen = in.get<std::uint64_t>();
  Checkpoint ck;
  try {
    ck.header = nlohmann::json::parse(in.bytes(static_cast<std::size_t>(hlen)));
  } catch (const nlohmann::json::exception& e) {
    throw_data(std::string("checkpoint header: ") + e.what());
  }
  const nlohmann::json specs = ck.header.value("blobs", nlohmann::json::array());
  ck.header.erase("blobs");
  for (const auto& spec : specs) {
    const auto n = spec.at("size").get<Eigen::Index>();
    Eigen::VectorXd v(n);
    for (Eigen::Index i = 0; i < n; ++i) v(i) = in.get<double>();
    ck.blobs.emplace_back(spec.at("name").get<std::string>(), std::move(v));
  }
  if (!in.done()) throw_data("checkpoint: trailing bytes");
  return ck;
}

void write_checkpoint(const std::filesystem::path& path, const Checkpoint& ck) {
  // Write-then-rename so readers never observe a partial file.
  const std::filesystem::path tmp = path.string() + ".tmp";
  write_file(tmp, serialize_checkpoint(ck));
  std::filesystem::rename(tmp, path);
}

Checkpoint read_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

}  // namespace mhl
