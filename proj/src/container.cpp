#include "rxf/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace rxf {

namespace {

constexpr char kMagic[4] = {'R', 'X', 'F', '1'};

template <typename T>
void put(std::string& out, T v) {
  static_assert(std::is_integral_v<T>);
  using U = std::make_unsigned_t<T>;
  U u = static_cast<U>(v);
  for (std::size_t i = 0; i < sizeof(T); ++i) {
    out.push_back(static_cast<char>(u & 0xff));
    u = static_cast<U>(u >> 8);
  }
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  template <typename T>
  T get(const char* what) {
    need(sizeof(T), what);
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= std::uint64_t(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }

  std::string take(std::uint64_t n, const char* what) {
    need(n, what);
    std::string s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

  std::size_t pos() const { return pos_; }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > bytes_.size() - pos_) {
      throw std::runtime_error(std::string("container truncated while reading ") + what);
    }
  }
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

std::size_t dtype_size(Dtype d) { return d == Dtype::kF32 ? 4 : 8; }

}  // namespace

void Container::add(std::string name, const Tensor& t, Dtype dtype) {
  if (contains(name)) throw std::invalid_argument("container: duplicate tensor " + name);
  entries.push_back({std::move(name), dtype, t});
}

bool Container::contains(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return true;
  }
  return false;
}

const Tensor& Container::get(const std::string& name) const {
  for (const auto& e : entries) {
    if (e.name == name) return e.tensor;
  }
  throw std::out_of_range("container has no tensor named '" + name + "'");
}

std::string encode_container(const Container& c) {
  std::string payload;
  std::string table;
  for (const auto& e : c.entries) {
    put<std::uint32_t>(table, static_cast<std::uint32_t>(e.name.size()));
    table += e.name;
    put<std::uint8_t>(table, static_cast<std::uint8_t>(e.dtype));
    put<std::uint32_t>(table, static_cast<std::uint32_t>(e.tensor.rank()));
    for (int d : e.tensor.shape()) put<std::uint64_t>(table, static_cast<std::uint64_t>(d));
    put<std::uint64_t>(table, payload.size());
    for (double v : e.tensor.values()) {
      if (e.dtype == Dtype::kF32) {
        put<std::uint32_t>(payload, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
      } else {
        put<std::uint64_t>(payload, std::bit_cast<std::uint64_t>(v));
      }
    }
  }
  std::string out(kMagic, 4);
  put<std::uint32_t>(out, kContainerVersion);
  put<std::uint8_t>(out, 1);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(c.entries.size()));
  out += table;
  put<std::uint64_t>(out, payload.size());
  out += payload;
  const std::string meta = c.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out += meta;
  return out;
}

Container decode_container(const std::string& bytes) {
  Reader r(bytes);
  if (r.take(4, "magic") != std::string(kMagic, 4)) throw std::runtime_error("not an RXF1 container");
  const auto version = r.get<std::uint32_t>("version");
  if (version != kContainerVersion) {
    throw std::runtime_error("unsupported container version " + std::to_string(version));
  }
  if (r.get<std::uint8_t>("endianness") != 1) throw std::runtime_error("unsupported byte order");
  const auto count = r.get<std::uint32_t>("tensor count");

  struct Header {
    std::string name;
    Dtype dtype;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Header> headers;
  for (std::uint32_t i = 0; i < count; ++i) {
    Header h;
    h.name = r.take(r.get<std::uint32_t>("name length"), "name");
    const auto dt = r.get<std::uint8_t>("dtype");
    if (dt > 1) throw std::runtime_error("unknown dtype code " + std::to_string(dt) + " for " + h.name);
    h.dtype = static_cast<Dtype>(dt);
    const auto rank = r.get<std::uint32_t>("rank");
    if (rank > 8) throw std::runtime_error("implausible rank for " + h.name);
    for (std::uint32_t k = 0; k < rank; ++k) {
      const auto d = r.get<std::uint64_t>("dims");
      if (d > (1u << 30)) throw std::runtime_error("implausible dimension for " + h.name);
      h.shape.push_back(static_cast<int>(d));
    }
    h.offset = r.get<std::uint64_t>("payload offset");
    headers.push_back(std::move(h));
  }
  const auto payload_size = r.get<std::uint64_t>("payload size");
  const std::string payload = r.take(payload_size, "payload");
  const auto meta_size = r.get<std::uint64_t>("metadata length");
  const std::string meta = r.take(meta_size, "metadata");

  Container c;
  for (auto& h : headers) {
    const std::int64_t n = numel(h.shape);
    const std::size_t width = dtype_size(h.dtype);
    if (h.offset > payload.size() || n * width > payload.size() - h.offset) {
      throw std::runtime_error("payload range out of bounds for " + h.name);
    }
    Array values(n);
    const auto* p = reinterpret_cast<const unsigned char*>(payload.data() + h.offset);
    for (std::int64_t i = 0; i < n; ++i) {
      std::uint64_t bits = 0;
      for (std::size_t b = 0; b < width; ++b) bits |= std::uint64_t(p[i * width + b]) << (8 * b);
      values[i] = h.dtype == Dtype::kF32 ? static_cast<double>(std::bit_cast<float>(static_cast<std::uint32_t>(bits)))
                                         : std::bit_cast<double>(bits);
    }
    c.add(h.name, Tensor(h.shape, std::move(values)), h.dtype);
  }
  try {
    c.metadata = meta.empty() ? nlohmann::json::object() : nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error(std::string("container metadata is not valid JSON: ") + e.what());
  }
  return c;
}

void save_container(const std::filesystem::path& path, const Container& c) {
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  const std::string bytes = encode_container(c);
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw std::runtime_error("failed writing " + path.string());
}

Container load_container(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  try {
    return decode_container(ss.str());
  } catch (const std::runtime_error& e) {
    throw std::runtime_error(path.string() + ": " + e.what());
  }
}

}  // namespace rxf
