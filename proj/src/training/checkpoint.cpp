#include <bit>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include "nsbert/errors.hpp"
#include "nsbert/rng.hpp"
#include "nsbert/training.hpp"

namespace nsbert {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[6] = {'N', 'S', 'I', 'M', 'U', '1'};

std::uint64_t fnv1a_bytes(const std::string& bytes) {
  return fnv1a(std::string_view(bytes.data(), bytes.size()));
}

class Writer {
 public:
  template <class V>
  void pod(V v) {
    char buf[sizeof(V)];
    std::memcpy(buf, &v, sizeof(V));
    out_.append(buf, sizeof(V));
  }
  void bytes(const void* p, std::size_t n) { out_.append(static_cast<const char*>(p), n); }
  void str(const std::string& s) {
    pod(static_cast<std::uint32_t>(s.size()));
    out_ += s;
  }
  std::string& buffer() { return out_; }

 private:
  std::string out_;
};

class Reader {
 public:
  Reader(const std::string& data, std::size_t end) : data_(data), end_(end) {}

  template <class V>
  V pod() {
    need(sizeof(V));
    V v;
    std::memcpy(&v, data_.data() + pos_, sizeof(V));
    pos_ += sizeof(V);
    return v;
  }
  void bytes(void* p, std::size_t n) {
    need(n);
    std::memcpy(p, data_.data() + pos_, n);
    pos_ += n;
  }
  std::string str() {
    const auto n = pod<std::uint32_t>();
    need(n);
    std::string s = data_.substr(pos_, n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return end_ - pos_; }

 private:
  void need(std::size_t n) const {
    if (n > end_ - pos_) throw CheckpointError("corrupt checkpoint: unexpected end of data");
  }

  const std::string& data_;
  std::size_t end_;
  std::size_t pos_ = sizeof(kMagic);
};

std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::size_t to_size(const std::map<std::string, std::string>& kv, const std::string& key, std::size_t fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const long long v = std::stoll(it->second, &used);
    if (used != it->second.size() || v < 0) throw std::invalid_argument(key);
    return static_cast<std::size_t>(v);
  } catch (const std::exception&) {
    throw ConfigError("invalid value for " + key + ": '" + it->second + "'");
  }
}

double to_double(const std::map<std::string, std::string>& kv, const std::string& key, double fallback) {
  auto it = kv.find(key);
  if (it == kv.end()) return fallback;
  try {
    std::size_t used = 0;
    const double v = std::stod(it->second, &used);
    if (used != it->second.size()) throw std::invalid_argument(key);
    return v;
  } catch (const std::exception&) {
    throw ConfigError("invalid value for " + key + ": '" + it->second + "'");
  }
}

}  // namespace

std::string config_text(const ModelConfig& c) {
  std::ostringstream os;
  const auto& e = c.encoder;
  os << "encoder.seq_len=" << e.seq_len << '\n'
     << "encoder.input_features=" << e.input_features << '\n'
     << "encoder.hidden=" << e.hidden << '\n'
     << "encoder.layers=" << e.layers << '\n'
     << "encoder.heads=" << e.heads << '\n'
     << "encoder.feedforward=" << e.feedforward << '\n'
     << "encoder.projector_hidden=" << e.projector_hidden << '\n'
     << "encoder.dropout=" << fmt_double(e.dropout) << '\n'
     << "encoder.variant=" << to_string(e.variant) << '\n'
     << "classifier.gru_hidden=" << c.classifier.gru_hidden << '\n'
     << "classifier.num_classes=" << c.classifier.num_classes << '\n';
  return os.str();
}

ModelConfig parse_model_config(const std::map<std::string, std::string>& kv) {
  ModelConfig c;
  auto& e = c.encoder;
  e.seq_len = to_size(kv, "encoder.seq_len", e.seq_len);
  e.input_features = to_size(kv, "encoder.input_features", e.input_features);
  e.hidden = to_size(kv, "encoder.hidden", e.hidden);
  e.layers = to_size(kv, "encoder.layers", e.layers);
  e.heads = to_size(kv, "encoder.heads", e.heads);
  e.feedforward = to_size(kv, "encoder.feedforward", e.feedforward);
  e.projector_hidden = to_size(kv, "encoder.projector_hidden", e.projector_hidden);
  e.dropout = to_double(kv, "encoder.dropout", e.dropout);
  if (auto it = kv.find("encoder.variant"); it != kv.end()) e.variant = parse_variant(it->second);
  c.classifier.gru_hidden = to_size(kv, "classifier.gru_hidden", c.classifier.gru_hidden);
  c.classifier.num_classes = to_size(kv, "classifier.num_classes", c.classifier.num_classes);
  return c;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  if (ckpt.norm.mean.size() != ckpt.norm.stddev.size()) throw CheckpointError("normalization stats disagree in length");
  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.pod(Checkpoint::kFormatVersion);
  std::string text = config_text(ckpt.config);
  for (const auto& [k, v] : ckpt.meta) {
    if (k.find_first_of("=\n") != std::string::npos || v.find('\n') != std::string::npos) {
      throw CheckpointError("metadata entries may not contain '=' in keys or newlines: " + k);
    }
    text += "meta." + k + "=" + v + "\n";
  }
  w.str(text);
  w.pod(static_cast<std::uint32_t>(ckpt.norm.mean.size()));
  w.bytes(ckpt.norm.mean.data(), ckpt.norm.mean.size() * sizeof(double));
  w.bytes(ckpt.norm.stddev.data(), ckpt.norm.stddev.size() * sizeof(double));
  w.pod(static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, arr] : ckpt.params) {
    w.str(name);
    w.pod(static_cast<std::uint32_t>(arr.rank()));
    for (std::size_t d : arr.shape()) w.pod(static_cast<std::uint32_t>(d));
  }
  for (const auto& [name, arr] : ckpt.params) w.bytes(arr.ptr(), arr.size() * sizeof(float));
  w.pod(fnv1a_bytes(w.buffer()));

  const auto tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint " + path.string());
    out.write(w.buffer().data(), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw Error("cannot write checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint " + path.string());
  const std::string data((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = path.string() + ": ";
  if (data.size() < sizeof kMagic + sizeof(std::uint32_t) + sizeof(std::uint64_t) ||
      std::memcmp(data.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointError(where + "not a checkpoint file");
  }
  const std::size_t body = data.size() - sizeof(std::uint64_t);
  std::uint64_t stored;
  std::memcpy(&stored, data.data() + body, sizeof stored);
  if (stored != fnv1a_bytes(data.substr(0, body))) throw CheckpointError(where + "corrupt checkpoint: checksum mismatch");

  Reader r(data, body);
  const auto version = r.pod<std::uint32_t>();
  if (version != Checkpoint::kFormatVersion) {
    throw CheckpointError(where + "unsupported checkpoint version " + std::to_string(version) + " (expected " +
                          std::to_string(Checkpoint::kFormatVersion) + ")");
  }
  Checkpoint ckpt;
  std::map<std::string, std::string> kv;
  std::istringstream text(r.str());
  for (std::string line; std::getline(text, line);) {
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw CheckpointError(where + "corrupt config line '" + line + "'");
    const std::string key = line.substr(0, eq);
    if (key.rfind("meta.", 0) == 0) {
      ckpt.meta[key.substr(5)] = line.substr(eq + 1);
    } else {
      kv[key] = line.substr(eq + 1);
    }
  }
  try {
    ckpt.config = parse_model_config(kv);
  } catch (const Error& e) {
    throw CheckpointError(where + e.what());
  }

  const auto f = r.pod<std::uint32_t>();
  ckpt.norm.mean.resize(f);
  ckpt.norm.stddev.resize(f);
  r.bytes(ckpt.norm.mean.data(), f * sizeof(double));
  r.bytes(ckpt.norm.stddev.data(), f * sizeof(double));

  const auto count = r.pod<std::uint32_t>();
  std::vector<std::pair<std::string, Shape>> table;
  std::size_t payload = 0;
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str();
    const auto rank = r.pod<std::uint32_t>();
    if (rank > 8) throw CheckpointError(where + "shape table: implausible rank for " + name);
    Shape shape(rank);
    for (auto& d : shape) {
      d = r.pod<std::uint32_t>();
      if (d == 0) throw CheckpointError(where + "shape table: zero dimension in " + name);
    }
    payload += shape_size(shape);
    if (!table.empty() && !(table.back().first < name)) {
      throw CheckpointError(where + "shape table: names out of order at " + name);
    }
    table.emplace_back(std::move(name), std::move(shape));
  }
  if (payload * sizeof(float) != r.remaining()) {
    throw CheckpointError(where + "shape table does not match payload size");
  }
  for (auto& [name, shape] : table) {
    std::vector<float> values(shape_size(shape));
    r.bytes(values.data(), values.size() * sizeof(float));
    ckpt.params.emplace(name, Array<float>(shape, std::move(values)));
  }
  return ckpt;
}

void check_compatible(const Checkpoint& ckpt, std::size_t seq_len, std::size_t features) {
  const auto& e = ckpt.config.encoder;
  if (e.seq_len != seq_len || e.input_features != features) {
    throw CheckpointError("checkpoint encoder expects windows of [" + std::to_string(e.seq_len) + ", " +
                          std::to_string(e.input_features) + "] but the data has [" + std::to_string(seq_len) + ", " +
                          std::to_string(features) + "]");
  }
  if (!ckpt.norm.mean.empty() && ckpt.norm.features() != features) {
    throw CheckpointError("checkpoint normalization covers " + std::to_string(ckpt.norm.features()) +
                          " features but the data has " + std::to_string(features));
  }
}

}  // namespace nsbert
