#include "mslae/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <set>

#include "mslae/config.hpp"
#include "mslae/error.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace mslae {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'L', 'A', 'E', 'C', 'K', 'P'};
constexpr uint32_t kMaxName = 4096;

enum RecordKind : uint8_t { param = 0, running_mean = 1, running_var = 2, extra = 3 };

static_assert(std::endian::native == std::endian::little || std::endian::native == std::endian::big);

uint32_t to_le(uint32_t v) {
  if constexpr (std::endian::native == std::endian::big)
    return ((v & 0xFFu) << 24) | ((v & 0xFF00u) << 8) | ((v >> 8) & 0xFF00u) | (v >> 24);
  return v;
}

class Writer {
 public:
  void bytes(const void* p, size_t n) {
    const auto* b = static_cast<const uint8_t*>(p);
    buf_.insert(buf_.end(), b, b + n);
  }
  void u8(uint8_t v) { buf_.push_back(v); }
  void u32(uint32_t v) {
    v = to_le(v);
    bytes(&v, 4);
  }
  void str(const std::string& s) {
    u32(static_cast<uint32_t>(s.size()));
    bytes(s.data(), s.size());
  }
  void floats(std::span<const float> v) {
    for (float f : v) u32(std::bit_cast<uint32_t>(f));
  }
  void record(RecordKind kind, const std::string& name, const Shape& s, std::span<const float> data) {
    u8(kind);
    str(name);
    for (int64_t d : {s.n, s.c, s.h, s.w}) u32(static_cast<uint32_t>(d));
    floats(data);
  }
  const std::vector<uint8_t>& buffer() const { return buf_; }

 private:
  std::vector<uint8_t> buf_;
};

class Reader {
 public:
  explicit Reader(std::vector<uint8_t> data) : data_(std::move(data)) {}
  bool at_end() const { return pos_ == data_.size(); }
  size_t remaining() const { return data_.size() - pos_; }

  void need(size_t n, const char* what) const {
    if (remaining() < n)
      throw CheckpointError(CheckpointErrorKind::truncated, std::string("file ends inside ") + what);
  }
  uint8_t u8(const char* what) {
    need(1, what);
    return data_[pos_++];
  }
  uint32_t u32(const char* what) {
    need(4, what);
    uint32_t v;
    std::memcpy(&v, data_.data() + pos_, 4);
    pos_ += 4;
    return to_le(v);
  }
  std::string str(const char* what, uint32_t max) {
    const uint32_t n = u32(what);
    if (n > max) throw CheckpointError(CheckpointErrorKind::malformed, std::string(what) + " length is implausible");
    need(n, what);
    std::string s(reinterpret_cast<const char*>(data_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::vector<float> floats(size_t count, const char* what) {
    if (count > remaining() / 4) throw CheckpointError(CheckpointErrorKind::truncated, std::string("file ends inside ") + what);
    std::vector<float> v(count);
    for (float& f : v) f = std::bit_cast<float>(u32(what));
    return v;
  }

 private:
  std::vector<uint8_t> data_;
  size_t pos_ = 0;
};

struct Record {
  RecordKind kind;
  std::string name;
  Shape shape;
  std::vector<float> data;
};

struct ParsedCheckpoint {
  json header;
  NetworkConfig config;
  uint64_t seed = 0;
  std::vector<Record> records;
};

ParsedCheckpoint parse(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  Reader r(std::vector<uint8_t>{std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()});

  r.need(sizeof kMagic, "the signature");
  for (char c : kMagic)
    if (r.u8("the signature") != static_cast<uint8_t>(c))
      throw CheckpointError(CheckpointErrorKind::malformed, path.string() + " is not a checkpoint file");
  const uint32_t version = r.u32("the version field");
  if (version != kCheckpointVersion)
    throw CheckpointError(CheckpointErrorKind::version_mismatch, "file version " + std::to_string(version) +
                                                                     ", this build reads version " +
                                                                     std::to_string(kCheckpointVersion));
  ParsedCheckpoint p;
  const std::string header = r.str("the header", 1u << 30);
  try {
    p.header = json::parse(header);
    p.config = network_config_from_json(p.header.at("config"));
    p.seed = p.header.at("seed").get<uint64_t>();
  } catch (const json::exception& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("bad header: ") + e.what());
  } catch (const ConfigError& e) {
    throw CheckpointError(CheckpointErrorKind::malformed, std::string("bad stored config: ") + e.what());
  }
  const uint32_t count = r.u32("the record count");
  std::set<std::pair<int, std::string>> seen;
  for (uint32_t i = 0; i < count; ++i) {
    Record rec;
    const uint8_t kind = r.u8("a record");
    if (kind > extra) throw CheckpointError(CheckpointErrorKind::malformed, "unknown record kind " + std::to_string(kind));
    rec.kind = static_cast<RecordKind>(kind);
    rec.name = r.str("a record name", kMaxName);
    rec.shape.n = r.u32("a record shape");
    rec.shape.c = r.u32("a record shape");
    rec.shape.h = r.u32("a record shape");
    rec.shape.w = r.u32("a record shape");
    const unsigned __int128 n = static_cast<unsigned __int128>(rec.shape.n) * rec.shape.c * rec.shape.h * rec.shape.w;
    if (n > r.remaining() / 4)
      throw CheckpointError(CheckpointErrorKind::truncated, "file ends inside tensor '" + rec.name + "'");
    rec.data = r.floats(static_cast<size_t>(n), "tensor data");
    if (!seen.insert({kind, rec.name}).second)
      throw CheckpointError(CheckpointErrorKind::malformed, "duplicate tensor '" + rec.name + "'");
    p.records.push_back(std::move(rec));
  }
  if (!r.at_end()) throw CheckpointError(CheckpointErrorKind::malformed, "trailing bytes after the last record");
  return p;
}

std::string config_difference(const NetworkConfig& stored, const NetworkConfig& expected) {
  auto list = [](const std::vector<int64_t>& v) {
    std::string s = "[";
    for (size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
    return s + "]";
  };
  std::string out;
  auto field = [&](const char* name, const std::string& a, const std::string& b) {
    if (a != b) out += std::string(out.empty() ? "" : "; ") + name + " " + a + " (checkpoint) vs " + b + " (expected)";
  };
  auto flag = [](bool b) { return std::string(b ? "on" : "off"); };
  field("encoder_channels", list(stored.encoder_channels), list(expected.encoder_channels));
  field("bottleneck_channels", std::to_string(stored.bottleneck_channels), std::to_string(expected.bottleneck_channels));
  field("aggregation_channels", std::to_string(stored.aggregation_channels),
        std::to_string(expected.aggregation_channels));
  field("input_channels", std::to_string(stored.input_channels), std::to_string(expected.input_channels));
  field("D-DPP", flag(stored.enable_ddpp), flag(expected.enable_ddpp));
  field("SA", flag(stored.enable_sa), flag(expected.enable_sa));
  return out;
}

ModelState materialize(ParsedCheckpoint p, CheckpointExtras* extras) {
  ModelState state = build_state(p.config);
  state.seed = p.seed;
  std::set<std::string> loaded;
  std::set<std::string> means, vars;
  CheckpointExtras ex;
  if (p.header.contains("extra")) ex.meta = p.header.at("extra");

  for (Record& rec : p.records) {
    switch (rec.kind) {
      case param: {
        const ParameterSet::Entry* e = state.params.find(rec.name);
        if (!e) throw CheckpointError(CheckpointErrorKind::unknown_tensor, "no parameter named '" + rec.name + "'");
        if (!(e->value.shape() == rec.shape))
          throw CheckpointError(CheckpointErrorKind::shape_mismatch, "'" + rec.name + "' is " + rec.shape.str() +
                                                                         " in the file, model expects " +
                                                                         e->value.shape().str());
        loaded.insert(rec.name);
        break;
      }
      case running_mean:
      case running_var: {
        auto stats = state.params.find_stats(rec.name);
        if (!stats) throw CheckpointError(CheckpointErrorKind::unknown_tensor, "no batch-norm layer named '" + rec.name + "'");
        const int64_t channels = static_cast<int64_t>(stats->mean.size());
        if (!(rec.shape == Shape{1, channels, 1, 1}))
          throw CheckpointError(CheckpointErrorKind::shape_mismatch, "statistics for '" + rec.name + "' are " +
                                                                         rec.shape.str() + ", layer has " +
                                                                         std::to_string(channels) + " channels");
        (rec.kind == running_mean ? means : vars).insert(rec.name);
        break;
      }
      case extra:
        break;
    }
  }
  for (const auto& e : state.params.entries())
    if (!loaded.count(e.name))
      throw CheckpointError(CheckpointErrorKind::malformed, "parameter '" + e.name + "' is missing");
  if (means != vars) throw CheckpointError(CheckpointErrorKind::malformed, "running mean and variance records differ");

  // Everything validated; only now fill the fresh state.
  for (Record& rec : p.records) {
    switch (rec.kind) {
      case param: {
        Tensor t = state.params.find(rec.name)->value;
        std::copy(rec.data.begin(), rec.data.end(), t.mutable_data().begin());
        break;
      }
      case running_mean:
      case running_var: {
        auto stats = state.params.find_stats(rec.name);
        (rec.kind == running_mean ? stats->mean : stats->var) = std::move(rec.data);
        stats->recorded = true;
        break;
      }
      case extra:
        ex.tensors.emplace_back(rec.name, Tensor::from_data(rec.shape, std::move(rec.data)));
        break;
    }
  }
  if (extras) *extras = std::move(ex);
  return state;
}

}  // namespace

void save_checkpoint(const ModelState& state, const fs::path& path, const CheckpointExtras* extras) {
  json header{{"format", "mslae-checkpoint"}, {"config", to_json(state.config)}, {"seed", state.seed}};
  if (extras && !extras->meta.empty()) header["extra"] = extras->meta;

  std::vector<const ParameterSet::StatsEntry*> recorded;
  for (const auto& s : state.params.stats())
    if (s.stats->recorded) recorded.push_back(&s);
  const size_t count = state.params.entries().size() + 2 * recorded.size() + (extras ? extras->tensors.size() : 0);

  Writer w;
  w.bytes(kMagic, sizeof kMagic);
  w.u32(kCheckpointVersion);
  w.str(header.dump());
  w.u32(static_cast<uint32_t>(count));
  for (const auto& e : state.params.entries()) w.record(param, e.name, e.value.shape(), e.value.data());
  for (const auto* s : recorded) {
    const Shape shape{1, static_cast<int64_t>(s->stats->mean.size()), 1, 1};
    w.record(running_mean, s->name, shape, s->stats->mean);
    w.record(running_var, s->name, shape, s->stats->var);
  }
  if (extras)
    for (const auto& [name, t] : extras->tensors) w.record(extra, name, t.shape(), t.data());

  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  fs::path tmp = path;
  tmp += ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out.write(reinterpret_cast<const char*>(w.buffer().data()), static_cast<std::streamsize>(w.buffer().size()));
    if (!out) throw IoError("short write to " + tmp.string());
  }
  fs::rename(tmp, path);
}

ModelState load_checkpoint(const fs::path& path, CheckpointExtras* extras) { return materialize(parse(path), extras); }

ModelState load_checkpoint(const fs::path& path, const NetworkConfig& expected, CheckpointExtras* extras) {
  ParsedCheckpoint p = parse(path);
  if (!(p.config == expected))
    throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                          "checkpoint was built for a different network: " + config_difference(p.config, expected));
  return materialize(std::move(p), extras);
}

}  // namespace mslae
