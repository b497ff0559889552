#include "tim/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace tim {

namespace {

constexpr char kMagic[4] = {'T', 'I', 'M', '1'};

template <typename UInt>
void put_le(std::string& out, UInt v) {
  for (std::size_t i = 0; i < sizeof(UInt); ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

template <typename UInt>
UInt get_le(const char* p) {
  UInt v = 0;
  for (std::size_t i = 0; i < sizeof(UInt); ++i)
    v |= static_cast<UInt>(static_cast<unsigned char>(p[i])) << (8 * i);
  return v;
}

std::string floats(const Eigen::VectorXf& v) {
  std::string out;
  out.reserve(4 * v.size());
  for (Eigen::Index i = 0; i < v.size(); ++i) put_le(out, std::bit_cast<std::uint32_t>(v(i)));
  return out;
}

Eigen::VectorXf parse_floats(const std::string& s, const char* what) {
  if (s.size() % 4) throw CheckpointError(std::string("checkpoint: ragged float section ") + what);
  Eigen::VectorXf v(static_cast<Eigen::Index>(s.size() / 4));
  for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = std::bit_cast<float>(get_le<std::uint32_t>(s.data() + 4 * i));
  return v;
}

std::string int64(std::int64_t v) {
  std::string out;
  put_le(out, static_cast<std::uint64_t>(v));
  return out;
}

std::int64_t parse_int64(const std::string& s, const char* what) {
  if (s.size() != 8) throw CheckpointError(std::string("checkpoint: bad integer section ") + what);
  return static_cast<std::int64_t>(get_le<std::uint64_t>(s.data()));
}

// Statistics: dimension as int64, then mean, std and sigma_data as float32.
std::string stats_bytes(const NormStats& s) {
  std::string out = int64(s.mean.size());
  out += floats(s.mean.cast<float>());
  out += floats(s.std.cast<float>());
  put_le(out, std::bit_cast<std::uint32_t>(static_cast<float>(s.sigma_data)));
  return out;
}

NormStats parse_stats(const std::string& s) {
  if (s.size() < 12) throw CheckpointError("checkpoint: truncated statistics section");
  const std::int64_t d = parse_int64(s.substr(0, 8), "stats");
  if (d < 0 || s.size() != static_cast<std::size_t>(8 + 8 * d + 4))
    throw CheckpointError("checkpoint: malformed statistics section");
  NormStats out;
  out.mean = parse_floats(s.substr(8, 4 * d), "stats").cast<double>();
  out.std = parse_floats(s.substr(8 + 4 * d, 4 * d), "stats").cast<double>();
  out.sigma_data = std::bit_cast<float>(get_le<std::uint32_t>(s.data() + 8 + 8 * d));
  return out;
}

void section(std::string& out, const std::string& payload) {
  put_le(out, static_cast<std::uint64_t>(payload.size()));
  out += payload;
}

class SectionReader {
 public:
  explicit SectionReader(const std::string& bytes) : bytes_(bytes) {}

  std::string next(const char* what) {
    if (bytes_.size() - pos_ < 8) throw CheckpointError(std::string("checkpoint: truncated before ") + what);
    const std::uint64_t len = get_le<std::uint64_t>(bytes_.data() + pos_);
    pos_ += 8;
    if (bytes_.size() - pos_ < len) throw CheckpointError(std::string("checkpoint: truncated in ") + what);
    std::string out = bytes_.substr(pos_, len);
    pos_ += len;
    return out;
  }
  void skip(std::size_t n) { pos_ += n; }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

NormStats float_rounded(const NormStats& s) {
  NormStats out;
  out.mean = s.mean.cast<float>().cast<double>();
  out.std = s.std.cast<float>().cast<double>();
  out.sigma_data = static_cast<float>(s.sigma_data);
  return out;
}

bool Checkpoint::operator==(const Checkpoint& o) const {
  return version == o.version && config == o.config && state.params == o.state.params &&
         state.ema == o.state.ema && state.opt == o.state.opt && state.rng == o.state.rng &&
         state.step == o.state.step && stats == o.stats;
}

std::string encode_checkpoint(const Checkpoint& c) {
  std::string out(kMagic, 4);
  put_le(out, c.version);
  section(out, serialize_run_config(c.config));
  section(out, c.state.params.layout.serialize());
  section(out, floats(c.state.params.values));
  section(out, floats(c.state.ema.values));
  section(out, floats(c.state.opt.m));
  section(out, floats(c.state.opt.v));
  section(out, int64(c.state.opt.step));
  section(out, c.state.rng.state());
  section(out, int64(c.state.step));
  section(out, stats_bytes(c.stats));
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < 8 || std::memcmp(bytes.data(), kMagic, 4) != 0)
    throw CheckpointError("not a checkpoint: missing TIM1 magic");
  Checkpoint c;
  c.version = get_le<std::uint32_t>(bytes.data() + 4);
  if (c.version != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(c.version) + " (expected " +
                          std::to_string(kCheckpointVersion) + ")");
  SectionReader rd(bytes);
  rd.skip(8);
  try {
    c.config = parse_run_config(rd.next("config"));
  } catch (const ConfigError& e) {
    throw CheckpointError(std::string("checkpoint: bad config section: ") + e.what());
  }
  ParamLayout layout;
  try {
    layout = ParamLayout::parse(rd.next("layout"));
  } catch (const std::exception& e) {
    throw CheckpointError(std::string("checkpoint: bad layout section: ") + e.what());
  }
  c.state.params = {layout, parse_floats(rd.next("params"), "params")};
  c.state.ema = {layout, parse_floats(rd.next("ema"), "ema")};
  c.state.opt.m = parse_floats(rd.next("adam m"), "adam m");
  c.state.opt.v = parse_floats(rd.next("adam v"), "adam v");
  c.state.opt.step = parse_int64(rd.next("adam step"), "adam step");
  c.state.rng.set_state(rd.next("rng"));
  c.state.step = parse_int64(rd.next("step"), "step");
  c.stats = parse_stats(rd.next("stats"));
  if (!rd.done()) throw CheckpointError("checkpoint: trailing bytes");
  const Eigen::Index n = layout.size();
  if (c.state.params.values.size() != n || c.state.ema.values.size() != n)
    throw CheckpointError("checkpoint: parameter count does not match the layout");
  if (c.state.opt.m.size() != c.state.opt.v.size() || (c.state.opt.m.size() != 0 && c.state.opt.m.size() != n))
    throw CheckpointError("checkpoint: optimizer moments do not match the layout");
  return c;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
  const std::string bytes = encode_checkpoint(ckpt);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw CheckpointError("cannot write checkpoint '" + path + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw CheckpointError("short write to '" + path + "'");
  }
  std::filesystem::rename(tmp, path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open checkpoint '" + path + "'");
  std::stringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace tim
