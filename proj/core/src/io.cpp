#include "svfreg/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iterator>
#include <vector>

namespace svfreg {

using nlohmann::json;

namespace {

constexpr const char* kVolMagic = "DVOL1";
constexpr const char* kCkptMagic = "SVFREG-CKPT1";

template <typename UInt>
UInt to_little(UInt v) {
  if constexpr (std::endian::native == std::endian::little) {
    return v;
  } else {
    UInt out = 0;
    for (std::size_t b = 0; b < sizeof(UInt); ++b) out |= ((v >> (8 * b)) & 0xFF) << (8 * (sizeof(UInt) - 1 - b));
    return out;
  }
}

void append_f32(std::string& buf, double x) {
  const auto bits = to_little(std::bit_cast<std::uint32_t>(static_cast<float>(x)));
  char bytes[4];
  std::memcpy(bytes, &bits, 4);
  buf.append(bytes, 4);
}

double read_f32(const char* p) {
  std::uint32_t bits;
  std::memcpy(&bits, p, 4);
  return static_cast<double>(std::bit_cast<float>(to_little(bits)));
}

void append_f64(std::string& buf, double x) {
  const auto bits = to_little(std::bit_cast<std::uint64_t>(x));
  char bytes[8];
  std::memcpy(bytes, &bits, 8);
  buf.append(bytes, 8);
}

double read_f64(const char* p) {
  std::uint64_t bits;
  std::memcpy(&bits, p, 8);
  return std::bit_cast<double>(to_little(bits));
}

void write_file(const std::filesystem::path& path, const std::string& header, const std::string& payload) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError(FormatErrorCode::Io, "cannot open for writing: " + path.string());
  out << header << '\n';
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  if (!out) throw FormatError(FormatErrorCode::Io, "write failed: " + path.string());
}

// Returns the parsed header line and the remaining bytes.
std::pair<json, std::string> read_header_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError(FormatErrorCode::Io, "cannot open for reading: " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw FormatError(FormatErrorCode::BadHeader, "missing header line");
  json header;
  try {
    header = json::parse(line);
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorCode::BadMagic, std::string("header is not a DVOL/checkpoint JSON line: ") + e.what());
  }
  std::string payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return {std::move(header), std::move(payload)};
}

std::string vol_header(const Dims& d, const Vec3& spacing, int channels, const std::string& name) {
  json h;
  h["magic"] = kVolMagic;
  h["dims"] = {d.nx, d.ny, d.nz};
  h["spacing"] = {spacing[0], spacing[1], spacing[2]};
  h["channels"] = channels;
  h["dtype"] = "f32";
  h["byte_order"] = "little";
  if (!name.empty()) h["name"] = name;
  return h.dump();
}

}  // namespace

void write_vol(const std::filesystem::path& path, const ScalarVolume& vol, const std::string& name) {
  std::string payload;
  payload.reserve(vol.size() * 4);
  for (double x : vol.data()) append_f32(payload, x);
  write_file(path, vol_header(vol.dims(), vol.spacing(), 1, name), payload);
}

void write_vol(const std::filesystem::path& path, const VectorField& field, const std::string& name) {
  std::string payload;
  payload.reserve(field.data().size() * 4);
  for (double x : field.data()) append_f32(payload, x);
  write_file(path, vol_header(field.dims(), field.spacing(), 3, name), payload);
}

Volume read_vol(const std::filesystem::path& path) {
  auto [h, payload] = read_header_file(path);
  if (!h.is_object() || h.value("magic", "") != kVolMagic) throw FormatError(FormatErrorCode::BadMagic, "bad magic");
  Dims d;
  Vec3 spacing;
  int channels = 0;
  try {
    const auto& dims = h.at("dims");
    d = {dims.at(0).get<int>(), dims.at(1).get<int>(), dims.at(2).get<int>()};
    const auto& sp = h.at("spacing");
    spacing = {sp.at(0).get<double>(), sp.at(1).get<double>(), sp.at(2).get<double>()};
    channels = h.at("channels").get<int>();
    if (h.at("dtype").get<std::string>() != "f32") throw FormatError(FormatErrorCode::BadHeader, "unsupported dtype");
    if (h.value("byte_order", "little") != "little") throw FormatError(FormatErrorCode::BadHeader, "unsupported byte order");
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorCode::BadHeader, std::string("malformed header: ") + e.what());
  }
  if (channels != 1 && channels != 3) throw FormatError(FormatErrorCode::BadHeader, "channels must be 1 or 3");
  if (d.nx < 2 || d.ny < 2 || d.nz < 2) throw FormatError(FormatErrorCode::BadHeader, "dims must be >= 2");
  const std::size_t values = d.count() * static_cast<std::size_t>(channels);
  if (payload.size() != values * 4) throw FormatError(FormatErrorCode::PayloadLengthMismatch, "payload length mismatch");

  std::vector<double> data(values);
  for (std::size_t n = 0; n < values; ++n) data[n] = read_f32(payload.data() + 4 * n);
  try {
    if (channels == 1) return ScalarVolume(d, spacing, std::move(data));
    return VectorField(d, spacing, std::move(data));
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatErrorCode::BadHeader, e.what());
  }
}

ScalarVolume read_scalar_vol(const std::filesystem::path& path) {
  Volume v = read_vol(path);
  if (auto* s = std::get_if<ScalarVolume>(&v)) return std::move(*s);
  throw FormatError(FormatErrorCode::BadHeader, "expected a 1-channel volume: " + path.string());
}

VectorField read_vector_vol(const std::filesystem::path& path) {
  Volume v = read_vol(path);
  if (auto* f = std::get_if<VectorField>(&v)) return std::move(*f);
  throw FormatError(FormatErrorCode::BadHeader, "expected a 3-channel volume: " + path.string());
}

json to_json(const Architecture& arch) {
  return {{"in_channels", arch.in_channels},
          {"hidden_widths", arch.hidden_widths},
          {"out_channels", arch.out_channels},
          {"downsample", arch.downsample},
          {"leaky_slope", arch.leaky_slope}};
}

Architecture architecture_from_json(const json& j) {
  Architecture a;
  a.in_channels = j.at("in_channels").get<int>();
  a.hidden_widths = j.at("hidden_widths").get<std::vector<int>>();
  a.out_channels = j.at("out_channels").get<int>();
  a.downsample = j.at("downsample").get<int>();
  a.leaky_slope = j.at("leaky_slope").get<double>();
  a.validate();
  return a;
}

void save_checkpoint(const std::filesystem::path& path, const PredictorParams& params, const json& lineage) {
  json h;
  h["format"] = kCkptMagic;
  h["architecture"] = to_json(params.arch);
  h["dropout_rate"] = params.dropout_rate;
  h["seed"] = params.seed;
  h["lineage"] = lineage;
  h["dtype"] = "f64";
  h["byte_order"] = "little";
  json blocks = json::array();
  std::string payload;
  for (const auto& b : params.blocks) {
    blocks.push_back({{"name", b.name}, {"shape", b.shape}, {"length", b.values.size()}});
    for (double x : b.values) append_f64(payload, x);
  }
  h["blocks"] = blocks;
  write_file(path, h.dump(), payload);
}

PredictorParams load_checkpoint(const std::filesystem::path& path) {
  auto [h, payload] = read_header_file(path);
  if (!h.is_object() || h.value("format", "") != kCkptMagic) throw FormatError(FormatErrorCode::BadMagic, "bad checkpoint magic");
  PredictorParams p;
  std::size_t offset = 0;
  try {
    p.arch = architecture_from_json(h.at("architecture"));
    p.dropout_rate = h.at("dropout_rate").get<double>();
    p.seed = h.at("seed").get<std::uint64_t>();
    std::size_t total = 0;
    for (const auto& b : h.at("blocks")) total += b.at("length").get<std::size_t>();
    if (payload.size() != total * 8) throw FormatError(FormatErrorCode::PayloadLengthMismatch, "payload length mismatch");
    for (const auto& b : h.at("blocks")) {
      ParamBlock block;
      block.name = b.at("name").get<std::string>();
      block.shape = b.at("shape").get<std::vector<int>>();
      const auto len = b.at("length").get<std::size_t>();
      block.values.resize(len);
      for (std::size_t q = 0; q < len; ++q, offset += 8) block.values[q] = read_f64(payload.data() + offset);
      p.blocks.push_back(std::move(block));
    }
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorCode::BadHeader, std::string("malformed checkpoint header: ") + e.what());
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatErrorCode::BadHeader, e.what());
  }
  try {
    p.validate();
  } catch (const std::invalid_argument& e) {
    throw FormatError(FormatErrorCode::BadHeader, std::string("checkpoint: ") + e.what());
  }
  return p;
}

const char* to_string(Direction d) { return d == Direction::Forward ? "forward" : "inverse"; }

Direction direction_from_string(const std::string& s) {
  if (s == "forward" || s == "fwd") return Direction::Forward;
  if (s == "inverse" || s == "inv") return Direction::Inverse;
  throw std::invalid_argument("direction must be fwd|inv");
}

json to_json(const LossBreakdown& b) {
  return {{"mse", b.mse}, {"bending", b.bending}, {"total", b.total}, {"lambda", b.lambda}, {"weighted", b.weighted}};
}

namespace {

const char* to_string(Regularize r) { return r == Regularize::Displacement ? "displacement" : "velocity"; }
const char* to_string(ChannelAggregation a) {
  switch (a) {
    case ChannelAggregation::Sum: return "sum";
    case ChannelAggregation::Mean: return "mean";
    case ChannelAggregation::Max: return "max";
  }
  return "sum";
}

}  // namespace

json to_json(const AdaptConfig& c) {
  return {{"lambda", c.lambda},
          {"integration_steps", c.integration_steps},
          {"mc_samples", c.mc_samples},
          {"adapt_steps", c.adapt_steps},
          {"learning_rate", c.learning_rate},
          {"dropout_rate", c.dropout_rate},
          {"eps", c.eps},
          {"direction", to_string(c.direction)},
          {"seed", c.seed},
          {"regularize", to_string(c.regularize)},
          {"aggregation", to_string(c.aggregation)},
          {"refresh_uncertainty", c.refresh_uncertainty}};
}

AdaptConfig adapt_config_from_json(const json& j) {
  AdaptConfig c;
  c.lambda = j.value("lambda", c.lambda);
  c.integration_steps = j.value("integration_steps", c.integration_steps);
  c.mc_samples = j.value("mc_samples", c.mc_samples);
  c.adapt_steps = j.value("adapt_steps", c.adapt_steps);
  c.learning_rate = j.value("learning_rate", c.learning_rate);
  c.dropout_rate = j.value("dropout_rate", c.dropout_rate);
  c.eps = j.value("eps", c.eps);
  c.direction = direction_from_string(j.value("direction", std::string("forward")));
  c.seed = j.value("seed", c.seed);
  const std::string reg = j.value("regularize", std::string("displacement"));
  if (reg == "displacement") c.regularize = Regularize::Displacement;
  else if (reg == "velocity") c.regularize = Regularize::Velocity;
  else throw std::invalid_argument("regularize must be displacement|velocity");
  const std::string agg = j.value("aggregation", std::string("sum"));
  if (agg == "sum") c.aggregation = ChannelAggregation::Sum;
  else if (agg == "mean") c.aggregation = ChannelAggregation::Mean;
  else if (agg == "max") c.aggregation = ChannelAggregation::Max;
  else throw std::invalid_argument("aggregation must be sum|mean|max");
  c.refresh_uncertainty = j.value("refresh_uncertainty", c.refresh_uncertainty);
  return c;
}

json to_json(const AdaptReport& r) {
  json traj = json::array();
  for (const auto& b : r.trajectory) traj.push_back(to_json(b));
  double var_sum = 0.0, var_max = 0.0;
  for (double v : r.uncertainty.variance.data()) {
    var_sum += v;
    var_max = std::max(var_max, v);
  }
  const std::size_t nvar = r.uncertainty.variance.size();
  return {{"steps", r.trajectory.size()},
          {"trajectory", traj},
          {"final_loss", to_json(r.final_loss)},
          {"uncertainty",
           {{"eps", r.uncertainty.eps},
            {"variance_mean", nvar ? var_sum / static_cast<double>(nvar) : 0.0},
            {"variance_max", var_max},
            {"refreshes", r.uncertainty_refreshes}}}};
}

json timings_json(const AdaptReport& r) {
  double total = r.uncertainty_seconds;
  for (double s : r.step_seconds) total += s;
  return {{"uncertainty_seconds", r.uncertainty_seconds}, {"step_seconds", r.step_seconds}, {"total_seconds", total}};
}

json to_json(const MetricsReport& m) {
  json j = {{"case_id", m.case_id},
            {"direction", to_string(m.direction)},
            {"dsc", m.dsc},
            {"assd_mm", m.assd_mm},
            {"folding_pct", m.folding_pct}};
  j["inv_consistency_vox"] = m.inv_consistency_vox ? json(*m.inv_consistency_vox) : json(nullptr);
  return j;
}

MetricsReport metrics_from_json(const json& j) {
  MetricsReport m;
  m.case_id = j.value("case_id", std::string());
  m.direction = direction_from_string(j.value("direction", std::string("forward")));
  m.dsc = j.at("dsc").get<double>();
  m.assd_mm = j.at("assd_mm").get<double>();
  m.folding_pct = j.at("folding_pct").get<double>();
  if (j.contains("inv_consistency_vox") && !j["inv_consistency_vox"].is_null()) {
    m.inv_consistency_vox = j["inv_consistency_vox"].get<double>();
  }
  return m;
}

void write_json(const std::filesystem::path& path, const json& j) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError(FormatErrorCode::Io, "cannot open for writing: " + path.string());
  out << j.dump(2) << '\n';
}

json read_json(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError(FormatErrorCode::Io, "cannot open for reading: " + path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw FormatError(FormatErrorCode::BadHeader, std::string("invalid JSON in ") + path.string() + ": " + e.what());
  }
}

}  // namespace svfreg
