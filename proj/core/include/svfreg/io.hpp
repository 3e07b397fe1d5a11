#pragma once

// On-disk formats.
//
// DVOL1 volume: one JSON header line terminated by '\n', e.g.
//   {"magic":"DVOL1","dims":[nx,ny,nz],"spacing":[sx,sy,sz],"channels":1,
//    "dtype":"f32","byte_order":"little","name":"..."}
// followed by nx*ny*nz*channels little-endian float32 values, x fastest,
// channel-major for 3-channel fields.
//
// Checkpoint: one JSON manifest line (format "SVFREG-CKPT1", architecture,
// dropout rate, seed lineage, block names/shapes/lengths) followed by the raw
// little-endian float64 parameter blocks in manifest order.

#include <filesystem>
#include <stdexcept>
#include <string>
#include <variant>

#include <nlohmann/json.hpp>

#include "svfreg/engine.hpp"
#include "svfreg/eval.hpp"
#include "svfreg/grid.hpp"
#include "svfreg/predictor.hpp"

namespace svfreg {

enum class FormatErrorCode { Io, BadMagic, BadHeader, PayloadLengthMismatch };

class FormatError : public std::runtime_error {
 public:
  FormatError(FormatErrorCode code, const std::string& what) : std::runtime_error(what), code_(code) {}
  FormatErrorCode code() const { return code_; }

 private:
  FormatErrorCode code_;
};

using Volume = std::variant<ScalarVolume, VectorField>;

void write_vol(const std::filesystem::path& path, const ScalarVolume& vol, const std::string& name = {});
void write_vol(const std::filesystem::path& path, const VectorField& field, const std::string& name = {});
Volume read_vol(const std::filesystem::path& path);
ScalarVolume read_scalar_vol(const std::filesystem::path& path);
VectorField read_vector_vol(const std::filesystem::path& path);

void save_checkpoint(const std::filesystem::path& path, const PredictorParams& params,
                     const nlohmann::json& lineage = nlohmann::json::object());
PredictorParams load_checkpoint(const std::filesystem::path& path);

const char* to_string(Direction d);
Direction direction_from_string(const std::string& s);

nlohmann::json to_json(const Architecture& arch);
Architecture architecture_from_json(const nlohmann::json& j);
nlohmann::json to_json(const LossBreakdown& b);
nlohmann::json to_json(const AdaptConfig& c);
AdaptConfig adapt_config_from_json(const nlohmann::json& j);
/// Deterministic content only (no wall-clock timings).
nlohmann::json to_json(const AdaptReport& r);
nlohmann::json timings_json(const AdaptReport& r);
nlohmann::json to_json(const MetricsReport& m);
MetricsReport metrics_from_json(const nlohmann::json& j);

void write_json(const std::filesystem::path& path, const nlohmann::json& j);
nlohmann::json read_json(const std::filesystem::path& path);

}  // namespace svfreg
