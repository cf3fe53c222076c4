#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "svf/lora.hpp"
#include "svf/model.hpp"
#include "svf/svf.hpp"

namespace svf {

// Single-file container:
//
//   "SVF2"                      4 bytes
//   version                     u16
//   type tag                    u8   (0 model, 1 expert, 2 lora, 3 factors)
//   metadata length             u32
//   metadata                    UTF-8 JSON, keys sorted
//   records until end of file:
//     layer u16, site u8, length u32, length x float32
//
// Integers and floats are little-endian. For model checkpoints the site
// byte carries the ParamKind; LoRA B matrices set bit 0x80; factor caches
// store U, sigma and V^T with 0x00, 0x40 and 0x80 added.
enum class CheckpointType : std::uint8_t { Model = 0, Expert = 1, Lora = 2, Factors = 3 };
std::string_view checkpoint_type_name(CheckpointType t);

inline constexpr std::uint16_t kCheckpointVersion = 1;

struct CheckpointRecord {
    std::uint16_t layer = 0;
    std::uint8_t site = 0;
    std::vector<float> values;
    friend bool operator==(const CheckpointRecord&, const CheckpointRecord&) = default;
};

struct Checkpoint {
    CheckpointType type = CheckpointType::Model;
    nlohmann::json meta = nlohmann::json::object();
    std::vector<CheckpointRecord> records;

    std::string serialize() const;
    // Throws CheckpointError on bad magic, version, type or truncation.
    static Checkpoint parse(std::string_view bytes);

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
};

// SOURCE_DATE_EPOCH when set, else 0, so identical runs write identical bytes.
std::uint64_t checkpoint_created();

// FNV-1a over the float32 image of every base weight.
std::string model_hash(const PolicyModel& model);

Checkpoint model_checkpoint(const PolicyModel& model, const std::string& name, const std::string& config_hash);
// Weights come back as the float32 values that were stored; factors are rebuilt.
PolicyModel model_from_checkpoint(const Checkpoint& c);

Checkpoint expert_checkpoint(const ExpertVector& e);
ExpertVector expert_from_checkpoint(const Checkpoint& c);

Checkpoint lora_checkpoint(const LoraAdapter& a, const std::string& source_model_hash, const std::string& config_hash);
LoraAdapter lora_from_checkpoint(const Checkpoint& c);

Checkpoint factors_checkpoint(const PolicyModel& model, const std::string& config_hash);
std::map<MatrixId, SvdFactors> factors_from_checkpoint(const Checkpoint& c);

nlohmann::json model_config_json(const ModelConfig& cfg);
ModelConfig model_config_from_json(const nlohmann::json& j);

// Writes bytes atomically enough for our purposes (temp file then rename).
void write_file(const std::string& path, std::string_view bytes);
std::string read_file(const std::string& path);

}  // namespace svf
