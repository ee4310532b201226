#pragma once

// Binary checkpoint container.
//
// Layout, all integers little-endian u32:
//   "DAFT" | version | metadata length | metadata (UTF-8 JSON)
//   | tensor count | per tensor: name length | name | rank | dims[rank]
//   | dtype (1 = float32) | payload (numel little-endian float32)

#include "dafdft/tensor.hpp"

#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

namespace dafdft {

inline constexpr std::uint32_t kCheckpointVersion = 1;
inline constexpr std::uint32_t kDtypeFloat32 = 1;

class CheckpointError : public std::runtime_error {
public:
    enum class Code {
        Io,
        BadMagic,
        UnsupportedVersion,
        Truncated,
        Malformed,
        MissingParameter,
        ExtraParameter,
        DuplicateParameter,
        ShapeMismatch,
        ConfigMismatch,
    };

    CheckpointError(Code code, const std::string& what) : std::runtime_error(what), code_(code) {}
    Code code() const { return code_; }

private:
    Code code_;
};

struct NamedTensor {
    std::string name;
    Tensor tensor;
};

struct Checkpoint {
    nlohmann::json metadata = nlohmann::json::object();
    std::vector<NamedTensor> tensors;

    /// First tensor called `name`, or nullptr.
    const Tensor* find(const std::string& name) const;
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& checkpoint);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);

void save_checkpoint(const Checkpoint& checkpoint, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Copies checkpoint values into `targets`, requiring the two name sets to
/// match exactly and shapes to agree. Throws the matching CheckpointError
/// otherwise (missing, extra, duplicate, shape mismatch).
void restore_tensors(const Checkpoint& checkpoint, const std::vector<NamedTensor>& targets);

/// True when both tables hold the same names, shapes and bit patterns.
bool bit_identical(const Checkpoint& a, const Checkpoint& b);

}  // namespace dafdft
