#pragma once

#include <filesystem>
#include <map>
#include <string>

#include "vteam/model.hpp"

namespace vteam {

/// Checkpoint container: one file holding the model descriptor as key=value
/// text, a flat tensor table keyed by canonical layer names (raw
/// little-endian float64), optional extra tensors and metadata, and a
/// trailing SHA-256 over everything before it.
///
///     VTEAM-CHECKPOINT 1
///     descriptor.<key>=<value>        (one per descriptor field)
///     meta.<key>=<value>              (free-form, optional)
///     parameter_count=<n>
///     tensors=<count>
///     <name> <n> <c> <h> <w>\n<bytes>  (repeated)
///     sha256=<hex>
struct LoadedCheckpoint {
  EmbeddingModel model;
  std::map<std::string, std::string> metadata;
  std::map<std::string, Tensor> extras;  ///< tensors named "extra.*", key without the prefix
  std::string hash;
};

/// Writes atomically (temp file + rename) and returns the content hash.
std::string save_checkpoint(const EmbeddingModel& model, const std::filesystem::path& path,
                            const std::map<std::string, std::string>& metadata = {},
                            const std::map<std::string, Tensor>& extras = {});

/// Verifies the hash and rejects any descriptor/tensor-table mismatch.
LoadedCheckpoint load_checkpoint(const std::filesystem::path& path);

/// Hash recorded in (and verified against) the file.
std::string checkpoint_hash(const std::filesystem::path& path);

/// Hash the model would have if saved with no metadata or extras.
std::string model_hash(const EmbeddingModel& model);

}  // namespace vteam
