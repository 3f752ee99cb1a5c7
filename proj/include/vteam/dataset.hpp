#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vteam/image.hpp"

namespace vteam {

enum class Split { train, query, gallery };
enum class Layout { cars196, veri776 };
enum class Attribute { identity, brand, color, type };

std::string to_string(Split s);
std::string to_string(Layout l);
std::string to_string(Attribute a);
Split parse_split(const std::string& s);
Layout parse_layout(const std::string& s);
Attribute parse_attribute(const std::string& s);

/// One labelled vehicle crop.
struct Sample {
  Image image;
  int identity_id = 0;
  std::optional<int> brand_id;
  std::optional<int> color_id;
  std::optional<int> type_id;
  std::optional<int> camera_id;
  Split split = Split::train;
  std::string source;  ///< file path, or a synthetic tag

  std::optional<int> attribute(Attribute a) const;
  bool operator==(const Sample&) const = default;
};

/// Immutable collection of samples with split bookkeeping.
///
/// Train identities are contiguous and zero-based; query/gallery identities
/// never occur in train. Both are checked on construction.
class DatasetView {
 public:
  DatasetView() = default;
  DatasetView(std::vector<Sample> samples, std::vector<std::string> identity_names,
              std::map<std::string, std::vector<std::string>> attribute_names = {});

  const std::vector<Sample>& samples() const { return samples_; }
  std::size_t size() const { return samples_.size(); }
  int num_identities() const { return static_cast<int>(identity_names_.size()); }
  int num_identities(Split s) const;
  /// Number of classes per attribute ("brand", "color", ...), over all splits.
  const std::map<std::string, int>& num_attribute_classes() const { return attribute_classes_; }
  /// Raw label string of every remapped identity (the sidecar map).
  const std::vector<std::string>& identity_names() const { return identity_names_; }
  const std::map<std::string, std::vector<std::string>>& attribute_names() const {
    return attribute_names_;
  }

  std::vector<const Sample*> split(Split s) const;
  /// Query and gallery samples together (the leave-one-out retrieval set).
  std::vector<const Sample*> test_samples() const;
  std::vector<std::size_t> indices(Split s) const;

  /// Resolution of the stored images; 0 when empty or mixed.
  int image_size() const;

  bool operator==(const DatasetView&) const = default;

 private:
  std::vector<Sample> samples_;
  std::vector<std::string> identity_names_;
  std::map<std::string, std::vector<std::string>> attribute_names_;
  std::map<std::string, int> attribute_classes_;
};

/// Reads a cars196-style (`root/{train,test}/<class>/<image>`) or
/// VeRi-style (`root/{image_train,image_query,image_test}/<id>_c<cam>_<frame>.jpg`)
/// tree. Images are decoded and resized to `input_size`.
DatasetView ingest_directory(const std::filesystem::path& root, Layout layout, int input_size = 224);

/// Seeded toy vehicles: brand picks the silhouette family, badge and hubs; the
/// identity's index within its brand picks paint and stripe colours, so colour
/// carries no brand information. Paints cycle over as many colours as there are
/// train identities per brand, so held-out identities reuse paints seen in
/// training and differ by stripe; view picks the pose. Per brand, the first ceil(ids/2) identities are
/// train; for the rest view 0 is a query and the other views are gallery.
DatasetView generate_synthetic(int num_brands, int ids_per_brand, int views_per_id, std::uint64_t seed,
                               int image_size = 224);

/// Number of palette colours used by the synthetic generator.
inline constexpr int kSyntheticPalette = 8;

/// Writes the cars196 layout (PNG, lossless) so ingestion can round-trip it.
/// Class directories are named after identity_names().
void export_cars196(const DatasetView& view, const std::filesystem::path& root);

/// Persists/loads the flat sample index used by the CLI (`samples.csv`,
/// `identities.csv`, `attributes.csv`). save_index writes images that have no
/// file behind them under `dir/images/`.
void save_index(const DatasetView& view, const std::filesystem::path& dir);
DatasetView load_index(const std::filesystem::path& dir, int input_size);

void write_identity_map(const DatasetView& view, const std::filesystem::path& path);

/// SHA-256 over labels, splits and pixel values.
std::string fingerprint(const DatasetView& view);

}  // namespace vteam
