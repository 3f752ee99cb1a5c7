#include "vteam/dataset.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <numbers>
#include <opencv2/core.hpp>
#include <opencv2/imgproc.hpp>
#include <random>
#include <set>
#include <sstream>

#include "vteam/error.hpp"
#include "vteam/hash.hpp"

namespace fs = std::filesystem;

namespace vteam {

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::query: return "query";
    case Split::gallery: return "gallery";
  }
  return "?";
}

std::string to_string(Layout l) { return l == Layout::cars196 ? "cars196" : "veri776"; }

std::string to_string(Attribute a) {
  switch (a) {
    case Attribute::identity: return "identity";
    case Attribute::brand: return "brand";
    case Attribute::color: return "color";
    case Attribute::type: return "type";
  }
  return "?";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "query") return Split::query;
  if (s == "gallery") return Split::gallery;
  throw ConfigError("unknown split '" + s + "'");
}

Layout parse_layout(const std::string& s) {
  if (s == "cars196") return Layout::cars196;
  if (s == "veri776") return Layout::veri776;
  throw ConfigError("unknown layout '" + s + "' (expected cars196 or veri776)");
}

Attribute parse_attribute(const std::string& s) {
  if (s == "identity") return Attribute::identity;
  if (s == "brand") return Attribute::brand;
  if (s == "color") return Attribute::color;
  if (s == "type") return Attribute::type;
  throw ConfigError("unknown attribute '" + s + "'");
}

std::optional<int> Sample::attribute(Attribute a) const {
  switch (a) {
    case Attribute::identity: return identity_id;
    case Attribute::brand: return brand_id;
    case Attribute::color: return color_id;
    case Attribute::type: return type_id;
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// DatasetView

DatasetView::DatasetView(std::vector<Sample> samples, std::vector<std::string> identity_names,
                         std::map<std::string, std::vector<std::string>> attribute_names)
    : samples_(std::move(samples)), identity_names_(std::move(identity_names)),
      attribute_names_(std::move(attribute_names)) {
  std::set<int> train_ids, test_ids;
  for (const Sample& s : samples_) {
    if (s.identity_id < 0 || s.identity_id >= static_cast<int>(identity_names_.size())) {
      throw IngestError("identity id " + std::to_string(s.identity_id) + " has no name entry");
    }
    (s.split == Split::train ? train_ids : test_ids).insert(s.identity_id);
  }
  int expect = 0;
  for (int id : train_ids) {
    if (id != expect++) throw IngestError("train identities are not contiguous from zero");
  }
  for (int id : test_ids) {
    if (train_ids.count(id)) {
      throw IngestError("identity '" + identity_names_[id] + "' occurs in train and in query/gallery");
    }
  }
  for (Attribute a : {Attribute::brand, Attribute::color, Attribute::type}) {
    int classes = 0;
    bool any = false;
    for (const Sample& s : samples_) {
      if (auto v = s.attribute(a)) {
        any = true;
        classes = std::max(classes, *v + 1);
      }
    }
    auto it = attribute_names_.find(to_string(a));
    if (it != attribute_names_.end()) classes = std::max(classes, static_cast<int>(it->second.size()));
    if (any) attribute_classes_[to_string(a)] = classes;
  }
}

int DatasetView::num_identities(Split s) const {
  std::set<int> ids;
  for (const Sample& x : samples_)
    if (x.split == s) ids.insert(x.identity_id);
  return static_cast<int>(ids.size());
}

std::vector<const Sample*> DatasetView::split(Split s) const {
  std::vector<const Sample*> out;
  for (const Sample& x : samples_)
    if (x.split == s) out.push_back(&x);
  return out;
}

std::vector<const Sample*> DatasetView::test_samples() const {
  std::vector<const Sample*> out;
  for (const Sample& x : samples_)
    if (x.split != Split::train) out.push_back(&x);
  return out;
}

std::vector<std::size_t> DatasetView::indices(Split s) const {
  std::vector<std::size_t> out;
  for (std::size_t i = 0; i < samples_.size(); ++i)
    if (samples_[i].split == s) out.push_back(i);
  return out;
}

int DatasetView::image_size() const {
  if (samples_.empty()) return 0;
  const int size = samples_.front().image.height;
  for (const Sample& s : samples_)
    if (s.image.height != size || s.image.width != size) return 0;
  return size;
}

// ---------------------------------------------------------------------------
// Directory ingestion

namespace {

bool is_image_file(const fs::path& p) {
  std::string ext = p.extension().string();
  std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char c) { return std::tolower(c); });
  return ext == ".jpg" || ext == ".jpeg" || ext == ".png";
}

std::vector<fs::path> sorted_entries(const fs::path& dir, bool directories) {
  std::vector<fs::path> out;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (directories ? e.is_directory() : (e.is_regular_file() && is_image_file(e.path()))) {
      out.push_back(e.path());
    }
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::size_t count_images(const fs::path& root) {
  std::size_t n = 0;
  for (const auto& e : fs::recursive_directory_iterator(root))
    if (e.is_regular_file() && is_image_file(e.path())) ++n;
  return n;
}

void require_root(const fs::path& root) {
  if (!fs::exists(root)) throw IngestError("dataset root does not exist: " + root.string());
  if (!fs::is_directory(root)) throw IngestError("dataset root is not a directory: " + root.string());
  if (count_images(root) == 0) throw IngestError("no samples found under " + root.string());
}

void require_split_dir(const fs::path& dir, const std::string& split_name) {
  if (!fs::is_directory(dir)) {
    throw IngestError("missing split directory '" + split_name + "' (expected " + dir.string() + ")");
  }
}

std::string first_token(const std::string& name) {
  const auto pos = name.find_first_of(" _");
  return pos == std::string::npos ? name : name.substr(0, pos);
}

DatasetView ingest_cars196(const fs::path& root, int input_size) {
  const std::array<std::pair<std::string, Split>, 2> splits{{{"train", Split::train}, {"test", Split::gallery}}};
  for (const auto& [name, split] : splits) require_split_dir(root / name, name);

  std::map<std::string, fs::path> seen;
  auto check_duplicate = [&](const fs::path& p) {
    auto [it, inserted] = seen.emplace(p.filename().string(), p);
    if (!inserted) {
      throw IngestError("duplicate image name '" + p.filename().string() + "': " + it->second.string() +
                        " and " + p.string());
    }
  };

  std::vector<std::string> identity_names;
  std::map<std::string, int> identity_of;
  std::set<std::string> brands;
  struct Pending {
    fs::path path;
    std::string cls;
    Split split;
  };
  std::vector<Pending> pending;
  for (const auto& [name, split] : splits) {
    for (const fs::path& class_dir : sorted_entries(root / name, true)) {
      const std::string cls = class_dir.filename().string();
      if (identity_of.count(cls)) {
        throw IngestError("class '" + cls + "' occurs in both train and test; the zero-shot layout needs disjoint classes");
      }
      identity_of[cls] = static_cast<int>(identity_names.size());
      identity_names.push_back(cls);
      brands.insert(first_token(cls));
      for (const fs::path& img : sorted_entries(class_dir, false)) {
        check_duplicate(img);
        pending.push_back({img, cls, split});
      }
    }
  }
  const std::vector<std::string> brand_names(brands.begin(), brands.end());
  std::vector<Sample> samples;
  samples.reserve(pending.size());
  for (const Pending& p : pending) {
    Sample s;
    s.image = load_image(p.path, input_size);
    s.identity_id = identity_of.at(p.cls);
    const std::string brand = first_token(p.cls);
    s.brand_id = static_cast<int>(std::lower_bound(brand_names.begin(), brand_names.end(), brand) -
                                  brand_names.begin());
    s.split = p.split;
    s.source = p.path.string();
    samples.push_back(std::move(s));
  }
  return DatasetView(std::move(samples), std::move(identity_names), {{"brand", brand_names}});
}

struct VeriName {
  std::string identity;
  int camera = 0;
};

VeriName parse_veri_name(const fs::path& p) {
  const std::string stem = p.stem().string();
  std::vector<std::string> tokens;
  std::stringstream ss(stem);
  for (std::string t; std::getline(ss, t, '_');) tokens.push_back(t);
  if (tokens.size() < 3 || tokens[0].empty() || tokens[1].size() < 2 || tokens[1][0] != 'c' ||
      !std::all_of(tokens[1].begin() + 1, tokens[1].end(), [](unsigned char c) { return std::isdigit(c); })) {
    throw IngestError("file name does not match <id>_c<cam>_<frame>: " + p.string());
  }
  return {tokens[0], std::stoi(tokens[1].substr(1))};
}

DatasetView ingest_veri(const fs::path& root, int input_size) {
  const std::array<std::pair<std::string, Split>, 3> splits{
      {{"image_train", Split::train}, {"image_query", Split::query}, {"image_test", Split::gallery}}};
  for (const auto& [name, split] : splits) require_split_dir(root / name, name);

  // Query crops may legitimately reappear in image_test; any other repeat is an error.
  std::map<std::string, std::pair<fs::path, Split>> seen;
  struct Pending {
    fs::path path;
    VeriName name;
    Split split;
  };
  std::vector<Pending> pending;
  std::set<std::string> train_ids, test_ids;
  for (const auto& [dir, split] : splits) {
    for (const fs::path& img : sorted_entries(root / dir, false)) {
      auto [it, inserted] = seen.emplace(img.filename().string(), std::make_pair(img, split));
      if (!inserted) {
        const bool query_gallery = (it->second.second == Split::query && split == Split::gallery);
        if (!query_gallery) {
          throw IngestError("duplicate image name '" + img.filename().string() + "': " +
                            it->second.first.string() + " and " + img.string());
        }
      }
      VeriName name = parse_veri_name(img);
      (split == Split::train ? train_ids : test_ids).insert(name.identity);
      pending.push_back({img, name, split});
    }
  }
  std::vector<std::string> identity_names(train_ids.begin(), train_ids.end());
  for (const std::string& id : test_ids) {
    if (train_ids.count(id)) throw IngestError("identity '" + id + "' occurs in train and test splits");
    identity_names.push_back(id);
  }
  std::map<std::string, int> identity_of;
  for (std::size_t i = 0; i < identity_names.size(); ++i) identity_of[identity_names[i]] = static_cast<int>(i);

  std::vector<Sample> samples;
  samples.reserve(pending.size());
  for (const Pending& p : pending) {
    Sample s;
    s.image = load_image(p.path, input_size);
    s.identity_id = identity_of.at(p.name.identity);
    s.camera_id = p.name.camera;
    s.split = p.split;
    s.source = p.path.string();
    samples.push_back(std::move(s));
  }
  return DatasetView(std::move(samples), std::move(identity_names));
}

}  // namespace

DatasetView ingest_directory(const fs::path& root, Layout layout, int input_size) {
  require_root(root);
  return layout == Layout::cars196 ? ingest_cars196(root, input_size) : ingest_veri(root, input_size);
}

// ---------------------------------------------------------------------------
// Synthetic vehicles

namespace {

std::uint64_t mix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t stream_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
  return mix(mix(mix(mix(seed) ^ a) ^ (b + 0x100)) ^ (c + 0x10000));
}

struct Shape {
  double length, body_h, cabin_start, cabin_len, cabin_h, taper_front, taper_rear, wheel_r, wheel_inset;
  bool bed;  // open load bed behind the cabin
};

constexpr std::array<Shape, 6> kStyles{{
    {0.70, 0.13, 0.22, 0.50, 0.12, 0.30, 0.25, 0.075, 0.17, false},  // sedan
    {0.58, 0.17, 0.10, 0.74, 0.13, 0.12, 0.04, 0.110, 0.18, false},  // suv
    {0.76, 0.17, 0.05, 0.35, 0.15, 0.08, 0.00, 0.085, 0.15, true},   // pickup
    {0.78, 0.22, 0.02, 0.96, 0.24, 0.22, 0.00, 0.062, 0.12, false},  // van
    {0.74, 0.11, 0.32, 0.42, 0.10, 0.45, 0.20, 0.070, 0.17, false},  // coupe
    {0.56, 0.15, 0.18, 0.68, 0.14, 0.20, 0.05, 0.070, 0.15, false},  // hatchback
}};

constexpr std::array<std::array<double, 3>, kSyntheticPalette> kPalette{{
    {0.80, 0.10, 0.10},  // red
    {0.10, 0.25, 0.80},  // blue
    {0.95, 0.95, 0.95},  // white
    {0.15, 0.15, 0.15},  // black
    {0.65, 0.67, 0.70},  // silver
    {0.10, 0.60, 0.25},  // green
    {0.95, 0.85, 0.10},  // yellow
    {0.95, 0.50, 0.10},  // orange
}};

Shape jitter(Shape s, std::mt19937_64& rng, double amount) {
  std::uniform_real_distribution<double> u(1.0 - amount, 1.0 + amount);
  s.length *= u(rng);
  s.body_h *= u(rng);
  s.cabin_start *= u(rng);
  s.cabin_len = std::min(s.cabin_len * u(rng), 1.0 - s.cabin_start - 0.01);
  s.cabin_h *= u(rng);
  s.taper_front *= u(rng);
  s.taper_rear *= u(rng);
  s.wheel_r *= u(rng);
  s.wheel_inset *= u(rng);
  return s;
}

// Brand trim shared by every identity of a brand: badge outline and hub size/tone.
struct Trim {
  int badge;
  double hub;
  double hub_tone;
};

constexpr std::array<Trim, 6> kTrims{{
    {0, 0.30, 0.85}, {1, 0.70, 0.35}, {2, 0.50, 0.95}, {3, 0.62, 0.60}, {4, 0.25, 0.50}, {5, 0.45, 0.20},
}};

struct Look {
  Shape shape;
  Trim trim;
  int color_id;
  int stripe_color;
  double stripe_pos;  // fraction of body height from the top
  double window_tone;
};

cv::Scalar bgr(const std::array<double, 3>& rgb) { return cv::Scalar(rgb[2] * 255, rgb[1] * 255, rgb[0] * 255); }

// Draws the vehicle at canvas resolution `r` into colour and alpha planes.
void draw_vehicle(const Look& look, int r, cv::Mat& color, cv::Mat& alpha) {
  color = cv::Mat(r, r, CV_8UC3, cv::Scalar(0, 0, 0));
  alpha = cv::Mat(r, r, CV_8UC1, cv::Scalar(0));
  const Shape& s = look.shape;
  auto px = [r](double v) { return static_cast<int>(std::lround(v * r)); };
  auto pt = [&](double x, double y) { return cv::Point(px(x), px(y)); };
  auto fill_poly = [&](const std::vector<cv::Point>& poly, const cv::Scalar& c) {
    cv::fillConvexPoly(color, poly, c);
    cv::fillConvexPoly(alpha, poly, cv::Scalar(255));
  };

  const double ground = 0.70;
  const double x0 = 0.5 - s.length / 2, x1 = 0.5 + s.length / 2;
  const double body_bottom = ground - 0.5 * s.wheel_r;
  const double body_top = body_bottom - s.body_h;
  const cv::Scalar paint = bgr(kPalette[look.color_id]);

  // Cabin trapezoid on top of the body.
  const double ca = x0 + s.cabin_start * s.length;
  const double cb = std::min(ca + s.cabin_len * s.length, x1);
  const double cw = cb - ca;
  const double roof = body_top - s.cabin_h;
  const std::vector<cv::Point> cabin{pt(ca, body_top), pt(cb, body_top), pt(cb - s.taper_front * cw, roof),
                                     pt(ca + s.taper_rear * cw, roof)};
  fill_poly(cabin, paint);
  const double inset = 0.18 * s.cabin_h;
  const std::vector<cv::Point> window{
      pt(ca + inset + s.taper_rear * cw * 0.8, body_top - inset * 0.6),
      pt(cb - inset - s.taper_front * cw * 0.8, body_top - inset * 0.6),
      pt(cb - inset - s.taper_front * cw, roof + inset), pt(ca + inset + s.taper_rear * cw, roof + inset)};
  const double wt = look.window_tone * 255;
  fill_poly(window, cv::Scalar(wt * 1.15, wt, wt * 0.9));

  // Body, trim stripe, load-bed wall, lights.
  const std::vector<cv::Point> body{pt(x0, body_top), pt(x1, body_top), pt(x1, body_bottom), pt(x0, body_bottom)};
  fill_poly(body, paint);
  const double sy = body_top + look.stripe_pos * s.body_h;
  const double st = 0.16 * s.body_h;
  fill_poly({pt(x0, sy), pt(x1, sy), pt(x1, sy + st), pt(x0, sy + st)}, bgr(kPalette[look.stripe_color]));
  if (s.bed) {
    const double wall = 0.35 * s.cabin_h;
    fill_poly({pt(x0, body_top - wall), pt(x0 + 0.03, body_top - wall), pt(x0 + 0.03, body_top), pt(x0, body_top)},
              paint);
    fill_poly({pt(cb + 0.01, body_top - wall * 0.4), pt(x0 + 0.03, body_top - wall * 0.4),
               pt(x0 + 0.03, body_top), pt(cb + 0.01, body_top)},
              cv::Scalar(40, 40, 40));
  }
  fill_poly({pt(x1 - 0.035, body_top + 0.2 * s.body_h), pt(x1, body_top + 0.2 * s.body_h),
             pt(x1, body_top + 0.45 * s.body_h), pt(x1 - 0.035, body_top + 0.45 * s.body_h)},
            cv::Scalar(170, 240, 255));
  fill_poly({pt(x0, body_top + 0.2 * s.body_h), pt(x0 + 0.025, body_top + 0.2 * s.body_h),
             pt(x0 + 0.025, body_top + 0.4 * s.body_h), pt(x0, body_top + 0.4 * s.body_h)},
            cv::Scalar(30, 30, 200));

  // Panel edges keep the silhouette visible whatever the paint and background.
  const int edge = std::max(1, r / 64);
  cv::polylines(color, cabin, true, cv::Scalar(15, 15, 15), edge, cv::LINE_AA);
  cv::polylines(color, body, true, cv::Scalar(15, 15, 15), edge, cv::LINE_AA);

  // Brand badge between the wheels: white with a black outline.
  const cv::Point bc = pt(x0 + 0.45 * s.length, body_top + 0.45 * s.body_h);
  const int br = px(std::min(0.06, 0.45 * s.body_h));
  std::vector<cv::Point> badge;
  switch (look.trim.badge) {
    case 0:
      badge = {};
      break;
    case 1:
      badge = {{bc.x, bc.y - br}, {bc.x + br, bc.y + br}, {bc.x - br, bc.y + br}};
      break;
    case 2:
      badge = {{bc.x - br, bc.y - br}, {bc.x + br, bc.y - br}, {bc.x + br, bc.y + br}, {bc.x - br, bc.y + br}};
      break;
    case 3:
      badge = {{bc.x, bc.y - br}, {bc.x + br, bc.y}, {bc.x, bc.y + br}, {bc.x - br, bc.y}};
      break;
    case 4:
      badge = {{bc.x - br, bc.y - br / 3}, {bc.x + br, bc.y - br / 3}, {bc.x + br, bc.y + br / 3},
               {bc.x - br, bc.y + br / 3}};
      break;
    default:
      badge = {{bc.x - br / 3, bc.y - br}, {bc.x + br / 3, bc.y - br}, {bc.x + br / 3, bc.y + br},
               {bc.x - br / 3, bc.y + br}};
      break;
  }
  if (badge.empty()) {
    cv::circle(color, bc, br, cv::Scalar(245, 245, 245), cv::FILLED);
    cv::circle(color, bc, br, cv::Scalar(10, 10, 10), edge);
  } else {
    cv::fillConvexPoly(color, badge, cv::Scalar(245, 245, 245));
    cv::polylines(color, badge, true, cv::Scalar(10, 10, 10), edge);
  }

  // Wheels.
  const double hub = look.trim.hub_tone * 255;
  for (double wx : {x0 + s.wheel_inset * s.length, x1 - s.wheel_inset * s.length}) {
    const cv::Point c = pt(wx, body_bottom);
    cv::circle(color, c, px(s.wheel_r), cv::Scalar(20, 20, 20), cv::FILLED);
    cv::circle(alpha, c, px(s.wheel_r), cv::Scalar(255), cv::FILLED);
    cv::circle(color, c, px(look.trim.hub * s.wheel_r), cv::Scalar(hub, hub, hub), cv::FILLED);
  }
}

Image render_view(const Look& look, int size, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u01(0.0, 1.0);
  auto uniform = [&](double lo, double hi) { return lo + (hi - lo) * u01(rng); };
  const int r = 2 * size;
  cv::Mat color, alpha;
  draw_vehicle(look, r, color, alpha);

  const double angle = uniform(-10.0, 10.0);
  const double scale = uniform(0.85, 1.10);
  const double tx = uniform(-0.07, 0.07) * r, ty = uniform(-0.05, 0.05) * r;
  cv::Mat m = cv::getRotationMatrix2D(cv::Point2f(r / 2.0f, r / 2.0f), angle, scale);
  m.at<double>(0, 2) += tx;
  m.at<double>(1, 2) += ty;
  cv::Mat wc, wa;
  cv::warpAffine(color, wc, m, color.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar(0, 0, 0));
  cv::warpAffine(alpha, wa, m, alpha.size(), cv::INTER_LINEAR, cv::BORDER_CONSTANT, cv::Scalar(0));

  cv::Mat small_c, small_a;
  cv::resize(wc, small_c, cv::Size(size, size), 0, 0, cv::INTER_AREA);
  cv::resize(wa, small_a, cv::Size(size, size), 0, 0, cv::INTER_AREA);

  const double tone = uniform(0.45, 0.75);
  const double brightness = uniform(0.9, 1.1);
  std::normal_distribution<double> noise(0.0, 0.015);
  Image out(size, size);
  for (int y = 0; y < size; ++y) {
    const double bg = tone * (1.0 - 0.25 * static_cast<double>(y) / size);
    for (int x = 0; x < size; ++x) {
      const double a = small_a.at<unsigned char>(y, x) / 255.0;
      const auto& c = small_c.at<cv::Vec3b>(y, x);
      for (int ch = 0; ch < 3; ++ch) {
        // Premultiplied colour: warped/resized colour already carries the alpha weight.
        const double fg = c[2 - ch] / 255.0;
        double v = (fg + (1.0 - a) * bg) * brightness + noise(rng);
        out.at(y, x, ch) = static_cast<float>(std::clamp(v, 0.0, 1.0));
      }
    }
  }
  return quantize_8bit(out);
}

}  // namespace

DatasetView generate_synthetic(int num_brands, int ids_per_brand, int views_per_id, std::uint64_t seed,
                               int image_size) {
  if (num_brands < 1 || ids_per_brand < 1 || views_per_id < 1) {
    throw ConfigError("synthetic dataset counts must all be >= 1");
  }
  if (image_size < 8) throw ConfigError("synthetic image size must be >= 8");
  const int train_per_brand = (ids_per_brand + 1) / 2;

  struct Identity {
    int brand, index;
    Look look;
  };
  std::vector<Identity> train_ids, test_ids;
  std::vector<std::string> brand_names;
  for (int b = 0; b < num_brands; ++b) {
    std::mt19937_64 brand_rng(stream_seed(seed, 1, b, 0));
    const Shape brand_shape = jitter(kStyles[b % kStyles.size()], brand_rng, b < 6 ? 0.04 : 0.10);
    char name[32];
    std::snprintf(name, sizeof name, "b%02d", b);
    brand_names.emplace_back(name);
    for (int i = 0; i < ids_per_brand; ++i) {
      std::mt19937_64 id_rng(stream_seed(seed, 2, b, i));
      Look look;
      look.shape = jitter(brand_shape, id_rng, 0.015);
      look.trim = kTrims[b % kTrims.size()];
      look.color_id = i % std::min(kSyntheticPalette, train_per_brand);
      look.stripe_color = (look.color_id + 1 + (2 * i + i / kSyntheticPalette) % (kSyntheticPalette - 1)) %
                          kSyntheticPalette;
      look.stripe_pos = std::uniform_real_distribution<double>(0.25, 0.65)(id_rng);
      look.window_tone = std::uniform_real_distribution<double>(0.15, 0.40)(id_rng);
      (i < train_per_brand ? train_ids : test_ids).push_back({b, i, look});
    }
  }

  std::vector<std::string> identity_names;
  std::vector<Sample> samples;
  samples.reserve(static_cast<std::size_t>(num_brands) * ids_per_brand * views_per_id);
  auto emit = [&](const Identity& id, bool train) {
    const int identity_id = static_cast<int>(identity_names.size());
    char name[48];
    std::snprintf(name, sizeof name, "b%02d i%03d", id.brand, id.index);
    identity_names.emplace_back(name);
    for (int v = 0; v < views_per_id; ++v) {
      std::mt19937_64 view_rng(stream_seed(seed, 3 + 1000 * static_cast<std::uint64_t>(id.brand), id.index, v));
      Sample s;
      s.image = render_view(id.look, image_size, view_rng);
      s.identity_id = identity_id;
      s.brand_id = id.brand;
      s.color_id = id.look.color_id;
      s.camera_id = v;
      s.split = train ? Split::train : (v == 0 ? Split::query : Split::gallery);
      char tag[64];
      std::snprintf(tag, sizeof tag, "syn_b%02d_i%03d_v%03d", id.brand, id.index, v);
      s.source = tag;
      samples.push_back(std::move(s));
    }
  };
  for (const Identity& id : train_ids) emit(id, true);
  for (const Identity& id : test_ids) emit(id, false);

  std::vector<std::string> color_names{"red", "blue", "white", "black", "silver", "green", "yellow", "orange"};
  return DatasetView(std::move(samples), std::move(identity_names),
                     {{"brand", brand_names}, {"color", color_names}});
}

// ---------------------------------------------------------------------------
// Export / index files

namespace {

std::string sanitize(const std::string& s) {
  std::string out = s;
  for (char& c : out)
    if (!(std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_' || c == '.')) c = '_';
  return out;
}

std::string file_stem(const Sample& s) {
  const fs::path p(s.source);
  return sanitize(p.has_extension() ? p.stem().string() : s.source);
}

std::string csv_quote(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + "\"";
}

std::vector<std::string> csv_split(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  bool quoted = false;
  for (std::size_t i = 0; i < line.size(); ++i) {
    const char c = line[i];
    if (quoted) {
      if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
        cur += '"';
        ++i;
      } else if (c == '"') {
        quoted = false;
      } else {
        cur += c;
      }
    } else if (c == '"') {
      quoted = true;
    } else if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  out.push_back(cur);
  return out;
}

std::string opt_str(const std::optional<int>& v) { return v ? std::to_string(*v) : std::string(); }
std::optional<int> opt_parse(const std::string& s) {
  if (s.empty()) return std::nullopt;
  return std::stoi(s);
}

std::ofstream open_out(const fs::path& p) {
  std::ofstream out(p);
  if (!out) throw IngestError("cannot write " + p.string());
  return out;
}

}  // namespace

void export_cars196(const DatasetView& view, const fs::path& root) {
  for (const Sample& s : view.samples()) {
    const fs::path dir = root / (s.split == Split::train ? "train" : "test") / view.identity_names()[s.identity_id];
    fs::create_directories(dir);
    save_image(s.image, dir / (file_stem(s) + ".png"));
  }
}

void write_identity_map(const DatasetView& view, const fs::path& path) {
  std::ofstream out = open_out(path);
  out << "id,name\n";
  for (std::size_t i = 0; i < view.identity_names().size(); ++i) {
    out << i << ',' << csv_quote(view.identity_names()[i]) << '\n';
  }
}

void save_index(const DatasetView& view, const fs::path& dir) {
  fs::create_directories(dir);
  std::ofstream out = open_out(dir / "samples.csv");
  out << "path,identity_id,brand_id,color_id,type_id,camera_id,split\n";
  for (const Sample& s : view.samples()) {
    std::string path = s.source;
    if (!fs::is_regular_file(path)) {
      fs::create_directories(dir / "images");
      path = (fs::path("images") / (file_stem(s) + ".png")).string();
      save_image(s.image, dir / path);
    } else {
      path = fs::absolute(path).string();
    }
    out << csv_quote(path) << ',' << s.identity_id << ',' << opt_str(s.brand_id) << ','
        << opt_str(s.color_id) << ',' << opt_str(s.type_id) << ',' << opt_str(s.camera_id) << ','
        << to_string(s.split) << '\n';
  }
  write_identity_map(view, dir / "identities.csv");
  std::ofstream attrs = open_out(dir / "attributes.csv");
  attrs << "attribute,id,name\n";
  for (const auto& [attr, names] : view.attribute_names()) {
    for (std::size_t i = 0; i < names.size(); ++i) attrs << attr << ',' << i << ',' << csv_quote(names[i]) << '\n';
  }
}

DatasetView load_index(const fs::path& dir, int input_size) {
  std::ifstream in(dir / "samples.csv");
  if (!in) throw IngestError("no sample index at " + (dir / "samples.csv").string());
  std::string line;
  std::getline(in, line);
  std::vector<Sample> samples;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 7) throw IngestError("malformed samples.csv line: " + line);
    Sample s;
    fs::path p(f[0]);
    if (p.is_relative()) p = dir / p;
    s.image = load_image(p, input_size);
    s.identity_id = std::stoi(f[1]);
    s.brand_id = opt_parse(f[2]);
    s.color_id = opt_parse(f[3]);
    s.type_id = opt_parse(f[4]);
    s.camera_id = opt_parse(f[5]);
    s.split = parse_split(f[6]);
    s.source = p.string();
    samples.push_back(std::move(s));
  }
  if (samples.empty()) throw IngestError("no samples found in " + dir.string());

  std::vector<std::string> names;
  std::ifstream ids(dir / "identities.csv");
  if (!ids) throw IngestError("missing identities.csv in " + dir.string());
  std::getline(ids, line);
  while (std::getline(ids, line)) {
    if (line.empty()) continue;
    const auto f = csv_split(line);
    if (f.size() != 2) throw IngestError("malformed identities.csv line: " + line);
    names.push_back(f[1]);
  }
  std::map<std::string, std::vector<std::string>> attr_names;
  std::ifstream attrs(dir / "attributes.csv");
  if (attrs) {
    std::getline(attrs, line);
    while (std::getline(attrs, line)) {
      if (line.empty()) continue;
      const auto f = csv_split(line);
      if (f.size() != 3) throw IngestError("malformed attributes.csv line: " + line);
      attr_names[f[0]].push_back(f[2]);
    }
  }
  return DatasetView(std::move(samples), std::move(names), std::move(attr_names));
}

std::string fingerprint(const DatasetView& view) {
  Sha256 h;
  for (const Sample& s : view.samples()) {
    std::ostringstream labels;
    labels << s.identity_id << '|' << opt_str(s.brand_id) << '|' << opt_str(s.color_id) << '|'
           << opt_str(s.type_id) << '|' << opt_str(s.camera_id) << '|' << to_string(s.split) << '|'
           << s.image.height << 'x' << s.image.width << '\n';
    h.update(labels.str());
    h.update(s.image.pixels.data(), s.image.pixels.size() * sizeof(float));
  }
  for (const std::string& n : view.identity_names()) h.update(n + "\n");
  return h.hex_digest();
}

}  // namespace vteam
