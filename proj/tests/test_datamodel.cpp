#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <set>

#include "helpers.hpp"
#include "vteam/augment.hpp"
#include "vteam/dataset.hpp"
#include "vteam/error.hpp"
#include "vteam/sampler.hpp"

using namespace vteam;
namespace fs = std::filesystem;

namespace {

void write_png(const fs::path& p, float shade) {
  fs::create_directories(p.parent_path());
  Image img(12, 10, shade);
  img.at(3, 4, 1) = 1.0f - shade;
  save_image(img, p);
}

/// Three identities, six images: 001 and 002 train, 003 seen by two cameras.
fs::path veri_fixture() {
  const fs::path root = testing::scratch_dir("veri_fixture");
  write_png(root / "image_train" / "001_c001_1.jpg", 0.1f);
  write_png(root / "image_train" / "001_c002_2.jpg", 0.2f);
  write_png(root / "image_train" / "002_c001_3.jpg", 0.3f);
  write_png(root / "image_train" / "002_c003_4.jpg", 0.4f);
  write_png(root / "image_query" / "003_c001_5.jpg", 0.5f);
  write_png(root / "image_test" / "003_c002_6.jpg", 0.6f);
  return root;
}

fs::path cars_fixture() {
  const fs::path root = testing::scratch_dir("cars_fixture");
  write_png(root / "train" / "Audi A4 2012" / "a.png", 0.1f);
  write_png(root / "train" / "Audi A4 2012" / "b.png", 0.2f);
  write_png(root / "train" / "BMW X5 2010" / "c.png", 0.3f);
  write_png(root / "test" / "Audi TT 2011" / "d.png", 0.4f);
  write_png(root / "test" / "Volvo C30 2009" / "e.png", 0.5f);
  return root;
}

double correlation(const Image& a, const Image& b) {
  double ma = 0, mb = 0;
  const std::size_t n = a.pixels.size();
  for (std::size_t i = 0; i < n; ++i) {
    ma += a.pixels[i];
    mb += b.pixels[i];
  }
  ma /= n;
  mb /= n;
  double sab = 0, saa = 0, sbb = 0;
  for (std::size_t i = 0; i < n; ++i) {
    sab += (a.pixels[i] - ma) * (b.pixels[i] - mb);
    saa += (a.pixels[i] - ma) * (a.pixels[i] - ma);
    sbb += (b.pixels[i] - mb) * (b.pixels[i] - mb);
  }
  return sab / std::sqrt(saa * sbb);
}

bool same_labels(const Sample& a, const Sample& b) {
  return a.identity_id == b.identity_id && a.brand_id == b.brand_id && a.color_id == b.color_id &&
         a.type_id == b.type_id && a.camera_id == b.camera_id && a.split == b.split;
}

}  // namespace

TEST_CASE("veri fixture ingests to 3 identities and 6 samples") {
  const DatasetView v = ingest_directory(veri_fixture(), Layout::veri776, 16);
  CHECK(v.size() == 6);
  CHECK(v.num_identities() == 3);
  CHECK(v.num_identities(Split::train) == 2);
  CHECK(v.split(Split::query).size() == 1);
  CHECK(v.split(Split::gallery).size() == 1);
  CHECK(v.identity_names() == std::vector<std::string>{"001", "002", "003"});
  for (const Sample& s : v.samples()) {
    CHECK(s.camera_id.has_value());
    CHECK(s.image.height == 16);
    CHECK(s.image.width == 16);
  }
  CHECK(*v.split(Split::query)[0]->camera_id == 1);
  CHECK(*v.split(Split::gallery)[0]->camera_id == 2);
}

TEST_CASE("ingestion is idempotent") {
  const fs::path root = veri_fixture();
  CHECK(ingest_directory(root, Layout::veri776, 16) == ingest_directory(root, Layout::veri776, 16));
  const fs::path cars = cars_fixture();
  CHECK(ingest_directory(cars, Layout::cars196, 16) == ingest_directory(cars, Layout::cars196, 16));
}

TEST_CASE("cars196 fixture: classes are identities, first token is the brand") {
  const DatasetView v = ingest_directory(cars_fixture(), Layout::cars196, 16);
  CHECK(v.size() == 5);
  CHECK(v.num_identities() == 4);
  CHECK(v.num_identities(Split::train) == 2);
  CHECK(v.test_samples().size() == 2);
  CHECK(v.num_attribute_classes().at("brand") == 3);
  CHECK(v.attribute_names().at("brand") == std::vector<std::string>{"Audi", "BMW", "Volvo"});
  int audi = 0;
  for (const Sample& s : v.samples()) audi += *s.brand_id == 0;
  CHECK(audi == 3);
}

TEST_CASE("ingestion errors") {
  const fs::path empty = testing::scratch_dir("empty_root");
  CHECK_THROWS_WITH_AS(ingest_directory(empty, Layout::cars196), doctest::Contains("no samples found"), IngestError);
  CHECK_THROWS_AS(ingest_directory(empty / "absent", Layout::cars196), IngestError);

  const fs::path root = veri_fixture();
  fs::remove_all(root / "image_query");
  CHECK_THROWS_WITH_AS(ingest_directory(root, Layout::veri776, 16), doctest::Contains("image_query"), IngestError);

  const fs::path dup = veri_fixture();
  write_png(dup / "image_test" / "001_c001_1.jpg", 0.9f);
  try {
    ingest_directory(dup, Layout::veri776, 16);
    FAIL("expected a duplicate error");
  } catch (const IngestError& e) {
    const std::string msg = e.what();
    CHECK(msg.find((dup / "image_train" / "001_c001_1.jpg").string()) != std::string::npos);
    CHECK(msg.find((dup / "image_test" / "001_c001_1.jpg").string()) != std::string::npos);
  }

  const fs::path leak = veri_fixture();
  write_png(leak / "image_test" / "001_c009_9.jpg", 0.9f);
  CHECK_THROWS_AS(ingest_directory(leak, Layout::veri776, 16), IngestError);

  const fs::path bad = veri_fixture();
  write_png(bad / "image_train" / "garbage.jpg", 0.9f);
  CHECK_THROWS_AS(ingest_directory(bad, Layout::veri776, 16), IngestError);
}

TEST_CASE("a query crop repeated in the gallery is accepted") {
  const fs::path root = veri_fixture();
  fs::copy_file(root / "image_query" / "003_c001_5.jpg", root / "image_test" / "003_c001_5.jpg");
  const DatasetView v = ingest_directory(root, Layout::veri776, 16);
  CHECK(v.size() == 7);
}

TEST_CASE("synthetic generator counts and determinism") {
  const DatasetView a = generate_synthetic(4, 5, 8, 7, 32);
  CHECK(a.size() == 160);
  CHECK(a.num_identities() == 20);
  CHECK(a.num_attribute_classes().at("brand") == 4);
  CHECK(a == generate_synthetic(4, 5, 8, 7, 32));
  CHECK(fingerprint(a) == fingerprint(generate_synthetic(4, 5, 8, 7, 32)));
  CHECK(fingerprint(a) != fingerprint(generate_synthetic(4, 5, 8, 8, 32)));
  CHECK(a.num_identities(Split::train) == 12);
  CHECK(a.split(Split::query).size() == 8);
  CHECK(a.split(Split::gallery).size() == 56);

  const DatasetView one = generate_synthetic(1, 1, 1, 3, 32);
  CHECK(one.size() == 1);
  CHECK(one.num_identities() == 1);

  CHECK_THROWS(generate_synthetic(0, 1, 1, 3, 32));
}

TEST_CASE("synthetic colour carries no brand information") {
  const DatasetView v = generate_synthetic(4, 5, 8, 7, 32);
  std::map<int, std::set<int>> colours_by_brand;
  for (const Sample& s : v.samples()) colours_by_brand[*s.brand_id].insert(*s.color_id);
  for (const auto& [brand, colours] : colours_by_brand) CHECK(colours == colours_by_brand.at(0));
}

TEST_CASE("same-brand identities correlate more than cross-brand identities") {
  const DatasetView v = generate_synthetic(4, 5, 8, 7, 64);
  // Mean image per identity, then mean pairwise correlation.
  std::map<int, Image> mean;
  std::map<int, int> brand_of, count;
  for (const Sample& s : v.samples()) {
    auto& m = mean[s.identity_id];
    if (m.empty()) m = Image(s.image.height, s.image.width, 0.0f);
    for (std::size_t i = 0; i < m.pixels.size(); ++i) m.pixels[i] += s.image.pixels[i];
    brand_of[s.identity_id] = *s.brand_id;
    ++count[s.identity_id];
  }
  double same = 0, cross = 0;
  int ns = 0, nc = 0;
  for (const auto& [i, a] : mean)
    for (const auto& [j, b] : mean) {
      if (j <= i) continue;
      const double c = correlation(a, b);
      if (brand_of[i] == brand_of[j]) {
        same += c;
        ++ns;
      } else {
        cross += c;
        ++nc;
      }
    }
  CHECK(same / ns > cross / nc);
}

TEST_CASE("export, index and ingest round trips") {
  const DatasetView v = generate_synthetic(2, 2, 3, 5, 32);
  const fs::path dir = testing::scratch_dir("export");
  export_cars196(v, dir);
  const DatasetView back = ingest_directory(dir, Layout::cars196, 32);
  CHECK(back.size() == v.size());
  CHECK(back.num_identities() == v.num_identities());

  const fs::path idx = testing::scratch_dir("index");
  save_index(v, idx);
  const DatasetView loaded = load_index(idx, 32);
  REQUIRE(loaded.size() == v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    CHECK(same_labels(loaded.samples()[i], v.samples()[i]));
    CHECK(loaded.samples()[i].image == quantize_8bit(v.samples()[i].image));
  }
  CHECK(loaded.identity_names() == v.identity_names());
}

TEST_CASE("random erasing") {
  const DatasetView v = generate_synthetic(1, 1, 1, 2, 64);
  const Sample& s = v.samples()[0];
  std::mt19937_64 rng(1);

  ErasingParams off;
  off.probability = 0.0;
  CHECK(random_erase(s, off, rng) == s);

  ErasingParams on;
  on.probability = 1.0;
  on.area_range = {0.02, 0.4};
  for (int t = 0; t < 200; ++t) {
    const Sample e = random_erase(s, on, rng);
    CHECK(same_labels(e, s));
    int y0 = 64, y1 = -1, x0 = 64, x1 = -1, changed = 0;
    for (int y = 0; y < 64; ++y)
      for (int x = 0; x < 64; ++x) {
        bool diff = false;
        for (int c = 0; c < 3; ++c) diff |= e.image.at(y, x, c) != s.image.at(y, x, c);
        if (!diff) continue;
        ++changed;
        y0 = std::min(y0, y), y1 = std::max(y1, y), x0 = std::min(x0, x), x1 = std::max(x1, x);
      }
    REQUIRE(changed > 0);
    const double box = static_cast<double>((y1 - y0 + 1) * (x1 - x0 + 1));
    CHECK(box / (64.0 * 64.0) <= 0.4 + 1e-9);
    // Rounding the rectangle to whole pixels can shave a little off the low end.
    CHECK(box / (64.0 * 64.0) >= 0.02 * 0.5);
    CHECK(changed >= box * 0.95);
    for (float p : e.image.pixels) CHECK((p >= 0.0f && p <= 1.0f));
  }

  std::mt19937_64 r1(9), r2(9);
  CHECK(random_erase(s, on, r1) == random_erase(s, on, r2));

  ErasingParams bad;
  bad.area_range = {0.5, 0.2};
  CHECK_THROWS(bad.validate());
  bad = {};
  bad.probability = 1.5;
  CHECK_THROWS(bad.validate());
}

TEST_CASE("augmentation never changes labels") {
  const DatasetView v = generate_synthetic(3, 2, 2, 4, 32);
  std::mt19937_64 rng(3);
  ErasingParams ep;
  ep.probability = 0.7;
  ColourParams cp;
  cp.grey_probability = 0.5;
  cp.brightness = 0.3;
  cp.contrast = 0.3;
  for (int t = 0; t < 5; ++t)
    for (const Sample& s : v.samples()) {
      CHECK(same_labels(random_erase(s, ep, rng), s));
      const Sample c = colour_augment(s, cp, rng);
      CHECK(same_labels(c, s));
      for (float p : c.image.pixels) CHECK((p >= 0.0f && p <= 1.0f));
    }
}

TEST_CASE("colour augmentation permutes channels or greys") {
  Sample s;
  s.image = Image(2, 2, 0.0f);
  for (int y = 0; y < 2; ++y)
    for (int x = 0; x < 2; ++x) {
      s.image.at(y, x, 0) = 0.1f;
      s.image.at(y, x, 1) = 0.5f;
      s.image.at(y, x, 2) = 0.9f;
    }
  std::mt19937_64 rng(5);
  ColourParams perm;
  perm.grey_probability = 0.0;
  std::set<std::vector<float>> orders;
  for (int t = 0; t < 200; ++t) {
    const Sample c = colour_augment(s, perm, rng);
    std::vector<float> px{c.image.at(0, 0, 0), c.image.at(0, 0, 1), c.image.at(0, 0, 2)};
    std::vector<float> sorted = px;
    std::sort(sorted.begin(), sorted.end());
    CHECK(sorted == std::vector<float>{0.1f, 0.5f, 0.9f});
    orders.insert(px);
  }
  CHECK(orders.size() == 6);

  ColourParams grey;
  grey.grey_probability = 1.0;
  const Sample g = colour_augment(s, grey, rng);
  CHECK(g.image.at(1, 1, 0) == doctest::Approx(0.5));
  CHECK(g.image.at(1, 1, 0) == g.image.at(1, 1, 2));
}

TEST_CASE("pk sampling") {
  const DatasetView v = ingest_directory(veri_fixture(), Layout::veri776, 16);
  std::mt19937_64 rng(1);
  const TripletBatch b = sample_pk_batch(v, 2, 2, rng);
  CHECK(b.samples.size() == 4);
  CHECK(std::set<int>(b.labels.begin(), b.labels.end()).size() == 2);
  for (std::size_t i = 0; i < b.samples.size(); ++i) {
    CHECK(v.samples()[b.samples[i]].split == Split::train);
    CHECK(v.samples()[b.samples[i]].identity_id == b.labels[i]);
  }
  CHECK_THROWS(sample_pk_batch(v, 3, 2, rng));
}

TEST_CASE("pk sampling covers every train identity") {
  const DatasetView v = generate_synthetic(4, 5, 8, 7, 32);
  std::set<int> seen;
  for (std::uint64_t seed = 0; seed < 1000; ++seed) {
    std::mt19937_64 rng(seed);
    const TripletBatch b = sample_pk_batch(v, 3, 4, rng);
    CHECK(b.samples.size() == 12);
    seen.insert(b.labels.begin(), b.labels.end());
  }
  CHECK(static_cast<int>(seen.size()) == v.num_identities(Split::train));

  std::mt19937_64 rng(2);
  const TripletBatch brands = sample_pk_batch(v, 4, 8, rng, Attribute::brand);
  CHECK(std::set<int>(brands.labels.begin(), brands.labels.end()).size() == 4);
  for (std::size_t i = 0; i < brands.samples.size(); ++i)
    CHECK(*v.samples()[brands.samples[i]].brand_id == brands.labels[i]);
}

TEST_CASE("every enumerated triplet is valid") {
  const DatasetView v = generate_synthetic(4, 5, 8, 7, 32);
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    std::mt19937_64 rng(seed);
    const TripletBatch b = sample_pk_batch(v, 3, 4, rng);
    const auto triplets = enumerate_triplets(b);
    // P*K anchors, K-1 positives, (P-1)*K negatives each.
    CHECK(triplets.size() == static_cast<std::size_t>(12 * 3 * 8));
    for (const auto& t : triplets) {
      CHECK(b.labels[t[0]] == b.labels[t[1]]);
      CHECK(t[0] != t[1]);
      CHECK(b.labels[t[0]] != b.labels[t[2]]);
    }
  }
}
