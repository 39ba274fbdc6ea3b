#include <filesystem>
#include <fstream>

#include <boost/math/distributions/chi_squared.hpp>
#include <gtest/gtest.h>

#include "mtbackdoor/data.hpp"
#include "oracles/brute_force.hpp"

using namespace mtb;

namespace {

std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mtb_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

double chi_square_p(const std::vector<double>& observed, const std::vector<double>& probs) {
  double n = 0;
  for (double o : observed) n += o;
  double stat = 0;
  for (std::size_t i = 0; i < observed.size(); ++i) {
    const double e = n * probs[i];
    stat += (observed[i] - e) * (observed[i] - e) / e;
  }
  boost::math::chi_squared dist(double(observed.size() - 1));
  return boost::math::cdf(boost::math::complement(dist, stat));
}

}  // namespace

TEST(Iou, HandExamples) {
  EXPECT_DOUBLE_EQ(iou({0, 0, 10, 10}, {0, 0, 10, 10}), 1.0);
  EXPECT_EQ(iou({0, 0, 10, 10}, {20, 20, 30, 30}), 0.0);
  EXPECT_NEAR(iou({0, 0, 10, 10}, {5, 0, 15, 10}), 50.0 / 150.0, 1e-12);
}

TEST(Iou, TouchingEdgesGiveExactZero) {
  EXPECT_EQ(iou({0, 0, 10, 10}, {10, 0, 20, 10}), 0.0);
  EXPECT_EQ(iou({0, 0, 10, 10}, {0, 10, 10, 20}), 0.0);
}

TEST(Iou, MatchesPixelRasterOnIntegerGrids) {
  Rng rng(11);
  for (int trial = 0; trial < 500; ++trial) {
    auto draw = [&] {
      const int x = rng.between(0, 20), y = rng.between(0, 20);
      return BoundingBox{double(x), double(y), double(x + rng.between(1, 12)), double(y + rng.between(1, 12))};
    };
    const BoundingBox a = draw(), b = draw();
    EXPECT_NEAR(iou(a, b), oracle::raster_iou(a, b), 1e-12);
  }
}

TEST(Iou, SymmetricAndBounded) {
  Rng rng(5);
  for (int trial = 0; trial < 2000; ++trial) {
    auto draw = [&] {
      const double x = rng.uniform(0, 50), y = rng.uniform(0, 50);
      return BoundingBox{x, y, x + rng.uniform(0.1, 20), y + rng.uniform(0.1, 20)};
    };
    const BoundingBox a = draw(), b = draw();
    const double v = iou(a, b);
    EXPECT_EQ(v, iou(b, a));
    EXPECT_GE(v, 0.0);
    EXPECT_LE(v, 1.0);
    EXPECT_DOUBLE_EQ(iou(a, a), 1.0);
  }
}

TEST(Rng, EqualSeedsReplay) {
  Rng a(42), b(42), c(43);
  bool differs = false;
  for (int i = 0; i < 1000; ++i) {
    const auto x = a.next_u64();
    EXPECT_EQ(x, b.next_u64());
    differs |= x != c.next_u64();
  }
  EXPECT_TRUE(differs);
  EXPECT_EQ(Rng(7).derive(3).next_u64(), Rng(7).derive(3).next_u64());
  EXPECT_NE(Rng(7).derive(3).next_u64(), Rng(7).derive(4).next_u64());
}

TEST(Rng, UniformAndBelowStayInRange) {
  Rng r(1);
  for (int i = 0; i < 10000; ++i) {
    const double u = r.uniform();
    EXPECT_GE(u, 0.0);
    EXPECT_LT(u, 1.0);
    EXPECT_LT(r.below(7), 7u);
    const int b = r.between(-3, 3);
    EXPECT_GE(b, -3);
    EXPECT_LE(b, 3);
  }
}

TEST(DetectionSet, FilterKeepsScoresAtOrAboveTau) {
  DetectionSet s{{{{0, 0, 1, 1}, 0, 0.29}, {{0, 0, 1, 1}, 1, 0.3}, {{0, 0, 1, 1}, 2, 0.9}}, {10, 10}};
  const auto f = s.filtered(0.3);
  ASSERT_EQ(f.size(), 2u);
  EXPECT_EQ(f.records[0].class_id, 1);
  EXPECT_EQ(f.records[1].class_id, 2);
}

TEST(Dataset, ForcedObjectCount) {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.n_images = 1;
  spec.min_objects = spec.max_objects = 2;
  spec.seed = 7;
  const auto data = generate_dataset(spec);
  ASSERT_EQ(data.size(), 1u);
  EXPECT_EQ(data[0].annotations.size(), 2u);
}

TEST(Dataset, SamplesAreValid) {
  DatasetSpec spec;
  spec.n_images = 100;
  spec.seed = 3;
  for (const auto& s : generate_dataset(spec)) {
    EXPECT_TRUE(s.annotations.valid(spec.num_classes)) << s.id;
    for (double v : s.image.pixels) {
      ASSERT_GE(v, 0.0);
      ASSERT_LE(v, 1.0);
    }
  }
}

TEST(Dataset, SkewedFrequencyConcentrates) {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.n_images = 500;
  spec.class_frequency = {0.97, 0.01, 0.01, 0.01};
  spec.seed = 9;
  const auto data = generate_dataset(spec);
  const auto stats = compute_stats(data, 4);
  const double total = std::accumulate(stats.instance_counts.begin(), stats.instance_counts.end(), 0.0);
  EXPECT_GE(stats.instance_counts[0] / total, 0.90);
  EXPECT_EQ(std::max_element(stats.instance_counts.begin(), stats.instance_counts.end()) - stats.instance_counts.begin(), 0);

  // Independent recount straight from the exported annotation JSON.
  const Json coco = export_coco(data, {"a", "b", "c", "d"});
  std::vector<double> recount(4, 0.0);
  for (const auto& a : coco["annotations"]) recount[std::size_t(a["category_id"].get<int>() - 1)] += 1;
  EXPECT_EQ(recount, stats.instance_counts);
}

TEST(Dataset, ClassFrequencyChiSquare) {
  DatasetSpec spec;
  spec.num_classes = 4;
  spec.n_images = 2000;
  spec.class_frequency = {0.4, 0.3, 0.2, 0.1};
  spec.seed = 21;
  const auto stats = compute_stats(generate_dataset(spec), 4);
  EXPECT_GT(chi_square_p(stats.instance_counts, spec.class_frequency), 0.01);
}

TEST(Dataset, ImbalancedFrequencyShape) {
  const auto f = imbalanced_frequency(4, 0.8);
  EXPECT_NEAR(std::accumulate(f.begin(), f.end(), 0.0), 1.0, 1e-12);
  EXPECT_NEAR(f.back() / f.front(), 0.2, 1e-12);
  for (std::size_t i = 1; i < f.size(); ++i) EXPECT_LT(f[i], f[i - 1]);
  EXPECT_THROW(imbalanced_frequency(0, 0.5), ConfigError);
  EXPECT_THROW(imbalanced_frequency(4, 1.0), ConfigError);
}

TEST(Dataset, InvalidSpecsRejected) {
  DatasetSpec spec;
  spec.num_classes = 0;
  EXPECT_THROW(generate_dataset(spec), ConfigError);
  spec.num_classes = 4;
  spec.class_frequency = {0.5, 0.5};
  EXPECT_THROW(generate_dataset(spec), ConfigError);
}

TEST(Stats, HandCounted) {
  std::vector<Sample> s(2);
  s[0].annotations.records = {{{0, 0, 1, 1}, 0, 1}, {{0, 0, 1, 1}, 1, 1}};
  s[1].annotations.records = {{{0, 0, 1, 1}, 0, 1}};
  const auto st = compute_stats(s, 3);
  EXPECT_EQ(st.instance_counts, (std::vector<double>{2, 1, 0}));
  EXPECT_EQ(st.coexistence(0, 1), 1);
  EXPECT_EQ(st.coexistence(1, 0), 1);
  EXPECT_EQ(st.coexistence(0, 0), 2);
  EXPECT_EQ(st.coexistence(2, 2), 0);
}

TEST(Stats, EmptyDatasetIsZero) {
  const auto st = compute_stats({}, 3);
  EXPECT_EQ(st.instance_counts, std::vector<double>(3, 0.0));
  for (double v : st.coexistence.values) EXPECT_EQ(v, 0.0);
}

TEST(Stats, CoexistenceSymmetricWithImageCountDiagonal) {
  DatasetSpec spec;
  spec.n_images = 300;
  spec.seed = 4;
  const auto data = generate_dataset(spec);
  const auto st = compute_stats(data, 4);
  for (int i = 0; i < 4; ++i) {
    int images_with_i = 0;
    for (const auto& s : data)
      images_with_i += std::any_of(s.annotations.records.begin(), s.annotations.records.end(),
                                   [&](const DetectionRecord& r) { return r.class_id == i; });
    EXPECT_EQ(st.coexistence(i, i), images_with_i);
    for (int j = 0; j < 4; ++j) EXPECT_EQ(st.coexistence(i, j), st.coexistence(j, i));
  }
}

TEST(Coco, BboxConvention) {
  const Json doc = Json::parse(R"({"images":[{"id":3,"file_name":"x.png","width":100,"height":100}],
    "annotations":[{"id":1,"image_id":3,"category_id":1,"bbox":[10,20,30,40]}],
    "categories":[{"id":1,"name":"thing"}]})");
  const auto ds = parse_coco(doc);
  ASSERT_EQ(ds.samples.size(), 1u);
  ASSERT_EQ(ds.samples[0].annotations.size(), 1u);
  EXPECT_EQ(ds.samples[0].annotations.records[0].box, (BoundingBox{10, 20, 40, 60}));
}

TEST(Coco, EmptyAnnotations) {
  const Json doc = Json::parse(R"({"images":[{"id":1,"file_name":"a.png","width":8,"height":8},
    {"id":2,"file_name":"b.png","width":8,"height":8}],"annotations":[],"categories":[{"id":1,"name":"c"}]})");
  const auto ds = parse_coco(doc);
  ASSERT_EQ(ds.samples.size(), 2u);
  EXPECT_TRUE(ds.samples[0].annotations.empty());
  EXPECT_TRUE(ds.samples[1].annotations.empty());
}

TEST(Coco, SparseCategoryIdsRemapAndRoundTrip) {
  const Json doc = Json::parse(R"({"images":[{"id":1,"file_name":"a.png","width":50,"height":50}],
    "annotations":[{"id":1,"image_id":1,"category_id":9,"bbox":[1,1,5,5]},
                   {"id":2,"image_id":1,"category_id":1,"bbox":[2,2,5,5]},
                   {"id":3,"image_id":1,"category_id":5,"bbox":[3,3,5,5]}],
    "categories":[{"id":5,"name":"five"},{"id":1,"name":"one"},{"id":9,"name":"nine"}]})");
  const auto ds = parse_coco(doc);
  EXPECT_EQ(ds.class_names, (std::vector<std::string>{"one", "five", "nine"}));
  EXPECT_EQ(ds.category_ids, (std::vector<long long>{1, 5, 9}));
  const auto& recs = ds.samples[0].annotations.records;
  EXPECT_EQ(recs[0].class_id, 2);
  EXPECT_EQ(recs[1].class_id, 0);
  EXPECT_EQ(recs[2].class_id, 1);
  const auto again = parse_coco(export_coco(ds.samples, ds.class_names, ds.category_ids));
  EXPECT_EQ(again.samples[0].annotations, ds.samples[0].annotations);
  EXPECT_EQ(again.category_ids, ds.category_ids);
}

TEST(Coco, DegenerateBoxesSkippedAndCounted) {
  const Json doc = Json::parse(R"({"images":[{"id":1,"file_name":"a.png","width":50,"height":50}],
    "annotations":[{"id":1,"image_id":1,"category_id":1,"bbox":[1,1,0,5]},
                   {"id":2,"image_id":1,"category_id":1,"bbox":[1,1,4,4]}],
    "categories":[{"id":1,"name":"c"}]})");
  const auto ds = parse_coco(doc);
  EXPECT_EQ(ds.skipped_records, 1);
  EXPECT_EQ(ds.samples[0].annotations.size(), 1u);
}

TEST(Coco, MalformedDocumentsThrowParseError) {
  EXPECT_THROW(parse_coco(Json::parse("[]")), ParseError);
  EXPECT_THROW(parse_coco(Json::parse(R"({"images":[],"annotations":[{"id":4,"image_id":99,"category_id":1,
    "bbox":[0,0,1,1]}],"categories":[{"id":1,"name":"c"}]})")),
               ParseError);
}

TEST(Coco, GeneratedDatasetRoundTrip) {
  DatasetSpec spec;
  spec.n_images = 40;
  spec.seed = 12;
  const auto data = generate_dataset(spec);
  std::vector<std::string> names;
  for (int c = 0; c < 4; ++c) names.push_back(synthetic_class_name(c));
  const auto back = parse_coco(export_coco(data, names));
  ASSERT_EQ(back.samples.size(), data.size());
  for (std::size_t i = 0; i < data.size(); ++i) EXPECT_EQ(back.samples[i].annotations, data[i].annotations);
}

TEST(DatasetDir, SaveLoadAndByteIdenticalRerun) {
  DatasetSpec spec;
  spec.n_images = 12;
  spec.seed = 5;
  const auto dir1 = scratch_dir("ds1"), dir2 = scratch_dir("ds2");
  save_dataset(dir1, make_synthetic(spec), &spec);
  save_dataset(dir2, make_synthetic(spec), &spec);
  for (const char* f : {"annotations.json", "stats.json"}) {
    ASSERT_TRUE(std::filesystem::exists(dir1 / f));
    EXPECT_EQ(slurp(dir1 / f), slurp(dir2 / f)) << f;
  }
  const Dataset loaded = load_dataset(dir1);
  const Dataset fresh = make_synthetic(spec);
  ASSERT_EQ(loaded.samples.size(), fresh.samples.size());
  for (std::size_t i = 0; i < fresh.samples.size(); ++i) {
    EXPECT_EQ(loaded.samples[i].annotations, fresh.samples[i].annotations);
    // PNG stores 8-bit channels.
    for (std::size_t k = 0; k < fresh.samples[i].image.pixels.size(); ++k)
      ASSERT_NEAR(loaded.samples[i].image.pixels[k], fresh.samples[i].image.pixels[k], 0.5 / 255 + 1e-12);
  }
}
