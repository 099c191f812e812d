#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <set>

#include "casd/synth_data.hpp"

using namespace casd;
namespace fs = std::filesystem;

namespace {

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& name) : path(fs::temp_directory_path() / name) {
    fs::remove_all(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

template <typename S>
concept HasGt = requires(S s) { s.gt; };

}  // namespace

static_assert(!HasGt<TrainSample>, "the training view must not expose GT boxes");
static_assert(HasGt<SampleRecord>);

TEST(Proposals, GridCountMatchesStrideArithmetic) {
  // (floor((64 - s) / (s / 2)) + 1)^2 for s = 12, 20, 32, 48: 81 + 25 + 9 + 1.
  EXPECT_EQ(grid_proposals(64, 64).size(), 116u);
  for (const auto& b : grid_proposals(64, 64)) {
    EXPECT_GE(b.x1, 0.0f);
    EXPECT_LE(b.x2, 64.0f);
    EXPECT_EQ(b.width(), b.height());
  }
}

TEST(Proposals, JitteredBoxesValidAndUnique) {
  const auto p = generate_proposals(64, 64, 7);
  EXPECT_GT(p.size(), 116u);
  EXPECT_LE(p.size(), 126u);
  std::set<std::tuple<float, float, float, float>> seen;
  for (const auto& b : p) {
    EXPECT_TRUE(b.valid());
    EXPECT_GE(b.x1, 0.0f);
    EXPECT_LE(b.y2, 64.0f);
    EXPECT_TRUE(seen.insert({b.x1, b.y1, b.x2, b.y2}).second);
  }
  EXPECT_EQ(generate_proposals(64, 64, 7), p);
}

TEST(Generator, LabelsConsistentWithGroundTruth) {
  DatasetParams params;
  for (std::size_t i = 0; i < 200; ++i) {
    const auto s = generate_sample(params, 1, i);
    EXPECT_EQ(s.image.pixels.shape(), (Shape{3, 64, 64}));
    ASSERT_GE(s.gt.size(), 1u);
    ASSERT_LE(s.gt.size(), 3u);
    std::vector<float> expect(3, 0.0f);
    for (const auto& g : s.gt) expect[static_cast<std::size_t>(g.cls)] = 1.0f;
    EXPECT_EQ(s.labels, expect);
    for (std::size_t a = 0; a < s.gt.size(); ++a)
      for (std::size_t b = a + 1; b < s.gt.size(); ++b)
        EXPECT_LE(iou(s.gt[a].box, s.gt[b].box), 0.3f);
    for (float v : s.image.pixels.data()) {
      ASSERT_GE(v, 0.0f);
      ASSERT_LE(v, 1.0f);
    }
  }
}

TEST(Generator, ClassBalanceNearUniform) {
  DatasetParams params;
  std::size_t counts[3] = {0, 0, 0}, total = 0;
  for (std::size_t i = 0; i < 1000; ++i) {
    for (const auto& g : generate_sample(params, 1, i).gt) {
      ++counts[g.cls];
      ++total;
    }
  }
  for (auto c : counts) {
    const double frac = static_cast<double>(c) / static_cast<double>(total);
    EXPECT_NEAR(frac, 1.0 / 3.0, 0.1 / 3.0);
  }
}

TEST(Generator, ProposalCoverage) {
  DatasetParams params;
  std::vector<SampleRecord> samples;
  for (std::size_t i = 0; i < 300; ++i) samples.push_back(generate_sample(params, 2, i));
  EXPECT_GE(proposal_coverage(samples), 0.95);
}

TEST(Dataset, SameSeedIsByteIdentical) {
  TempDir a("casd_synth_a"), b("casd_synth_b");
  DatasetParams params;
  params.seed = 5;
  generate_dataset(a.path, "train", 6, params);
  generate_dataset(b.path, "train", 6, params);
  for (const auto& e : fs::recursive_directory_iterator(a.path)) {
    if (!e.is_regular_file()) continue;
    const auto rel = fs::relative(e.path(), a.path);
    EXPECT_EQ(slurp(e.path()), slurp(b.path / rel)) << rel;
  }
}

TEST(Dataset, TrainAndTestStreamsDiffer) {
  DatasetParams params;
  TempDir a("casd_synth_split");
  generate_dataset(a.path / "train", "train", 2, params);
  generate_dataset(a.path / "test", "test", 2, params);
  EXPECT_NE(slurp(a.path / "train" / "images" / "00000.tnsr"),
            slurp(a.path / "test" / "images" / "00000.tnsr"));
}

TEST(Dataset, RoundTripAndTrainView) {
  TempDir d("casd_synth_rt");
  DatasetParams params;
  params.seed = 9;
  const auto m = generate_dataset(d.path, "test", 4, params);
  EXPECT_EQ(m.count, 4u);
  const Dataset ds(d.path);
  EXPECT_EQ(ds.size(), 4u);
  EXPECT_EQ(ds.num_classes(), 3);
  for (std::size_t i = 0; i < 4; ++i) {
    const auto rec = ds.load_sample(i);
    const auto tr = ds.load_train(i);
    EXPECT_EQ(rec.image.pixels, tr.image.pixels);
    EXPECT_EQ(rec.labels, tr.labels);
    EXPECT_EQ(rec.proposals, tr.proposals);
  }
}

TEST(Dataset, SavedSampleMatchesGenerator) {
  TempDir d("casd_synth_save");
  DatasetParams params;
  const auto s = generate_sample(params, 3, 0);
  fs::create_directories(d.path);
  save_sample(d.path, 0, s);
  std::ifstream gt(d.path / "gt" / "00000.json");
  ASSERT_TRUE(gt.good());
  EXPECT_EQ(load_tnsr(d.path / "images" / "00000.tnsr"), s.image.pixels);
  const auto props = load_tnsr(d.path / "proposals" / "00000.tnsr");
  EXPECT_EQ(props.shape(), (Shape{s.proposals.size(), 4}));
  EXPECT_EQ(props.at(0, 2), s.proposals[0].x2);
}

TEST(Dataset, Errors) {
  TempDir d("casd_synth_err");
  EXPECT_THROW(Dataset(d.path / "missing"), FormatError);
  DatasetParams params;
  generate_dataset(d.path, "train", 2, params);
  const Dataset ds(d.path);
  EXPECT_THROW(ds.load_sample(2), FormatError);

  // Truncate an image file.
  const auto img = d.path / "images" / "00001.tnsr";
  const auto bytes = slurp(img);
  std::ofstream(img, std::ios::binary | std::ios::trunc) << bytes.substr(0, bytes.size() / 2);
  EXPECT_THROW(ds.load_sample(1), FormatError);

  std::ofstream(d.path / "manifest.json", std::ios::trunc) << "{not json";
  EXPECT_THROW(Dataset{d.path}, FormatError);
}

TEST(Dataset, IndexNames) {
  EXPECT_EQ(index_name(0), "00000");
  EXPECT_EQ(index_name(123), "00123");
}
