#include "casd/synth_data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <random>

#include "json.hpp"

namespace casd {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr std::size_t kGridSizes[] = {12, 20, 32, 48};
constexpr std::size_t kJitteredBoxes = 10;
constexpr std::size_t kPlacementAttempts = 200;
constexpr std::uint64_t kProposalSalt = 0x9e3779b97f4a7c15ULL;

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

bool inside_shape(ShapeClass cls, const BBox& b, float px, float py) {
  const float cx = 0.5f * (b.x1 + b.x2), cy = 0.5f * (b.y1 + b.y2);
  const float half = 0.5f * b.width();
  switch (cls) {
    case ShapeClass::Circle: {
      const float dx = px - cx, dy = py - cy;
      return dx * dx + dy * dy <= half * half;
    }
    case ShapeClass::Square:
      return px >= b.x1 && px <= b.x2 && py >= b.y1 && py <= b.y2;
    case ShapeClass::Triangle: {
      if (py < b.y1 || py > b.y2) return false;
      const float t = (py - b.y1) / b.height();
      return std::abs(px - cx) <= t * half;
    }
  }
  return false;
}

float best_iou(const BBox& box, const std::vector<BBox>& proposals) {
  float best = 0;
  for (const auto& p : proposals) best = std::max(best, iou(box, p));
  return best;
}

json manifest_json(const DatasetManifest& m) {
  return {{"split", m.split},         {"count", m.count},
          {"num_classes", m.num_classes}, {"seed", m.seed},
          {"image_size", m.image_size}, {"images", m.images}};
}

Tensor<float> boxes_tensor(const std::vector<BBox>& boxes) {
  Tensor<float> t({boxes.size(), 4});
  for (std::size_t i = 0; i < boxes.size(); ++i) {
    t.at(i, 0) = boxes[i].x1;
    t.at(i, 1) = boxes[i].y1;
    t.at(i, 2) = boxes[i].x2;
    t.at(i, 3) = boxes[i].y2;
  }
  return t;
}

}  // namespace

std::string index_name(std::size_t index) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%05zu", index);
  return buf;
}

std::vector<BBox> grid_proposals(std::size_t height, std::size_t width) {
  std::vector<BBox> out;
  for (auto s : kGridSizes) {
    if (s > height || s > width) continue;
    const std::size_t stride = s / 2;
    for (std::size_t y = 0; y + s <= height; y += stride) {
      for (std::size_t x = 0; x + s <= width; x += stride) {
        out.push_back({static_cast<float>(x), static_cast<float>(y), static_cast<float>(x + s),
                       static_cast<float>(y + s)});
      }
    }
  }
  return out;
}

std::vector<BBox> generate_proposals(std::size_t height, std::size_t width, std::uint64_t seed) {
  auto out = grid_proposals(height, width);
  const std::size_t grid_count = out.size();
  if (grid_count == 0) return out;
  std::mt19937_64 rng(splitmix64(seed ^ kProposalSalt));
  std::uniform_int_distribution<std::size_t> pick(0, grid_count - 1);
  std::uniform_real_distribution<float> shift(-0.25f, 0.25f);
  std::uniform_real_distribution<float> stretch(0.8f, 1.25f);
  const auto fw = static_cast<float>(width), fh = static_cast<float>(height);
  for (std::size_t i = 0; i < kJitteredBoxes; ++i) {
    const BBox base = out[pick(rng)];
    const float w = base.width() * stretch(rng), h = base.height() * stretch(rng);
    const float cx = 0.5f * (base.x1 + base.x2) + shift(rng) * base.width();
    const float cy = 0.5f * (base.y1 + base.y2) + shift(rng) * base.height();
    // Integer coordinates keep the box identical across save/load.
    BBox b{std::round(cx - 0.5f * w), std::round(cy - 0.5f * h), std::round(cx + 0.5f * w),
           std::round(cy + 0.5f * h)};
    b = b.clipped(fw, fh);
    if (b.width() < 4 || b.height() < 4) continue;
    if (std::find(out.begin(), out.end(), b) != out.end()) continue;
    out.push_back(b);
  }
  return out;
}

std::uint64_t sample_seed(std::uint64_t seed, std::uint64_t split_tag, std::size_t index) {
  return splitmix64(splitmix64(seed ^ (split_tag << 48)) ^ static_cast<std::uint64_t>(index));
}

SampleRecord generate_sample(const DatasetParams& params, std::uint64_t split_tag,
                             std::size_t index) {
  const std::uint64_t s = sample_seed(params.seed, split_tag, index);
  std::mt19937_64 rng(s);
  const std::size_t side = params.image_size;

  SampleRecord rec;
  rec.proposals = generate_proposals(side, side, s);
  rec.labels.assign(static_cast<std::size_t>(params.num_classes), 0.0f);

  Tensor<float> pix({3, side, side});
  std::uniform_real_distribution<float> background(0.0f, 0.5f);
  for (auto& v : pix.data()) v = background(rng);

  std::uniform_int_distribution<std::size_t> n_obj(params.min_objects, params.max_objects);
  std::uniform_int_distribution<int> cls_dist(0, params.num_classes - 1);
  std::uniform_int_distribution<std::size_t> side_dist(params.min_side, params.max_side);
  std::uniform_real_distribution<float> color(0.55f, 1.0f);
  std::uniform_real_distribution<float> grain(-0.05f, 0.05f);

  const std::size_t wanted = n_obj(rng);
  for (std::size_t o = 0; o < wanted; ++o) {
    const int cls = cls_dist(rng);
    for (std::size_t attempt = 0; attempt < kPlacementAttempts; ++attempt) {
      const std::size_t sz = side_dist(rng);
      std::uniform_int_distribution<std::size_t> pos(0, side - sz);
      const auto x = static_cast<float>(pos(rng)), y = static_cast<float>(pos(rng));
      const BBox box{x, y, x + static_cast<float>(sz), y + static_cast<float>(sz)};
      const bool overlaps = std::any_of(rec.gt.begin(), rec.gt.end(), [&](const GroundTruth& g) {
        return iou(g.box, box) > params.max_instance_iou;
      });
      if (overlaps || best_iou(box, rec.proposals) < 0.5f) continue;

      const float col[3] = {color(rng), color(rng), color(rng)};
      const auto shape = static_cast<ShapeClass>(cls);
      for (std::size_t py = static_cast<std::size_t>(box.y1); py < static_cast<std::size_t>(box.y2); ++py) {
        for (std::size_t px = static_cast<std::size_t>(box.x1); px < static_cast<std::size_t>(box.x2);
             ++px) {
          if (!inside_shape(shape, box, static_cast<float>(px) + 0.5f,
                            static_cast<float>(py) + 0.5f)) {
            continue;
          }
          for (std::size_t c = 0; c < 3; ++c) {
            pix.at(c, py, px) = std::clamp(col[c] + grain(rng), 0.0f, 1.0f);
          }
        }
      }
      rec.gt.push_back({box, cls});
      rec.labels[static_cast<std::size_t>(cls)] = 1.0f;
      break;
    }
  }
  rec.image = Image{std::move(pix), index_name(index)};
  return rec;
}

void save_sample(const fs::path& dir, std::size_t index, const SampleRecord& s) {
  const std::string name = index_name(index);
  for (const char* sub : {"images", "proposals", "gt"}) fs::create_directories(dir / sub);
  save_tnsr(dir / "images" / (name + ".tnsr"), s.image.pixels);
  save_tnsr(dir / "proposals" / (name + ".tnsr"), boxes_tensor(s.proposals));
  json gt = json::array();
  for (const auto& g : s.gt) {
    gt.push_back({{"box", {g.box.x1, g.box.y1, g.box.x2, g.box.y2}}, {"class", g.cls}});
  }
  std::ofstream os(dir / "gt" / (name + ".json"));
  if (!os) throw FormatError("cannot write ground truth for sample " + name);
  os << gt.dump() << '\n';
}

DatasetManifest generate_dataset(const fs::path& dir, const std::string& split,
                                 std::size_t n_images, const DatasetParams& params) {
  if (n_images == 0) throw ContractError("generate_dataset: need at least one image");
  if (params.num_classes < 1 || params.num_classes > 3) {
    throw ContractError("generate_dataset: the shape vocabulary has 3 classes");
  }
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "proposals");
  fs::create_directories(dir / "gt");
  // FNV-1a, so the tag (and the images) do not depend on the standard library.
  std::uint64_t split_tag = 0xcbf29ce484222325ULL;
  for (const unsigned char ch : split) split_tag = (split_tag ^ ch) * 0x100000001b3ULL;
  split_tag &= 0xffff;

  DatasetManifest m;
  m.split = split;
  m.count = n_images;
  m.num_classes = params.num_classes;
  m.seed = params.seed;
  m.image_size = params.image_size;
  Tensor<float> labels({n_images, static_cast<std::size_t>(params.num_classes)});
  for (std::size_t i = 0; i < n_images; ++i) {
    const auto rec = generate_sample(params, split_tag, i);
    save_sample(dir, i, rec);
    for (std::size_t c = 0; c < rec.labels.size(); ++c) labels.at(i, c) = rec.labels[c];
    m.images.push_back("images/" + index_name(i) + ".tnsr");
  }
  save_tnsr(dir / "labels.tnsr", labels);
  std::ofstream os(dir / "manifest.json");
  if (!os) throw FormatError("cannot write manifest in " + dir.string());
  os << manifest_json(m).dump(2) << '\n';
  return m;
}

Dataset::Dataset(fs::path dir) : dir_(std::move(dir)) {
  std::ifstream is(dir_ / "manifest.json");
  if (!is) throw FormatError("missing dataset manifest in " + dir_.string());
  try {
    const json j = json::parse(is);
    manifest_.split = j.at("split").get<std::string>();
    manifest_.count = j.at("count").get<std::size_t>();
    manifest_.num_classes = j.at("num_classes").get<int>();
    manifest_.seed = j.at("seed").get<std::uint64_t>();
    manifest_.image_size = j.at("image_size").get<std::size_t>();
    manifest_.images = j.at("images").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError("bad manifest in " + dir_.string() + ": " + e.what());
  }
  if (manifest_.images.size() != manifest_.count) {
    throw FormatError("manifest image list does not match its count");
  }
  labels_ = load_tnsr(dir_ / "labels.tnsr");
  if (labels_.shape() !=
      Shape{manifest_.count, static_cast<std::size_t>(manifest_.num_classes)}) {
    throw FormatError("labels.tnsr shape " + shape_str(labels_.shape()) +
                      " does not match manifest");
  }
}

void Dataset::check_index(std::size_t index) const {
  if (index >= manifest_.count) {
    throw FormatError("sample index " + std::to_string(index) + " out of range (" +
                      std::to_string(manifest_.count) + " samples)");
  }
}

TrainSample Dataset::load_train(std::size_t index) const {
  check_index(index);
  TrainSample s;
  const std::string name = index_name(index);
  s.image.pixels = load_tnsr(dir_ / manifest_.images[index]);
  s.image.id = name;
  if (s.image.pixels.rank() != 3 || s.image.pixels.dim(0) != 3) {
    throw FormatError("image " + name + " has shape " + shape_str(s.image.pixels.shape()));
  }
  const auto boxes = load_tnsr(dir_ / "proposals" / (name + ".tnsr"));
  if (boxes.rank() != 2 || boxes.dim(1) != 4) throw FormatError("bad proposals for " + name);
  for (std::size_t i = 0; i < boxes.dim(0); ++i) {
    s.proposals.push_back({boxes.at(i, 0), boxes.at(i, 1), boxes.at(i, 2), boxes.at(i, 3)});
  }
  const std::size_t c = static_cast<std::size_t>(manifest_.num_classes);
  s.labels.assign(labels_.ptr() + index * c, labels_.ptr() + (index + 1) * c);
  return s;
}

SampleRecord Dataset::load_sample(std::size_t index) const {
  auto t = load_train(index);
  SampleRecord rec{std::move(t.image), std::move(t.labels), std::move(t.proposals), {}};
  const auto path = dir_ / "gt" / (index_name(index) + ".json");
  std::ifstream is(path);
  if (!is) throw FormatError("missing ground truth " + path.string());
  try {
    for (const auto& g : json::parse(is)) {
      const auto b = g.at("box").get<std::vector<float>>();
      if (b.size() != 4) throw FormatError("ground-truth box needs 4 coordinates");
      rec.gt.push_back({{b[0], b[1], b[2], b[3]}, g.at("class").get<int>()});
    }
  } catch (const json::exception& e) {
    throw FormatError("bad ground truth " + path.string() + ": " + e.what());
  }
  return rec;
}

double proposal_coverage(const std::vector<SampleRecord>& samples, float thr) {
  std::size_t total = 0, covered = 0;
  for (const auto& s : samples) {
    for (const auto& g : s.gt) {
      ++total;
      covered += best_iou(g.box, s.proposals) >= thr ? 1 : 0;
    }
  }
  return total ? static_cast<double>(covered) / static_cast<double>(total) : 1.0;
}

}  // namespace casd
