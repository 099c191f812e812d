#include "casd/trainer.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <ostream>
#include <sstream>

#include "json.hpp"

namespace casd {

namespace fs = std::filesystem;
using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr char kCkptMagic[] = "CASDCKPT1";
constexpr std::size_t kCkptMagicLen = sizeof(kCkptMagic) - 1;

std::uint64_t mix64(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ContractError("config key '" + key + "': expected a number, got '" + v + "'");
  }
}

std::size_t to_size(const std::string& key, const std::string& v) {
  if (v.empty() || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; })) {
    throw ContractError("config key '" + key + "': expected a non-negative integer, got '" + v +
                        "'");
  }
  return static_cast<std::size_t>(std::stoull(v));
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1") return true;
  if (v == "false" || v == "0") return false;
  throw ContractError("config key '" + key + "': expected true/false, got '" + v + "'");
}

template <typename F>
auto to_list(const std::string& key, const std::string& v, F conv) {
  std::vector<decltype(conv(key, v))> out;
  for (const auto& item : split_list(v)) out.push_back(conv(key, item));
  return out;
}

template <typename V>
std::string join(const std::vector<V>& xs) {
  std::ostringstream os;
  os.precision(17);
  for (std::size_t i = 0; i < xs.size(); ++i) os << (i ? "," : "") << xs[i];
  return os.str();
}

// Shortest text that parses back to the same double.
std::string num(double d) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, d);
  return std::string(buf, res.ptr);
}

std::string num(float f) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, f);
  return std::string(buf, res.ptr);
}

template <typename T>
Tensor<T> add_tensors(Tensor<T> a, const Tensor<T>& b) {
  for (std::size_t i = 0; i < a.numel(); ++i) a[i] += b[i];
  return a;
}

template <typename T>
Var<T> mean_of(const std::vector<Var<T>>& xs) {
  Var<T> acc = xs.front();
  for (std::size_t i = 1; i < xs.size(); ++i) acc = add(acc, xs[i]);
  return xs.size() == 1 ? acc : scale(acc, T(1) / static_cast<T>(xs.size()));
}

template <typename T>
double sum_values(const std::vector<Var<T>>& xs) {
  double s = 0;
  for (const auto& x : xs) s += static_cast<double>(x.value().item());
  return s;
}

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

bool is_split(const fs::path& dir) { return fs::exists(dir / "manifest.json"); }

}  // namespace

std::string regularizer_name(BaselineRegularizer r) {
  switch (r) {
    case BaselineRegularizer::None: return "none";
    case BaselineRegularizer::PredConsistency: return "pred_consistency";
    case BaselineRegularizer::AttnConsistency: return "attn_consistency";
  }
  return "none";
}

BaselineRegularizer parse_regularizer(const std::string& s) {
  if (s == "none") return BaselineRegularizer::None;
  if (s == "pred_consistency") return BaselineRegularizer::PredConsistency;
  if (s == "attn_consistency") return BaselineRegularizer::AttnConsistency;
  throw ContractError("unknown baseline_regularizer '" + s + "'");
}

bool TrainConfig::has_transform(const std::string& t) const {
  return std::find(transforms.begin(), transforms.end(), t) != transforms.end();
}

void TrainConfig::validate() const {
  if (alpha < 0 || beta < 0 || gamma < 0) throw ContractError("loss weights must be >= 0");
  if (num_refine < 1) throw ContractError("num_refine (K) must be >= 1");
  if (!has_transform("orig")) throw ContractError("transforms must include orig");
  for (const auto& t : transforms) {
    if (t != "orig" && t != "flip" && t != "scale") {
      throw ContractError("unknown transform '" + t + "'");
    }
  }
  if (transforms.front() != "orig") throw ContractError("orig must be the first transform");
  if (has_transform("scale") && scales.empty()) throw ContractError("scale set is empty");
  const bool all_views = has_transform("flip") && has_transform("scale");
  if ((enable_iw || baseline_regularizer != BaselineRegularizer::None) && !all_views) {
    throw ContractError("input-wise terms need the flip and scale transforms");
  }
  if (widths.empty()) throw ContractError("backbone needs at least one block");
  for (auto q : lw_blocks) {
    if (q < 1 || q > widths.size()) throw ContractError("lw_blocks entry out of range");
  }
  if (enable_lw && lw_blocks.size() < 2) throw ContractError("lw_blocks needs at least two blocks");
  if (ia_p < 0 || ia_p > 1 || ia_q < 0 || ia_q > 1) throw ContractError("ia_p/ia_q must lie in [0,1]");
  if (lr_decay_factor <= 0) throw ContractError("lr_decay_factor must be positive");
  if (roi_size < 1 || hidden < 1) throw ContractError("roi_size and hidden must be positive");
  if (log_every < 1) throw ContractError("log_every must be >= 1");
}

void apply_setting(TrainConfig& c, const std::string& key, const std::string& v) {
  static const std::map<std::string, std::function<void(TrainConfig&, const std::string&)>>
      setters = {
          {"alpha", [](TrainConfig& c, const std::string& v) { c.alpha = to_double("alpha", v); }},
          {"beta", [](TrainConfig& c, const std::string& v) { c.beta = to_double("beta", v); }},
          {"gamma", [](TrainConfig& c, const std::string& v) { c.gamma = to_double("gamma", v); }},
          {"num_refine",
           [](TrainConfig& c, const std::string& v) { c.num_refine = to_size("num_refine", v); }},
          {"lr", [](TrainConfig& c, const std::string& v) { c.lr = to_double("lr", v); }},
          {"momentum",
           [](TrainConfig& c, const std::string& v) { c.momentum = to_double("momentum", v); }},
          {"weight_decay",
           [](TrainConfig& c, const std::string& v) {
             c.weight_decay = to_double("weight_decay", v);
           }},
          {"lr_decay_factor",
           [](TrainConfig& c, const std::string& v) {
             c.lr_decay_factor = to_double("lr_decay_factor", v);
           }},
          {"decay_at_iter",
           [](TrainConfig& c, const std::string& v) {
             c.decay_at_iter = to_list("decay_at_iter", v, to_size);
           }},
          {"max_iters",
           [](TrainConfig& c, const std::string& v) { c.max_iters = to_size("max_iters", v); }},
          {"nms_thr",
           [](TrainConfig& c, const std::string& v) {
             c.nms_thr = static_cast<float>(to_double("nms_thr", v));
           }},
          {"transforms", [](TrainConfig& c, const std::string& v) { c.transforms = split_list(v); }},
          {"scales",
           [](TrainConfig& c, const std::string& v) { c.scales = to_list("scales", v, to_double); }},
          {"eval_scales",
           [](TrainConfig& c, const std::string& v) {
             c.eval_scales = to_list("eval_scales", v, to_double);
           }},
          {"enable_iw",
           [](TrainConfig& c, const std::string& v) { c.enable_iw = to_bool("enable_iw", v); }},
          {"enable_lw",
           [](TrainConfig& c, const std::string& v) { c.enable_lw = to_bool("enable_lw", v); }},
          {"enable_ia",
           [](TrainConfig& c, const std::string& v) { c.enable_ia = to_bool("enable_ia", v); }},
          {"enable_psa",
           [](TrainConfig& c, const std::string& v) { c.enable_psa = to_bool("enable_psa", v); }},
          {"enable_reg",
           [](TrainConfig& c, const std::string& v) { c.enable_reg = to_bool("enable_reg", v); }},
          {"baseline_regularizer",
           [](TrainConfig& c, const std::string& v) {
             c.baseline_regularizer = parse_regularizer(v);
           }},
          {"lw_blocks",
           [](TrainConfig& c, const std::string& v) {
             c.lw_blocks = to_list("lw_blocks", v, to_size);
           }},
          {"ia_p", [](TrainConfig& c, const std::string& v) { c.ia_p = to_double("ia_p", v); }},
          {"ia_q", [](TrainConfig& c, const std::string& v) { c.ia_q = to_double("ia_q", v); }},
          {"widths",
           [](TrainConfig& c, const std::string& v) { c.widths = to_list("widths", v, to_size); }},
          {"hidden", [](TrainConfig& c, const std::string& v) { c.hidden = to_size("hidden", v); }},
          {"roi_size",
           [](TrainConfig& c, const std::string& v) { c.roi_size = to_size("roi_size", v); }},
          {"seed", [](TrainConfig& c, const std::string& v) { c.seed = to_size("seed", v); }},
          {"log_every",
           [](TrainConfig& c, const std::string& v) { c.log_every = to_size("log_every", v); }},
          {"ckpt_every",
           [](TrainConfig& c, const std::string& v) { c.ckpt_every = to_size("ckpt_every", v); }},
      };
  const auto it = setters.find(key);
  if (it == setters.end()) throw ContractError("unknown config key '" + key + "'");
  it->second(c, v);
}

TrainConfig parse_config(const std::string& text) {
  TrainConfig cfg;
  std::istringstream is(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ContractError("config line " + std::to_string(lineno) + ": expected key = value");
    }
    apply_setting(cfg, trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
  }
  cfg.validate();
  return cfg;
}

TrainConfig load_config(const fs::path& path) {
  std::ifstream is(path);
  if (!is) throw FormatError("cannot read config " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string TrainConfig::to_text() const {
  auto b = [](bool v) { return v ? "true" : "false"; };
  std::ostringstream os;
  os << "alpha = " << num(alpha) << "\nbeta = " << num(beta) << "\ngamma = " << num(gamma)
     << "\nnum_refine = " << num_refine << "\nlr = " << num(lr) << "\nmomentum = " << num(momentum)
     << "\nweight_decay = " << num(weight_decay) << "\nlr_decay_factor = " << num(lr_decay_factor)
     << "\ndecay_at_iter = " << join(decay_at_iter) << "\nmax_iters = " << max_iters
     << "\nnms_thr = " << num(nms_thr) << "\ntransforms = " << join(transforms)
     << "\nscales = " << join(scales) << "\neval_scales = " << join(eval_scales)
     << "\nenable_iw = " << b(enable_iw) << "\nenable_lw = " << b(enable_lw)
     << "\nenable_ia = " << b(enable_ia) << "\nenable_psa = " << b(enable_psa)
     << "\nenable_reg = " << b(enable_reg)
     << "\nbaseline_regularizer = " << regularizer_name(baseline_regularizer)
     << "\nlw_blocks = " << join(lw_blocks) << "\nia_p = " << num(ia_p) << "\nia_q = " << num(ia_q)
     << "\nwidths = " << join(widths) << "\nhidden = " << hidden << "\nroi_size = " << roi_size
     << "\nseed = " << seed << "\nlog_every = " << log_every << "\nckpt_every = " << ckpt_every
     << '\n';
  return os.str();
}

std::uint64_t TrainConfig::hash() const {
  TrainConfig c = *this;
  c.max_iters = 0;
  c.log_every = 1;
  c.ckpt_every = 0;
  return fnv1a(c.to_text());
}

double lr_at(std::size_t iter, const TrainConfig& cfg) {
  const auto passed = std::count_if(cfg.decay_at_iter.begin(), cfg.decay_at_iter.end(),
                                    [&](std::size_t d) { return iter >= d; });
  return cfg.lr / std::pow(cfg.lr_decay_factor, static_cast<double>(passed));
}

template <typename T>
Detector<T>::Detector(const TrainConfig& cfg, int num_classes)
    : num_classes_(num_classes), roi_size_(cfg.roi_size) {
  if (num_classes < 1) throw ContractError("detector needs at least one class");
  std::mt19937_64 rng(mix64(cfg.seed ^ 0x5eedULL));
  backbone_ = Backbone<T>(3, cfg.widths, rng);
  head_ = ProposalHead<T>(cfg.widths.back() * cfg.roi_size * cfg.roi_size, cfg.hidden, rng);
  mil_ = MilHead<T>(head_.out_features(), static_cast<std::size_t>(num_classes), cfg.num_refine,
                    rng);
}

template <typename T>
ViewOutputs<T> Detector<T>::forward(Graph<T>& g, const Tensor<T>& pixels,
                                    std::span<const BBox> boxes) {
  ViewOutputs<T> out;
  out.boxes.assign(boxes.begin(), boxes.end());
  // Centre pixels around zero before the first convolution.
  Tensor<T> centred = pixels;
  for (auto& v : centred.data()) v -= T(0.5);
  out.blocks = backbone_.forward(g, g.input(std::move(centred)));
  const float stride = static_cast<float>(std::size_t{1} << backbone_.num_blocks());
  out.pooled = roi_pool(out.blocks.back(), boxes, stride, roi_size_);
  out.scores = mil_.forward(g, head_.forward(g, out.pooled));
  return out;
}

template <typename T>
std::vector<Parameter<T>*> Detector<T>::parameters() {
  std::vector<Parameter<T>*> out = backbone_.parameters();
  for (auto* p : head_.parameters()) out.push_back(p);
  for (auto* p : mil_.parameters()) out.push_back(p);
  return out;
}

template class Detector<float>;
template class Detector<double>;

StepViews make_views(const TrainSample& sample, const TrainConfig& cfg, std::mt19937_64& rng) {
  StepViews v;
  v.names.push_back("orig");
  v.pixels.push_back(sample.image.pixels);
  v.boxes.push_back(sample.proposals);
  if (cfg.has_transform("flip")) {
    const float w = static_cast<float>(sample.image.width());
    std::vector<BBox> boxes;
    for (const auto& b : sample.proposals) boxes.push_back(flip_box(b, w));
    v.names.push_back("flip");
    v.pixels.push_back(flip_image(sample.image.pixels));
    v.boxes.push_back(std::move(boxes));
  }
  if (cfg.has_transform("scale")) {
    std::uniform_int_distribution<std::size_t> pick(0, cfg.scales.size() - 1);
    v.scale = cfg.scales[pick(rng)];
    std::vector<BBox> boxes;
    for (const auto& b : sample.proposals) boxes.push_back(scale_box(b, v.scale));
    v.names.push_back("scale");
    v.pixels.push_back(scale_image(sample.image, v.scale).pixels);
    v.boxes.push_back(std::move(boxes));
  }
  return v;
}

template <typename T>
Var<T> build_loss(Graph<T>& g, Detector<T>& model, const StepViews& views,
                  std::span<const float> labels, const TrainConfig& cfg, std::mt19937_64& rng,
                  LossBreakdown& breakdown, StopGradState<T>* frozen) {
  const std::size_t n_views = views.pixels.size();
  const std::size_t K = cfg.num_refine;
  std::vector<ViewOutputs<T>> outs;
  for (std::size_t v = 0; v < n_views; ++v) {
    outs.push_back(model.forward(g, views.pixels[v].template cast<T>(), views.boxes[v]));
  }
  const auto& proposals = views.boxes[0];

  LossTerms<T> terms;
  terms.mlc = mlc_loss(image_scores(outs[0].scores.x), labels);

  // Branch k is supervised by the scores of stage k-1 (stage 0 is WSDDN).
  const bool replay = frozen != nullptr && frozen->captured;
  std::vector<PseudoLabels> mined;
  if (replay) {
    if (frozen->mined.size() != K) throw ContractError("frozen pseudo-labels need one entry per branch");
    mined = frozen->mined;
  }
  for (std::size_t k = mined.size(); k < K; ++k) {
    auto source = [&](std::size_t v) -> const Tensor<T>& {
      return k == 0 ? outs[v].scores.x.value() : outs[v].scores.x_k[k - 1].value();
    };
    if (cfg.enable_psa && n_views > 1) {
      std::vector<Tensor<T>> srcs;
      for (std::size_t v = 0; v < n_views; ++v) srcs.push_back(source(v));
      mined.push_back(mine_pseudo_labels(aggregate_scores_psa<T>(srcs), labels, proposals));
    } else {
      mined.push_back(mine_pseudo_labels(source(0), labels, proposals));
    }
  }

  if (frozen != nullptr && !replay) frozen->mined = mined;
  // Replaying a stored target as a constant input gives the same gradients as
  // the detached target, since no gradient flows into either.
  auto freeze = [&](Var<T> target, Tensor<T> StopGradState<T>::*slot) {
    if (frozen == nullptr) return target;
    if (replay) return g.input(frozen->*slot);
    frozen->*slot = target.value();
    return target;
  };

  std::vector<std::vector<float>> selections;
  for (std::size_t k = 0; k < K; ++k) {
    selections.push_back(selection_mask(mined[k]));
    std::vector<Var<T>> per_view;
    for (std::size_t v = 0; v < n_views; ++v) {
      per_view.push_back(refinement_loss(outs[v].scores.log_x_k[k], mined[k]));
    }
    terms.ref.push_back(mean_of(per_view));
  }

  if (cfg.enable_reg) {
    const auto& last = mined[K - 1];
    std::vector<Var<T>> per_view;
    for (std::size_t v = 0; v < n_views; ++v) {
      per_view.push_back(regression_loss(outs[v].scores.offsets,
                                         regression_targets<T>(views.boxes[v], last), last));
    }
    terms.reg.push_back(mean_of(per_view));
  }

  // The attention terms carry weight gamma; with gamma = 0 they are skipped outright.
  if (cfg.gamma > 0) {
    auto align = [&](const Var<T>& a, std::size_t v) {
      return views.names[v] == "flip" ? flip_map(a) : a;
    };
    if (cfg.enable_iw) {
      std::vector<Var<T>> aligned;
      for (std::size_t v = 0; v < n_views; ++v) {
        auto a = proposal_attention(outs[v].pooled);
        if (cfg.enable_ia) {
          a = proposal_attention(
              inverted_attention_mask(outs[v].pooled, a.value(), cfg.ia_q, cfg.ia_p, rng));
        }
        aligned.push_back(align(a, v));
      }
      const auto target = freeze(comprehensive_max<T>(aligned), &StopGradState<T>::iw_target);
      for (std::size_t k = 0; k < K; ++k) {
        terms.iw.push_back(distillation_loss<T>(aligned, target, selections[k]));
      }
    }
    if (cfg.enable_lw) {
      const auto maps = layer_attentions<T>(outs[0].blocks, cfg.lw_blocks, proposals,
                                            model.roi_size());
      const auto target = freeze(comprehensive_lw<T>(maps), &StopGradState<T>::lw_target);
      for (std::size_t k = 0; k < K; ++k) {
        terms.lw.push_back(lw_casd_loss<T>(maps, target, selections[k]));
      }
    }
    if (cfg.baseline_regularizer == BaselineRegularizer::PredConsistency) {
      for (std::size_t k = 0; k < K; ++k) {
        terms.baseline.push_back(baseline_prediction_consistency(
            outs[0].scores.x_k[k], outs[1].scores.x_k[k], outs[2].scores.x_k[k], selections[k]));
      }
    } else if (cfg.baseline_regularizer == BaselineRegularizer::AttnConsistency) {
      std::vector<Var<T>> aligned;
      for (std::size_t v = 0; v < n_views; ++v) {
        aligned.push_back(align(proposal_attention(outs[v].pooled), v));
      }
      for (std::size_t k = 0; k < K; ++k) {
        terms.baseline.push_back(attention_consistency<T>(aligned, selections[k]));
      }
    }
  }

  if (frozen != nullptr) frozen->captured = true;

  auto total = total_loss(terms, cfg.weights());
  breakdown.total = static_cast<double>(total.value().item());
  breakdown.mlc = static_cast<double>(terms.mlc.value().item());
  breakdown.ref = sum_values(terms.ref);
  breakdown.reg = sum_values(terms.reg);
  breakdown.iw = sum_values(terms.iw);
  breakdown.lw = sum_values(terms.lw);
  breakdown.base = sum_values(terms.baseline);
  return total;
}

template Var<float> build_loss(Graph<float>&, Detector<float>&, const StepViews&,
                               std::span<const float>, const TrainConfig&, std::mt19937_64&,
                               LossBreakdown&, StopGradState<float>*);
template Var<double> build_loss(Graph<double>&, Detector<double>&, const StepViews&,
                                std::span<const float>, const TrainConfig&, std::mt19937_64&,
                                LossBreakdown&, StopGradState<double>*);

std::uint64_t step_seed(std::uint64_t seed, std::size_t iter) {
  return mix64(mix64(seed) ^ static_cast<std::uint64_t>(iter));
}

std::size_t sample_index_at(std::uint64_t seed, std::size_t iter, std::size_t n) {
  if (n == 0) throw ContractError("empty training split");
  const std::size_t epoch = iter / n;
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(mix64(mix64(seed ^ 0xe90cULL) + epoch));
  std::shuffle(perm.begin(), perm.end(), rng);
  return perm[iter % n];
}

LossBreakdown train_step(Detector<float>& model, const TrainSample& sample,
                         const TrainConfig& cfg, std::size_t iter) {
  std::mt19937_64 rng(step_seed(cfg.seed, iter));
  const auto views = make_views(sample, cfg, rng);
  Graph<float> g;
  LossBreakdown b;
  auto total = build_loss<float>(g, model, views, sample.labels, cfg, rng, b);
  if (!std::isfinite(b.total)) {
    throw ContractError("non-finite loss at iteration " + std::to_string(iter));
  }
  g.backward(total);
  b.lr = lr_at(iter, cfg);
  const auto params = model.parameters();
  sgd_step<float>(params, static_cast<float>(b.lr), static_cast<float>(cfg.momentum),
                  static_cast<float>(cfg.weight_decay));
  return b;
}

void save_checkpoint(const fs::path& path, Detector<float>& model, const TrainConfig& cfg,
                     std::size_t iter) {
  const auto params = model.parameters();
  json meta;
  meta["iter"] = iter;
  meta["config_hash"] = cfg.hash();
  meta["num_classes"] = model.num_classes();
  meta["config"] = cfg.to_text();
  std::vector<std::string> names;
  for (auto* p : params) names.push_back(p->name);
  meta["names"] = names;
  const std::string text = meta.dump();

  // Write to a sibling file first so an interrupted save keeps the old checkpoint.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream os(tmp, std::ios::binary);
    if (!os) throw FormatError("cannot write checkpoint " + tmp.string());
    os.write(kCkptMagic, kCkptMagicLen);
    const auto len = static_cast<std::uint32_t>(text.size());
    os.write(reinterpret_cast<const char*>(&len), sizeof(len));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (auto* p : params) {
      write_tnsr(os, p->value);
      write_tnsr(os, p->velocity.empty() ? Tensor<float>(p->value.shape(), 0.0f) : p->velocity);
    }
    if (!os) throw FormatError("short write on checkpoint " + tmp.string());
  }
  fs::rename(tmp, path);
}

namespace {

CheckpointMeta read_meta(std::istream& is, const fs::path& path) {
  char magic[kCkptMagicLen];
  is.read(magic, kCkptMagicLen);
  if (!is || std::memcmp(magic, kCkptMagic, kCkptMagicLen) != 0) {
    throw FormatError("bad checkpoint magic in " + path.string());
  }
  std::uint32_t len = 0;
  is.read(reinterpret_cast<char*>(&len), sizeof(len));
  if (!is || len > (1u << 24)) throw FormatError("bad checkpoint header in " + path.string());
  std::string text(len, '\0');
  is.read(text.data(), len);
  if (!is) throw FormatError("truncated checkpoint header in " + path.string());
  CheckpointMeta m;
  try {
    const json j = json::parse(text);
    m.iter = j.at("iter").get<std::size_t>();
    m.config_hash = j.at("config_hash").get<std::uint64_t>();
    m.num_classes = j.at("num_classes").get<int>();
    m.config_text = j.at("config").get<std::string>();
    m.names = j.at("names").get<std::vector<std::string>>();
  } catch (const json::exception& e) {
    throw FormatError("bad checkpoint metadata in " + path.string() + ": " + e.what());
  }
  return m;
}

}  // namespace

CheckpointMeta read_checkpoint_meta(const fs::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  return read_meta(is, path);
}

std::size_t load_checkpoint(const fs::path& path, Detector<float>& model, const TrainConfig& cfg) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw FormatError("cannot open checkpoint " + path.string());
  const auto meta = read_meta(is, path);
  if (meta.config_hash != cfg.hash()) {
    throw ContractError("checkpoint " + path.string() + " was written with a different config");
  }
  const auto params = model.parameters();
  if (meta.names.size() != params.size()) {
    throw FormatError("checkpoint parameter count does not match the model");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (meta.names[i] != params[i]->name) {
      throw FormatError("checkpoint parameter '" + meta.names[i] + "' where '" + params[i]->name +
                        "' was expected");
    }
    auto value = read_tnsr(is);
    auto velocity = read_tnsr(is);
    if (value.shape() != params[i]->value.shape() || velocity.shape() != value.shape()) {
      throw FormatError("checkpoint tensor '" + meta.names[i] + "' has shape " +
                        shape_str(value.shape()));
    }
    params[i]->value = std::move(value);
    params[i]->velocity = std::move(velocity);
    params[i]->grad = Tensor<float>(params[i]->value.shape(), 0.0f);
  }
  return meta.iter;
}

std::string metrics_line(std::size_t iter, const LossBreakdown& l) {
  ordered_json j;
  j["iter"] = iter;
  j["lr"] = l.lr;
  j["total"] = l.total;
  j["mlc"] = l.mlc;
  j["ref"] = l.ref;
  j["reg"] = l.reg;
  j["iw"] = l.iw;
  j["lw"] = l.lw;
  j["base"] = l.base;
  return j.dump();
}

fs::path split_dir(const fs::path& data_dir, const std::string& split) {
  if (is_split(data_dir / split)) return data_dir / split;
  return data_dir;
}

TrainResult run_training(const TrainConfig& cfg, const fs::path& data_dir, const fs::path& out_dir,
                         bool resume, std::ostream* progress) {
  cfg.validate();
  const fs::path train_dir = split_dir(data_dir, "train");
  if (!is_split(train_dir)) throw FormatError("no dataset found at " + data_dir.string());
  const Dataset train(train_dir);
  std::vector<TrainSample> samples;
  samples.reserve(train.size());
  for (std::size_t i = 0; i < train.size(); ++i) samples.push_back(train.load_train(i));

  Detector<float> model(cfg, train.num_classes());
  fs::create_directories(out_dir);
  const fs::path ckpt = out_dir / "checkpoint.ckpt";
  const fs::path metrics_path = out_dir / "metrics.jsonl";

  std::size_t start = 0;
  std::vector<std::string> kept;
  if (resume && fs::exists(ckpt)) {
    start = load_checkpoint(ckpt, model, cfg);
    // Drop lines logged after the checkpoint; they are about to be recomputed.
    std::ifstream old(metrics_path);
    std::string line;
    while (std::getline(old, line)) {
      if (line.empty()) continue;
      if (json::parse(line).at("iter").get<std::size_t>() < start) kept.push_back(line);
    }
  }
  std::ofstream metrics(metrics_path, std::ios::trunc);
  if (!metrics) throw FormatError("cannot write " + metrics_path.string());
  for (const auto& line : kept) metrics << line << '\n';

  TrainResult result;
  for (std::size_t iter = start; iter < cfg.max_iters; ++iter) {
    const auto& sample = samples[sample_index_at(cfg.seed, iter, samples.size())];
    result.last = train_step(model, sample, cfg, iter);
    if (iter % cfg.log_every == 0) {
      metrics << metrics_line(iter, result.last) << '\n' << std::flush;
      if (progress) *progress << metrics_line(iter, result.last) << '\n';
    }
    if (cfg.ckpt_every > 0 && (iter + 1) % cfg.ckpt_every == 0) {
      save_checkpoint(ckpt, model, cfg, iter + 1);
    }
  }
  result.iters_done = std::max(start, cfg.max_iters);
  save_checkpoint(ckpt, model, cfg, result.iters_done);

  const fs::path test_dir = data_dir / "test";
  if (is_split(test_dir)) {
    result.report = run_eval(model, Dataset(test_dir), cfg);
    std::ofstream os(out_dir / "eval.json");
    os << result.report->to_json() << '\n';
  }
  return result;
}

std::vector<Detection> detect(Detector<float>& model, const Image& image,
                              std::span<const BBox> proposals, const TrainConfig& cfg) {
  std::vector<double> scales{1.0};
  scales.insert(scales.end(), cfg.eval_scales.begin(), cfg.eval_scales.end());
  std::vector<Tensor<float>> branch_sum;
  Tensor<float> offsets;
  for (const double s : scales) {
    std::vector<BBox> boxes(proposals.begin(), proposals.end());
    Tensor<float> pixels = image.pixels;
    if (s != 1.0) {
      pixels = scale_image(image, s).pixels;
      for (auto& b : boxes) b = scale_box(b, s);
    }
    Graph<float> g;
    const auto out = model.forward(g, pixels, boxes);
    for (std::size_t k = 0; k < out.scores.x_k.size(); ++k) {
      if (branch_sum.size() <= k) {
        branch_sum.push_back(out.scores.x_k[k].value());
      } else {
        branch_sum[k] = add_tensors(std::move(branch_sum[k]), out.scores.x_k[k].value());
      }
    }
    if (s == 1.0) offsets = out.scores.offsets.value();
  }
  const float inv = 1.0f / static_cast<float>(scales.size());
  for (auto& t : branch_sum) {
    for (auto& v : t.data()) v *= inv;
  }
  return infer_detections(branch_sum, proposals, cfg.nms_thr, model.num_classes(),
                          cfg.enable_reg ? &offsets : nullptr,
                          static_cast<float>(image.width()), static_cast<float>(image.height()));
}

EvalReport run_eval(Detector<float>& model, const Dataset& data, const TrainConfig& cfg) {
  std::vector<std::vector<Detection>> dets;
  std::vector<std::vector<GroundTruth>> gts;
  for (std::size_t i = 0; i < data.size(); ++i) {
    const auto rec = data.load_sample(i);
    auto d = detect(model, rec.image, rec.proposals, cfg);
    for (auto& x : d) x.image = static_cast<int>(i);
    dets.push_back(std::move(d));
    gts.push_back(rec.gt);
  }
  return evaluate(dets, gts, data.num_classes());
}

EvalReport run_eval(const fs::path& ckpt, const fs::path& data_dir) {
  const auto meta = read_checkpoint_meta(ckpt);
  const auto cfg = parse_config(meta.config_text);
  Detector<float> model(cfg, meta.num_classes);
  load_checkpoint(ckpt, model, cfg);
  const Dataset data(split_dir(data_dir, "test"));
  if (data.num_classes() != meta.num_classes) {
    throw FormatError("dataset has " + std::to_string(data.num_classes()) +
                      " classes, checkpoint expects " + std::to_string(meta.num_classes));
  }
  return run_eval(model, data, cfg);
}

namespace {

TrainConfig with_flags(TrainConfig c, bool iw, bool lw, bool ia, bool psa, bool reg) {
  c.enable_iw = iw;
  c.enable_lw = lw;
  c.enable_ia = ia;
  c.enable_psa = psa;
  c.enable_reg = reg;
  c.baseline_regularizer = BaselineRegularizer::None;
  return c;
}

std::string slug(const std::string& name) {
  std::string s;
  for (char ch : name) {
    if (std::isalnum(static_cast<unsigned char>(ch))) {
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    } else if (!s.empty() && s.back() != '_') {
      s += '_';
    }
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

}  // namespace

std::vector<std::string> ablation_suites() {
  return {"table1", "table2", "table3", "gamma", "directional"};
}

std::vector<AblationRow> ablation_rows(const std::string& suite, const TrainConfig& base) {
  const auto baseline = with_flags(base, false, false, false, false, false);
  const auto iw_full = with_flags(base, true, false, true, true, false);
  const auto lw_only = with_flags(base, false, true, false, false, false);
  const auto iw_lw = with_flags(base, true, true, true, true, false);
  if (suite == "table1") {
    return {{"Baseline", baseline},
            {"+IW w/o IA+PSA", with_flags(base, true, false, false, false, false)},
            {"+IW w/o IA", with_flags(base, true, false, false, true, false)},
            {"+IW", iw_full},
            {"+LW", lw_only},
            {"+IW+LW", iw_lw},
            {"+IW+LW+Reg", with_flags(base, true, true, true, true, true)}};
  }
  if (suite == "directional") {
    return {{"Baseline", baseline}, {"+IW", iw_full}, {"+LW", lw_only}, {"+IW+LW", iw_lw}};
  }
  if (suite == "table2") {
    std::vector<AblationRow> rows;
    const std::vector<std::vector<std::size_t>> sets{{3, 4}, {2, 3, 4}, {1, 2, 3, 4}};
    for (const auto& blocks : sets) {
      auto c = lw_only;
      c.lw_blocks = blocks;
      std::string name;
      for (auto it = blocks.rbegin(); it != blocks.rend(); ++it) {
        name += (name.empty() ? "B" : " + B") + std::to_string(*it);
      }
      rows.push_back({name, c});
    }
    return rows;
  }
  if (suite == "table3") {
    const auto iw_no_ia = with_flags(base, true, false, false, true, false);
    auto pred = with_flags(base, false, false, false, true, false);
    pred.baseline_regularizer = BaselineRegularizer::PredConsistency;
    auto attn = pred;
    attn.baseline_regularizer = BaselineRegularizer::AttnConsistency;
    return {{"Prediction Consistency", pred},
            {"Attention Consistency", attn},
            {"Attention Distillation", iw_no_ia}};
  }
  if (suite == "gamma") {
    std::vector<AblationRow> rows;
    for (double g : {0.05, 0.075, 0.1, 0.15, 0.2}) {
      auto c = with_flags(base, true, true, true, true, true);
      c.gamma = g;
      rows.push_back({"gamma=" + num(g), c});
    }
    return rows;
  }
  throw ContractError("unknown ablation suite '" + suite + "'");
}

namespace {

// A run directory whose checkpoint already holds the full schedule for this
// config is reused, so an interrupted suite picks up where it stopped.
bool finished_run(const fs::path& run_dir, const TrainConfig& cfg, double& map50, double& corloc) {
  const auto ckpt = run_dir / "checkpoint.ckpt";
  const auto eval = run_dir / "eval.json";
  if (!fs::exists(ckpt) || !fs::exists(eval)) return false;
  try {
    const auto meta = read_checkpoint_meta(ckpt);
    if (meta.config_hash != cfg.hash() || meta.iter != cfg.max_iters) return false;
    std::ifstream in(eval);
    const auto j = json::parse(in);
    map50 = j.at("map50").get<double>();
    corloc = j.at("corloc").get<double>();
    return true;
  } catch (const std::exception&) {
    return false;
  }
}

}  // namespace

std::vector<AblationResult> run_ablation_suite(std::span<const AblationRow> rows,
                                               std::span<const std::uint64_t> seeds,
                                               const fs::path& data_dir, const fs::path& out_dir,
                                               std::ostream* progress) {
  std::vector<AblationResult> results;
  for (const auto& row : rows) {
    AblationResult r;
    r.name = row.name;
    for (const auto seed : seeds) {
      auto cfg = row.config;
      cfg.seed = seed;
      const auto run_dir = out_dir / slug(row.name) / ("seed_" + std::to_string(seed));
      double map50 = 0, corloc = 0;
      if (!finished_run(run_dir, cfg, map50, corloc)) {
        const auto res = run_training(cfg, data_dir, run_dir);
        if (!res.report) throw FormatError("ablation needs a test split under " + data_dir.string());
        map50 = res.report->map50;
        corloc = res.report->corloc;
      }
      r.map50.push_back(map50);
      r.corloc.push_back(corloc);
      if (progress) {
        *progress << row.name << " seed " << seed << ": map50 " << map50 << " corloc " << corloc
                  << std::endl;
      }
    }
    const double n = static_cast<double>(seeds.size());
    r.mean_map50 = std::accumulate(r.map50.begin(), r.map50.end(), 0.0) / n;
    r.mean_corloc = std::accumulate(r.corloc.begin(), r.corloc.end(), 0.0) / n;
    results.push_back(std::move(r));
  }
  return results;
}

std::string ablation_table_json(std::span<const AblationResult> results) {
  ordered_json rows = ordered_json::array();
  for (const auto& r : results) {
    ordered_json j;
    j["name"] = r.name;
    j["map50"] = r.map50;
    j["corloc"] = r.corloc;
    j["mean_map50"] = r.mean_map50;
    j["mean_corloc"] = r.mean_corloc;
    rows.push_back(j);
  }
  std::vector<std::size_t> order(results.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return results[a].mean_map50 > results[b].mean_map50;
  });
  ordered_json rank = ordered_json::array();
  for (auto i : order) rank.push_back(results[i].name);
  ordered_json out;
  out["rows"] = rows;
  out["rank"] = rank;
  return out.dump(2);
}

}  // namespace casd
