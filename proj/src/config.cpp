#include "dart/config.hpp"

#include <charconv>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>

namespace dart {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::size_t to_size(const std::string& v) {
  std::size_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

std::uint64_t to_u64(const std::string& v) {
  std::uint64_t out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a non-negative integer, got '" + v + "'");
  return out;
}

double to_real(const std::string& v) {
  double out = 0;
  const auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) throw ConfigError("expected a number, got '" + v + "'");
  return out;
}

bool to_bool(const std::string& v) {
  if (v == "true") return true;
  if (v == "false") return false;
  throw ConfigError("expected true or false, got '" + v + "'");
}

std::vector<std::size_t> to_list(const std::string& v) {
  std::vector<std::size_t> out;
  if (v.empty()) return out;
  std::stringstream ss(v);
  std::string item;
  while (std::getline(ss, item, ',')) out.push_back(to_size(trim(item)));
  return out;
}

std::string real_str(double v) {
  char buf[32];
  const auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

std::string list_str(const std::vector<std::size_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

struct Entry {
  const char* name;
  const char* doc;
  std::function<std::string(const RunConfig&)> get;
  std::function<void(RunConfig&, const std::string&)> set;
};

#define DART_SIZE(key, field, doc) \
  Entry{key, doc, [](const RunConfig& c) { return std::to_string(c.field); }, [](RunConfig& c, const std::string& v) { c.field = to_size(v); }}
#define DART_REAL(key, field, doc) \
  Entry{key, doc, [](const RunConfig& c) { return real_str(c.field); }, [](RunConfig& c, const std::string& v) { c.field = to_real(v); }}
#define DART_BOOL(key, field, doc)                                                                     \
  Entry{key, doc, [](const RunConfig& c) { return std::string(c.field ? "true" : "false"); }, \
        [](RunConfig& c, const std::string& v) { c.field = to_bool(v); }}

const std::vector<Entry>& entries() {
  static const std::vector<Entry> table = {
      DART_SIZE("model.embed_dim", model.embed_dim, "feature width D"),
      DART_SIZE("model.heads", model.heads, "attention heads (must divide D)"),
      DART_SIZE("model.window", model.window, "window attention side M"),
      DART_SIZE("model.mlp_ratio", model.mlp_ratio, "MLP hidden width as a multiple of D"),
      DART_SIZE("model.blocks_per_stage", model.blocks_per_stage, "DART blocks per stage"),
      DART_SIZE("model.stages", model.stages, "number of stages"),
      Entry{"model.task", "denoise-gray, denoise-color, sr2, sr3 or sr4",
            [](const RunConfig& c) { return task_name(c.model.task); },
            [](RunConfig& c, const std::string& v) { c.model.task = parse_task(v); }},
      DART_BOOL("model.use_longir", model.use_longir, "enable the LongIR branch"),
      DART_BOOL("model.use_cbam", model.use_cbam, "enable channel and spatial refinement"),
      DART_SIZE("longir.window", model.longir_window, "odd band width w"),
      DART_SIZE("longir.dilation", model.longir_dilation, "band dilation d"),
      DART_SIZE("longir.globals_per_window", model.globals_per_window, "global tokens per M*M raster tokens"),
      DART_SIZE("cbam.reduction", model.reduction, "channel MLP reduction r (must divide D)"),
      DART_SIZE("train.iters", train.iters, "optimizer steps"),
      DART_SIZE("train.batch_size", train.batch_size, "samples per step"),
      Entry{"train.loss", "l1 or charbonnier",
            [](const RunConfig& c) { return std::string(c.train.loss == LossKind::L1 ? "l1" : "charbonnier"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "l1") c.train.loss = LossKind::L1;
              else if (v == "charbonnier") c.train.loss = LossKind::Charbonnier;
              else throw ConfigError("train.loss must be l1 or charbonnier, got '" + v + "'");
            }},
      DART_REAL("train.charbonnier_eps", train.charbonnier_eps, "Charbonnier epsilon"),
      Entry{"train.optimizer", "adam or adamw",
            [](const RunConfig& c) { return std::string(c.train.optim.mode == OptimMode::Adam ? "adam" : "adamw"); },
            [](RunConfig& c, const std::string& v) {
              if (v == "adam") c.train.optim.mode = OptimMode::Adam;
              else if (v == "adamw") c.train.optim.mode = OptimMode::AdamW;
              else throw ConfigError("train.optimizer must be adam or adamw, got '" + v + "'");
            }},
      DART_REAL("train.weight_decay", train.optim.weight_decay, "decoupled weight decay (adamw only)"),
      DART_REAL("train.beta1", train.optim.beta1, "Adam beta1"),
      DART_REAL("train.beta2", train.optim.beta2, "Adam beta2"),
      DART_REAL("train.eps", train.optim.eps, "Adam epsilon"),
      DART_REAL("train.lr_start", train.schedule.warmup_start, "learning rate at iteration 0"),
      DART_REAL("train.lr", train.schedule.base, "learning rate after warmup"),
      DART_SIZE("train.warmup", train.schedule.warmup_iters, "warmup iterations"),
      Entry{"train.milestones", "comma-separated iterations where the rate halves",
            [](const RunConfig& c) { return list_str(c.train.schedule.milestones); },
            [](RunConfig& c, const std::string& v) { c.train.schedule.milestones = to_list(v); }},
      DART_SIZE("train.log_every", train.log_every, "loss CSV row interval"),
      Entry{"train.seed", "model init and batch sampling seed", [](const RunConfig& c) { return std::to_string(c.train.seed); },
            [](RunConfig& c, const std::string& v) { c.train.seed = to_u64(v); }},
      DART_SIZE("data.patch", data.patch, "training patch side (LR side for SR)"),
      DART_REAL("data.sigma", data.sigma, "AWGN sigma on the 0-255 scale"),
      DART_SIZE("data.train_images", data.train_images, "procedural training scenes"),
      DART_SIZE("data.image_size", data.image_size, "training scene side (HR side for SR)"),
      DART_SIZE("data.stride", data.stride, "patch anchor stride"),
      DART_SIZE("data.eval_images", data.eval_images, "held-out scenes"),
      DART_SIZE("data.eval_size", data.eval_size, "held-out scene side (LR side for SR)"),
      Entry{"data.seed", "scene generation seed", [](const RunConfig& c) { return std::to_string(c.data.seed); },
            [](RunConfig& c, const std::string& v) { c.data.seed = to_u64(v); }},
  };
  return table;
}

#undef DART_SIZE
#undef DART_REAL
#undef DART_BOOL

}  // namespace

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = [] {
    std::vector<ConfigKey> out;
    const RunConfig defaults;
    for (const auto& e : entries()) out.push_back({e.name, e.get(defaults), e.doc});
    return out;
  }();
  return keys;
}

RunConfig parse_run_config(const std::string& text) {
  std::map<std::string, const Entry*> by_name;
  for (const auto& e : entries()) by_name[e.name] = &e;

  RunConfig cfg;
  std::map<std::string, std::size_t> seen;
  std::istringstream in(text);
  std::string raw;
  for (std::size_t line_no = 1; std::getline(in, raw); ++line_no) {
    const auto hash = raw.find('#');
    const std::string line = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (line.empty()) continue;
    const std::string where = "config line " + std::to_string(line_no) + ": ";
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    const std::string key = trim(line.substr(0, eq)), value = trim(line.substr(eq + 1));
    auto it = by_name.find(key);
    if (it == by_name.end()) throw ConfigError(where + "unknown key '" + key + "'");
    if (auto prev = seen.find(key); prev != seen.end()) {
      throw ConfigError(where + "key '" + key + "' already set on line " + std::to_string(prev->second));
    }
    seen[key] = line_no;
    try {
      it->second->set(cfg, value);
    } catch (const ConfigError& e) {
      throw ConfigError(where + key + ": " + e.what());
    }
  }
  return cfg;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open config " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

std::string to_config_text(const RunConfig& cfg) {
  std::string out;
  for (const auto& e : entries()) out += std::string(e.name) + " = " + e.get(cfg) + "\n";
  return out;
}

void validate(const RunConfig& cfg) {
  cfg.model.validate();
  cfg.train.schedule.validate();
  if (cfg.train.batch_size == 0) throw ConfigError("train.batch_size must be positive");
  if (!(cfg.data.sigma >= 0.0)) throw ConfigError("data.sigma must be >= 0");
  const std::size_t s = task_scale(cfg.model.task);
  if (cfg.data.patch == 0 || cfg.data.stride == 0) throw ConfigError("data.patch and data.stride must be positive");
  if (cfg.data.image_size % s != 0 || cfg.data.image_size / s < cfg.data.patch) {
    throw ConfigError("data.image_size must be a multiple of the SR scale and hold one patch");
  }
  if (cfg.data.patch < 4 || cfg.data.eval_size < 4) throw ConfigError("patches must be at least 4x4");
}

}  // namespace dart
