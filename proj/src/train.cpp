#include "dart/train.hpp"

#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <limits>
#include <map>
#include <sstream>

namespace dart {

// ---------------------------------------------------------------------------
// losses

namespace {

void check_same_shape(Var pred, Var target, const char* what) {
  if (pred.shape() != target.shape()) {
    throw ShapeError(std::string(what) + ": prediction " + shape_str(pred.shape()) + " vs target " +
                     shape_str(target.shape()));
  }
}

}  // namespace

Var l1_loss(Var pred, Var target) {
  check_same_shape(pred, target, "l1_loss");
  const auto p = pred.value().data(), t = target.value().data();
  const double n = static_cast<double>(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) total += std::abs(p[i] - t[i]);
  return pred.tape().record(Tensor::scalar(total / n), {pred, target},
                            [pv = pred.value(), tv = target.value(), n](const Tensor& g, const Tensor&,
                                                                         std::span<Tensor* const> in) {
                              const double s = g.item() / n;
                              for (std::size_t i = 0; i < pv.size(); ++i) {
                                const double d = pv[i] - tv[i];
                                const double sign = d > 0 ? 1.0 : (d < 0 ? -1.0 : 0.0);
                                if (in[0]) (*in[0])[i] += s * sign;
                                if (in[1]) (*in[1])[i] -= s * sign;
                              }
                            });
}

Var charbonnier_loss(Var pred, Var target, double eps) {
  check_same_shape(pred, target, "charbonnier_loss");
  if (!(eps > 0.0)) throw ConfigError("charbonnier eps must be positive");
  const auto p = pred.value().data(), t = target.value().data();
  const double n = static_cast<double>(p.size());
  std::vector<double> root(p.size());
  double total = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i) {
    const double d = p[i] - t[i];
    root[i] = std::sqrt(d * d + eps * eps);
    total += root[i];
  }
  return pred.tape().record(Tensor::scalar(total / n), {pred, target},
                            [pv = pred.value(), tv = target.value(), root = std::move(root), n](
                                const Tensor& g, const Tensor&, std::span<Tensor* const> in) {
                              const double s = g.item() / n;
                              for (std::size_t i = 0; i < pv.size(); ++i) {
                                const double d = s * (pv[i] - tv[i]) / root[i];
                                if (in[0]) (*in[0])[i] += d;
                                if (in[1]) (*in[1])[i] -= d;
                              }
                            });
}

// ---------------------------------------------------------------------------
// optimizer and schedule

Adam::Adam(std::vector<Parameter*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  if (!(cfg_.beta1 >= 0.0 && cfg_.beta1 < 1.0 && cfg_.beta2 >= 0.0 && cfg_.beta2 < 1.0))
    throw ConfigError("Adam betas must lie in [0, 1)");
  if (!(cfg_.eps > 0.0)) throw ConfigError("Adam eps must be positive");
  if (!(cfg_.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  for (auto* p : params_) {
    m_.emplace_back(p->value.shape(), 0.0);
    v_.emplace_back(p->value.shape(), 0.0);
  }
}

void Adam::zero_grad() {
  for (auto* p : params_) p->zero_grad();
}

void Adam::step(double lr) {
  if (!(lr > 0.0)) throw ConfigError("learning rate must be positive");
  for (auto* p : params_) {
    if (p->grad.shape() != p->value.shape()) p->zero_grad();
    if (!p->grad.all_finite()) throw NumericError("non-finite gradient in " + p->name);
  }
  ++step_;
  const double b1 = cfg_.beta1, b2 = cfg_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_));
  const double decay = cfg_.mode == OptimMode::AdamW ? 1.0 - lr * cfg_.weight_decay : 1.0;
  for (std::size_t k = 0; k < params_.size(); ++k) {
    double* w = params_[k]->value.data().data();
    const double* g = params_[k]->grad.data().data();
    double* m = m_[k].data().data();
    double* v = v_[k].data().data();
    for (std::size_t i = 0; i < m_[k].size(); ++i) {
      m[i] = b1 * m[i] + (1.0 - b1) * g[i];
      v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
      const double mh = m[i] / c1, vh = v[i] / c2;
      if (cfg_.mode == OptimMode::AdamW) w[i] *= decay;
      w[i] -= lr * mh / (std::sqrt(vh) + cfg_.eps);
    }
  }
}

void LrSchedule::validate() const {
  if (!(warmup_start > 0.0) || !(base > 0.0)) throw ConfigError("learning rates must be positive");
  for (std::size_t i = 1; i < milestones.size(); ++i)
    if (milestones[i] <= milestones[i - 1]) throw ConfigError("lr milestones must be strictly increasing");
}

double LrSchedule::at(std::size_t iter) const {
  double lr = base;
  if (iter < warmup_iters) {
    lr = warmup_start + (base - warmup_start) * static_cast<double>(iter) / static_cast<double>(warmup_iters);
  }
  for (std::size_t m : milestones)
    if (iter >= m) lr *= 0.5;
  return lr;
}

// ---------------------------------------------------------------------------
// data

namespace {

constexpr std::uint64_t kHeldOutSalt = 0x6a09e667f3bcc909ull;
constexpr std::uint64_t kSamplerSalt = 0xbb67ae8584caa73bull;

}  // namespace

SyntheticDataset::SyntheticDataset(Task task, const DataConfig& cfg) : task_(task), cfg_(cfg) {
  const std::size_t C = task_channels(task), s = task_scale(task);
  if (cfg.patch == 0 || cfg.train_images == 0) throw ConfigError("data.patch and data.train_images must be positive");
  if (cfg.image_size % s != 0) throw ConfigError("data.image_size must be a multiple of the SR scale");
  if (cfg.image_size / s < cfg.patch) throw ConfigError("data.image_size too small for data.patch");

  Rng scenes(cfg.seed);
  for (std::size_t i = 0; i < cfg.train_images; ++i) pool_.push_back(synthetic_scene(cfg.image_size, cfg.image_size, C, scenes));
  const std::size_t lr_side = cfg.image_size / s;
  anchors_ = extract_patches(lr_side, lr_side, cfg.patch, cfg.stride);

  Rng held(cfg.seed ^ kHeldOutSalt);
  Rng noise(cfg.seed ^ kHeldOutSalt ^ 1);
  for (std::size_t i = 0; i < cfg.eval_images; ++i) {
    ImageBuffer clean = synthetic_scene(cfg.eval_size * s, cfg.eval_size * s, C, held);
    ImageBuffer low = degrade(clean, noise);
    held_out_.emplace_back(std::move(low), std::move(clean));
  }
}

ImageBuffer SyntheticDataset::degrade(const ImageBuffer& clean, Rng& rng) const {
  if (is_sr(task_)) return bicubic_resize(clean, task_scale(task_), false);
  return add_awgn(clean, cfg_.sigma, rng);
}

Sample SyntheticDataset::sample(Rng& rng) const {
  const ImageBuffer& scene = pool_[rng.below(pool_.size())];
  const PatchAnchor a = anchors_[rng.below(anchors_.size())];
  if (is_sr(task_)) {
    const std::size_t s = task_scale(task_);
    const ImageBuffer hr = crop(scene, hr_anchor(a, s), cfg_.patch * s, cfg_.patch * s);
    return {to_tensor(bicubic_resize(hr, s, false)), to_tensor(hr)};
  }
  const ImageBuffer clean = crop(scene, a, cfg_.patch, cfg_.patch);
  return {to_tensor(add_awgn(clean, cfg_.sigma, rng)), to_tensor(clean)};
}

// ---------------------------------------------------------------------------
// loop

std::string loss_csv(const std::vector<LossRecord>& trace) {
  std::string out = "iter,lr,loss\n";
  char buf[96];
  for (const auto& r : trace) {
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.17g\n", r.iter, r.lr, r.loss);
    out += buf;
  }
  return out;
}

std::vector<LossRecord> train_loop(DartModel& model, Adam& opt, const TrainConfig& cfg, const SampleSource& source,
                                   const std::function<void(const LossRecord&)>& on_log) {
  cfg.schedule.validate();
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
  Rng rng(cfg.seed ^ kSamplerSalt);
  std::vector<LossRecord> trace;
  const double inv_batch = 1.0 / static_cast<double>(cfg.batch_size);
  for (std::size_t iter = 0; iter < cfg.iters; ++iter) {
    opt.zero_grad();
    double batch_loss = 0.0;
    for (std::size_t b = 0; b < cfg.batch_size; ++b) {
      const Sample s = source(rng);
      Tape tape;
      Var pred = model.forward(tape.constant(s.input));
      Var target = tape.constant(s.target);
      Var loss = cfg.loss == LossKind::L1 ? l1_loss(pred, target) : charbonnier_loss(pred, target, cfg.charbonnier_eps);
      batch_loss += loss.value().item() * inv_batch;
      tape.backward(scale(loss, inv_batch));
    }
    if (!std::isfinite(batch_loss)) {
      throw NumericError("non-finite loss at iteration " + std::to_string(iter));
    }
    const double lr = cfg.schedule.at(iter);
    opt.step(lr);
    const bool last = iter + 1 == cfg.iters;
    if ((cfg.log_every > 0 && iter % cfg.log_every == 0) || last) {
      trace.push_back({iter, lr, batch_loss});
      if (on_log) on_log(trace.back());
    }
  }
  return trace;
}

// ---------------------------------------------------------------------------
// checkpoints

namespace {

static_assert(std::numeric_limits<float>::is_iec559, "checkpoint payload needs IEEE-754 binary32");

constexpr char kMagic[8] = {'D', 'A', 'R', 'T', 'C', 'K', 'P', 'T'};

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}
void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  std::uint64_t uint(int bytes, const char* what) {
    need(static_cast<std::size_t>(bytes), what);
    std::uint64_t v = 0;
    for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += static_cast<std::size_t>(bytes);
    return v;
  }
  std::string bytes(std::uint64_t n, const char* what) {
    need(n, what);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }
  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::uint64_t n, const char* what) {
    if (n > s_.size() - pos_) throw CheckpointError(std::string("checkpoint truncated while reading ") + what);
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_checkpoint(const Checkpoint& ckpt) {
  std::string out(kMagic, sizeof kMagic);
  put_u32(out, kCheckpointVersion);
  put_u64(out, ckpt.config_text.size());
  out += ckpt.config_text;
  put_u64(out, ckpt.tensors.size());
  for (const auto& t : ckpt.tensors) {
    put_u64(out, t.name.size());
    out += t.name;
    put_u64(out, t.value.rank());
    for (std::size_t d : t.value.shape()) put_u64(out, d);
    for (double v : t.value.data()) put_u32(out, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  if (bytes.size() < sizeof kMagic || std::memcmp(bytes.data(), kMagic, sizeof kMagic) != 0) {
    throw CheckpointMagicError("not a DART checkpoint (bad magic)");
  }
  Reader r(bytes);
  r.bytes(sizeof kMagic, "magic");
  const auto version = r.uint(4, "version");
  if (version != kCheckpointVersion) {
    throw CheckpointVersionError("unsupported checkpoint version " + std::to_string(version) + " (expected " +
                                 std::to_string(kCheckpointVersion) + ")");
  }
  Checkpoint ckpt;
  ckpt.config_text = r.bytes(r.uint(8, "config length"), "config");
  const auto count = r.uint(8, "tensor count");
  for (std::uint64_t k = 0; k < count; ++k) {
    NamedTensor t;
    t.name = r.bytes(r.uint(8, "name length"), "tensor name");
    const auto rank = r.uint(8, "rank");
    if (rank > 8) throw CheckpointError("tensor " + t.name + " has implausible rank " + std::to_string(rank));
    Shape shape;
    for (std::uint64_t d = 0; d < rank; ++d) shape.push_back(r.uint(8, "extent"));
    for (std::size_t d : shape)
      if (d == 0) throw CheckpointError("tensor " + t.name + " has a zero extent");
    t.value = Tensor(shape);
    for (auto& v : t.value.data()) v = std::bit_cast<float>(static_cast<std::uint32_t>(r.uint(4, "payload")));
    ckpt.tensors.push_back(std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after checkpoint payload");
  return ckpt;
}

Checkpoint make_checkpoint(DartModel& model, const Adam* opt, const std::string& config_text) {
  Checkpoint ckpt{config_text, {}};
  for (auto* p : model.parameters()) ckpt.tensors.push_back({p->name, p->value});
  if (opt != nullptr) {
    const Adam& o = *opt;
    for (std::size_t k = 0; k < o.params().size(); ++k) {
      ckpt.tensors.push_back({"adam.m." + o.params()[k]->name, o.first_moments()[k]});
      ckpt.tensors.push_back({"adam.v." + o.params()[k]->name, o.second_moments()[k]});
    }
    ckpt.tensors.push_back({"adam.step", Tensor(Shape{1}, static_cast<double>(o.steps()))});
  }
  return ckpt;
}

void restore_checkpoint(const Checkpoint& ckpt, DartModel& model, Adam* opt) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& t : ckpt.tensors) by_name[t.name] = &t.value;

  // Validate everything before touching the model.
  std::vector<std::pair<Tensor*, const Tensor*>> copies;
  auto bind = [&](const std::string& name, Tensor& dst) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw CheckpointShapeError("checkpoint has no tensor " + name + " (config mismatch)");
    if (it->second->shape() != dst.shape()) {
      throw CheckpointShapeError("shape mismatch for tensor " + name + ": checkpoint " + shape_str(it->second->shape()) +
                                 ", model " + shape_str(dst.shape()));
    }
    copies.emplace_back(&dst, it->second);
    by_name.erase(it);
  };
  for (auto* p : model.parameters()) bind(p->name, p->value);
  Tensor step(Shape{1});
  if (opt != nullptr) {
    for (std::size_t k = 0; k < opt->params().size(); ++k) {
      bind("adam.m." + opt->params()[k]->name, opt->first_moments()[k]);
      bind("adam.v." + opt->params()[k]->name, opt->second_moments()[k]);
    }
    bind("adam.step", step);
  }
  for (const auto& [name, t] : by_name) {
    const bool optimizer_slot = name.rfind("adam.", 0) == 0;
    if (!(optimizer_slot && opt == nullptr)) {
      throw CheckpointShapeError("checkpoint tensor " + name + " has no slot in this model (config mismatch)");
    }
  }
  for (auto [dst, src] : copies) *dst = *src;
  if (opt != nullptr) opt->set_steps(static_cast<std::size_t>(step[0]));
}

void save_checkpoint(const std::filesystem::path& path, DartModel& model, const Adam* opt,
                     const std::string& config_text) {
  write_file_atomic(path, encode_checkpoint(make_checkpoint(model, opt, config_text)));
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace dart
