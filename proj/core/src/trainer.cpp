#include "slimunet/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <deque>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>

#include "slimunet/checkpoint.hpp"
#include "slimunet/error.hpp"
#include "slimunet/hash.hpp"
#include "slimunet/random.hpp"

namespace slimunet {
namespace fs = std::filesystem;

// ---------------------------------------------------------------- optimizer

template <class T>
Adam<T>::Adam(std::vector<Var<T>> params, double lr, double beta1, double beta2, double eps)
    : params_(std::move(params)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
  if (!(lr > 0.0)) throw RangeError("Adam: learning rate must be > 0");
  for (const auto& p : params_) {
    m_.emplace_back(static_cast<std::size_t>(p.value().numel()), T(0));
    v_.emplace_back(static_cast<std::size_t>(p.value().numel()), T(0));
  }
}

template <class T>
void Adam<T>::step() {
  ++t_;
  const T b1 = static_cast<T>(b1_), b2 = static_cast<T>(b2_);
  const T step_size = static_cast<T>(lr_ / (1.0 - std::pow(b1_, static_cast<double>(t_))));
  const T inv_c2 = static_cast<T>(1.0 / (1.0 - std::pow(b2_, static_cast<double>(t_))));
  const T eps = static_cast<T>(eps_);
  for (std::size_t k = 0; k < params_.size(); ++k) {
    auto& node = *params_[k].node();
    if (node.grad.numel() == 0) continue;
    T* m = m_[k].data();
    T* v = v_[k].data();
    T* p = node.value.data();
    const T* g = node.grad.data();
    const std::size_t n = m_[k].size();
    for (std::size_t i = 0; i < n; ++i) {
      m[i] = b1 * m[i] + (1 - b1) * g[i];
      v[i] = b2 * v[i] + (1 - b2) * g[i] * g[i];
      p[i] -= step_size * m[i] / (std::sqrt(v[i] * inv_c2) + eps);
    }
  }
}

template <class T>
double clip_grad_norm(const std::vector<Var<T>>& params, double max_norm) {
  double sq = 0.0;
  for (const auto& p : params) {
    for (T g : p.grad().span()) sq += static_cast<double>(g) * static_cast<double>(g);
  }
  const double norm = std::sqrt(sq);
  if (norm > max_norm && norm > 0.0) {
    const T s = static_cast<T>(max_norm / norm);
    for (const auto& p : params) {
      for (T& g : p.node()->grad.span()) g *= s;
    }
  }
  return norm;
}

template class Adam<float>;
template class Adam<double>;
template double clip_grad_norm(const std::vector<Var<float>>&, double);
template double clip_grad_norm(const std::vector<Var<double>>&, double);

// ---------------------------------------------------------------- hyper

std::vector<std::string> validate_hyper(const TrainHyper& h) {
  std::vector<std::string> v;
  if (!(h.learning_rate > 0.0)) v.push_back("learning_rate: must be > 0");
  if (h.batch_size < 1) v.push_back("batch_size: must be >= 1");
  if (h.max_steps < 0) v.push_back("max_steps: must be >= 0");
  if (!(h.adam_beta1 >= 0.0 && h.adam_beta1 < 1.0)) v.push_back("adam_betas[0]: must lie in [0, 1)");
  if (!(h.adam_beta2 >= 0.0 && h.adam_beta2 < 1.0)) v.push_back("adam_betas[1]: must lie in [0, 1)");
  if (!(h.adam_eps > 0.0)) v.push_back("adam_eps: must be > 0");
  if (h.grad_clip && !(*h.grad_clip > 0.0)) v.push_back("grad_clip: must be > 0 when set");
  if (!(h.cond_dropout >= 0.0 && h.cond_dropout <= 1.0)) v.push_back("cond_dropout: must lie in [0, 1]");
  if (h.eval_every < 0) v.push_back("eval_every: must be >= 0");
  if (h.log_every < 1) v.push_back("log_every: must be >= 1");
  if (h.eval_batch < 1) v.push_back("eval_batch: must be >= 1");
  return v;
}

nlohmann::json to_json(const TrainHyper& h) {
  return {{"learning_rate", h.learning_rate},
          {"batch_size", h.batch_size},
          {"max_steps", h.max_steps},
          {"optimizer", "Adam"},
          {"adam_betas", {h.adam_beta1, h.adam_beta2}},
          {"adam_eps", h.adam_eps},
          {"grad_clip", h.grad_clip ? nlohmann::json(*h.grad_clip) : nlohmann::json(nullptr)},
          {"cond_dropout", h.cond_dropout},
          {"seed", h.seed},
          {"eval_every", h.eval_every},
          {"log_every", h.log_every},
          {"eval_batch", h.eval_batch},
          {"eval_seed", h.eval_seed}};
}

TrainHyper hyper_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"learning_rate", "batch_size", "max_steps", "optimizer",
                                           "adam_betas",    "adam_eps",   "grad_clip", "cond_dropout",
                                           "seed",          "eval_every", "log_every", "eval_batch",
                                           "eval_seed"};
  std::vector<std::string> errors;
  if (!j.is_object()) throw ConfigError("hyper must be a JSON object", {"hyper: not an object"});
  for (const auto& [k, _] : j.items()) {
    if (!known.count(k)) errors.push_back("hyper: unknown key '" + k + "'");
  }
  TrainHyper h;
  try {
    h.learning_rate = j.value("learning_rate", h.learning_rate);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.max_steps = j.value("max_steps", h.max_steps);
    if (j.value("optimizer", std::string("Adam")) != "Adam") errors.push_back("optimizer: only Adam is supported");
    if (j.contains("adam_betas")) {
      const auto b = j.at("adam_betas").get<std::vector<double>>();
      if (b.size() != 2) {
        errors.push_back("adam_betas: expected two values");
      } else {
        h.adam_beta1 = b[0];
        h.adam_beta2 = b[1];
      }
    }
    h.adam_eps = j.value("adam_eps", h.adam_eps);
    if (j.contains("grad_clip")) {
      h.grad_clip = j.at("grad_clip").is_null() ? std::nullopt : std::optional<double>(j.at("grad_clip").get<double>());
    }
    h.cond_dropout = j.value("cond_dropout", h.cond_dropout);
    h.seed = j.value("seed", h.seed);
    h.eval_every = j.value("eval_every", h.eval_every);
    h.log_every = j.value("log_every", h.log_every);
    h.eval_batch = j.value("eval_batch", h.eval_batch);
    h.eval_seed = j.value("eval_seed", h.eval_seed);
  } catch (const nlohmann::json::exception& e) {
    errors.push_back(std::string("hyper: ") + e.what());
  }
  auto more = validate_hyper(h);
  errors.insert(errors.end(), more.begin(), more.end());
  if (!errors.empty()) throw ConfigError("invalid hyperparameters", std::move(errors));
  return h;
}

// ---------------------------------------------------------------- data

LatentDataset LatentDataset::subset(const std::vector<std::size_t>& indices) const {
  LatentDataset out;
  Shape shape = latents.shape();
  shape[0] = static_cast<std::int64_t>(indices.size());
  out.latents = Tensor<float>(shape);
  const std::int64_t per = latents.numel() / std::max<std::int64_t>(latents.dim(0), 1);
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= captions.size()) throw RangeError("dataset index out of range");
    std::copy_n(latents.data() + static_cast<std::int64_t>(indices[i]) * per, per,
                out.latents.data() + static_cast<std::int64_t>(i) * per);
    out.captions.push_back(captions[indices[i]]);
  }
  return out;
}

LatentDataset encode_corpus(const std::vector<CaptionedImage>& corpus, const FrozenEncoders& encoders) {
  if (corpus.empty()) throw RangeError("empty corpus");
  LatentDataset d;
  const auto first = encoders.encode_image(corpus.front().image);
  Shape shape{static_cast<std::int64_t>(corpus.size())};
  shape.insert(shape.end(), first.shape().begin(), first.shape().end());
  d.latents = Tensor<float>(shape);
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto z = encoders.encode_image(corpus[i].image);
    if (z.shape() != first.shape()) throw DimensionError("corpus images differ in shape");
    std::copy_n(z.data(), z.numel(), d.latents.data() + static_cast<std::int64_t>(i) * z.numel());
    d.captions.push_back(corpus[i].caption);
  }
  return d;
}

Split heldout_split(std::size_t n, std::uint64_t seed) {
  std::vector<std::pair<std::uint64_t, std::size_t>> keyed;
  for (std::size_t i = 0; i < n; ++i) keyed.emplace_back(splitmix64(seed ^ splitmix64(i)), i);
  std::sort(keyed.begin(), keyed.end());
  const std::size_t held = (n + 5) / 10;
  Split s;
  for (std::size_t k = 0; k < n; ++k) (k < held ? s.heldout : s.train).push_back(keyed[k].second);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.heldout.begin(), s.heldout.end());
  return s;
}

TrainingData prepare_training_data(const std::vector<CaptionedImage>& corpus,
                                   std::shared_ptr<const FrozenEncoders> encoders, std::uint64_t split_seed) {
  const LatentDataset all = encode_corpus(corpus, *encoders);
  const Split split = heldout_split(corpus.size(), split_seed);
  return {std::move(encoders), all.subset(split.train), all.subset(split.heldout)};
}

Tensor<float> pooled_from_context(const Tensor<float>& context, int dim) {
  const std::int64_t B = context.dim(0), L = context.dim(1), D = context.dim(2);
  Tensor<float> out({B, dim});
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t k = 0; k < std::min<std::int64_t>(dim, D); ++k) {
      double s = 0.0;
      for (std::int64_t l = 0; l < L; ++l) s += context[(b * L + l) * D + k];
      out[b * dim + k] = static_cast<float>(s / static_cast<double>(L));
    }
  }
  return out;
}

// ---------------------------------------------------------------- metrics

MetricsLog::MetricsLog(fs::path jsonl) : path_(std::move(jsonl)) {
  if (path_->has_parent_path()) fs::create_directories(path_->parent_path());
  std::ofstream(*path_, std::ios::trunc);
}

void MetricsLog::append(nlohmann::json record) {
  if (path_) {
    std::ofstream out(*path_, std::ios::app);
    out << record.dump() << '\n';
    if (!out) throw IoError("cannot append to " + path_->string());
  }
  records_.push_back(std::move(record));
}

std::vector<nlohmann::json> MetricsLog::of_kind(const std::string& kind) const {
  std::vector<nlohmann::json> out;
  for (const auto& r : records_) {
    if (r.value("kind", "") == kind) out.push_back(r);
  }
  return out;
}

// ---------------------------------------------------------------- teachers

std::vector<std::string> TeacherSchedule::validate() const {
  std::vector<std::string> v;
  if (entries.empty()) v.push_back("teachers: at least one teacher required");
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    const std::string where = "teachers[" + std::to_string(i) + "]";
    if (!e.model) v.push_back(where + ": missing model");
    if (i == 0 && e.start_step != 0) v.push_back(where + ": first start_step must be 0");
    if (i > 0 && e.start_step <= entries[i - 1].start_step) v.push_back(where + ": start_step must increase strictly");
    if (i > 0 && e.model && entries[0].model && !(e.model->config() == entries[0].model->config())) {
      v.push_back(where + ": teachers must share one config");
    }
  }
  return v;
}

std::size_t TeacherSchedule::active(int completed) const {
  std::size_t k = 0;
  while (k + 1 < entries.size() && entries[k + 1].start_step <= completed) ++k;
  return k;
}

namespace {

std::string hex(std::uint64_t h) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << h;
  return s.str();
}

nlohmann::json breakdown_json(const LossBreakdown& b) {
  return {{"task", b.task}, {"out_kd", b.out_kd}, {"feat_kd", b.feat_kd}, {"total", b.total}, {"per_tap", b.per_tap}};
}

/// One materialized batch.
struct Batch {
  Tensor<float> z_t;
  Tensor<float> eps;
  Tensor<float> context;
  std::optional<Tensor<float>> pooled;
  std::vector<int> t;
};

Batch make_batch(const LatentDataset& data, const std::vector<std::size_t>& idx, const std::vector<int>& t,
                 const Tensor<float>& eps, const std::vector<std::vector<int>>& captions, const FrozenEncoders& enc,
                 const UNetConfig& config, const DiffusionSchedule& schedule) {
  Shape shape = data.latents.shape();
  shape[0] = static_cast<std::int64_t>(idx.size());
  Tensor<float> z0(shape);
  const std::int64_t per = data.latents.numel() / data.latents.dim(0);
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy_n(data.latents.data() + static_cast<std::int64_t>(idx[i]) * per, per,
                z0.data() + static_cast<std::int64_t>(i) * per);
  }
  Batch b;
  b.t = t;
  b.eps = eps;
  b.z_t = add_noise(z0, eps, b.t, schedule);
  b.context = enc.encode_text_batch(captions);
  if (config.pooled_embed_dim > 0) b.pooled = pooled_from_context(b.context, config.pooled_embed_dim);
  return b;
}

ForwardResult<float> run_forward(const UNetModel& m, const Batch& b, bool taps, int T) {
  return forward(m, b.z_t, b.context, b.pooled ? &*b.pooled : nullptr, b.t, ForwardOptions{taps, T});
}

/// Window of losses between train records.
struct Window {
  int n = 0;
  double task = 0, out = 0, feat = 0;
  std::map<TapKey, double> per_tap;

  void add(const LossBreakdown& b) {
    ++n;
    task += b.task;
    out += b.out_kd;
    feat += b.feat_kd;
    for (const auto& [k, v] : b.per_tap) per_tap[k] += v;
  }
  LossBreakdown mean(const DistillLossWeights& w) const {
    LossBreakdown b;
    b.task = task / n;
    b.out_kd = out / n;
    b.feat_kd = feat / n;
    for (const auto& [k, v] : per_tap) b.per_tap[k] = v / n;
    b.total = b.task + w.lambda_out_kd * b.out_kd + w.lambda_feat_kd * b.feat_kd;
    return b;
  }
};

struct LoopSpec {
  std::string kind;                       // teacher, finetune, student
  const TeacherSchedule* teachers = nullptr;
  DistillLossWeights weights{0.0, 0.0};
  nlohmann::json meta = nlohmann::json::object();
};

TrainResult run_loop(UNetModel model, const TrainingData& data, const TrainHyper& h,
                     const DiffusionSchedule& schedule, const LoopSpec& spec, const RunOutput& out) {
  if (auto v = validate_hyper(h); !v.empty()) throw ConfigError("invalid hyperparameters", std::move(v));
  if (data.train.size() < 1) throw RangeError("training set is empty");
  const FrozenEncoders& enc = *data.encoders;
  if (enc.context_dim() != model.config().context_dim) {
    throw ConfigError("encoder/model mismatch", {"context_dim: encoders produce " + std::to_string(enc.context_dim()) +
                                                 ", model expects " + std::to_string(model.config().context_dim)});
  }
  MetricsLog log = out.dir ? MetricsLog(*out.dir / "metrics.jsonl") : MetricsLog();
  const std::uint64_t enc_hash = enc.hash();
  std::vector<std::uint64_t> teacher_hashes;
  if (spec.teachers) {
    for (const auto& e : spec.teachers->entries) teacher_hashes.push_back(parameter_hash(*e.model));
  }
  const bool distilling = spec.teachers != nullptr;
  const bool need_teacher = distilling && (spec.weights.lambda_out_kd != 0.0 || spec.weights.lambda_feat_kd != 0.0);
  const bool need_taps = distilling && spec.weights.lambda_feat_kd != 0.0;
  const int T = schedule.T;

  auto teacher_at = [&](int completed) -> const UNetModel& {
    return distilling ? *spec.teachers->entries[spec.teachers->active(completed)].model : model;
  };
  auto teacher_id_at = [&](int completed) -> std::string {
    return distilling ? spec.teachers->entries[spec.teachers->active(completed)].id : std::string("self");
  };
  auto run_eval = [&](int step) {
    if (data.heldout.size() == 0 || (h.eval_every == 0 && step != 0 && step != h.max_steps)) return;
    NoGradGuard ng;
    const int completed_for_teacher = std::max(step - 1, 0);
    const auto b = evaluate(model, teacher_at(completed_for_teacher), data.heldout, enc, schedule,
                            distilling ? spec.weights : DistillLossWeights{0.0, 0.0}, h.eval_seed, h.eval_batch);
    auto rec = breakdown_json(b);
    rec["kind"] = "eval";
    rec["step"] = step;
    rec["teacher_id"] = teacher_id_at(completed_for_teacher);
    log.append(std::move(rec));
  };

  model.set_requires_grad(true);
  std::vector<Var<float>> params;
  for (const auto& [_, v] : model.parameters()) params.push_back(v);
  Adam<float> adam(params, h.learning_rate, h.adam_beta1, h.adam_beta2, h.adam_eps);
  Rng rng = derive_rng(h.seed, fnv1a(spec.kind));
  std::uniform_int_distribution<std::size_t> pick(0, static_cast<std::size_t>(data.train.size() - 1));
  std::uniform_int_distribution<int> pick_t(0, T - 1);
  Shape eps_shape = data.train.latents.shape();
  eps_shape[0] = h.batch_size;

  run_eval(0);
  Window window;
  std::deque<double> recent;
  std::size_t current_teacher = distilling ? spec.teachers->active(0) : 0;
  for (int step = 1; step <= h.max_steps; ++step) {
    if (distilling) {
      const std::size_t k = spec.teachers->active(step - 1);
      if (k != current_teacher) {
        log.append({{"kind", "teacher_swap"},
                    {"step", step - 1},
                    {"from", spec.teachers->entries[current_teacher].id},
                    {"to", spec.teachers->entries[k].id}});
        current_teacher = k;
      }
    }
    std::vector<std::size_t> idx(static_cast<std::size_t>(h.batch_size));
    std::vector<int> t(idx.size());
    std::vector<std::vector<int>> captions;
    for (std::size_t i = 0; i < idx.size(); ++i) {
      idx[i] = pick(rng);
      t[i] = pick_t(rng);
      const bool drop = uniform01(rng) < h.cond_dropout;
      captions.push_back(drop ? std::vector<int>{} : data.train.captions[idx[i]]);
    }
    const Tensor<float> eps = randn<float>(eps_shape, rng);
    const Batch batch = make_batch(data.train, idx, t, eps, captions, enc, model.config(), schedule);

    auto student = run_forward(model, batch, need_taps, T);
    LossBreakdown bd;
    Var<float> loss;
    if (need_teacher) {
      ForwardResult<float> teacher;
      {
        NoGradGuard ng;
        teacher = run_forward(teacher_at(step - 1), batch, need_taps, T);
      }
      static const FeatureTapRegistry<float> empty;
      auto obj = total_loss(batch.eps, teacher.eps, student.eps, teacher.taps ? *teacher.taps : empty,
                            student.taps ? *student.taps : empty, spec.weights);
      loss = obj.total;
      bd = obj.breakdown;
    } else {
      loss = task_loss(batch.eps, student.eps);
      bd.task = static_cast<double>(loss.item());
      bd.total = bd.task;
    }
    recent.push_back(bd.total);
    if (recent.size() > 5) recent.pop_front();
    if (!std::isfinite(bd.total)) {
      std::ostringstream msg;
      msg << "non-finite loss at step " << step << " (lr " << h.learning_rate << "); recent totals:";
      for (double r : recent) msg << ' ' << r;
      throw NumericalError(msg.str());
    }
    backward(loss);
    double gnorm = 0.0;
    if (h.grad_clip) gnorm = clip_grad_norm(params, *h.grad_clip);
    adam.step();
    model.zero_grad();

    window.add(bd);
    if (step % h.log_every == 0 || step == h.max_steps) {
      auto rec = breakdown_json(window.mean(distilling ? spec.weights : DistillLossWeights{0.0, 0.0}));
      rec["kind"] = "train";
      rec["step"] = step;
      rec["teacher_id"] = teacher_id_at(step - 1);
      rec["lr"] = h.learning_rate;
      rec["kd_computed"] = need_teacher;
      if (h.grad_clip) rec["grad_norm"] = gnorm;
      log.append(std::move(rec));
      window = Window{};
    }
    if ((h.eval_every > 0 && step % h.eval_every == 0) || step == h.max_steps) run_eval(step);
  }
  model.set_requires_grad(false);

  if (enc.hash() != enc_hash) throw Error("frozen encoders changed during training");
  nlohmann::json lineage = nlohmann::json::array();
  if (distilling) {
    for (std::size_t i = 0; i < teacher_hashes.size(); ++i) {
      const auto& e = spec.teachers->entries[i];
      if (parameter_hash(*e.model) != teacher_hashes[i]) throw Error("teacher '" + e.id + "' changed during distillation");
      lineage.push_back({{"id", e.id}, {"start_step", e.start_step}, {"hash", hex(teacher_hashes[i])}});
    }
  }
  nlohmann::json summary{{"kind", spec.kind},
                         {"steps", h.max_steps},
                         {"encoders_hash", hex(enc_hash)},
                         {"params", model.num_params()},
                         {"parameter_hash", hex(parameter_hash(model))}};
  if (auto ev = log.of_kind("eval"); !ev.empty()) {
    summary["initial_eval"] = ev.front();
    summary["final_eval"] = ev.back();
  }
  if (auto tr = log.of_kind("train"); !tr.empty()) summary["final_train"] = tr.back();
  if (distilling) summary["teacher_lineage"] = lineage;

  if (out.dir) {
    nlohmann::json meta = spec.meta;
    meta["summary"] = summary;
    meta["hyper"] = to_json(h);
    save_checkpoint(model, *out.dir / "checkpoint", meta);
  }
  return {std::move(model), std::move(log), std::move(summary)};
}

}  // namespace

LossBreakdown evaluate(const UNetModel& student, const UNetModel& teacher, const LatentDataset& data,
                       const FrozenEncoders& enc, const DiffusionSchedule& schedule, const DistillLossWeights& weights,
                       std::uint64_t seed, int batch_size) {
  if (data.size() < 1) throw RangeError("evaluate: empty dataset");
  if (batch_size < 1) throw RangeError("evaluate: batch size must be >= 1");
  NoGradGuard ng;
  const std::int64_t N = data.size();
  const std::int64_t per = data.latents.numel() / N;
  Shape item_shape(data.latents.shape().begin() + 1, data.latents.shape().end());
  const bool same = &student == &teacher;
  Window sums;
  for (std::int64_t start = 0; start < N; start += batch_size) {
    const std::int64_t n = std::min<std::int64_t>(batch_size, N - start);
    std::vector<std::size_t> idx;
    std::vector<int> t;
    std::vector<std::vector<int>> captions;
    Shape eps_shape = data.latents.shape();
    eps_shape[0] = n;
    Tensor<float> eps(eps_shape);
    for (std::int64_t i = 0; i < n; ++i) {
      const auto item = static_cast<std::size_t>(start + i);
      Rng r = derive_rng(seed, item);
      t.push_back(std::uniform_int_distribution<int>(0, schedule.T - 1)(r));
      const auto e = randn<float>(item_shape, r);
      std::copy_n(e.data(), per, eps.data() + i * per);
      idx.push_back(item);
      captions.push_back(data.captions[item]);
    }
    const Batch b = make_batch(data, idx, t, eps, captions, enc, student.config(), schedule);
    auto s = run_forward(student, b, true, schedule.T);
    auto obj = same ? total_loss(b.eps, s.eps, s.eps, *s.taps, *s.taps, weights) : [&] {
      auto te = run_forward(teacher, b, true, schedule.T);
      return total_loss(b.eps, te.eps, s.eps, *te.taps, *s.taps, weights);
    }();
    // Weight each batch mean by its size so the result is a per-item mean.
    LossBreakdown w = obj.breakdown;
    sums.n += static_cast<int>(n);
    sums.task += w.task * static_cast<double>(n);
    sums.out += w.out_kd * static_cast<double>(n);
    sums.feat += w.feat_kd * static_cast<double>(n);
    for (const auto& [k, v] : w.per_tap) sums.per_tap[k] += v * static_cast<double>(n);
  }
  return sums.mean(weights);
}

TrainResult train_teacher(const TrainingData& data, const UNetConfig& config, const TrainHyper& hyper,
                          const DiffusionSchedule& schedule, const RunOutput& out) {
  LoopSpec spec;
  spec.kind = "teacher";
  spec.meta = {{"kind", "teacher"}, {"encoders_seed", data.encoders->seed()}};
  return run_loop(build_unet<float>(config, splitmix64(hyper.seed ^ fnv1a("init"))), data, hyper, schedule, spec, out);
}

TrainResult finetune_teacher(const UNetModel& teacher, const TrainingData& subset, const TrainHyper& hyper,
                             const DiffusionSchedule& schedule, const RunOutput& out) {
  LoopSpec spec;
  spec.kind = "finetune";
  spec.meta = {{"kind", "finetuned_teacher"},
               {"base_parameter_hash", hex(parameter_hash(teacher))},
               {"encoders_seed", subset.encoders->seed()}};
  UNetModel copy = teacher.clone();
  return run_loop(std::move(copy), subset, hyper, schedule, spec, out);
}

TrainResult distill_from(UNetModel student, const DistillRunConfig& run, const TrainingData& data,
                         const DiffusionSchedule& schedule, const RunOutput& out) {
  if (auto v = run.teachers.validate(); !v.empty()) throw ConfigError("invalid teacher schedule", std::move(v));
  if (run.weights.lambda_out_kd < 0.0 || run.weights.lambda_feat_kd < 0.0) {
    throw ConfigError("invalid loss weights", {"lambda_out_kd/lambda_feat_kd: must be >= 0"});
  }
  LoopSpec spec;
  spec.kind = "student";
  spec.teachers = &run.teachers;
  spec.weights = run.weights;
  spec.meta = {{"kind", "student"},
               {"plan", to_json(run.plan)},
               {"weights", {{"lambda_out_kd", run.weights.lambda_out_kd}, {"lambda_feat_kd", run.weights.lambda_feat_kd}}},
               {"encoders_seed", data.encoders->seed()}};
  return run_loop(std::move(student), data, run.hyper, schedule, spec, out);
}

TrainResult distill(const DistillRunConfig& run, const TrainingData& data, const DiffusionSchedule& schedule,
                    const RunOutput& out) {
  if (auto v = run.teachers.validate(); !v.empty()) throw ConfigError("invalid teacher schedule", std::move(v));
  return distill_from(inherit_weights(*run.teachers.entries.front().model, run.plan), run, data, schedule, out);
}

std::vector<TrainResult> progressive_distill(const std::vector<double>& fractions, const DistillRunConfig& base_run,
                                             const TrainingData& data, const DiffusionSchedule& schedule,
                                             const RunOutput& out, RemovalOrder order) {
  if (auto v = base_run.teachers.validate(); !v.empty()) throw ConfigError("invalid teacher schedule", std::move(v));
  const UNetModel& teacher = *base_run.teachers.entries.front().model;
  const auto plans = progressive_plans(teacher.config(), fractions, order);
  std::vector<TrainResult> results;
  for (std::size_t i = 0; i < plans.size(); ++i) {
    DistillRunConfig run = base_run;
    run.plan = plans[i];
    UNetModel student = i == 0 ? inherit_weights(teacher, plans[0])
                               : inherit_weights(results.back().model, relative_plan(teacher.config(), plans[i - 1], plans[i]));
    RunOutput level;
    if (out.dir) level.dir = *out.dir / ("level_" + std::to_string(i + 1) + "_" + plans[i].name);
    results.push_back(distill_from(std::move(student), run, data, schedule, level));
  }
  return results;
}

}  // namespace slimunet
