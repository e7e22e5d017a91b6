#pragma once

#include <cmath>
#include <cstdint>
#include <cstring>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dupkit/common.hpp"
#include "dupkit/model.hpp"
#include "dupkit/rng.hpp"
#include "dupkit/stream.hpp"

namespace dupkit {

struct TrainSchedule {
  int batch_size = 32;
  int steps = 1000;
  double peak_lr = 6e-4;
  double final_lr = 6e-6;
  int warmup_steps = 500;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double grad_clip = 1.0;  // global norm; 0 disables
  int log_every = 50;
  std::uint64_t shuffle_seed = 0;
  bool deterministic = true;  // pin compute to one thread

  void validate() const {
    if (warmup_steps > steps)
      throw std::runtime_error("schedule: warmup_steps > steps");
    if (final_lr > peak_lr)
      throw std::runtime_error("schedule: final_lr > peak_lr");
    if (batch_size < 1 || steps < 1)
      throw std::runtime_error("schedule: batch/steps must be positive");
  }
};

inline nlohmann::json schedule_to_json(const TrainSchedule& s) {
  return nlohmann::json{
      {"batch_size", s.batch_size},   {"steps", s.steps},
      {"peak_lr", s.peak_lr},         {"final_lr", s.final_lr},
      {"warmup_steps", s.warmup_steps}, {"beta1", s.beta1},
      {"beta2", s.beta2},             {"adam_eps", s.adam_eps},
      {"grad_clip", s.grad_clip},     {"log_every", s.log_every},
      {"shuffle_seed", s.shuffle_seed}, {"deterministic", s.deterministic}};
}

inline TrainSchedule schedule_from_json(const nlohmann::json& j) {
  TrainSchedule s;
  s.batch_size = j.at("batch_size").get<int>();
  s.steps = j.at("steps").get<int>();
  s.peak_lr = j.at("peak_lr").get<double>();
  s.final_lr = j.at("final_lr").get<double>();
  s.warmup_steps = j.at("warmup_steps").get<int>();
  s.beta1 = j.at("beta1").get<double>();
  s.beta2 = j.at("beta2").get<double>();
  s.adam_eps = j.at("adam_eps").get<double>();
  s.grad_clip = j.at("grad_clip").get<double>();
  s.log_every = j.at("log_every").get<int>();
  s.shuffle_seed = j.at("shuffle_seed").get<std::uint64_t>();
  s.deterministic = j.at("deterministic").get<bool>();
  return s;
}

// Linear warmup to peak_lr at step == warmup_steps, then cosine decay
// ending exactly at final_lr on the last step. steps are 1-based.
inline double learning_rate_at(const TrainSchedule& s, int step) {
  if (step <= s.warmup_steps)
    return s.peak_lr * static_cast<double>(step) /
           static_cast<double>(std::max(1, s.warmup_steps));
  if (s.steps <= s.warmup_steps) return s.peak_lr;
  double progress = static_cast<double>(step - s.warmup_steps) /
                    static_cast<double>(s.steps - s.warmup_steps);
  return s.final_lr +
         0.5 * (s.peak_lr - s.final_lr) * (1.0 + std::cos(M_PI * progress));
}

struct LossSample {
  int step;
  double lr;
  double loss;
};

template <class S>
struct Checkpoint {
  LMConfig config;
  TrainSchedule schedule;
  int step = 0;
  std::uint64_t rng_state = 0;
  std::vector<S> params;
  std::vector<S> adam_m, adam_v;
  std::vector<LossSample> curve;
  std::uint64_t stream_vocab_hash = 0;
};

// --------------------------------------------------------------------------
// Training
// --------------------------------------------------------------------------

// Contiguous packing: chunks of context+1 tokens with stride context, so
// each chunk provides context inputs and context shifted targets. The
// first pass walks the stream in order; wrapping reshuffles chunk order.
class ChunkSampler {
 public:
  ChunkSampler(const TokenStream& stream, int context, std::uint64_t seed)
      : stream_(stream), context_(context), rng_(seed) {
    if (stream.ids.size() < static_cast<std::size_t>(context) + 1)
      throw std::runtime_error("train: stream shorter than one context chunk");
    n_chunks_ = (stream.ids.size() - 1) / static_cast<std::size_t>(context);
    order_.resize(n_chunks_);
    for (std::size_t i = 0; i < n_chunks_; ++i) order_[i] = i;
  }

  // Fills batch inputs/targets (B x context each).
  void next_batch(int batch, std::vector<std::uint32_t>& inputs,
                  std::vector<std::uint32_t>& targets,
                  const FlagStream* flags, std::vector<std::uint8_t>* flag_out) {
    const auto T = static_cast<std::size_t>(context_);
    inputs.resize(static_cast<std::size_t>(batch) * T);
    targets.resize(static_cast<std::size_t>(batch) * T);
    if (flag_out) flag_out->resize(static_cast<std::size_t>(batch) * T);
    for (int b = 0; b < batch; ++b) {
      if (cursor_ == n_chunks_) {
        ++epoch_;
        rng_.shuffle(order_);
        cursor_ = 0;
      }
      auto start = order_[cursor_++] * T;
      for (std::size_t t = 0; t < T; ++t) {
        inputs[b * T + t] = stream_.ids[start + t];
        targets[b * T + t] = stream_.ids[start + t + 1];
        if (flag_out) (*flag_out)[b * T + t] = flags->flags[start + t];
      }
    }
  }

  std::size_t chunks() const { return n_chunks_; }
  int epoch() const { return epoch_; }
  std::uint64_t rng_state() const { return rng_.state(); }

 private:
  const TokenStream& stream_;
  int context_;
  Rng rng_;
  std::size_t n_chunks_ = 0;
  std::size_t cursor_ = 0;
  int epoch_ = 0;
  std::vector<std::size_t> order_;
};

template <class S>
class AdamOptimizer {
 public:
  explicit AdamOptimizer(std::size_t n) : m_(n, S(0)), v_(n, S(0)) {}

  void step(std::vector<S>& params, const std::vector<S>& grads,
            const TrainSchedule& sched, int step_index) {
    const double lr = learning_rate_at(sched, step_index);
    const double b1 = sched.beta1, b2 = sched.beta2;
    const double bc1 = 1.0 - std::pow(b1, step_index);
    const double bc2 = 1.0 - std::pow(b2, step_index);
    const auto n = static_cast<std::int64_t>(params.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) {
      double gi = static_cast<double>(grads[i]);
      double mi = b1 * static_cast<double>(m_[i]) + (1.0 - b1) * gi;
      double vi = b2 * static_cast<double>(v_[i]) + (1.0 - b2) * gi * gi;
      m_[i] = static_cast<S>(mi);
      v_[i] = static_cast<S>(vi);
      double update = (mi / bc1) / (std::sqrt(vi / bc2) + sched.adam_eps);
      params[i] = static_cast<S>(static_cast<double>(params[i]) - lr * update);
    }
  }

  std::vector<S>& m() { return m_; }
  std::vector<S>& v() { return v_; }

 private:
  std::vector<S> m_, v_;
};

template <class S>
double clip_gradients(std::vector<S>& grads, double max_norm) {
  if (max_norm <= 0) return 0.0;
  double sq = 0.0;
  for (const auto& g : grads) sq += static_cast<double>(g) * g;
  double norm = std::sqrt(sq);
  if (norm > max_norm) {
    const S scale = static_cast<S>(max_norm / norm);
    const auto n = static_cast<std::int64_t>(grads.size());
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < n; ++i) grads[i] *= scale;
  }
  return norm;
}

using ProgressFn = std::function<void(int step, int total, double loss)>;

template <class S>
Checkpoint<S> train(const LMConfig& config, const TrainSchedule& schedule,
                    const TokenStream& stream,
                    const FlagStream* flags = nullptr,
                    const ProgressFn& progress = nullptr) {
  config.validate();
  schedule.validate();
  if (stream.vocab_size > static_cast<std::uint32_t>(config.vocab_size))
    throw std::runtime_error("train: stream vocab exceeds model vocab");
  const bool wants_flags = config.noncanonical_embedding_count > 0;
  if (wants_flags && (flags == nullptr || flags->size() != stream.size()))
    throw std::runtime_error("train: flag stream missing or misaligned");

  ThreadGuard guard(schedule.deterministic);

  Transformer<S> model(config);
  AdamOptimizer<S> opt(model.layout().total);
  ChunkSampler sampler(stream, config.context_length, schedule.shuffle_seed);

  std::vector<S> grads(model.layout().total, S(0));
  Activations<S> acts;
  std::vector<std::uint32_t> inputs, targets;
  std::vector<std::uint8_t> flag_batch;

  Checkpoint<S> ck;
  ck.config = config;
  ck.schedule = schedule;
  ck.stream_vocab_hash = stream.vocab_hash;

  for (int step = 1; step <= schedule.steps; ++step) {
    sampler.next_batch(schedule.batch_size, inputs, targets,
                       wants_flags ? flags : nullptr,
                       wants_flags ? &flag_batch : nullptr);
    std::fill(grads.begin(), grads.end(), S(0));
    double loss = model.loss_and_grad(
        inputs.data(), targets.data(),
        wants_flags ? flag_batch.data() : nullptr, schedule.batch_size,
        config.context_length, acts, grads);
    clip_gradients(grads, schedule.grad_clip);
    opt.step(model.params(), grads, schedule, step);

    if (step % std::max(1, schedule.log_every) == 0 || step == schedule.steps) {
      ck.curve.push_back({step, learning_rate_at(schedule, step), loss});
      if (progress) progress(step, schedule.steps, loss);
    }
  }

  ck.step = schedule.steps;
  ck.rng_state = sampler.rng_state();
  ck.params = model.params();
  ck.adam_m = std::move(opt.m());
  ck.adam_v = std::move(opt.v());
  return ck;
}

// --------------------------------------------------------------------------
// Checkpoint container: "DCKP" | u32 version | u64 json length | header
// JSON | raw little-endian parameter/moment blocks.
// --------------------------------------------------------------------------

template <class S>
void save_checkpoint(const Checkpoint<S>& ck, const std::string& path) {
  nlohmann::json header;
  header["config"] = lm_config_to_json(ck.config);
  header["schedule"] = schedule_to_json(ck.schedule);
  header["step"] = ck.step;
  header["rng_state"] = ck.rng_state;
  header["stream_vocab_hash"] = ck.stream_vocab_hash;
  header["scalar_bytes"] = sizeof(S);
  header["param_count"] = ck.params.size();
  header["toolkit_version"] = kVersion;
  auto curve = nlohmann::json::array();
  for (const auto& c : ck.curve)
    curve.push_back({{"step", c.step}, {"lr", c.lr}, {"loss", c.loss}});
  header["curve"] = curve;

  std::string out;
  out += "DCKP";
  std::uint32_t version = 1;
  out.append(reinterpret_cast<const char*>(&version), 4);
  std::string hj = header.dump();
  std::uint64_t hlen = hj.size();
  out.append(reinterpret_cast<const char*>(&hlen), 8);
  out += hj;
  auto append_block = [&out](const std::vector<S>& v) {
    out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(S));
  };
  append_block(ck.params);
  append_block(ck.adam_m);
  append_block(ck.adam_v);
  write_file_atomic(path, out);
}

template <class S>
Checkpoint<S> load_checkpoint(const std::string& path) {
  auto data = read_file(path);
  if (data.size() < 16 || data.compare(0, 4, "DCKP") != 0)
    throw std::runtime_error("not a checkpoint file: " + path);
  std::uint32_t version;
  std::memcpy(&version, data.data() + 4, 4);
  if (version != 1) throw std::runtime_error("unsupported checkpoint version");
  std::uint64_t hlen;
  std::memcpy(&hlen, data.data() + 8, 8);
  auto header = nlohmann::json::parse(data.substr(16, hlen));
  if (header.at("scalar_bytes").get<std::size_t>() != sizeof(S))
    throw std::runtime_error("checkpoint scalar type mismatch");

  Checkpoint<S> ck;
  ck.config = lm_config_from_json(header.at("config"));
  ck.schedule = schedule_from_json(header.at("schedule"));
  ck.step = header.at("step").get<int>();
  ck.rng_state = header.at("rng_state").get<std::uint64_t>();
  ck.stream_vocab_hash = header.at("stream_vocab_hash").get<std::uint64_t>();
  for (const auto& c : header.at("curve"))
    ck.curve.push_back({c.at("step").get<int>(), c.at("lr").get<double>(),
                        c.at("loss").get<double>()});

  auto n = header.at("param_count").get<std::size_t>();
  std::size_t pos = 16 + hlen;
  auto read_block = [&](std::vector<S>& v) {
    v.resize(n);
    if (pos + n * sizeof(S) > data.size())
      throw std::runtime_error("checkpoint truncated");
    std::memcpy(v.data(), data.data() + pos, n * sizeof(S));
    pos += n * sizeof(S);
  };
  read_block(ck.params);
  read_block(ck.adam_m);
  read_block(ck.adam_v);
  return ck;
}

template <class S>
Transformer<S> model_from_checkpoint(const Checkpoint<S>& ck) {
  Transformer<S> model(ck.config);
  if (model.layout().total != ck.params.size())
    throw std::runtime_error("checkpoint parameter count mismatch");
  model.params() = ck.params;
  return model;
}

inline std::string curve_to_csv(const std::vector<LossSample>& curve) {
  std::string out = "step,lr,loss\n";
  char buf[96];
  for (const auto& c : curve) {
    std::snprintf(buf, sizeof(buf), "%d,%.9g,%.9g\n", c.step, c.lr, c.loss);
    out += buf;
  }
  return out;
}

}  // namespace dupkit
