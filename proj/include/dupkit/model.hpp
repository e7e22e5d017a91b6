#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "dupkit/linalg.hpp"
#include "dupkit/rng.hpp"

namespace dupkit {

// Decoder-only transformer (GPT-2 style: learned positions, pre-LN,
// GELU MLP). Input and output embeddings are untied by default so the
// two sides can be analyzed separately. noncanonical_embedding_count
// enables the shared rule-flag vectors added to the input at flagged
// positions (one vector when 1, one per rule type when 3).
struct LMConfig {
  int vocab_size = 0;
  int layers = 2;
  int hidden_size = 128;
  int heads = 4;
  int context_length = 512;
  bool untied_embeddings = true;
  int noncanonical_embedding_count = 0;  // 0, 1 or 3
  std::uint64_t seed = 0;

  void validate() const {
    if (vocab_size <= 0) throw std::runtime_error("lm config: vocab_size <= 0");
    if (hidden_size % heads != 0)
      throw std::runtime_error("lm config: hidden_size not divisible by heads");
    if (context_length < 2)
      throw std::runtime_error("lm config: context_length < 2");
    if (noncanonical_embedding_count != 0 && noncanonical_embedding_count != 1 &&
        noncanonical_embedding_count != 3)
      throw std::runtime_error("lm config: noncanonical_embedding_count not in {0,1,3}");
  }

  int head_dim() const { return hidden_size / heads; }
  int ff_dim() const { return 4 * hidden_size; }
};

inline nlohmann::json lm_config_to_json(const LMConfig& c) {
  return nlohmann::json{{"vocab_size", c.vocab_size},
                        {"layers", c.layers},
                        {"hidden_size", c.hidden_size},
                        {"heads", c.heads},
                        {"context_length", c.context_length},
                        {"untied_embeddings", c.untied_embeddings},
                        {"noncanonical_embedding_count",
                         c.noncanonical_embedding_count},
                        {"seed", c.seed}};
}

inline LMConfig lm_config_from_json(const nlohmann::json& j) {
  LMConfig c;
  c.vocab_size = j.at("vocab_size").get<int>();
  c.layers = j.at("layers").get<int>();
  c.hidden_size = j.at("hidden_size").get<int>();
  c.heads = j.at("heads").get<int>();
  c.context_length = j.at("context_length").get<int>();
  c.untied_embeddings = j.at("untied_embeddings").get<bool>();
  c.noncanonical_embedding_count =
      j.at("noncanonical_embedding_count").get<int>();
  c.seed = j.at("seed").get<std::uint64_t>();
  return c;
}

// Named slices of the flat parameter buffer; the order defines the
// checkpoint wire format.
struct ParamLayout {
  struct Entry {
    std::string name;
    std::size_t offset;
    std::size_t rows;
    std::size_t cols;
    std::size_t count() const { return rows * cols; }
  };
  std::vector<Entry> entries;
  std::size_t total = 0;

  std::size_t add(const std::string& name, std::size_t rows, std::size_t cols) {
    entries.push_back({name, total, rows, cols});
    total += rows * cols;
    return entries.back().offset;
  }
  const Entry& find(const std::string& name) const {
    for (const auto& e : entries)
      if (e.name == name) return e;
    throw std::runtime_error("param layout: no tensor named " + name);
  }
};

inline ParamLayout make_layout(const LMConfig& cfg) {
  ParamLayout lay;
  const auto V = static_cast<std::size_t>(cfg.vocab_size);
  const auto C = static_cast<std::size_t>(cfg.hidden_size);
  const auto T = static_cast<std::size_t>(cfg.context_length);
  const auto F = static_cast<std::size_t>(cfg.ff_dim());
  lay.add("wte", V, C);
  lay.add("wpe", T, C);
  if (cfg.noncanonical_embedding_count > 0)
    lay.add("nce", static_cast<std::size_t>(cfg.noncanonical_embedding_count), C);
  for (int l = 0; l < cfg.layers; ++l) {
    auto p = "layer" + std::to_string(l) + ".";
    lay.add(p + "ln1.g", 1, C);
    lay.add(p + "ln1.b", 1, C);
    lay.add(p + "attn.qkv.w", C, 3 * C);
    lay.add(p + "attn.qkv.b", 1, 3 * C);
    lay.add(p + "attn.proj.w", C, C);
    lay.add(p + "attn.proj.b", 1, C);
    lay.add(p + "ln2.g", 1, C);
    lay.add(p + "ln2.b", 1, C);
    lay.add(p + "mlp.fc.w", C, F);
    lay.add(p + "mlp.fc.b", 1, F);
    lay.add(p + "mlp.proj.w", F, C);
    lay.add(p + "mlp.proj.b", 1, C);
  }
  lay.add("lnf.g", 1, C);
  lay.add("lnf.b", 1, C);
  if (cfg.untied_embeddings) lay.add("head.w", C, V);
  return lay;
}

// Scratch activations for one forward/backward pass.
template <class S>
struct Activations {
  int B = 0, T = 0;
  struct Layer {
    std::vector<S> x_in, ln1_out, ln1_mu, ln1_rstd;
    std::vector<S> qkv, attn_p, atty, x_mid, x_out;
    std::vector<S> ln2_out, ln2_mu, ln2_rstd;
    std::vector<S> fc, gelu;
  };
  std::vector<S> emb;  // embedding sum (input to layer 0)
  std::vector<Layer> layers;
  std::vector<S> x_final, lnf_out, lnf_mu, lnf_rstd;
  std::vector<S> logits;  // overwritten with probabilities by the loss

  void resize(const LMConfig& cfg, int b, int t) {
    B = b;
    T = t;
    const auto n = static_cast<std::size_t>(b) * t;
    const auto C = static_cast<std::size_t>(cfg.hidden_size);
    const auto F = static_cast<std::size_t>(cfg.ff_dim());
    const auto H = static_cast<std::size_t>(cfg.heads);
    emb.resize(n * C);
    layers.resize(cfg.layers);
    for (auto& L : layers) {
      L.x_in.resize(n * C);
      L.ln1_out.resize(n * C);
      L.ln1_mu.resize(n);
      L.ln1_rstd.resize(n);
      L.qkv.resize(n * 3 * C);
      L.attn_p.resize(static_cast<std::size_t>(b) * H * t * t);
      L.atty.resize(n * C);
      L.x_mid.resize(n * C);
      L.x_out.resize(n * C);
      L.ln2_out.resize(n * C);
      L.ln2_mu.resize(n);
      L.ln2_rstd.resize(n);
      L.fc.resize(n * F);
      L.gelu.resize(n * F);
    }
    x_final.resize(n * C);
    lnf_out.resize(n * C);
    lnf_mu.resize(n);
    lnf_rstd.resize(n);
    logits.resize(n * static_cast<std::size_t>(cfg.vocab_size));
  }
};

template <class S>
class Transformer {
 public:
  explicit Transformer(LMConfig cfg) : cfg_(cfg), layout_(make_layout(cfg)) {
    cfg_.validate();
    params_.assign(layout_.total, S(0));
    init_weights();
  }

  const LMConfig& config() const { return cfg_; }
  const ParamLayout& layout() const { return layout_; }
  std::vector<S>& params() { return params_; }
  const std::vector<S>& params() const { return params_; }

  S* tensor(const std::string& name) {
    return params_.data() + layout_.find(name).offset;
  }
  const S* tensor(const std::string& name) const {
    return params_.data() + layout_.find(name).offset;
  }

  // Current input/output embedding row for one id.
  std::vector<S> embedding(bool input_side, int id) const {
    if (id < 0 || id >= cfg_.vocab_size)
      throw std::runtime_error("embedding: id out of range");
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    std::vector<S> row(C);
    if (input_side) {
      const S* wte = tensor("wte");
      std::memcpy(row.data(), wte + static_cast<std::size_t>(id) * C,
                  C * sizeof(S));
    } else if (cfg_.untied_embeddings) {
      const S* head = tensor("head.w");  // C x V, column id
      const auto V = static_cast<std::size_t>(cfg_.vocab_size);
      for (std::size_t c = 0; c < C; ++c)
        row[c] = head[c * V + static_cast<std::size_t>(id)];
    } else {
      const S* wte = tensor("wte");
      std::memcpy(row.data(), wte + static_cast<std::size_t>(id) * C,
                  C * sizeof(S));
    }
    return row;
  }

  void set_output_embedding(int id, const std::vector<S>& row) {
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    if (!cfg_.untied_embeddings)
      throw std::runtime_error("tied model: set the input embedding instead");
    S* head = tensor("head.w");
    for (std::size_t c = 0; c < C; ++c)
      head[c * V + static_cast<std::size_t>(id)] = row[c];
  }

  void set_input_embedding(int id, const std::vector<S>& row) {
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    std::memcpy(tensor("wte") + static_cast<std::size_t>(id) * C, row.data(),
                C * sizeof(S));
  }

  // Forward pass over a (B, T) batch of ids. flags may be null; when the
  // config enables non-canonical embeddings it must be non-null and
  // aligned with ids. Leaves logits in acts.logits.
  void forward(const std::uint32_t* ids, const std::uint8_t* flags, int B,
               int T, Activations<S>& acts) const {
    if (T < 1 || T > cfg_.context_length)
      throw std::runtime_error("forward: sequence length outside [1, context]");
    const auto n = static_cast<std::size_t>(B) * T;
    for (std::size_t i = 0; i < n; ++i)
      if (ids[i] >= static_cast<std::uint32_t>(cfg_.vocab_size))
        throw std::runtime_error("forward: token id out of range");
    if (cfg_.noncanonical_embedding_count > 0 && flags == nullptr)
      throw std::runtime_error(
          "forward: model expects a flag stream alongside the tokens");

    acts.resize(cfg_, B, T);
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    const S* wte = tensor("wte");
    const S* wpe = tensor("wpe");
    const S* nce =
        cfg_.noncanonical_embedding_count > 0 ? tensor("nce") : nullptr;

    // embeddings
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
      const auto t = static_cast<std::size_t>(i) % T;
      S* out = acts.emb.data() + static_cast<std::size_t>(i) * C;
      const S* te = wte + ids[i] * C;
      const S* pe = wpe + t * C;
      for (std::size_t c = 0; c < C; ++c) out[c] = te[c] + pe[c];
      if (nce && flags[i]) {
        if (cfg_.noncanonical_embedding_count == 1) {
          for (std::size_t c = 0; c < C; ++c) out[c] += nce[c];
        } else {
          for (int r = 0; r < 3; ++r)
            if (flags[i] & (1u << r))
              for (std::size_t c = 0; c < C; ++c)
                out[c] += nce[static_cast<std::size_t>(r) * C + c];
        }
      }
    }

    const S* x = acts.emb.data();
    for (int l = 0; l < cfg_.layers; ++l) {
      auto& L = acts.layers[l];
      std::memcpy(L.x_in.data(), x, n * C * sizeof(S));
      layer_forward(l, L, B, T);
      x = L.x_out.data();
    }
    std::memcpy(acts.x_final.data(), x, n * C * sizeof(S));

    layernorm_forward(acts.x_final.data(), tensor("lnf.g"), tensor("lnf.b"),
                      acts.lnf_out.data(), acts.lnf_mu.data(),
                      acts.lnf_rstd.data(), static_cast<std::int64_t>(n),
                      static_cast<std::int64_t>(C));

    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    if (cfg_.untied_embeddings) {
      gemm(Trans::kN, Trans::kN, static_cast<int>(n), static_cast<int>(V),
           static_cast<int>(C), S(1), acts.lnf_out.data(), static_cast<int>(C),
           tensor("head.w"), static_cast<int>(V), S(0), acts.logits.data(),
           static_cast<int>(V));
    } else {
      gemm(Trans::kN, Trans::kT, static_cast<int>(n), static_cast<int>(V),
           static_cast<int>(C), S(1), acts.lnf_out.data(), static_cast<int>(C),
           wte, static_cast<int>(C), S(0), acts.logits.data(),
           static_cast<int>(V));
    }
  }

  // Row-wise softmax of the logits, in place.
  static void softmax_rows(Activations<S>& acts, int vocab) {
    const auto n = static_cast<std::int64_t>(acts.B) * acts.T;
#pragma omp parallel for schedule(static)
    for (std::int64_t r = 0; r < n; ++r) {
      S* row = acts.logits.data() + r * vocab;
      S m = row[0];
      for (int c = 1; c < vocab; ++c) m = std::max(m, row[c]);
      S z = 0;
      for (int c = 0; c < vocab; ++c) {
        row[c] = std::exp(row[c] - m);
        z += row[c];
      }
      for (int c = 0; c < vocab; ++c) row[c] /= z;
    }
  }

  // Mean cross-entropy over all positions; fills grads (accumulating into
  // the caller-provided buffer, which must be zeroed for a fresh step).
  // acts.logits holds probabilities afterwards.
  double loss_and_grad(const std::uint32_t* ids, const std::uint32_t* targets,
                       const std::uint8_t* flags, int B, int T,
                       Activations<S>& acts, std::vector<S>& grads) {
    if (grads.size() != layout_.total)
      throw std::runtime_error("loss_and_grad: grad buffer size mismatch");
    forward(ids, flags, B, T, acts);
    softmax_rows(acts, cfg_.vocab_size);

    const auto n = static_cast<std::size_t>(B) * T;
    const auto V = static_cast<std::size_t>(cfg_.vocab_size);
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double p = static_cast<double>(acts.logits[i * V + targets[i]]);
      loss -= std::log(std::max(p, 1e-30));
    }
    loss /= static_cast<double>(n);

    // dlogits = (p - onehot) / n, in place
    const S scale = S(1) / static_cast<S>(n);
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i) {
      S* row = acts.logits.data() + static_cast<std::size_t>(i) * V;
      for (std::size_t c = 0; c < V; ++c) row[c] *= scale;
      row[targets[i]] -= scale;
    }

    // head
    std::vector<S> d_lnf(n * C);
    if (cfg_.untied_embeddings) {
      S* dhead = grads.data() + layout_.find("head.w").offset;
      gemm(Trans::kT, Trans::kN, static_cast<int>(C), static_cast<int>(V),
           static_cast<int>(n), S(1), acts.lnf_out.data(),
           static_cast<int>(C), acts.logits.data(), static_cast<int>(V), S(1),
           dhead, static_cast<int>(V));
      gemm(Trans::kN, Trans::kT, static_cast<int>(n), static_cast<int>(C),
           static_cast<int>(V), S(1), acts.logits.data(), static_cast<int>(V),
           tensor("head.w"), static_cast<int>(V), S(0), d_lnf.data(),
           static_cast<int>(C));
    } else {
      S* dwte = grads.data() + layout_.find("wte").offset;
      gemm(Trans::kT, Trans::kN, static_cast<int>(V), static_cast<int>(C),
           static_cast<int>(n), S(1), acts.logits.data(), static_cast<int>(V),
           acts.lnf_out.data(), static_cast<int>(C), S(1), dwte,
           static_cast<int>(C));
      gemm(Trans::kN, Trans::kN, static_cast<int>(n), static_cast<int>(C),
           static_cast<int>(V), S(1), acts.logits.data(), static_cast<int>(V),
           tensor("wte"), static_cast<int>(C), S(0), d_lnf.data(),
           static_cast<int>(C));
    }

    std::vector<S> dx(n * C);
    layernorm_backward(d_lnf.data(), acts.x_final.data(), tensor("lnf.g"),
                       acts.lnf_mu.data(), acts.lnf_rstd.data(), dx.data(),
                       grads.data() + layout_.find("lnf.g").offset,
                       grads.data() + layout_.find("lnf.b").offset,
                       static_cast<std::int64_t>(n),
                       static_cast<std::int64_t>(C));

    for (int l = cfg_.layers - 1; l >= 0; --l)
      layer_backward(l, acts.layers[l], B, T, dx, grads);

    // embedding gathers run serially: scatter order defines determinism
    S* dwte = grads.data() + layout_.find("wte").offset;
    S* dwpe = grads.data() + layout_.find("wpe").offset;
    S* dnce = cfg_.noncanonical_embedding_count > 0
                  ? grads.data() + layout_.find("nce").offset
                  : nullptr;
    for (std::size_t i = 0; i < n; ++i) {
      const auto t = i % static_cast<std::size_t>(T);
      const S* di = dx.data() + i * C;
      S* te = dwte + ids[i] * C;
      S* pe = dwpe + t * C;
      for (std::size_t c = 0; c < C; ++c) {
        te[c] += di[c];
        pe[c] += di[c];
      }
      if (dnce && flags[i]) {
        if (cfg_.noncanonical_embedding_count == 1) {
          for (std::size_t c = 0; c < C; ++c) dnce[c] += di[c];
        } else {
          for (int r = 0; r < 3; ++r)
            if (flags[i] & (1u << r))
              for (std::size_t c = 0; c < C; ++c)
                dnce[static_cast<std::size_t>(r) * C + c] += di[c];
        }
      }
    }
    return loss;
  }

 private:
  void init_weights() {
    Rng rng(cfg_.seed ^ 0x6d6f64656cULL);
    const S base_std = static_cast<S>(0.02);
    const S proj_std =
        static_cast<S>(0.02 / std::sqrt(2.0 * std::max(1, cfg_.layers)));
    for (const auto& e : layout_.entries) {
      S* p = params_.data() + e.offset;
      bool is_bias = e.name.ends_with(".b") && e.name.find("ln") == std::string::npos;
      bool is_ln_g = e.name.ends_with("ln1.g") || e.name.ends_with("ln2.g") ||
                     e.name == "lnf.g";
      bool is_ln_b = e.name.ends_with("ln1.b") || e.name.ends_with("ln2.b") ||
                     e.name == "lnf.b";
      bool is_resid_proj = e.name.find("proj.w") != std::string::npos;
      if (e.name == "nce") {
        // zero so training starts exactly equivalent to the flag-free model
        continue;
      }
      if (is_ln_g) {
        for (std::size_t i = 0; i < e.count(); ++i) p[i] = S(1);
      } else if (is_ln_b || is_bias) {
        // zeros
      } else if (e.name == "wpe") {
        for (std::size_t i = 0; i < e.count(); ++i)
          p[i] = static_cast<S>(rng.normal()) * static_cast<S>(0.01);
      } else if (is_resid_proj) {
        for (std::size_t i = 0; i < e.count(); ++i)
          p[i] = static_cast<S>(rng.normal()) * proj_std;
      } else {
        for (std::size_t i = 0; i < e.count(); ++i)
          p[i] = static_cast<S>(rng.normal()) * base_std;
      }
    }
  }

  void layer_forward(int l, typename Activations<S>::Layer& L, int B,
                     int T) const {
    const auto n = static_cast<std::size_t>(B) * T;
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    const auto F = static_cast<std::size_t>(cfg_.ff_dim());
    const int H = cfg_.heads;
    const int hd = cfg_.head_dim();
    auto p = "layer" + std::to_string(l) + ".";

    layernorm_forward(L.x_in.data(), tensor(p + "ln1.g"), tensor(p + "ln1.b"),
                      L.ln1_out.data(), L.ln1_mu.data(), L.ln1_rstd.data(),
                      static_cast<std::int64_t>(n),
                      static_cast<std::int64_t>(C));

    gemm(Trans::kN, Trans::kN, static_cast<int>(n), static_cast<int>(3 * C),
         static_cast<int>(C), S(1), L.ln1_out.data(), static_cast<int>(C),
         tensor(p + "attn.qkv.w"), static_cast<int>(3 * C), S(0),
         L.qkv.data(), static_cast<int>(3 * C));
    add_bias_rows(L.qkv.data(), tensor(p + "attn.qkv.b"),
                  static_cast<std::int64_t>(n),
                  static_cast<std::int64_t>(3 * C));

    // causal attention per (batch, head); every output row is owned by
    // one loop iteration, so results do not depend on the thread count
    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const S* qkv = L.qkv.data() + static_cast<std::size_t>(b) * T * 3 * C;
        const S* q = qkv + static_cast<std::size_t>(h) * hd;
        const S* k = qkv + C + static_cast<std::size_t>(h) * hd;
        const S* v = qkv + 2 * C + static_cast<std::size_t>(h) * hd;
        S* probs = L.attn_p.data() +
                   (static_cast<std::size_t>(b) * H + h) *
                       static_cast<std::size_t>(T) * T;
        S* y = L.atty.data() + static_cast<std::size_t>(b) * T * C +
               static_cast<std::size_t>(h) * hd;
        for (int ti = 0; ti < T; ++ti) {
          const S* qi = q + static_cast<std::size_t>(ti) * 3 * C;
          S* prow = probs + static_cast<std::size_t>(ti) * T;
          S m = -std::numeric_limits<S>::infinity();
          for (int tj = 0; tj <= ti; ++tj) {
            const S* kj = k + static_cast<std::size_t>(tj) * 3 * C;
            S s = 0;
            for (int c = 0; c < hd; ++c) s += qi[c] * kj[c];
            s *= inv_sqrt;
            prow[tj] = s;
            m = std::max(m, s);
          }
          S z = 0;
          for (int tj = 0; tj <= ti; ++tj) {
            prow[tj] = std::exp(prow[tj] - m);
            z += prow[tj];
          }
          for (int tj = 0; tj <= ti; ++tj) prow[tj] /= z;
          for (int tj = ti + 1; tj < T; ++tj) prow[tj] = 0;

          S* yi = y + static_cast<std::size_t>(ti) * C;
          for (int c = 0; c < hd; ++c) yi[c] = 0;
          for (int tj = 0; tj <= ti; ++tj) {
            const S* vj = v + static_cast<std::size_t>(tj) * 3 * C;
            const S pw = prow[tj];
            for (int c = 0; c < hd; ++c) yi[c] += pw * vj[c];
          }
        }
      }
    }

    // attention output projection + residual
    gemm(Trans::kN, Trans::kN, static_cast<int>(n), static_cast<int>(C),
         static_cast<int>(C), S(1), L.atty.data(), static_cast<int>(C),
         tensor(p + "attn.proj.w"), static_cast<int>(C), S(0), L.x_mid.data(),
         static_cast<int>(C));
    add_bias_rows(L.x_mid.data(), tensor(p + "attn.proj.b"),
                  static_cast<std::int64_t>(n), static_cast<std::int64_t>(C));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n * C); ++i)
      L.x_mid[i] += L.x_in[i];

    layernorm_forward(L.x_mid.data(), tensor(p + "ln2.g"), tensor(p + "ln2.b"),
                      L.ln2_out.data(), L.ln2_mu.data(), L.ln2_rstd.data(),
                      static_cast<std::int64_t>(n),
                      static_cast<std::int64_t>(C));

    gemm(Trans::kN, Trans::kN, static_cast<int>(n), static_cast<int>(F),
         static_cast<int>(C), S(1), L.ln2_out.data(), static_cast<int>(C),
         tensor(p + "mlp.fc.w"), static_cast<int>(F), S(0), L.fc.data(),
         static_cast<int>(F));
    add_bias_rows(L.fc.data(), tensor(p + "mlp.fc.b"),
                  static_cast<std::int64_t>(n), static_cast<std::int64_t>(F));
    gelu_forward(L.fc.data(), L.gelu.data(),
                 static_cast<std::int64_t>(n * F));

    // second residual write goes straight into x_mid's successor: reuse
    // x_mid as the layer output buffer
    std::vector<S> mlp_out(n * C);
    gemm(Trans::kN, Trans::kN, static_cast<int>(n), static_cast<int>(C),
         static_cast<int>(F), S(1), L.gelu.data(), static_cast<int>(F),
         tensor(p + "mlp.proj.w"), static_cast<int>(C), S(0), mlp_out.data(),
         static_cast<int>(C));
    add_bias_rows(mlp_out.data(), tensor(p + "mlp.proj.b"),
                  static_cast<std::int64_t>(n), static_cast<std::int64_t>(C));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n * C); ++i)
      L.x_mid[i] += mlp_out[i];
  }

  // Consumes dx = dLoss/d(layer output), leaves dx = dLoss/d(layer input).
  void layer_backward(int l, typename Activations<S>::Layer& L, int B, int T,
                      std::vector<S>& dx, std::vector<S>& grads) const {
    const auto n = static_cast<std::size_t>(B) * T;
    const auto C = static_cast<std::size_t>(cfg_.hidden_size);
    const auto F = static_cast<std::size_t>(cfg_.ff_dim());
    const int H = cfg_.heads;
    const int hd = cfg_.head_dim();
    auto p = "layer" + std::to_string(l) + ".";
    auto g = [&](const std::string& name) {
      return grads.data() + layout_.find(p + name).offset;
    };

    // --- MLP block backward (dx is d/d x_out = d/d x_mid_after_mlp) ---
    // x_out = x_mid + proj(gelu(fc(ln2(x_mid)))); residual: dx flows both ways
    std::vector<S> d_gelu(n * F), d_fc(n * F), d_ln2(n * C);
    gemm(Trans::kT, Trans::kN, static_cast<int>(F), static_cast<int>(C),
         static_cast<int>(n), S(1), L.gelu.data(), static_cast<int>(F),
         dx.data(), static_cast<int>(C), S(1), g("mlp.proj.w"),
         static_cast<int>(C));
    bias_grad(dx.data(), g("mlp.proj.b"), static_cast<std::int64_t>(n),
              static_cast<std::int64_t>(C));
    gemm(Trans::kN, Trans::kT, static_cast<int>(n), static_cast<int>(F),
         static_cast<int>(C), S(1), dx.data(), static_cast<int>(C),
         tensor(p + "mlp.proj.w"), static_cast<int>(C), S(0), d_gelu.data(),
         static_cast<int>(F));
    gelu_backward(d_gelu.data(), L.fc.data(), d_fc.data(),
                  static_cast<std::int64_t>(n * F));
    gemm(Trans::kT, Trans::kN, static_cast<int>(C), static_cast<int>(F),
         static_cast<int>(n), S(1), L.ln2_out.data(), static_cast<int>(C),
         d_fc.data(), static_cast<int>(F), S(1), g("mlp.fc.w"),
         static_cast<int>(F));
    bias_grad(d_fc.data(), g("mlp.fc.b"), static_cast<std::int64_t>(n),
              static_cast<std::int64_t>(F));
    gemm(Trans::kN, Trans::kT, static_cast<int>(n), static_cast<int>(C),
         static_cast<int>(F), S(1), d_fc.data(), static_cast<int>(F),
         tensor(p + "mlp.fc.w"), static_cast<int>(F), S(0), d_ln2.data(),
         static_cast<int>(C));
    // d x_mid = dx (residual) + ln2 backward of d_ln2
    std::vector<S> d_xmid(n * C);
    layernorm_backward(d_ln2.data(), L.x_mid.data(), tensor(p + "ln2.g"),
                       L.ln2_mu.data(), L.ln2_rstd.data(), d_xmid.data(),
                       g("ln2.g"), g("ln2.b"), static_cast<std::int64_t>(n),
                       static_cast<std::int64_t>(C));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n * C); ++i)
      d_xmid[i] += dx[i];

    // --- attention block backward (d_xmid = d/d x_mid) ---
    // x_mid = x_in + proj(attn(ln1(x_in)))
    std::vector<S> d_atty(n * C), d_qkv(n * 3 * C), d_ln1(n * C);
    gemm(Trans::kT, Trans::kN, static_cast<int>(C), static_cast<int>(C),
         static_cast<int>(n), S(1), L.atty.data(), static_cast<int>(C),
         d_xmid.data(), static_cast<int>(C), S(1), g("attn.proj.w"),
         static_cast<int>(C));
    bias_grad(d_xmid.data(), g("attn.proj.b"), static_cast<std::int64_t>(n),
              static_cast<std::int64_t>(C));
    gemm(Trans::kN, Trans::kT, static_cast<int>(n), static_cast<int>(C),
         static_cast<int>(C), S(1), d_xmid.data(), static_cast<int>(C),
         tensor(p + "attn.proj.w"), static_cast<int>(C), S(0), d_atty.data(),
         static_cast<int>(C));

    const S inv_sqrt = S(1) / std::sqrt(static_cast<S>(hd));
#pragma omp parallel for collapse(2) schedule(static)
    for (int b = 0; b < B; ++b) {
      for (int h = 0; h < H; ++h) {
        const S* qkv = L.qkv.data() + static_cast<std::size_t>(b) * T * 3 * C;
        const S* q = qkv + static_cast<std::size_t>(h) * hd;
        const S* k = qkv + C + static_cast<std::size_t>(h) * hd;
        const S* v = qkv + 2 * C + static_cast<std::size_t>(h) * hd;
        S* dqkv = d_qkv.data() + static_cast<std::size_t>(b) * T * 3 * C;
        S* dq = dqkv + static_cast<std::size_t>(h) * hd;
        S* dk = dqkv + C + static_cast<std::size_t>(h) * hd;
        S* dv = dqkv + 2 * C + static_cast<std::size_t>(h) * hd;
        const S* probs = L.attn_p.data() +
                         (static_cast<std::size_t>(b) * H + h) *
                             static_cast<std::size_t>(T) * T;
        const S* dy = d_atty.data() + static_cast<std::size_t>(b) * T * C +
                      static_cast<std::size_t>(h) * hd;

        // per-query rows: dP, softmax backward, dQ
        std::vector<S> ds(static_cast<std::size_t>(T) * T);
        for (int ti = 0; ti < T; ++ti) {
          const S* dyi = dy + static_cast<std::size_t>(ti) * C;
          const S* prow = probs + static_cast<std::size_t>(ti) * T;
          S* dsrow = ds.data() + static_cast<std::size_t>(ti) * T;
          S dot = 0;
          for (int tj = 0; tj <= ti; ++tj) {
            const S* vj = v + static_cast<std::size_t>(tj) * 3 * C;
            S dp = 0;
            for (int c = 0; c < hd; ++c) dp += dyi[c] * vj[c];
            dsrow[tj] = dp;
            dot += dp * prow[tj];
          }
          S* dqi = dq + static_cast<std::size_t>(ti) * 3 * C;
          for (int c = 0; c < hd; ++c) dqi[c] = 0;
          for (int tj = 0; tj <= ti; ++tj) {
            S dsv = prow[tj] * (dsrow[tj] - dot) * inv_sqrt;
            dsrow[tj] = dsv;
            const S* kj = k + static_cast<std::size_t>(tj) * 3 * C;
            for (int c = 0; c < hd; ++c) dqi[c] += dsv * kj[c];
          }
        }
        // dK, dV accumulate over queries; key-row owned
        for (int tj = 0; tj < T; ++tj) {
          S* dkj = dk + static_cast<std::size_t>(tj) * 3 * C;
          S* dvj = dv + static_cast<std::size_t>(tj) * 3 * C;
          for (int c = 0; c < hd; ++c) {
            dkj[c] = 0;
            dvj[c] = 0;
          }
          for (int ti = tj; ti < T; ++ti) {
            const S dsv = ds[static_cast<std::size_t>(ti) * T + tj];
            const S pw = probs[static_cast<std::size_t>(ti) * T + tj];
            const S* qi = q + static_cast<std::size_t>(ti) * 3 * C;
            const S* dyi = dy + static_cast<std::size_t>(ti) * C;
            for (int c = 0; c < hd; ++c) {
              dkj[c] += dsv * qi[c];
              dvj[c] += pw * dyi[c];
            }
          }
        }
      }
    }

    gemm(Trans::kT, Trans::kN, static_cast<int>(C), static_cast<int>(3 * C),
         static_cast<int>(n), S(1), L.ln1_out.data(), static_cast<int>(C),
         d_qkv.data(), static_cast<int>(3 * C), S(1), g("attn.qkv.w"),
         static_cast<int>(3 * C));
    bias_grad(d_qkv.data(), g("attn.qkv.b"), static_cast<std::int64_t>(n),
              static_cast<std::int64_t>(3 * C));
    gemm(Trans::kN, Trans::kT, static_cast<int>(n), static_cast<int>(C),
         static_cast<int>(3 * C), S(1), d_qkv.data(),
         static_cast<int>(3 * C), tensor(p + "attn.qkv.w"),
         static_cast<int>(3 * C), S(0), d_ln1.data(), static_cast<int>(C));

    layernorm_backward(d_ln1.data(), L.x_in.data(), tensor(p + "ln1.g"),
                       L.ln1_mu.data(), L.ln1_rstd.data(), dx.data(),
                       g("ln1.g"), g("ln1.b"), static_cast<std::int64_t>(n),
                       static_cast<std::int64_t>(C));
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < static_cast<std::int64_t>(n * C); ++i)
      dx[i] += d_xmid[i];
  }

  LMConfig cfg_;
  ParamLayout layout_;
  std::vector<S> params_;
};

}  // namespace dupkit
