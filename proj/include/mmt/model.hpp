#pragma once

#include <Eigen/Dense>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include <cstring>

#include "mmt/common.hpp"
#include "mmt/sampler.hpp"

namespace mmt {

using Matrix = Eigen::MatrixXd;

// Label-smoothed token cross-entropy for one position. Returns the loss and,
// when dlogits is non-null, writes d(loss)/d(logits) into it.
inline double smoothed_cross_entropy(const Eigen::VectorXd& logits, int gold, double smoothing,
                                     Eigen::VectorXd* dlogits = nullptr) {
  const Eigen::Index v = logits.size();
  if (gold < 0 || gold >= v) throw std::invalid_argument("gold id out of range");
  double mx = logits.maxCoeff();
  double sum = 0.0;
  for (Eigen::Index i = 0; i < v; ++i) sum += std::exp(logits[i] - mx);
  double lse = mx + std::log(sum);
  double mean_logp = logits.mean() - lse;
  double loss = -(1.0 - smoothing) * (logits[gold] - lse) - smoothing * mean_logp;
  if (dlogits) {
    *dlogits = ((logits.array() - lse).exp() - smoothing / static_cast<double>(v)).matrix();
    (*dlogits)[gold] -= 1.0 - smoothing;
  }
  return loss;
}

struct ModelConfig {
  int encoder_layers = 2;
  int decoder_layers = 2;
  int model_dim = 64;
  int ff_dim = 128;
  int heads = 4;
  double dropout = 0.1;
  bool transparent_attention = false;
  int vocab_size = 0;
  bool shared_embeddings = true;
  int max_len = 512;
  std::vector<int> tag_ids;  // ids of language tags; decode validates against these

  void validate() const {
    if (encoder_layers < 1 || decoder_layers < 1)
      throw std::invalid_argument("layer counts must be >= 1");
    if (model_dim < 1 || ff_dim < 1) throw std::invalid_argument("dims must be >= 1");
    if (heads < 1 || model_dim % heads != 0)
      throw std::invalid_argument("heads must divide model_dim");
    if (dropout < 0.0 || dropout >= 1.0) throw std::invalid_argument("dropout must be in [0,1)");
    if (vocab_size < 5) throw std::invalid_argument("vocab_size too small");
    if (max_len < 2) throw std::invalid_argument("max_len too small");
  }
};

struct Param {
  Matrix value;
  Matrix grad;

  Param() = default;
  Param(Eigen::Index rows, Eigen::Index cols)
      : value(Matrix::Zero(rows, cols)), grad(Matrix::Zero(rows, cols)) {}
};

namespace detail {

struct LayerNormParams {
  Param gamma, beta;
};
struct AttentionParams {
  Param wq, wk, wv, wo;  // (d x d)
  Param bq, bk, bv, bo;  // (1 x d)
};
struct FfnParams {
  Param w1, b1, w2, b2;
};
struct EncoderLayerParams {
  LayerNormParams ln1, ln2;
  AttentionParams attn;
  FfnParams ffn;
};
struct DecoderLayerParams {
  LayerNormParams ln1, ln2, ln3;
  AttentionParams self_attn, cross_attn;
  FfnParams ffn;
};

struct LnCache {
  Matrix x, xhat;
  Eigen::VectorXd inv_std;
};
struct AttnCache {
  Matrix q_in, kv_in;
  std::vector<Matrix> q, k, v;      // per head
  std::vector<Matrix> probs;        // per head, post-softmax (pre-dropout)
  std::vector<Matrix> drop;         // per head, scaled dropout mask (empty = off)
  Matrix concat;
};
struct FfnCache {
  Matrix in, z1, h;
};
struct EncLayerCache {
  LnCache ln1, ln2;
  AttnCache attn;
  FfnCache ffn;
  Matrix drop_attn, drop_ffn;  // residual dropout masks
};
struct DecLayerCache {
  LnCache ln1, ln2, ln3;
  AttnCache self_attn, cross_attn;
  FfnCache ffn;
  Matrix drop_self, drop_cross, drop_ffn;
};

}  // namespace detail

// Toy transformer encoder-decoder: pre-norm residual blocks, fixed sinusoidal
// positions, shared embeddings across source/target/softmax, optional
// transparent attention (decoder cross-attends to a learned convex mix of all
// encoder layer outputs, embeddings included as layer 0). Double precision,
// hand-written backward; built for desk-scale experiments, not throughput.
class Model {
 public:
  Model(ModelConfig config, std::uint64_t seed) : cfg_(std::move(config)) {
    cfg_.validate();
    allocate();
    init(seed);
    build_positions();
    register_params();
  }

  // The registry points into this object, so moves re-register and copies
  // are disallowed (snapshot/restore through Checkpoint instead).
  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;
  Model(Model&& o) noexcept
      : cfg_(std::move(o.cfg_)),
        embedding_(std::move(o.embedding_)),
        tgt_embedding_(std::move(o.tgt_embedding_)),
        output_weight_(std::move(o.output_weight_)),
        encoder_(std::move(o.encoder_)),
        decoder_(std::move(o.decoder_)),
        enc_final_ln_(std::move(o.enc_final_ln_)),
        dec_final_ln_(std::move(o.dec_final_ln_)),
        mix_logits_(std::move(o.mix_logits_)),
        positions_(std::move(o.positions_)) {
    register_params();
  }
  Model& operator=(Model&&) = delete;

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Param*>>& named_parameters() { return registry_; }

  std::size_t parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, p] : registry_) n += static_cast<std::size_t>(p->value.size());
    return n;
  }

  std::uint64_t checksum() const {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const auto& [name, p] : registry_) {
      h = fnv1a64(name, h);
      const double* data = p->value.data();
      for (Eigen::Index i = 0; i < p->value.size(); ++i) {
        std::uint64_t bits;
        std::memcpy(&bits, &data[i], sizeof bits);
        h = fnv1a64(bits, h);
      }
    }
    return h;
  }

  void zero_grads() {
    for (auto& [name, p] : registry_) p->grad.setZero();
  }

  // Per-decoder-layer mixing weights over encoder outputs (softmax rows).
  std::vector<std::vector<double>> transparent_weights() const {
    std::vector<std::vector<double>> out;
    if (!cfg_.transparent_attention) return out;
    for (int j = 0; j < cfg_.decoder_layers; ++j) {
      auto row = softmax_row(mix_logits_.value.row(j));
      out.emplace_back(row.data(), row.data() + row.size());
    }
    return out;
  }

  // Teacher-forced mean token cross-entropy over non-pad target positions.
  // With backward=true, parameter gradients are accumulated. Dropout is
  // active when drop_rng is non-null (training mode).
  double loss(const std::vector<SegmentedExample>& batch, double label_smoothing, bool backward,
              Rng* drop_rng = nullptr, int pad_id = 0) {
    if (batch.empty()) throw std::invalid_argument("loss: empty batch");
    std::size_t total_tokens = 0;
    for (const auto& ex : batch)
      for (int id : ex.target_ids)
        if (id != pad_id) ++total_tokens;
    if (total_tokens == 0) throw std::invalid_argument("loss: all-pad targets");

    double total_loss = 0.0;
    for (const auto& ex : batch)
      total_loss += example_loss(ex, label_smoothing, backward, drop_rng, pad_id,
                                 static_cast<double>(total_tokens));
    return total_loss;
  }

  // Teacher-forced logits per example: (target_len x vocab) each.
  std::vector<Matrix> forward_logits(const std::vector<SegmentedExample>& batch) const {
    std::vector<Matrix> out;
    for (const auto& ex : batch) {
      Workspace ws;
      out.push_back(forward_example(ex, nullptr, ws));
    }
    return out;
  }

  // All attention probability matrices (per layer/head) of one example,
  // dropout off. For tests and inspection.
  std::vector<Matrix> attention_probs(const SegmentedExample& ex) const {
    Workspace ws;
    forward_example(ex, nullptr, ws);
    std::vector<Matrix> out;
    for (const auto& layer : ws.enc)
      for (const auto& p : layer.attn.probs) out.push_back(p);
    for (const auto& layer : ws.dec) {
      for (const auto& p : layer.self_attn.probs) out.push_back(p);
      for (const auto& p : layer.cross_attn.probs) out.push_back(p);
    }
    return out;
  }

  std::vector<int> decode_greedy(const std::vector<int>& source_ids, int max_len) const {
    check_decode_input(source_ids);
    Workspace ws;
    encode_stack(source_ids, nullptr, ws);
    std::vector<int> out;
    for (int t = 0; t < max_len; ++t) {
      Eigen::VectorXd logits = next_logits(ws, out);
      int best = 0;
      double best_v = logits[0];
      for (int v = 1; v < cfg_.vocab_size; ++v)
        if (logits[v] > best_v) { best_v = logits[v]; best = v; }
      if (best == eos_id_) break;
      out.push_back(best);
    }
    return out;
  }

  // Beam search with length-normalized log-probability. beam=1 matches greedy.
  std::vector<int> decode_beam(const std::vector<int>& source_ids, int max_len, int beam) const {
    if (beam < 1) throw std::invalid_argument("beam width must be >= 1");
    check_decode_input(source_ids);
    Workspace ws;
    encode_stack(source_ids, nullptr, ws);

    struct Hyp {
      std::vector<int> ids;
      double log_prob = 0.0;
      bool done = false;
      double normalized() const {
        return log_prob / static_cast<double>(std::max<std::size_t>(1, ids.size() + 1));
      }
    };
    std::vector<Hyp> alive = {Hyp{}};
    std::vector<Hyp> finished;

    for (int t = 0; t < max_len && !alive.empty(); ++t) {
      std::vector<Hyp> candidates;
      for (const auto& hyp : alive) {
        Eigen::VectorXd logits = next_logits(ws, hyp.ids);
        Eigen::VectorXd logp = log_softmax(logits);
        // top `beam` expansions, ties by smaller id
        std::vector<int> idx(static_cast<std::size_t>(cfg_.vocab_size));
        for (int v = 0; v < cfg_.vocab_size; ++v) idx[static_cast<std::size_t>(v)] = v;
        std::partial_sort(idx.begin(), idx.begin() + beam, idx.end(), [&](int a, int b) {
          if (logp[a] != logp[b]) return logp[a] > logp[b];
          return a < b;
        });
        for (int k = 0; k < beam; ++k) {
          Hyp next = hyp;
          next.log_prob += logp[idx[static_cast<std::size_t>(k)]];
          if (idx[static_cast<std::size_t>(k)] == eos_id_) next.done = true;
          else next.ids.push_back(idx[static_cast<std::size_t>(k)]);
          candidates.push_back(std::move(next));
        }
      }
      std::sort(candidates.begin(), candidates.end(), [](const Hyp& a, const Hyp& b) {
        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
        return a.ids < b.ids;
      });
      if (candidates.size() > static_cast<std::size_t>(beam)) candidates.resize(beam);
      alive.clear();
      for (auto& c : candidates) {
        if (c.done) finished.push_back(std::move(c));
        else alive.push_back(std::move(c));
      }
    }
    for (auto& h : alive) finished.push_back(std::move(h));
    if (finished.empty()) return {};
    std::sort(finished.begin(), finished.end(), [](const Hyp& a, const Hyp& b) {
      if (a.normalized() != b.normalized()) return a.normalized() > b.normalized();
      return a.ids < b.ids;
    });
    return finished.front().ids;
  }

  std::vector<int> decode(const std::vector<int>& source_ids, int max_len,
                          const std::string& mode) const {
    if (mode == "greedy") return decode_greedy(source_ids, max_len);
    if (mode.rfind("beam", 0) == 0) {
      int k = 4;
      auto open = mode.find('(');
      if (open != std::string::npos) k = std::stoi(mode.substr(open + 1));
      return decode_beam(source_ids, max_len, k);
    }
    throw std::invalid_argument("unknown decode mode: " + mode);
  }

  // ------------------------------------------------------------------
  // Checkpoint format: "MMTCKPT1" magic, JSON header (config, step, tensor
  // table), then raw little-endian float64 payload.
  // ------------------------------------------------------------------
  void save(const std::string& path, std::int64_t step) const {
    nlohmann::ordered_json header;
    header["format"] = 1;
    header["step"] = step;
    header["config"] = {{"encoder_layers", cfg_.encoder_layers},
                        {"decoder_layers", cfg_.decoder_layers},
                        {"model_dim", cfg_.model_dim},
                        {"ff_dim", cfg_.ff_dim},
                        {"heads", cfg_.heads},
                        {"dropout", cfg_.dropout},
                        {"transparent_attention", cfg_.transparent_attention},
                        {"vocab_size", cfg_.vocab_size},
                        {"shared_embeddings", cfg_.shared_embeddings},
                        {"max_len", cfg_.max_len},
                        {"tag_ids", cfg_.tag_ids}};
    auto tensors = nlohmann::ordered_json::array();
    for (const auto& [name, p] : registry_)
      tensors.push_back({{"name", name}, {"rows", p->value.rows()}, {"cols", p->value.cols()}});
    header["tensors"] = tensors;
    std::string header_str = header.dump();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write checkpoint: " + path);
    out.write("MMTCKPT1", 8);
    std::uint64_t len = header_str.size();
    out.write(reinterpret_cast<const char*>(&len), sizeof len);
    out.write(header_str.data(), static_cast<std::streamsize>(header_str.size()));
    for (const auto& [name, p] : registry_)
      out.write(reinterpret_cast<const char*>(p->value.data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
  }

  static Model load(const std::string& path, std::int64_t* step_out = nullptr) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
    char magic[8];
    in.read(magic, 8);
    if (in.gcount() != 8 || std::string(magic, 8) != "MMTCKPT1")
      throw std::runtime_error("not a checkpoint file: " + path);
    std::uint64_t len = 0;
    in.read(reinterpret_cast<char*>(&len), sizeof len);
    std::string header_str(len, '\0');
    in.read(header_str.data(), static_cast<std::streamsize>(len));
    auto header = nlohmann::json::parse(header_str);

    ModelConfig cfg;
    const auto& c = header.at("config");
    cfg.encoder_layers = c.at("encoder_layers");
    cfg.decoder_layers = c.at("decoder_layers");
    cfg.model_dim = c.at("model_dim");
    cfg.ff_dim = c.at("ff_dim");
    cfg.heads = c.at("heads");
    cfg.dropout = c.at("dropout");
    cfg.transparent_attention = c.at("transparent_attention");
    cfg.vocab_size = c.at("vocab_size");
    cfg.shared_embeddings = c.at("shared_embeddings");
    cfg.max_len = c.at("max_len");
    cfg.tag_ids = c.at("tag_ids").get<std::vector<int>>();

    Model model(cfg, 0);
    std::size_t i = 0;
    for (const auto& t : header.at("tensors")) {
      if (i >= model.registry_.size()) throw std::runtime_error("checkpoint tensor table too long");
      auto& [name, p] = model.registry_[i++];
      if (t.at("name") != name || t.at("rows") != p->value.rows() || t.at("cols") != p->value.cols())
        throw std::runtime_error("checkpoint tensor mismatch at " + name);
      in.read(reinterpret_cast<char*>(p->value.data()),
              static_cast<std::streamsize>(sizeof(double) * static_cast<std::size_t>(p->value.size())));
    }
    if (i != model.registry_.size() || !in)
      throw std::runtime_error("truncated checkpoint: " + path);
    if (step_out) *step_out = header.at("step");
    return model;
  }

  static constexpr int kBosId = 1;
  static constexpr int kEosId = 2;

 private:
  struct Workspace {
    // encoder
    Matrix src_embedded;  // post-dropout input to layer 1 (= stack entry 0)
    Matrix src_drop;
    std::vector<detail::EncLayerCache> enc;
    std::vector<Matrix> stack_raw;    // s_0..s_N
    std::vector<detail::LnCache> stack_ln;  // final-LN cache per stack entry
    std::vector<Matrix> stack_norm;   // normalized stack entries
    std::vector<Eigen::VectorXd> mix_weights;  // per decoder layer
    std::vector<Matrix> contexts;     // per decoder layer
    // decoder
    Matrix tgt_embedded, tgt_drop;
    std::vector<detail::DecLayerCache> dec;
    detail::LnCache final_ln;
    Matrix decoder_out;  // after final LN
    std::vector<int> dec_in, src_ids, tgt_ids;
  };

  void allocate() {
    const int d = cfg_.model_dim, ff = cfg_.ff_dim, v = cfg_.vocab_size;
    embedding_ = Param(v, d);
    if (!cfg_.shared_embeddings) {
      tgt_embedding_ = Param(v, d);
      output_weight_ = Param(v, d);
    }
    auto make_attn = [&]() {
      detail::AttentionParams a;
      a.wq = Param(d, d); a.wk = Param(d, d); a.wv = Param(d, d); a.wo = Param(d, d);
      a.bq = Param(1, d); a.bk = Param(1, d); a.bv = Param(1, d); a.bo = Param(1, d);
      return a;
    };
    auto make_ln = [&]() {
      detail::LayerNormParams ln;
      ln.gamma = Param(1, d);
      ln.beta = Param(1, d);
      return ln;
    };
    auto make_ffn = [&]() {
      detail::FfnParams f;
      f.w1 = Param(d, ff); f.b1 = Param(1, ff); f.w2 = Param(ff, d); f.b2 = Param(1, d);
      return f;
    };
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      detail::EncoderLayerParams p;
      p.ln1 = make_ln(); p.attn = make_attn(); p.ln2 = make_ln(); p.ffn = make_ffn();
      encoder_.push_back(std::move(p));
    }
    enc_final_ln_ = make_ln();
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      detail::DecoderLayerParams p;
      p.ln1 = make_ln(); p.self_attn = make_attn();
      p.ln2 = make_ln(); p.cross_attn = make_attn();
      p.ln3 = make_ln(); p.ffn = make_ffn();
      decoder_.push_back(std::move(p));
    }
    dec_final_ln_ = make_ln();
    if (cfg_.transparent_attention)
      mix_logits_ = Param(cfg_.decoder_layers, cfg_.encoder_layers + 1);
  }

  void init(std::uint64_t seed) {
    Rng rng(derive_seed(seed, "model-init"));
    auto uniform = [&](Param& p, double r) {
      for (Eigen::Index i = 0; i < p.value.size(); ++i)
        p.value.data()[i] = (rng.next_double() * 2.0 - 1.0) * r;
    };
    auto glorot = [&](Param& p) {
      uniform(p, std::sqrt(6.0 / static_cast<double>(p.value.rows() + p.value.cols())));
    };
    auto init_ln = [&](detail::LayerNormParams& ln) {
      ln.gamma.value.setOnes();
      ln.beta.value.setZero();
    };
    auto init_attn = [&](detail::AttentionParams& a) {
      glorot(a.wq); glorot(a.wk); glorot(a.wv); glorot(a.wo);
    };
    uniform(embedding_, std::sqrt(3.0 / static_cast<double>(cfg_.model_dim)));
    if (!cfg_.shared_embeddings) {
      uniform(tgt_embedding_, std::sqrt(3.0 / static_cast<double>(cfg_.model_dim)));
      glorot(output_weight_);
    }
    for (auto& l : encoder_) {
      init_ln(l.ln1); init_attn(l.attn); init_ln(l.ln2);
      glorot(l.ffn.w1); glorot(l.ffn.w2);
    }
    init_ln(enc_final_ln_);
    for (auto& l : decoder_) {
      init_ln(l.ln1); init_attn(l.self_attn);
      init_ln(l.ln2); init_attn(l.cross_attn);
      init_ln(l.ln3);
      glorot(l.ffn.w1); glorot(l.ffn.w2);
    }
    init_ln(dec_final_ln_);
    // transparent logits start at zero: uniform mixing over the stack
  }

  void build_positions() {
    const int d = cfg_.model_dim;
    positions_ = Matrix::Zero(cfg_.max_len, d);
    for (int pos = 0; pos < cfg_.max_len; ++pos) {
      for (int i = 0; i < d; i += 2) {
        double angle = static_cast<double>(pos) /
                       std::pow(10000.0, static_cast<double>(i) / static_cast<double>(d));
        positions_(pos, i) = std::sin(angle);
        if (i + 1 < d) positions_(pos, i + 1) = std::cos(angle);
      }
    }
  }

  void register_params() {
    auto add = [&](const std::string& name, Param& p) { registry_.emplace_back(name, &p); };
    add("embedding", embedding_);
    if (!cfg_.shared_embeddings) {
      add("tgt_embedding", tgt_embedding_);
      add("output_weight", output_weight_);
    }
    auto add_attn = [&](const std::string& prefix, detail::AttentionParams& a) {
      add(prefix + ".wq", a.wq); add(prefix + ".wk", a.wk);
      add(prefix + ".wv", a.wv); add(prefix + ".wo", a.wo);
      add(prefix + ".bq", a.bq); add(prefix + ".bk", a.bk);
      add(prefix + ".bv", a.bv); add(prefix + ".bo", a.bo);
    };
    auto add_ln = [&](const std::string& prefix, detail::LayerNormParams& ln) {
      add(prefix + ".gamma", ln.gamma);
      add(prefix + ".beta", ln.beta);
    };
    auto add_ffn = [&](const std::string& prefix, detail::FfnParams& f) {
      add(prefix + ".w1", f.w1); add(prefix + ".b1", f.b1);
      add(prefix + ".w2", f.w2); add(prefix + ".b2", f.b2);
    };
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      std::string p = "encoder." + std::to_string(l);
      add_ln(p + ".ln1", encoder_[l].ln1);
      add_attn(p + ".attn", encoder_[l].attn);
      add_ln(p + ".ln2", encoder_[l].ln2);
      add_ffn(p + ".ffn", encoder_[l].ffn);
    }
    add_ln("encoder.final_ln", enc_final_ln_);
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      std::string p = "decoder." + std::to_string(l);
      add_ln(p + ".ln1", decoder_[l].ln1);
      add_attn(p + ".self_attn", decoder_[l].self_attn);
      add_ln(p + ".ln2", decoder_[l].ln2);
      add_attn(p + ".cross_attn", decoder_[l].cross_attn);
      add_ln(p + ".ln3", decoder_[l].ln3);
      add_ffn(p + ".ffn", decoder_[l].ffn);
    }
    add_ln("decoder.final_ln", dec_final_ln_);
    if (cfg_.transparent_attention) registry_.emplace_back("transparent_mix", &mix_logits_);
  }

  // ------------------------------------------------------------------
  // primitive forward/backward pieces
  // ------------------------------------------------------------------

  static Eigen::VectorXd softmax_row(const Eigen::RowVectorXd& row) {
    Eigen::VectorXd out(row.size());
    double mx = row.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < row.size(); ++i) {
      out[i] = std::exp(row[i] - mx);
      sum += out[i];
    }
    out /= sum;
    return out;
  }

  static Eigen::VectorXd log_softmax(const Eigen::VectorXd& v) {
    double mx = v.maxCoeff();
    double sum = 0.0;
    for (Eigen::Index i = 0; i < v.size(); ++i) sum += std::exp(v[i] - mx);
    double lse = mx + std::log(sum);
    return v.array() - lse;
  }

  Matrix dropout_mask(Eigen::Index rows, Eigen::Index cols, Rng* rng) const {
    if (rng == nullptr || cfg_.dropout <= 0.0) return Matrix();
    Matrix m(rows, cols);
    double keep = 1.0 - cfg_.dropout;
    for (Eigen::Index i = 0; i < rows; ++i)
      for (Eigen::Index j = 0; j < cols; ++j)
        m(i, j) = rng->next_double() < cfg_.dropout ? 0.0 : 1.0 / keep;
    return m;
  }

  static Matrix apply_mask(const Matrix& x, const Matrix& mask) {
    return mask.size() == 0 ? x : x.cwiseProduct(mask);
  }

  Matrix layer_norm(const detail::LayerNormParams& p, const Matrix& x,
                    detail::LnCache& cache) const {
    const double eps = 1e-5;
    cache.x = x;
    cache.xhat.resize(x.rows(), x.cols());
    cache.inv_std.resize(x.rows());
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
      double mean = x.row(i).mean();
      double var = (x.row(i).array() - mean).square().mean();
      double inv = 1.0 / std::sqrt(var + eps);
      cache.inv_std[i] = inv;
      cache.xhat.row(i) = (x.row(i).array() - mean) * inv;
      out.row(i) =
          cache.xhat.row(i).cwiseProduct(p.gamma.value.row(0)) + p.beta.value.row(0);
    }
    return out;
  }

  Matrix layer_norm_backward(detail::LayerNormParams& p, const detail::LnCache& cache,
                             const Matrix& dy) const {
    const Eigen::Index d = dy.cols();
    Matrix dx(dy.rows(), d);
    for (Eigen::Index i = 0; i < dy.rows(); ++i) {
      Eigen::RowVectorXd dxhat = dy.row(i).cwiseProduct(p.gamma.value.row(0));
      p.gamma.grad.row(0) += dy.row(i).cwiseProduct(cache.xhat.row(i));
      p.beta.grad.row(0) += dy.row(i);
      double m1 = dxhat.mean();
      double m2 = dxhat.cwiseProduct(cache.xhat.row(i)).mean();
      dx.row(i) =
          cache.inv_std[i] * (dxhat.array() - m1 - cache.xhat.row(i).array() * m2).matrix();
    }
    return dx;
  }

  // Multi-head attention; q_in is (Lq x d), kv_in is (Lk x d).
  Matrix attention(const detail::AttentionParams& p, const Matrix& q_in, const Matrix& kv_in,
                   bool causal, Rng* drop_rng, detail::AttnCache& cache) const {
    const int h = cfg_.heads;
    const Eigen::Index d = cfg_.model_dim, dh = d / h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    cache.q_in = q_in;
    cache.kv_in = kv_in;
    Matrix q = (q_in * p.wq.value).rowwise() + p.bq.value.row(0);
    Matrix k = (kv_in * p.wk.value).rowwise() + p.bk.value.row(0);
    Matrix v = (kv_in * p.wv.value).rowwise() + p.bv.value.row(0);
    cache.q.clear(); cache.k.clear(); cache.v.clear();
    cache.probs.clear(); cache.drop.clear();
    cache.concat.resize(q_in.rows(), d);
    for (int head = 0; head < h; ++head) {
      Matrix qh = q.middleCols(head * dh, dh);
      Matrix kh = k.middleCols(head * dh, dh);
      Matrix vh = v.middleCols(head * dh, dh);
      Matrix scores = qh * kh.transpose() * scale;
      if (causal) {
        for (Eigen::Index i = 0; i < scores.rows(); ++i)
          for (Eigen::Index j = i + 1; j < scores.cols(); ++j) scores(i, j) = -1e30;
      }
      Matrix probs(scores.rows(), scores.cols());
      for (Eigen::Index i = 0; i < scores.rows(); ++i)
        probs.row(i) = softmax_row(scores.row(i)).transpose();
      Matrix drop = dropout_mask(probs.rows(), probs.cols(), drop_rng);
      Matrix used = apply_mask(probs, drop);
      cache.concat.middleCols(head * dh, dh) = used * vh;
      cache.q.push_back(std::move(qh));
      cache.k.push_back(std::move(kh));
      cache.v.push_back(std::move(vh));
      cache.probs.push_back(std::move(probs));
      cache.drop.push_back(std::move(drop));
    }
    return (cache.concat * p.wo.value).rowwise() + p.bo.value.row(0);
  }

  // Returns (d_q_in, d_kv_in).
  std::pair<Matrix, Matrix> attention_backward(detail::AttentionParams& p,
                                               const detail::AttnCache& cache,
                                               const Matrix& dout) const {
    const int h = cfg_.heads;
    const Eigen::Index d = cfg_.model_dim, dh = d / h;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    p.wo.grad += cache.concat.transpose() * dout;
    p.bo.grad.row(0) += dout.colwise().sum();
    Matrix dconcat = dout * p.wo.value.transpose();

    Matrix dq(cache.q_in.rows(), d), dk(cache.kv_in.rows(), d), dv(cache.kv_in.rows(), d);
    for (int head = 0; head < h; ++head) {
      Matrix dused = dconcat.middleCols(head * dh, dh) * cache.v[head].transpose();
      Matrix dvh = apply_mask(cache.probs[head], cache.drop[head]).transpose() *
                   dconcat.middleCols(head * dh, dh);
      Matrix dprobs = apply_mask(dused, cache.drop[head]);
      // softmax jacobian row-wise
      Matrix dscores(dprobs.rows(), dprobs.cols());
      for (Eigen::Index i = 0; i < dprobs.rows(); ++i) {
        double dot = dprobs.row(i).cwiseProduct(cache.probs[head].row(i)).sum();
        dscores.row(i) = cache.probs[head].row(i).array() * (dprobs.row(i).array() - dot);
      }
      dq.middleCols(head * dh, dh) = dscores * cache.k[head] * scale;
      dk.middleCols(head * dh, dh) = dscores.transpose() * cache.q[head] * scale;
      dv.middleCols(head * dh, dh) = dvh;
    }
    p.wq.grad += cache.q_in.transpose() * dq;
    p.bq.grad.row(0) += dq.colwise().sum();
    p.wk.grad += cache.kv_in.transpose() * dk;
    p.bk.grad.row(0) += dk.colwise().sum();
    p.wv.grad += cache.kv_in.transpose() * dv;
    p.bv.grad.row(0) += dv.colwise().sum();

    Matrix dq_in = dq * p.wq.value.transpose();
    Matrix dkv_in = dk * p.wk.value.transpose() + dv * p.wv.value.transpose();
    return {std::move(dq_in), std::move(dkv_in)};
  }

  Matrix ffn_forward(const detail::FfnParams& p, const Matrix& x, detail::FfnCache& cache) const {
    cache.in = x;
    cache.z1 = (x * p.w1.value).rowwise() + p.b1.value.row(0);
    cache.h = cache.z1.cwiseMax(0.0);
    return (cache.h * p.w2.value).rowwise() + p.b2.value.row(0);
  }

  Matrix ffn_backward(detail::FfnParams& p, const detail::FfnCache& cache, const Matrix& dy) const {
    p.w2.grad += cache.h.transpose() * dy;
    p.b2.grad.row(0) += dy.colwise().sum();
    Matrix dh = dy * p.w2.value.transpose();
    Matrix dz1 = dh.cwiseProduct((cache.z1.array() > 0.0).cast<double>().matrix());
    p.w1.grad += cache.in.transpose() * dz1;
    p.b1.grad.row(0) += dz1.colwise().sum();
    return dz1 * p.w1.value.transpose();
  }

  Matrix embed(const std::vector<int>& ids, const Param& table, Rng* drop_rng,
               Matrix* drop_out) const {
    if (static_cast<int>(ids.size()) > cfg_.max_len)
      throw std::invalid_argument("sequence longer than max_len");
    const Eigen::Index d = cfg_.model_dim;
    Matrix x(static_cast<Eigen::Index>(ids.size()), d);
    double s = std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < ids.size(); ++i) {
      if (ids[i] < 0 || ids[i] >= cfg_.vocab_size)
        throw std::invalid_argument("token id out of range: " + std::to_string(ids[i]));
      x.row(static_cast<Eigen::Index>(i)) =
          table.value.row(ids[i]) * s + positions_.row(static_cast<Eigen::Index>(i));
    }
    Matrix mask = dropout_mask(x.rows(), x.cols(), drop_rng);
    if (drop_out) *drop_out = mask;
    return apply_mask(x, mask);
  }

  // Encoder forward; fills the workspace stack (raw and final-norm views)
  // and the per-decoder-layer contexts.
  void encode_stack(const std::vector<int>& src_ids, Rng* drop_rng, Workspace& ws) const {
    ws.src_ids = src_ids;
    Matrix x = embed(src_ids, embedding_, drop_rng, &ws.src_drop);
    ws.src_embedded = x;
    ws.stack_raw.clear();
    ws.stack_raw.push_back(x);
    ws.enc.assign(static_cast<std::size_t>(cfg_.encoder_layers), {});
    for (int l = 0; l < cfg_.encoder_layers; ++l) {
      auto& cache = ws.enc[static_cast<std::size_t>(l)];
      auto& params = encoder_[static_cast<std::size_t>(l)];
      Matrix a = layer_norm(params.ln1, x, cache.ln1);
      Matrix sa = attention(params.attn, a, a, false, drop_rng, cache.attn);
      cache.drop_attn = dropout_mask(sa.rows(), sa.cols(), drop_rng);
      x += apply_mask(sa, cache.drop_attn);
      Matrix b = layer_norm(params.ln2, x, cache.ln2);
      Matrix f = ffn_forward(params.ffn, b, cache.ffn);
      cache.drop_ffn = dropout_mask(f.rows(), f.cols(), drop_rng);
      x += apply_mask(f, cache.drop_ffn);
      ws.stack_raw.push_back(x);
    }
    // every stack entry is normalized with the shared final encoder LN; a
    // one-hot mix on the top entry then matches the transparent-off path
    ws.stack_ln.assign(ws.stack_raw.size(), {});
    ws.stack_norm.clear();
    for (std::size_t i = 0; i < ws.stack_raw.size(); ++i)
      ws.stack_norm.push_back(layer_norm(enc_final_ln_, ws.stack_raw[i], ws.stack_ln[i]));
    // per-decoder-layer contexts
    ws.mix_weights.clear();
    ws.contexts.clear();
    for (int j = 0; j < cfg_.decoder_layers; ++j) {
      if (cfg_.transparent_attention) {
        Eigen::VectorXd w = softmax_row(mix_logits_.value.row(j));
        Matrix ctx = Matrix::Zero(x.rows(), x.cols());
        for (std::size_t i = 0; i < ws.stack_norm.size(); ++i)
          ctx += w[static_cast<Eigen::Index>(i)] * ws.stack_norm[i];
        ws.mix_weights.push_back(std::move(w));
        ws.contexts.push_back(std::move(ctx));
      } else {
        ws.contexts.push_back(ws.stack_norm.back());
      }
    }
  }

  Matrix decoder_forward(Workspace& ws, const std::vector<int>& dec_in, Rng* drop_rng) const {
    ws.dec_in = dec_in;
    const Param& in_table = cfg_.shared_embeddings ? embedding_ : tgt_embedding_;
    Matrix y = embed(dec_in, in_table, drop_rng, &ws.tgt_drop);
    ws.tgt_embedded = y;
    ws.dec.assign(static_cast<std::size_t>(cfg_.decoder_layers), {});
    for (int l = 0; l < cfg_.decoder_layers; ++l) {
      auto& cache = ws.dec[static_cast<std::size_t>(l)];
      auto& params = decoder_[static_cast<std::size_t>(l)];
      Matrix a = layer_norm(params.ln1, y, cache.ln1);
      Matrix sa = attention(params.self_attn, a, a, true, drop_rng, cache.self_attn);
      cache.drop_self = dropout_mask(sa.rows(), sa.cols(), drop_rng);
      y += apply_mask(sa, cache.drop_self);
      Matrix c = layer_norm(params.ln2, y, cache.ln2);
      Matrix ca = attention(params.cross_attn, c, ws.contexts[static_cast<std::size_t>(l)], false,
                            drop_rng, cache.cross_attn);
      cache.drop_cross = dropout_mask(ca.rows(), ca.cols(), drop_rng);
      y += apply_mask(ca, cache.drop_cross);
      Matrix b = layer_norm(params.ln3, y, cache.ln3);
      Matrix f = ffn_forward(params.ffn, b, cache.ffn);
      cache.drop_ffn = dropout_mask(f.rows(), f.cols(), drop_rng);
      y += apply_mask(f, cache.drop_ffn);
    }
    ws.decoder_out = layer_norm(dec_final_ln_, y, ws.final_ln);
    return ws.decoder_out;
  }

  const Param& output_table() const {
    return cfg_.shared_embeddings ? embedding_ : output_weight_;
  }

  // Full teacher-forced forward of one example: (Lt x V) logits.
  Matrix forward_example(const SegmentedExample& ex, Rng* drop_rng, Workspace& ws) const {
    if (ex.target_ids.empty()) throw std::invalid_argument("example without target tokens");
    encode_stack(ex.source_ids, drop_rng, ws);
    std::vector<int> dec_in;
    dec_in.push_back(kBosId);
    dec_in.insert(dec_in.end(), ex.target_ids.begin(), ex.target_ids.end() - 1);
    Matrix out = decoder_forward(ws, dec_in, drop_rng);
    ws.tgt_ids = ex.target_ids;
    return out * output_table().value.transpose();
  }

  double example_loss(const SegmentedExample& ex, double label_smoothing, bool backward,
                      Rng* drop_rng, int pad_id, double total_tokens) {
    Workspace ws;
    Matrix logits = forward_example(ex, drop_rng, ws);
    const Eigen::Index lt = logits.rows();
    const int v = cfg_.vocab_size;

    double loss = 0.0;
    Matrix dlogits = Matrix::Zero(lt, v);
    Eigen::VectorXd drow;
    for (Eigen::Index t = 0; t < lt; ++t) {
      int gold = ws.tgt_ids[static_cast<std::size_t>(t)];
      if (gold == pad_id) continue;
      loss += smoothed_cross_entropy(logits.row(t).transpose(), gold, label_smoothing,
                                     backward ? &drow : nullptr);
      if (backward) dlogits.row(t) = drow.transpose() / total_tokens;
    }
    if (backward) backward_example(ws, dlogits);
    if (!std::isfinite(loss)) throw std::runtime_error("non-finite loss");
    return loss / total_tokens;
  }

  void backward_example(Workspace& ws, const Matrix& dlogits) {
    // output projection (shared with the embedding table by default)
    Param& out_table = cfg_.shared_embeddings ? embedding_ : output_weight_;
    out_table.grad += dlogits.transpose() * ws.decoder_out;
    Matrix dy = dlogits * out_table.value;

    dy = layer_norm_backward(dec_final_ln_, ws.final_ln, dy);

    std::vector<Matrix> dcontexts(static_cast<std::size_t>(cfg_.decoder_layers));
    for (int l = cfg_.decoder_layers - 1; l >= 0; --l) {
      auto& cache = ws.dec[static_cast<std::size_t>(l)];
      auto& params = decoder_[static_cast<std::size_t>(l)];
      // ffn block
      Matrix df = apply_mask(dy, cache.drop_ffn);
      Matrix db = ffn_backward(params.ffn, cache.ffn, df);
      dy += layer_norm_backward(params.ln3, cache.ln3, db);
      // cross-attention block
      Matrix dca = apply_mask(dy, cache.drop_cross);
      auto [dq_c, dkv_c] = attention_backward(params.cross_attn, cache.cross_attn, dca);
      dcontexts[static_cast<std::size_t>(l)] = std::move(dkv_c);
      dy += layer_norm_backward(params.ln2, cache.ln2, dq_c);
      // self-attention block
      Matrix dsa = apply_mask(dy, cache.drop_self);
      auto [dq_s, dkv_s] = attention_backward(params.self_attn, cache.self_attn, dsa);
      Matrix da = dq_s + dkv_s;
      dy += layer_norm_backward(params.ln1, cache.ln1, da);
    }
    // decoder embedding
    {
      Matrix dx = apply_mask(dy, ws.tgt_drop);
      Param& table = cfg_.shared_embeddings ? embedding_ : tgt_embedding_;
      double s = std::sqrt(static_cast<double>(cfg_.model_dim));
      for (std::size_t i = 0; i < ws.dec_in.size(); ++i)
        table.grad.row(ws.dec_in[i]) += dx.row(static_cast<Eigen::Index>(i)) * s;
    }

    // contexts -> normalized stack entries
    std::vector<Matrix> dstack_norm(ws.stack_norm.size());
    for (auto& m : dstack_norm)
      m = Matrix::Zero(ws.stack_raw[0].rows(), ws.stack_raw[0].cols());
    for (int j = 0; j < cfg_.decoder_layers; ++j) {
      const Matrix& dctx = dcontexts[static_cast<std::size_t>(j)];
      if (cfg_.transparent_attention) {
        const auto& w = ws.mix_weights[static_cast<std::size_t>(j)];
        Eigen::VectorXd dw(w.size());
        for (std::size_t i = 0; i < ws.stack_norm.size(); ++i) {
          dstack_norm[i] += w[static_cast<Eigen::Index>(i)] * dctx;
          dw[static_cast<Eigen::Index>(i)] = dctx.cwiseProduct(ws.stack_norm[i]).sum();
        }
        double dot = w.dot(dw);
        mix_logits_.grad.row(j) += (w.array() * (dw.array() - dot)).matrix().transpose();
      } else {
        dstack_norm.back() += dctx;
      }
    }

    // normalized stack -> raw stack through the shared final LN
    std::vector<Matrix> dstack(ws.stack_raw.size());
    for (std::size_t i = 0; i < ws.stack_raw.size(); ++i)
      dstack[i] = layer_norm_backward(enc_final_ln_, ws.stack_ln[i], dstack_norm[i]);

    // encoder layers
    Matrix dx = dstack.back();
    for (int l = cfg_.encoder_layers - 1; l >= 0; --l) {
      auto& cache = ws.enc[static_cast<std::size_t>(l)];
      auto& params = encoder_[static_cast<std::size_t>(l)];
      Matrix df = apply_mask(dx, cache.drop_ffn);
      Matrix db = ffn_backward(params.ffn, cache.ffn, df);
      dx += layer_norm_backward(params.ln2, cache.ln2, db);
      Matrix dsa = apply_mask(dx, cache.drop_attn);
      auto [dq, dkv] = attention_backward(params.attn, cache.attn, dsa);
      dx += layer_norm_backward(params.ln1, cache.ln1, dq + dkv);
      dx += dstack[static_cast<std::size_t>(l)];
    }
    {
      Matrix dsrc = apply_mask(dx, ws.src_drop);
      double s = std::sqrt(static_cast<double>(cfg_.model_dim));
      for (std::size_t i = 0; i < ws.src_ids.size(); ++i)
        embedding_.grad.row(ws.src_ids[i]) += dsrc.row(static_cast<Eigen::Index>(i)) * s;
    }
  }

  void check_decode_input(const std::vector<int>& source_ids) const {
    if (source_ids.empty()) throw std::invalid_argument("decode: empty source");
    if (!cfg_.tag_ids.empty()) {
      bool tagged = false;
      for (int t : cfg_.tag_ids)
        if (source_ids.front() == t) tagged = true;
      if (!tagged)
        throw std::invalid_argument("decode: source does not begin with a language tag token");
    }
  }

  // Logits of the next token given the generated prefix. Recomputes the
  // prefix each step; sequences are short at desk scale. The workspace must
  // hold the encoded source contexts.
  Eigen::VectorXd next_logits(Workspace& ws, const std::vector<int>& prefix) const {
    std::vector<int> dec_in;
    dec_in.push_back(kBosId);
    dec_in.insert(dec_in.end(), prefix.begin(), prefix.end());
    Matrix out = decoder_forward(ws, dec_in, nullptr);
    Eigen::RowVectorXd last = out.row(out.rows() - 1);
    return (last * output_table().value.transpose()).transpose();
  }

  ModelConfig cfg_;
  Param embedding_, tgt_embedding_, output_weight_;
  std::vector<detail::EncoderLayerParams> encoder_;
  std::vector<detail::DecoderLayerParams> decoder_;
  detail::LayerNormParams enc_final_ln_, dec_final_ln_;
  Param mix_logits_;
  Matrix positions_;
  std::vector<std::pair<std::string, Param*>> registry_;

  static constexpr int eos_id_ = kEosId;
};

}  // namespace mmt
