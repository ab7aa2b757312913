#include "smope/model.hpp"

#include <cmath>

namespace smope {

void ModelConfig::validate() const {
  if (depth < 1 || heads < 1 || embed_dim < 1 || tokens < 2 || raw_dim < 1) {
    throw ConfigError("ModelConfig: depth/heads/dims must be positive, tokens >= 2");
  }
  if (embed_dim % heads != 0) {
    throw ConfigError("ModelConfig: embed_dim must be divisible by heads");
  }
  if (prompt_layers < 0 || prompt_layers > depth) {
    throw ConfigError("ModelConfig: prompt_layers must lie in [0, depth]");
  }
  if (prompt_layers > 0 && prompt_length < 1) {
    throw ConfigError("ModelConfig: prompt_length must be positive when prompts are enabled");
  }
  if (select_k != kDenseSelect && (select_k < 1 || select_k > prompt_length)) {
    throw ConfigError("ModelConfig: select_k must be in [1, prompt_length] or dense");
  }
  if (mlp_ratio <= 0.0) {
    throw ConfigError("ModelConfig: mlp_ratio must be positive");
  }
}

namespace {

DifferentiableParam init_linear(const std::string& name, Eigen::Index rows, Eigen::Index cols,
                                Rng& rng) {
  const double s = 1.0 / std::sqrt(static_cast<double>(rows));
  return DifferentiableParam(name, rng.uniform_matrix(rows, cols, -s, s));
}

}  // namespace

void Backbone::set_frozen(bool frozen_flag) {
  frozen = frozen_flag;
  for (DifferentiableParam* p : parameters()) {
    p->requires_grad = !frozen_flag;
    p->zero_grad();
  }
}

std::vector<DifferentiableParam*> Backbone::parameters() {
  std::vector<DifferentiableParam*> out{&embed, &class_token};
  for (BlockWeights& b : blocks) {
    for (DifferentiableParam* p :
         {&b.wq, &b.wk, &b.wv, &b.wo, &b.ln1_gain, &b.ln1_bias, &b.ln2_gain, &b.ln2_bias,
          &b.mlp_w1, &b.mlp_b1, &b.mlp_w2, &b.mlp_b2}) {
      out.push_back(p);
    }
  }
  return out;
}

std::vector<const DifferentiableParam*> Backbone::parameters() const {
  auto mutable_list = const_cast<Backbone*>(this)->parameters();
  return {mutable_list.begin(), mutable_list.end()};
}

Backbone make_backbone(const ModelConfig& cfg, Rng& rng) {
  cfg.validate();
  Backbone b;
  const int d = cfg.embed_dim;
  b.embed = init_linear("embed", cfg.raw_dim, d, rng);
  b.class_token = init_linear("class_token", 1, d, rng);
  b.blocks.resize(static_cast<std::size_t>(cfg.depth));
  for (int l = 0; l < cfg.depth; ++l) {
    BlockWeights& w = b.blocks[static_cast<std::size_t>(l)];
    const std::string p = "block" + std::to_string(l) + ".";
    w.wq = init_linear(p + "wq", d, d, rng);
    w.wk = init_linear(p + "wk", d, d, rng);
    w.wv = init_linear(p + "wv", d, d, rng);
    w.wo = init_linear(p + "wo", d, d, rng);
    w.ln1_gain = DifferentiableParam(p + "ln1_gain", Matrix::Ones(1, d));
    w.ln1_bias = DifferentiableParam(p + "ln1_bias", Matrix::Zero(1, d));
    w.ln2_gain = DifferentiableParam(p + "ln2_gain", Matrix::Ones(1, d));
    w.ln2_bias = DifferentiableParam(p + "ln2_bias", Matrix::Zero(1, d));
    w.mlp_w1 = init_linear(p + "mlp_w1", d, cfg.mlp_hidden(), rng);
    w.mlp_b1 = DifferentiableParam(p + "mlp_b1", Matrix::Zero(1, cfg.mlp_hidden()));
    w.mlp_w2 = init_linear(p + "mlp_w2", cfg.mlp_hidden(), d, rng);
    w.mlp_b2 = DifferentiableParam(p + "mlp_b2", Matrix::Zero(1, d));
  }
  return b;
}

void ClassifierHead::grow(int new_classes, int embed_dim, Rng& rng) {
  if (new_classes < 1) {
    throw ConfigError("ClassifierHead::grow: need at least one new class");
  }
  const double s = 1.0 / std::sqrt(static_cast<double>(embed_dim));
  Matrix rows = rng.uniform_matrix(new_classes, embed_dim, -s, s);
  if (weight.value.size() == 0) {
    weight = DifferentiableParam("head.weight", std::move(rows));
    bias = DifferentiableParam("head.bias", Matrix::Zero(new_classes, 1));
    return;
  }
  const Eigen::Index old = weight.value.rows();
  weight.append_rows(new_classes);
  weight.value.bottomRows(new_classes) = rows;
  bias.append_rows(new_classes);
  (void)old;
}

LearnerState make_learner(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng root(seed);
  Rng backbone_rng = root.child(1);
  Rng prompt_rng = root.child(2);
  LearnerState st;
  st.cfg = cfg;
  st.backbone = make_backbone(cfg, backbone_rng);
  for (int l = 0; l < cfg.prompt_layers; ++l) {
    st.prompts.emplace_back(cfg.prompt_length, cfg.embed_dim, cfg.heads, prompt_rng,
                            "layer" + std::to_string(l));
  }
  return st;
}

Matrix embed(const Matrix& features, const Backbone& backbone, const ModelConfig& cfg) {
  if (features.rows() != cfg.tokens - 1 || features.cols() != cfg.raw_dim) {
    throw DimensionError("embed: expected (tokens - 1) x raw_dim feature matrix");
  }
  Matrix out(cfg.tokens, cfg.embed_dim);
  out.row(0) = backbone.class_token.value.row(0);
  out.bottomRows(cfg.tokens - 1) = features * backbone.embed.value;
  return out;
}

ForwardResult forward_batch(ag::Graph& g, LearnerState& state, std::span<const Sample> batch,
                            const ForwardOptions& opt) {
  const ModelConfig& cfg = state.cfg;
  cfg.validate();
  const int batch_size = static_cast<int>(batch.size());
  if (batch_size == 0) {
    throw DataError("forward_batch: empty batch");
  }
  const int n = cfg.tokens;
  const int d = cfg.embed_dim;
  const int m = cfg.heads;
  const int dk = cfg.head_dim();
  const int prompted_layers = opt.use_prompts ? cfg.prompt_layers : 0;
  const int select_k = opt.select_k_override != 0 ? opt.select_k_override : cfg.select_k;

  // Token embedding for the whole batch.
  Matrix raw(static_cast<Eigen::Index>(batch_size) * (n - 1), cfg.raw_dim);
  for (int s = 0; s < batch_size; ++s) {
    const Matrix& f = batch[static_cast<std::size_t>(s)].features;
    if (f.rows() != n - 1 || f.cols() != cfg.raw_dim) {
      throw DimensionError("forward_batch: sample feature shape mismatch");
    }
    raw.middleRows(static_cast<Eigen::Index>(s) * (n - 1), n - 1) = f;
  }
  ag::Var embedded = ag::matmul(g.constant(std::move(raw)), g.param(state.backbone.embed));
  ag::Var class_tok = g.param(state.backbone.class_token);
  std::vector<ag::Var> token_parts;
  token_parts.reserve(static_cast<std::size_t>(batch_size) * 2);
  for (int s = 0; s < batch_size; ++s) {
    token_parts.push_back(class_tok);
    token_parts.push_back(ag::slice_rows(embedded, static_cast<Eigen::Index>(s) * (n - 1), n - 1));
  }
  ag::Var x = ag::stack_rows(token_parts);  // (B * N) x d

  ForwardResult result;

  for (int l = 0; l < cfg.depth; ++l) {
    BlockWeights& bw = state.backbone.blocks[static_cast<std::size_t>(l)];
    ag::Var ln1 = ag::layer_norm_rows(x, g.param(bw.ln1_gain), g.param(bw.ln1_bias));
    ag::Var qf = ag::matmul(ln1, g.param(bw.wq));
    ag::Var kf = ag::matmul(ln1, g.param(bw.wk));
    ag::Var vf = ag::matmul(ln1, g.param(bw.wv));

    const bool prompted = l < prompted_layers && cfg.prompt_length > 0;
    std::vector<ag::Var> wq_heads, pk_projs, pk_proj_ts, pv_projs;
    std::vector<Vector> head_freqs;
    if (prompted) {
      PromptBlock& pb = state.prompts[static_cast<std::size_t>(l)];
      ag::Var pk = g.param(pb.keys);
      ag::Var pv = g.param(pb.values);
      for (int h = 0; h < m; ++h) {
        ag::Var wk_h = ag::slice_cols(g.param(bw.wk), static_cast<Eigen::Index>(h) * dk, dk);
        ag::Var wv_h = ag::slice_cols(g.param(bw.wv), static_cast<Eigen::Index>(h) * dk, dk);
        wq_heads.push_back(ag::slice_cols(g.param(bw.wq), static_cast<Eigen::Index>(h) * dk, dk));
        ag::Var pk_proj = ag::matmul(pk, wk_h);
        pk_projs.push_back(pk_proj);
        pk_proj_ts.push_back(ag::transpose(pk_proj));
        pv_projs.push_back(ag::matmul(pv, wv_h));
        // F is frozen at its start-of-task value for the whole task; the
        // counters only move in the post-task usage pass.
        head_freqs.push_back(pb.usage.frequencies(h));
      }
    }

    std::vector<ag::Var> sample_outputs;
    sample_outputs.reserve(static_cast<std::size_t>(batch_size));
    for (int s = 0; s < batch_size; ++s) {
      const Eigen::Index row0 = static_cast<Eigen::Index>(s) * n;
      ag::Var tokens_s = ag::slice_rows(ln1, row0, n);
      ag::Var qs = ag::slice_rows(qf, row0, n);
      ag::Var ks = ag::slice_rows(kf, row0, n);
      ag::Var vs = ag::slice_rows(vf, row0, n);
      std::vector<ag::Var> head_outputs;
      head_outputs.reserve(static_cast<std::size_t>(m));
      for (int h = 0; h < m; ++h) {
        ag::Var qh = ag::slice_cols(qs, static_cast<Eigen::Index>(h) * dk, dk);
        ag::Var kh = ag::slice_cols(ks, static_cast<Eigen::Index>(h) * dk, dk);
        ag::Var vh = ag::slice_cols(vs, static_cast<Eigen::Index>(h) * dk, dk);
        if (!prompted) {
          head_outputs.push_back(plain_head_attention(g, qh, kh, vh));
          continue;
        }
        HeadAttentionInputs in;
        in.tokens = tokens_s;
        in.q = qh;
        in.k = kh;
        in.v = vh;
        in.wq_head = wq_heads[static_cast<std::size_t>(h)];
        in.pk_proj = pk_projs[static_cast<std::size_t>(h)];
        in.pk_proj_t = pk_proj_ts[static_cast<std::size_t>(h)];
        in.pv_proj = pv_projs[static_cast<std::size_t>(h)];

        AttentionOptions ao;
        ao.mode = opt.attention;
        ao.select_k = select_k;
        ao.train = opt.train;
        ao.noise = opt.noise;
        ao.usage_frequencies = &head_freqs[static_cast<std::size_t>(h)];
        ao.rng = opt.rng;
        std::vector<int> forced_set;
        if (opt.forced != nullptr) {
          const std::size_t idx =
              (static_cast<std::size_t>(s) * static_cast<std::size_t>(prompted_layers) +
               static_cast<std::size_t>(l)) *
                  static_cast<std::size_t>(m) +
              static_cast<std::size_t>(h);
          forced_set = opt.forced->sets.at(idx);
          ao.forced_selection = &forced_set;
        }
        HeadAttentionResult res = smope_head_attention(g, in, ao);
        head_outputs.push_back(res.output);
        if (res.has_routing) {
          res.decision.layer = l;
          res.decision.head = h;
          result.routed.push_back(RoutedProxy{res.proxy, res.decision.selected});
          result.decisions.push_back(std::move(res.decision));
        }
      }
      sample_outputs.push_back(ag::stack_cols(head_outputs));
    }
    ag::Var attn = ag::matmul(ag::stack_rows(sample_outputs), g.param(bw.wo));
    x = ag::add(x, attn);

    ag::Var ln2 = ag::layer_norm_rows(x, g.param(bw.ln2_gain), g.param(bw.ln2_bias));
    ag::Var hidden =
        ag::gelu(ag::add_row_broadcast(ag::matmul(ln2, g.param(bw.mlp_w1)), g.param(bw.mlp_b1)));
    ag::Var mlp =
        ag::add_row_broadcast(ag::matmul(hidden, g.param(bw.mlp_w2)), g.param(bw.mlp_b2));
    x = ag::add(x, mlp);
  }

  std::vector<int> class_rows(static_cast<std::size_t>(batch_size));
  for (int s = 0; s < batch_size; ++s) {
    class_rows[static_cast<std::size_t>(s)] = s * n;
  }
  result.reps = ag::gather_rows(x, std::move(class_rows));
  return result;
}

ag::Var classify(ag::Graph& g, ClassifierHead& head, ag::Var reps) {
  if (head.classes() < 1) {
    throw ConfigError("classify: classifier head has no classes yet");
  }
  ag::Var logits = ag::matmul(reps, ag::transpose(g.param(head.weight)));
  return ag::add_row_broadcast(logits, ag::transpose(g.param(head.bias)));
}

Matrix forward_reps(LearnerState& state, std::span<const Sample> batch, const ForwardOptions& opt,
                    std::vector<RoutingDecision>* decisions) {
  ag::Graph g(/*grad_enabled=*/false);
  ForwardResult r = forward_batch(g, state, batch, opt);
  if (decisions != nullptr) {
    *decisions = std::move(r.decisions);
  }
  return r.reps.value();
}

std::vector<int> predict(LearnerState& state, std::span<const Sample> batch) {
  ForwardOptions opt;  // evaluation: no noise, proxy routing, configured K
  const Matrix reps = forward_reps(state, batch, opt);
  const Matrix logits = reps * state.head.weight.value.transpose() +
                        state.head.bias.value.transpose().replicate(reps.rows(), 1);
  std::vector<int> out(static_cast<std::size_t>(reps.rows()));
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    Eigen::Index best = 0;
    logits.row(r).maxCoeff(&best);
    out[static_cast<std::size_t>(r)] = static_cast<int>(best);
  }
  return out;
}

std::vector<DifferentiableParam*> prompt_parameters(LearnerState& state) {
  std::vector<DifferentiableParam*> out;
  for (PromptBlock& pb : state.prompts) {
    out.push_back(&pb.keys);
    out.push_back(&pb.values);
  }
  return out;
}

std::vector<DifferentiableParam*> trainable_parameters(LearnerState& state) {
  std::vector<DifferentiableParam*> out = prompt_parameters(state);
  if (state.head.classes() > 0) {
    out.push_back(&state.head.weight);
    out.push_back(&state.head.bias);
  }
  return out;
}

}  // namespace smope
