#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "sqrl/optim.hpp"
#include "sqrl/tensor.hpp"

namespace sqrl {

inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr double kNegLarge = -1e9;

struct DecoderConfig {
    std::size_t vocab_size = 0;
    std::size_t d_model = 512;
    std::size_t n_heads = 8;
    std::size_t n_layers = 1;
    std::size_t ffn_dim = 2048;
    std::size_t max_len = 20;
    std::size_t feat_dim = 0;

    void validate() const {
        if (vocab_size < 3) throw ConfigError("DecoderConfig: vocab_size must cover PAD/BOS/EOS");
        if (d_model == 0 || n_heads == 0 || n_layers == 0 || ffn_dim == 0 || feat_dim == 0)
            throw ConfigError("DecoderConfig: all dims must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("DecoderConfig: d_model " + std::to_string(d_model) +
                              " not divisible by n_heads " + std::to_string(n_heads));
        if (max_len < 2) throw ConfigError("DecoderConfig: max_len must be at least 2");
    }
    std::size_t head_dim() const { return d_model / n_heads; }
};

struct FeatureGrid {
    std::size_t n_regions = 0;
    std::size_t feat_dim = 0;
    Tensor values;  // n_regions x feat_dim

    static FeatureGrid of(Tensor t) {
        if (t.rank() != 2) throw ShapeError("FeatureGrid: need rank 2, got " + shape_str(t.shape));
        FeatureGrid f;
        f.n_regions = t.shape[0];
        f.feat_dim = t.shape[1];
        for (std::size_t i = 0; i < t.size(); ++i)
            if (!std::isfinite((*t.data)[i])) throw DataError("FeatureGrid: non-finite value");
        f.values = std::move(t);
        return f;
    }
};

// Additive causal mask: 0 where a position may attend, -1e9 strictly above the
// diagonal.
struct CausalMask {
    std::size_t size = 0;
    Tensor m;

    static CausalMask build(std::size_t T) {
        CausalMask cm;
        cm.size = T;
        cm.m = Tensor::zeros({T, T});
        for (std::size_t i = 0; i < T; ++i)
            for (std::size_t j = i + 1; j < T; ++j) cm.m.at(i, j) = kNegLarge;
        return cm;
    }
};

using TokenSeq = std::vector<int>;

// Optional capture of attention weight matrices, one per head in layer-major
// order; handy for sanity checks.
struct AttnTrace {
    std::vector<Tensor> self_attn;
    std::vector<Tensor> cross_attn;
};

namespace detail {

inline std::string pname(std::size_t layer, const char* block, const char* leaf) {
    return "l" + std::to_string(layer) + "." + block + "." + leaf;
}

inline std::string pname_head(std::size_t layer, const char* block, const char* proj,
                              std::size_t head) {
    return pname(layer, block, proj) + ".h" + std::to_string(head);
}

inline const Tensor& param(const ModelParams& p, const std::string& name) {
    auto it = p.find(name);
    if (it == p.end()) throw ConfigError("missing parameter: " + name);
    return it->second;
}

}  // namespace detail

inline ModelParams init_params(const DecoderConfig& cfg, std::uint64_t seed) {
    cfg.validate();
    ModelParams p;
    auto weight = [&](const std::string& name, std::size_t r, std::size_t c) {
        Tensor t = Tensor::zeros({r, c}, true);
        Rng rng(substream(seed, name.c_str()));
        for (std::size_t i = 0; i < t.size(); ++i) (*t.data)[i] = rng.normal() * 0.02;
        p.emplace(name, std::move(t));
    };
    auto vec = [&](const std::string& name, std::size_t n, double fill) {
        Tensor t = Tensor::zeros({n}, true);
        for (std::size_t i = 0; i < n; ++i) (*t.data)[i] = fill;
        p.emplace(name, std::move(t));
    };
    std::size_t d = cfg.d_model, dk = cfg.head_dim();
    weight("embed.tok", cfg.vocab_size, d);
    weight("embed.pos", cfg.max_len, d);
    vec("embed.ln.g", d, 1.0);
    vec("embed.ln.b", d, 0.0);
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        for (std::size_t h = 0; h < cfg.n_heads; ++h) {
            weight(detail::pname_head(l, "self", "wq", h), d, dk);
            weight(detail::pname_head(l, "self", "wk", h), d, dk);
            weight(detail::pname_head(l, "self", "wv", h), d, dk);
            weight(detail::pname_head(l, "cross", "wq", h), d, dk);
            weight(detail::pname_head(l, "cross", "wk", h), cfg.feat_dim, dk);
            weight(detail::pname_head(l, "cross", "wv", h), cfg.feat_dim, dk);
        }
        weight(detail::pname(l, "self", "wo"), d, d);
        vec(detail::pname(l, "self", "ln.g"), d, 1.0);
        vec(detail::pname(l, "self", "ln.b"), d, 0.0);
        weight(detail::pname(l, "cross", "wo"), d, d);
        vec(detail::pname(l, "cross", "ln.g"), d, 1.0);
        vec(detail::pname(l, "cross", "ln.b"), d, 0.0);
        weight(detail::pname(l, "ffn", "w1"), d, cfg.ffn_dim);
        vec(detail::pname(l, "ffn", "b1"), cfg.ffn_dim, 0.0);
        weight(detail::pname(l, "ffn", "w2"), cfg.ffn_dim, d);
        vec(detail::pname(l, "ffn", "b2"), d, 0.0);
        vec(detail::pname(l, "ffn", "ln.g"), d, 1.0);
        vec(detail::pname(l, "ffn", "ln.b"), d, 0.0);
    }
    weight("out.w", d, cfg.vocab_size);
    vec("out.b", cfg.vocab_size, 0.0);
    return p;
}

// Raises ConfigError when params don't line up with cfg (wrong checkpoint for
// this model shape).
inline void validate_params(const DecoderConfig& cfg, const ModelParams& params) {
    ModelParams expect = init_params(cfg, 0);
    if (params.size() != expect.size())
        throw ConfigError("checkpoint/config mismatch: " + std::to_string(params.size()) +
                          " params, expected " + std::to_string(expect.size()));
    for (const auto& [name, t] : expect) {
        auto it = params.find(name);
        if (it == params.end()) throw ConfigError("checkpoint/config mismatch: missing " + name);
        if (it->second.shape != t.shape)
            throw ConfigError("checkpoint/config mismatch: " + name + " is " +
                              shape_str(it->second.shape) + ", expected " + shape_str(t.shape));
    }
}

inline Tensor embed(Tape* tp, const DecoderConfig& cfg, const ModelParams& p,
                    const TokenSeq& tokens) {
    if (tokens.empty()) throw ShapeError("embed: empty token sequence");
    if (tokens.size() > cfg.max_len)
        throw ShapeError("embed: sequence length " + std::to_string(tokens.size()) +
                         " exceeds max_len " + std::to_string(cfg.max_len));
    for (int id : tokens)
        if (id < 0 || static_cast<std::size_t>(id) >= cfg.vocab_size)
            throw ShapeError("embed: token id " + std::to_string(id) + " out of range");
    std::vector<int> pos(tokens.size());
    for (std::size_t i = 0; i < pos.size(); ++i) pos[i] = static_cast<int>(i);
    Tensor ew = embedding_gather(tp, detail::param(p, "embed.tok"), tokens);
    Tensor ep = embedding_gather(tp, detail::param(p, "embed.pos"), pos);
    return layer_norm(tp, add(tp, ew, ep), detail::param(p, "embed.ln.g"),
                      detail::param(p, "embed.ln.b"));
}

namespace detail {

// Shared multi-head attention: queries from q_in, keys/values from kv_in,
// optional additive mask on the score matrix.
inline Tensor mha(Tape* tp, const DecoderConfig& cfg, const ModelParams& p, std::size_t layer,
                  const char* block, const Tensor& q_in, const Tensor& kv_in, const Tensor* mask,
                  std::vector<Tensor>* attn_out) {
    double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(cfg.head_dim()));
    std::vector<Tensor> heads;
    heads.reserve(cfg.n_heads);
    for (std::size_t h = 0; h < cfg.n_heads; ++h) {
        Tensor q = matmul(tp, q_in, param(p, pname_head(layer, block, "wq", h)));
        Tensor k = matmul(tp, kv_in, param(p, pname_head(layer, block, "wk", h)));
        Tensor v = matmul(tp, kv_in, param(p, pname_head(layer, block, "wv", h)));
        Tensor scores = scalar_mul(tp, matmul(tp, q, transpose(tp, k)), inv_sqrt_dk);
        if (mask) scores = add(tp, scores, *mask);
        Tensor a = softmax_lastdim(tp, scores);
        if (attn_out) attn_out->push_back(a);
        heads.push_back(matmul(tp, a, v));
    }
    Tensor cat = cfg.n_heads == 1 ? heads[0] : concat_lastdim(tp, heads);
    return matmul(tp, cat, param(p, pname(layer, block, "wo")));
}

}  // namespace detail

inline Tensor masked_self_attention(Tape* tp, const DecoderConfig& cfg, const ModelParams& p,
                                    std::size_t layer, const Tensor& e, const CausalMask& mask,
                                    std::vector<Tensor>* attn_out = nullptr) {
    if (e.rank() != 2 || e.shape[1] != cfg.d_model)
        throw ShapeError("masked_self_attention: bad input " + shape_str(e.shape));
    if (mask.size != e.shape[0])
        throw ShapeError("masked_self_attention: mask size " + std::to_string(mask.size) +
                         " vs T " + std::to_string(e.shape[0]));
    Tensor a = detail::mha(tp, cfg, p, layer, "self", e, e, &mask.m, attn_out);
    return layer_norm(tp, add(tp, e, a), detail::param(p, detail::pname(layer, "self", "ln.g")),
                      detail::param(p, detail::pname(layer, "self", "ln.b")));
}

inline Tensor cross_attend_ffn(Tape* tp, const DecoderConfig& cfg, const ModelParams& p,
                               std::size_t layer, const Tensor& he, const FeatureGrid& feat,
                               std::vector<Tensor>* attn_out = nullptr) {
    if (feat.feat_dim != cfg.feat_dim)
        throw ShapeError("cross_attend_ffn: feat_dim " + std::to_string(feat.feat_dim) +
                         " vs config " + std::to_string(cfg.feat_dim));
    Tensor c = detail::mha(tp, cfg, p, layer, "cross", he, feat.values, nullptr, attn_out);
    Tensor hp = layer_norm(tp, add(tp, he, c),
                           detail::param(p, detail::pname(layer, "cross", "ln.g")),
                           detail::param(p, detail::pname(layer, "cross", "ln.b")));
    Tensor f1 = relu(tp, add(tp, matmul(tp, hp, detail::param(p, detail::pname(layer, "ffn", "w1"))),
                             detail::param(p, detail::pname(layer, "ffn", "b1"))));
    Tensor f2 = add(tp, matmul(tp, f1, detail::param(p, detail::pname(layer, "ffn", "w2"))),
                    detail::param(p, detail::pname(layer, "ffn", "b2")));
    return layer_norm(tp, add(tp, hp, f2), detail::param(p, detail::pname(layer, "ffn", "ln.g")),
                      detail::param(p, detail::pname(layer, "ffn", "ln.b")));
}

// Next-token logits for every prefix of `tokens`: row t conditions on
// tokens[0..t] and the image.
inline Tensor logits(Tape* tp, const DecoderConfig& cfg, const ModelParams& p,
                     const TokenSeq& tokens, const FeatureGrid& feat,
                     AttnTrace* trace = nullptr) {
    Tensor h = embed(tp, cfg, p, tokens);
    CausalMask mask = CausalMask::build(tokens.size());
    for (std::size_t l = 0; l < cfg.n_layers; ++l) {
        Tensor he = masked_self_attention(tp, cfg, p, l, h, mask,
                                          trace ? &trace->self_attn : nullptr);
        h = cross_attend_ffn(tp, cfg, p, l, he, feat, trace ? &trace->cross_attn : nullptr);
    }
    return add(tp, matmul(tp, h, detail::param(p, "out.w")), detail::param(p, "out.b"));
}

// The sampling/search distribution never emits PAD or BOS; both are masked out
// before the log-softmax. Cross-entropy training, by contrast, normalizes over
// the full vocabulary.
inline Tensor policy_log_probs(Tape* tp, const Tensor& lg) {
    if (lg.rank() != 2 || lg.shape[1] < 3)
        throw ShapeError("policy_log_probs: bad logits " + shape_str(lg.shape));
    Tensor ind = Tensor::zeros(lg.shape);
    for (std::size_t i = 0; i < lg.shape[0]; ++i) {
        ind.at(i, kPad) = 1.0;
        ind.at(i, kBos) = 1.0;
    }
    return log_softmax_lastdim(tp, masked_fill(tp, lg, ind, kNegLarge));
}

// Token-level cross-entropy for one caption. `seq` must start with BOS;
// predictions are scored against the next token, PAD targets are skipped.
inline Tensor ce_loss_one(Tape* tp, const DecoderConfig& cfg, const ModelParams& p,
                          const TokenSeq& seq, const FeatureGrid& feat,
                          std::size_t* counted_out = nullptr) {
    if (seq.size() < 2) throw ShapeError("ce_loss_one: need at least BOS plus one target");
    if (seq[0] != kBos) throw ShapeError("ce_loss_one: sequence must start with BOS");
    TokenSeq input(seq.begin(), seq.end() - 1);
    std::vector<int> targets(seq.begin() + 1, seq.end());
    std::vector<char> counted(targets.size());
    std::size_t n = 0;
    for (std::size_t i = 0; i < targets.size(); ++i) {
        counted[i] = targets[i] != kPad;
        n += counted[i];
    }
    if (counted_out) *counted_out = n;
    Tensor lg = logits(tp, cfg, p, input, feat);
    return cross_entropy(tp, lg, targets, counted);
}

}  // namespace sqrl
