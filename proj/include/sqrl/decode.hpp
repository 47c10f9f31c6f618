#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <vector>

#include "sqrl/model.hpp"

namespace sqrl {

struct DecodeConfig {
    std::size_t max_len = 16;   // content-token budget, BOS excluded
    double temperature = 1.0;
    std::size_t beam_size = 3;
    std::uint64_t seed = 0;

    void validate() const {
        if (beam_size < 1) throw ConfigError("DecodeConfig: beam_size must be >= 1");
        if (!(temperature > 0.0)) throw ConfigError("DecodeConfig: temperature must be > 0");
        if (max_len < 1) throw ConfigError("DecodeConfig: max_len must be >= 1");
    }
};

// Next-token log-probs (temperature 1, PAD/BOS already masked out) for a
// prefix that starts with BOS. Decoders only see the model through this, so
// test doubles are a table lookup away.
using StepFn = std::function<std::vector<double>(const std::vector<int>&)>;

struct DecodeResult {
    TokenSeq ids;                    // BOS ... [EOS]
    std::vector<double> token_logps; // one per emitted token, temperature 1
    double log_prob = 0.0;
};

inline StepFn model_step(DecoderConfig cfg, ModelParams params, FeatureGrid feat) {
    return [cfg = std::move(cfg), params = std::move(params),
            feat = std::move(feat)](const std::vector<int>& prefix) {
        Tensor lp = policy_log_probs(nullptr, logits(nullptr, cfg, params, prefix, feat));
        std::size_t last = lp.shape[0] - 1, v = lp.shape[1];
        std::vector<double> row(v);
        for (std::size_t j = 0; j < v; ++j) row[j] = lp.at(last, j);
        return row;
    };
}

inline DecodeResult greedy_decode(const StepFn& step, const DecodeConfig& cfg) {
    cfg.validate();
    DecodeResult r;
    r.ids = {kBos};
    for (std::size_t t = 0; t < cfg.max_len; ++t) {
        std::vector<double> lp = step(r.ids);
        std::size_t best = 0;
        for (std::size_t j = 1; j < lp.size(); ++j)
            if (lp[j] > lp[best]) best = j;  // ties keep the lowest id
        r.ids.push_back(static_cast<int>(best));
        r.token_logps.push_back(lp[best]);
        r.log_prob += lp[best];
        if (static_cast<int>(best) == kEos) break;
    }
    return r;
}

inline DecodeResult sample_decode(const StepFn& step, const DecodeConfig& cfg, Rng& rng) {
    cfg.validate();
    DecodeResult r;
    r.ids = {kBos};
    for (std::size_t t = 0; t < cfg.max_len; ++t) {
        std::vector<double> lp = step(r.ids);
        double mx = *std::max_element(lp.begin(), lp.end());
        std::vector<double> w(lp.size());
        double total = 0.0;
        for (std::size_t j = 0; j < lp.size(); ++j) {
            w[j] = std::exp((lp[j] - mx) / cfg.temperature);
            total += w[j];
        }
        double u = rng.uniform() * total;
        double cum = 0.0;
        std::size_t pick = lp.size() - 1;
        for (std::size_t j = 0; j < lp.size(); ++j) {
            cum += w[j];
            if (u < cum) {
                pick = j;
                break;
            }
        }
        r.ids.push_back(static_cast<int>(pick));
        r.token_logps.push_back(lp[pick]);
        r.log_prob += lp[pick];
        if (static_cast<int>(pick) == kEos) break;
    }
    return r;
}

inline DecodeResult beam_decode(const StepFn& step, const DecodeConfig& cfg) {
    cfg.validate();
    struct Hyp {
        TokenSeq ids;
        std::vector<double> token_logps;
        double log_prob = 0.0;
    };
    auto better = [](const Hyp& a, const Hyp& b) {
        if (a.log_prob != b.log_prob) return a.log_prob > b.log_prob;
        return a.ids < b.ids;
    };

    std::vector<Hyp> live{Hyp{{kBos}, {}, 0.0}};
    std::vector<Hyp> done;
    for (std::size_t t = 0; t < cfg.max_len && !live.empty(); ++t) {
        std::vector<Hyp> cands;
        for (const Hyp& h : live) {
            std::vector<double> lp = step(h.ids);
            for (std::size_t j = kEos; j < lp.size(); ++j) {
                Hyp next = h;
                next.ids.push_back(static_cast<int>(j));
                next.token_logps.push_back(lp[j]);
                next.log_prob += lp[j];
                cands.push_back(std::move(next));
            }
        }
        std::sort(cands.begin(), cands.end(), better);
        if (cands.size() > cfg.beam_size) cands.resize(cfg.beam_size);
        live.clear();
        for (Hyp& h : cands) {
            if (h.ids.back() == kEos)
                done.push_back(std::move(h));
            else
                live.push_back(std::move(h));
        }
    }
    const Hyp* best = nullptr;
    for (const Hyp& h : done)
        if (!best || better(h, *best)) best = &h;
    if (!best)
        for (const Hyp& h : live)
            if (!best || better(h, *best)) best = &h;
    DecodeResult r;
    r.ids = best->ids;
    r.token_logps = best->token_logps;
    r.log_prob = best->log_prob;
    return r;
}

// Strips BOS/EOS/PAD bookkeeping, leaving just the caption tokens.
inline TokenSeq content_tokens(const TokenSeq& ids) {
    TokenSeq out;
    for (int id : ids) {
        if (id == kBos || id == kPad) continue;
        if (id == kEos) break;
        out.push_back(id);
    }
    return out;
}

}  // namespace sqrl
