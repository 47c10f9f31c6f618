#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <string>
#include <vector>

#include "sqrl/decode.hpp"
#include "sqrl/model.hpp"
#include "sqrl/optim.hpp"

namespace sqrl {

enum class RatioAgg { sequence, token_mean };

struct GrpoConfig {
    std::size_t group_size = 5;
    double clip_eps = 0.2;
    double kl_beta = 0.01;
    std::size_t update_steps = 20;
    std::size_t epochs = 5;
    double lr = 1e-5;
    RatioAgg ratio_agg = RatioAgg::token_mean;

    void validate() const {
        if (group_size < 2) throw ConfigError("GrpoConfig: group_size must be >= 2");
        if (!(clip_eps > 0.0 && clip_eps < 1.0))
            throw ConfigError("GrpoConfig: clip_eps must be in (0,1)");
        if (kl_beta < 0.0) throw ConfigError("GrpoConfig: kl_beta must be >= 0");
        if (update_steps < 1) throw ConfigError("GrpoConfig: update_steps must be >= 1");
        if (epochs < 1) throw ConfigError("GrpoConfig: epochs must be >= 1");
    }
};

struct ScstConfig {
    std::size_t epochs = 20;
    double lr = 1e-5;

    void validate() const {
        if (epochs < 1) throw ConfigError("ScstConfig: epochs must be >= 1");
    }
};

// Frozen weights for rollout/reference policies. requires_grad is cleared so a
// tape can never track them.
struct PolicySnapshot {
    ModelParams params;

    static PolicySnapshot of(const ModelParams& src) {
        PolicySnapshot s;
        for (const auto& [name, t] : src) {
            Tensor c = t.detached_clone();
            c.requires_grad = false;
            s.params.emplace(name, std::move(c));
        }
        return s;
    }
};

struct GroupMember {
    TokenSeq ids;                         // BOS ... (EOS)
    std::vector<double> old_token_logps;  // cached at sampling time
    double old_logp = 0.0;
    double reward = 0.0;
    double advantage = 0.0;
};

struct SampleGroup {
    int image = -1;
    const FeatureGrid* feat = nullptr;
    std::vector<GroupMember> members;
};

struct RlStats {
    double loss = 0.0;
    double mean_reward = 0.0;
    double mean_adv = 0.0;
    double mean_abs_adv = 0.0;
    double mean_kl = 0.0;
    double clip_frac = 0.0;
};

using RewardFn = std::function<double(int image, const TokenSeq& content)>;

struct RolloutItem {
    int image = -1;
    const FeatureGrid* feat = nullptr;
};

// ---------------------------------------------------------------------------
// GRPO pieces
// ---------------------------------------------------------------------------

inline std::vector<double> group_advantages(const std::vector<double>& rewards) {
    if (rewards.size() < 2) throw ConfigError("group_advantages: need a group of at least 2");
    double g = static_cast<double>(rewards.size());
    double mean = 0.0;
    for (double r : rewards) mean += r;
    mean /= g;
    double var = 0.0;
    for (double r : rewards) var += (r - mean) * (r - mean);
    double sd = std::sqrt(var / g);
    std::vector<double> adv(rewards.size(), 0.0);
    if (sd < 1e-8) return adv;
    for (std::size_t i = 0; i < rewards.size(); ++i) adv[i] = (rewards[i] - mean) / sd;
    return adv;
}

// k(rho) = rho - log rho - 1 with rho = exp(logp_ref - logp_theta); the
// exponent is capped at 50 and tiny negative rounding residue is floored away.
inline double kl_estimator(double logp_theta, double logp_ref) {
    double d = logp_ref - logp_theta;
    if (d > 50.0) d = 50.0;
    return std::max(0.0, std::exp(d) - d - 1.0);
}

namespace detail {

// Teacher-forced per-token log-probs of a recorded sequence under params.
inline Tensor picked_log_probs(Tape* tp, const DecoderConfig& cfg, const ModelParams& params,
                               const TokenSeq& ids, const FeatureGrid& feat) {
    if (ids.size() < 2 || ids[0] != kBos)
        throw ShapeError("picked_log_probs: malformed sequence");
    TokenSeq input(ids.begin(), ids.end() - 1);
    std::vector<int> picked(ids.begin() + 1, ids.end());
    Tensor lp = policy_log_probs(tp, logits(tp, cfg, params, input, feat));
    return pick(tp, lp, picked);
}

}  // namespace detail

struct GrpoLossOut {
    Tensor loss;
    double mean_kl = 0.0;
    double clip_frac = 0.0;
};

inline GrpoLossOut grpo_loss(Tape* tp, const DecoderConfig& dcfg, const ModelParams& theta,
                             const PolicySnapshot& ref, const SampleGroup& group,
                             const GrpoConfig& cfg) {
    cfg.validate();
    if (group.members.empty()) throw ConfigError("grpo_loss: empty group");
    if (!group.feat) throw ConfigError("grpo_loss: group has no features");

    Tensor acc = Tensor::scalar(0.0);
    bool have_acc = false;
    double kl_sum = 0.0;
    std::size_t clipped = 0;
    for (const GroupMember& m : group.members) {
        Tensor lp_theta = detail::picked_log_probs(tp, dcfg, theta, m.ids, *group.feat);
        if (lp_theta.size() != m.old_token_logps.size())
            throw ShapeError("grpo_loss: cached log-prob length mismatch");
        Tensor lp_old = Tensor::from({m.old_token_logps.size()}, m.old_token_logps);
        Tensor diff = sub(tp, lp_theta, lp_old);
        Tensor log_ratio = cfg.ratio_agg == RatioAgg::token_mean ? mean(tp, diff) : sum(tp, diff);
        Tensor rho = exp_op(tp, clamp(tp, log_ratio, -50.0, 50.0));

        Tensor unclipped = scalar_mul(tp, rho, m.advantage);
        Tensor clipped_t =
            scalar_mul(tp, clamp(tp, rho, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps), m.advantage);
        Tensor term = minimum(tp, unclipped, clipped_t);
        if (clipped_t.value() < unclipped.value()) clipped += 1;

        // reference log-probs are constants; gradient flows through lp_theta
        Tensor lp_ref = detail::picked_log_probs(nullptr, dcfg, ref.params, m.ids, *group.feat);
        Tensor d = clamp(tp, sub(tp, lp_ref, lp_theta), -50.0, 50.0);
        Tensor kl_vec = scalar_add(tp, sub(tp, exp_op(tp, d), d), -1.0);
        Tensor kl = mean(tp, kl_vec);
        kl_sum += std::max(0.0, kl.value());

        Tensor obj = sub(tp, term, scalar_mul(tp, kl, cfg.kl_beta));
        acc = have_acc ? add(tp, acc, obj) : obj;
        have_acc = true;
    }
    double g = static_cast<double>(group.members.size());
    GrpoLossOut out;
    out.loss = scalar_mul(tp, acc, -1.0 / g);
    out.mean_kl = kl_sum / g;
    out.clip_frac = static_cast<double>(clipped) / g;
    return out;
}

inline RlStats grpo_step(const std::vector<RolloutItem>& batch, const DecoderConfig& dcfg,
                         ModelParams& theta, const PolicySnapshot& pi_old,
                         const PolicySnapshot& pi_ref, AdamState& opt, const GrpoConfig& cfg,
                         const DecodeConfig& dc, const RewardFn& reward, double lr,
                         std::uint64_t seed, long long step_index,
                         std::vector<SampleGroup>* groups_out = nullptr) {
    cfg.validate();
    if (batch.empty()) throw ConfigError("grpo_step: empty batch");

    std::uint64_t step_seed = substream(seed, "grpo-step", static_cast<std::uint64_t>(step_index));
    std::vector<SampleGroup> groups;
    RlStats stats;
    std::size_t n_members = 0;
    for (const RolloutItem& item : batch) {
        SampleGroup group;
        group.image = item.image;
        group.feat = item.feat;
        StepFn rollout = model_step(dcfg, pi_old.params, *item.feat);
        std::vector<double> rewards;
        for (std::size_t g = 0; g < cfg.group_size; ++g) {
            Rng rng(substream(step_seed, "member", static_cast<std::uint64_t>(item.image), g));
            DecodeResult s = sample_decode(rollout, dc, rng);
            GroupMember m;
            m.ids = s.ids;
            m.old_token_logps = s.token_logps;
            m.old_logp = s.log_prob;
            try {
                m.reward = reward(item.image, content_tokens(s.ids));
            } catch (const std::exception& e) {
                throw DataError("grpo_step: reward failed for image " +
                                std::to_string(item.image) + ": " + e.what());
            }
            rewards.push_back(m.reward);
            group.members.push_back(std::move(m));
        }
        std::vector<double> adv = group_advantages(rewards);
        for (std::size_t g = 0; g < adv.size(); ++g) {
            group.members[g].advantage = adv[g];
            stats.mean_reward += rewards[g];
            stats.mean_adv += adv[g];
            stats.mean_abs_adv += std::abs(adv[g]);
            ++n_members;
        }
        groups.push_back(std::move(group));
    }

    Tape tape;
    Tensor total;
    bool have = false;
    for (const SampleGroup& group : groups) {
        GrpoLossOut out = grpo_loss(&tape, dcfg, theta, pi_ref, group, cfg);
        stats.mean_kl += out.mean_kl;
        stats.clip_frac += out.clip_frac;
        total = have ? add(&tape, total, out.loss) : out.loss;
        have = true;
    }
    double nb = static_cast<double>(groups.size());
    total = scalar_mul(&tape, total, 1.0 / nb);
    tape.backward(total);
    adam_step(theta, collect_grads(tape, theta), opt, lr);

    stats.loss = total.value();
    stats.mean_reward /= static_cast<double>(n_members);
    stats.mean_adv /= static_cast<double>(n_members);
    stats.mean_abs_adv /= static_cast<double>(n_members);
    stats.mean_kl /= nb;
    stats.clip_frac /= nb;
    if (groups_out) *groups_out = std::move(groups);
    return stats;
}

// ---------------------------------------------------------------------------
// SCST
// ---------------------------------------------------------------------------

// Surrogate whose gradient is -(r(sample) - r(greedy)) * grad log p(sample).
inline Tensor scst_loss(Tape* tp, const DecoderConfig& dcfg, const ModelParams& theta,
                        const TokenSeq& sample_ids, const FeatureGrid& feat, double advantage) {
    Tensor lp = detail::picked_log_probs(tp, dcfg, theta, sample_ids, feat);
    return scalar_mul(tp, sum(tp, lp), -advantage);
}

inline RlStats scst_step(const std::vector<RolloutItem>& batch, const DecoderConfig& dcfg,
                         ModelParams& theta, AdamState& opt, const DecodeConfig& dc,
                         const RewardFn& reward, double lr, std::uint64_t seed,
                         long long step_index) {
    if (batch.empty()) throw ConfigError("scst_step: empty batch");
    std::uint64_t step_seed = substream(seed, "scst-step", static_cast<std::uint64_t>(step_index));

    Tape tape;
    Tensor total;
    bool have = false;
    RlStats stats;
    std::size_t used = 0;
    for (const RolloutItem& item : batch) {
        StepFn step = model_step(dcfg, theta, *item.feat);
        DecodeResult greedy = greedy_decode(step, dc);
        Rng rng(substream(step_seed, "img", static_cast<std::uint64_t>(item.image)));
        DecodeResult sample = sample_decode(step, dc, rng);
        if (sample.ids.size() < 2) {
            std::fprintf(stderr, "scst_step: degenerate sample for image %d, skipped\n",
                         item.image);
            continue;
        }
        double r_sample, r_greedy;
        try {
            r_sample = reward(item.image, content_tokens(sample.ids));
            r_greedy = reward(item.image, content_tokens(greedy.ids));
        } catch (const std::exception& e) {
            throw DataError("scst_step: reward failed for image " + std::to_string(item.image) +
                            ": " + e.what());
        }
        double adv = r_sample - r_greedy;
        stats.mean_reward += r_sample;
        stats.mean_adv += adv;
        stats.mean_abs_adv += std::abs(adv);
        ++used;
        Tensor loss = scst_loss(&tape, dcfg, theta, sample.ids, *item.feat, adv);
        total = have ? add(&tape, total, loss) : loss;
        have = true;
    }
    if (!have) {
        std::fprintf(stderr, "scst_step: every sample degenerate, step skipped\n");
        return stats;
    }
    double n = static_cast<double>(used);
    total = scalar_mul(&tape, total, 1.0 / n);
    tape.backward(total);
    adam_step(theta, collect_grads(tape, theta), opt, lr);
    stats.loss = total.value();
    stats.mean_reward /= n;
    stats.mean_adv /= n;
    stats.mean_abs_adv /= n;
    return stats;
}

// ---------------------------------------------------------------------------
// cross-entropy step
// ---------------------------------------------------------------------------

struct CeItem {
    const FeatureGrid* feat = nullptr;
    const TokenSeq* seq = nullptr;
};

inline double ce_step(const std::vector<CeItem>& batch, const DecoderConfig& dcfg,
                      ModelParams& theta, AdamState& opt, double lr) {
    if (batch.empty()) throw ConfigError("ce_step: empty batch");
    Tape tape;
    Tensor weighted;
    bool have = false;
    double total_count = 0.0;
    for (const CeItem& item : batch) {
        std::size_t counted = 0;
        Tensor li = ce_loss_one(&tape, dcfg, theta, *item.seq, *item.feat, &counted);
        Tensor wi = scalar_mul(&tape, li, static_cast<double>(counted));
        total_count += static_cast<double>(counted);
        weighted = have ? add(&tape, weighted, wi) : wi;
        have = true;
    }
    Tensor loss = scalar_mul(&tape, weighted, 1.0 / total_count);
    tape.backward(loss);
    adam_step(theta, collect_grads(tape, theta), opt, lr);
    return loss.value();
}

}  // namespace sqrl
