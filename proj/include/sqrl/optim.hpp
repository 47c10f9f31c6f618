#pragma once

#include <cmath>
#include <cstdio>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "sqrl/tensor.hpp"

namespace sqrl {

// Named parameter set. std::map keeps iteration order deterministic, which
// matters for reproducible update order and checkpoint layout.
using ModelParams = std::map<std::string, Tensor>;
using GradMap = std::map<std::string, std::vector<double>>;

inline ModelParams clone_params(const ModelParams& params) {
    ModelParams out;
    for (const auto& [name, t] : params) {
        Tensor c = t.detached_clone();
        c.requires_grad = true;
        out.emplace(name, std::move(c));
    }
    return out;
}

inline std::size_t param_count(const ModelParams& params) {
    std::size_t n = 0;
    for (const auto& [name, t] : params) n += t.size();
    return n;
}

inline GradMap collect_grads(const Tape& tape, const ModelParams& params) {
    GradMap g;
    for (const auto& [name, t] : params) g.emplace(name, tape.grad_of(t));
    return g;
}

inline void accumulate(GradMap& into, const GradMap& g, double scale = 1.0) {
    for (const auto& [name, vec] : g) {
        auto it = into.find(name);
        if (it == into.end()) {
            auto& dst = into[name];
            dst.resize(vec.size(), 0.0);
            for (std::size_t i = 0; i < vec.size(); ++i) dst[i] = vec[i] * scale;
        } else {
            if (it->second.size() != vec.size())
                throw ShapeError("accumulate: size mismatch for " + name);
            for (std::size_t i = 0; i < vec.size(); ++i) it->second[i] += vec[i] * scale;
        }
    }
}

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    long long step = 0;
    std::map<std::string, std::vector<double>> m, v;
    std::set<std::string> warned_missing;
};

inline void adam_step(ModelParams& params, const GradMap& grads, AdamState& st, double lr) {
    st.step += 1;
    double bc1 = 1.0 - std::pow(st.beta1, static_cast<double>(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, static_cast<double>(st.step));
    static const std::vector<double> kNoGrad;
    for (auto& [name, p] : params) {
        const std::vector<double>* g = &kNoGrad;
        auto git = grads.find(name);
        if (git != grads.end()) {
            if (git->second.size() != p.size())
                throw ShapeError("adam_step: grad size mismatch for " + name);
            g = &git->second;
        } else if (st.warned_missing.insert(name).second) {
            std::fprintf(stderr, "adam_step: no gradient for %s, treating as zero\n", name.c_str());
        }
        auto& m = st.m[name];
        auto& v = st.v[name];
        if (m.empty()) m.assign(p.size(), 0.0);
        if (v.empty()) v.assign(p.size(), 0.0);
        if (m.size() != p.size() || v.size() != p.size())
            throw ShapeError("adam_step: moment size mismatch for " + name);
        for (std::size_t i = 0; i < p.size(); ++i) {
            double gi = g->empty() ? 0.0 : (*g)[i];
            m[i] = st.beta1 * m[i] + (1.0 - st.beta1) * gi;
            v[i] = st.beta2 * v[i] + (1.0 - st.beta2) * gi * gi;
            double mhat = m[i] / bc1;
            double vhat = v[i] / bc2;
            (*p.data)[i] -= lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

// Linear warmup to base_lr over warmup_frac of the run, then cosine decay to 0.
inline double lr_schedule(long long step, long long total_steps, double base_lr,
                          double warmup_frac = 0.1) {
    if (total_steps <= 0) throw ConfigError("lr_schedule: total_steps must be positive");
    if (step < 0 || step > total_steps)
        throw ConfigError("lr_schedule: step " + std::to_string(step) + " outside [0, " +
                          std::to_string(total_steps) + "]");
    double w = static_cast<double>(total_steps) * warmup_frac;
    double s = static_cast<double>(step);
    if (s < w) return base_lr * s / w;
    double span = static_cast<double>(total_steps) - w;
    if (span <= 0.0) return 0.0;
    double t = (s - w) / span;
    return base_lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * t));
}

}  // namespace sqrl
