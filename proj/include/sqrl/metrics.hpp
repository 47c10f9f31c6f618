#pragma once

#include <array>
#include <cmath>
#include <cstdio>
#include <map>
#include <string>
#include <vector>

#include "sqrl/common.hpp"

namespace sqrl {

using Sentence = std::vector<std::string>;
using RefSet = std::vector<Sentence>;

// lowercase, punctuation to spaces, split on whitespace; bytes >= 0x80 are
// kept so multibyte text survives as-is
inline Sentence tokenize(const std::string& text) {
    Sentence out;
    std::string cur;
    for (unsigned char c : text) {
        char keep = 0;
        if (c >= 'a' && c <= 'z') keep = static_cast<char>(c);
        else if (c >= 'A' && c <= 'Z') keep = static_cast<char>(c - 'A' + 'a');
        else if (c >= '0' && c <= '9') keep = static_cast<char>(c);
        else if (c >= 0x80) keep = static_cast<char>(c);
        if (keep) {
            cur.push_back(keep);
        } else if (!cur.empty()) {
            out.push_back(std::move(cur));
            cur.clear();
        }
    }
    if (!cur.empty()) out.push_back(std::move(cur));
    return out;
}

using NGramMultiset = std::map<std::string, int>;

inline NGramMultiset ngram_counts(const Sentence& s, int n) {
    NGramMultiset out;
    if (n < 1 || s.size() < static_cast<std::size_t>(n)) return out;
    for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= s.size(); ++i) {
        std::string key = s[i];
        for (int k = 1; k < n; ++k) {
            key.push_back('\x1f');
            key += s[i + static_cast<std::size_t>(k)];
        }
        out[key] += 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// BLEU: corpus-level clipped precision, no smoothing, brevity penalty against
// the closest reference length.
// ---------------------------------------------------------------------------

inline std::array<double, 4> bleu_corpus(const std::vector<Sentence>& cands,
                                         const std::vector<RefSet>& refs) {
    if (cands.size() != refs.size())
        throw DataError("bleu: " + std::to_string(cands.size()) + " candidates vs " +
                        std::to_string(refs.size()) + " reference sets");
    std::array<double, 4> bleu{0.0, 0.0, 0.0, 0.0};
    if (cands.empty()) {
        std::fprintf(stderr, "bleu: empty candidate corpus, scoring 0\n");
        return bleu;
    }
    std::array<double, 4> matched{}, total{};
    double cand_len = 0.0, ref_len = 0.0;
    for (std::size_t img = 0; img < cands.size(); ++img) {
        const Sentence& c = cands[img];
        if (refs[img].empty()) throw DataError("bleu: image without references");
        cand_len += static_cast<double>(c.size());
        std::size_t closest = refs[img][0].size();
        for (const Sentence& r : refs[img]) {
            auto dist = [&](std::size_t len) {
                return std::llabs(static_cast<long long>(len) - static_cast<long long>(c.size()));
            };
            if (dist(r.size()) < dist(closest) || (dist(r.size()) == dist(closest) && r.size() < closest))
                closest = r.size();
        }
        ref_len += static_cast<double>(closest);
        for (int n = 1; n <= 4; ++n) {
            NGramMultiset cg = ngram_counts(c, n);
            NGramMultiset clipcap;
            for (const Sentence& r : refs[img])
                for (const auto& [g, cnt] : ngram_counts(r, n)) {
                    auto it = clipcap.find(g);
                    if (it == clipcap.end()) clipcap[g] = cnt;
                    else it->second = std::max(it->second, cnt);
                }
            for (const auto& [g, cnt] : cg) {
                total[static_cast<std::size_t>(n - 1)] += cnt;
                auto it = clipcap.find(g);
                if (it != clipcap.end())
                    matched[static_cast<std::size_t>(n - 1)] += std::min(cnt, it->second);
            }
        }
    }
    if (cand_len == 0.0) {
        std::fprintf(stderr, "bleu: all candidates empty, scoring 0\n");
        return bleu;
    }
    double bp = cand_len >= ref_len ? 1.0 : std::exp(1.0 - ref_len / cand_len);
    for (int n = 1; n <= 4; ++n) {
        double log_sum = 0.0;
        bool zero = false;
        for (int k = 1; k <= n; ++k) {
            double t = total[static_cast<std::size_t>(k - 1)];
            double m = matched[static_cast<std::size_t>(k - 1)];
            if (t == 0.0 || m == 0.0) {
                zero = true;
                break;
            }
            log_sum += std::log(m / t) / static_cast<double>(n);
        }
        bleu[static_cast<std::size_t>(n - 1)] = zero ? 0.0 : bp * std::exp(log_sum);
    }
    return bleu;
}

// ---------------------------------------------------------------------------
// ROUGE-L: LCS F-measure with beta^2 = 1.2; best reference counts.
// ---------------------------------------------------------------------------

inline std::size_t lcs_length(const Sentence& a, const Sentence& b) {
    if (a.empty() || b.empty()) return 0;
    std::vector<std::size_t> prev(b.size() + 1, 0), cur(b.size() + 1, 0);
    for (std::size_t i = 1; i <= a.size(); ++i) {
        for (std::size_t j = 1; j <= b.size(); ++j) {
            if (a[i - 1] == b[j - 1]) cur[j] = prev[j - 1] + 1;
            else cur[j] = std::max(prev[j], cur[j - 1]);
        }
        std::swap(prev, cur);
    }
    return prev[b.size()];
}

inline constexpr double kRougeBetaSq = 1.2;

inline double rouge_l_one(const Sentence& cand, const RefSet& refs) {
    if (refs.empty()) throw DataError("rouge_l: no references");
    if (cand.empty()) return 0.0;
    double best = 0.0;
    for (const Sentence& r : refs) {
        if (r.empty()) continue;
        double lcs = static_cast<double>(lcs_length(cand, r));
        if (lcs == 0.0) continue;
        double p = lcs / static_cast<double>(cand.size());
        double rec = lcs / static_cast<double>(r.size());
        double f = (1.0 + kRougeBetaSq) * p * rec / (rec + kRougeBetaSq * p);
        best = std::max(best, f);
    }
    return best;
}

// ROUGE-N recall against the best reference; auxiliary metric.
inline double rouge_n_one(const Sentence& cand, const RefSet& refs, int n) {
    if (refs.empty()) throw DataError("rouge_n: no references");
    NGramMultiset cg = ngram_counts(cand, n);
    double best = 0.0;
    for (const Sentence& r : refs) {
        NGramMultiset rg = ngram_counts(r, n);
        double denom = 0.0, match = 0.0;
        for (const auto& [g, cnt] : rg) {
            denom += cnt;
            auto it = cg.find(g);
            if (it != cg.end()) match += std::min(cnt, it->second);
        }
        if (denom > 0.0) best = std::max(best, match / denom);
    }
    return best;
}

// ---------------------------------------------------------------------------
// METEOR-lite: exact-match greedy alignment (each candidate token takes the
// earliest unused reference occurrence), F = 10PR/(R+9P), chunk penalty
// 0.5*(chunks/matches)^3.
// ---------------------------------------------------------------------------

inline double meteor_lite_one(const Sentence& cand, const RefSet& refs) {
    if (refs.empty()) throw DataError("meteor: no references");
    double best = 0.0;
    for (const Sentence& r : refs) {
        if (cand.empty() || r.empty()) continue;
        std::map<std::string, std::vector<std::size_t>> where;
        for (std::size_t j = 0; j < r.size(); ++j) where[r[j]].push_back(j);
        std::map<std::string, std::size_t> next_use;
        std::vector<std::pair<std::size_t, std::size_t>> pairs;  // (cand pos, ref pos)
        for (std::size_t i = 0; i < cand.size(); ++i) {
            auto it = where.find(cand[i]);
            if (it == where.end()) continue;
            std::size_t& k = next_use[cand[i]];
            if (k < it->second.size()) {
                pairs.emplace_back(i, it->second[k]);
                ++k;
            }
        }
        double m = static_cast<double>(pairs.size());
        if (m == 0.0) continue;
        double p = m / static_cast<double>(cand.size());
        double rec = m / static_cast<double>(r.size());
        double f = 10.0 * p * rec / (rec + 9.0 * p);
        double chunks = 1.0;
        for (std::size_t i = 1; i < pairs.size(); ++i)
            if (pairs[i].first != pairs[i - 1].first + 1 || pairs[i].second != pairs[i - 1].second + 1)
                chunks += 1.0;
        double penalty = 0.5 * std::pow(chunks / m, 3.0);
        best = std::max(best, f * (1.0 - penalty));
    }
    return best;
}

// ---------------------------------------------------------------------------
// CIDEr: tf-idf cosine per n in 1..4 averaged over references, x10.
// ---------------------------------------------------------------------------

struct CorpusStats {
    std::size_t images = 0;
    std::array<NGramMultiset, 4> df;  // n-gram -> number of reference sets containing it
};

inline CorpusStats build_corpus_stats(const std::vector<RefSet>& refs) {
    if (refs.empty()) throw DataError("corpus stats: empty corpus");
    CorpusStats st;
    st.images = refs.size();
    for (const RefSet& rs : refs) {
        for (int n = 1; n <= 4; ++n) {
            NGramMultiset seen;
            for (const Sentence& r : rs)
                for (const auto& [g, cnt] : ngram_counts(r, n)) seen[g] = 1;
            for (const auto& [g, one] : seen) st.df[static_cast<std::size_t>(n - 1)][g] += 1;
        }
    }
    return st;
}

namespace detail {

struct TfIdfVec {
    std::map<std::string, double> w;
    double norm = 0.0;
    double len = 0.0;  // token count, for the cider_d length penalty
};

inline TfIdfVec tfidf_vec(const Sentence& s, int n, const CorpusStats& st) {
    TfIdfVec v;
    v.len = static_cast<double>(s.size());
    NGramMultiset counts = ngram_counts(s, n);
    double total = 0.0;
    for (const auto& [g, cnt] : counts) total += cnt;
    if (total == 0.0) return v;
    double m = static_cast<double>(st.images);
    double nsq = 0.0;
    for (const auto& [g, cnt] : counts) {
        auto it = st.df[static_cast<std::size_t>(n - 1)].find(g);
        double df = it == st.df[static_cast<std::size_t>(n - 1)].end()
                        ? 1.0
                        : std::max(1.0, static_cast<double>(it->second));
        double wt = (static_cast<double>(cnt) / total) * std::log(m / df);
        v.w[g] = wt;
        nsq += wt * wt;
    }
    v.norm = std::sqrt(nsq);
    return v;
}

}  // namespace detail

inline double cider_one(const Sentence& cand, const RefSet& refs, const CorpusStats& st,
                        bool cider_d = false) {
    if (refs.empty()) throw DataError("cider: no references");
    const double sigma = 6.0;
    double sum_n = 0.0;
    for (int n = 1; n <= 4; ++n) {
        detail::TfIdfVec g = detail::tfidf_vec(cand, n, st);
        double acc = 0.0;
        for (const Sentence& ref : refs) {
            detail::TfIdfVec r = detail::tfidf_vec(ref, n, st);
            if (g.norm == 0.0 || r.norm == 0.0) continue;
            double dot = 0.0;
            for (const auto& [key, gw] : g.w) {
                auto it = r.w.find(key);
                if (it == r.w.end()) continue;
                double gval = cider_d ? std::min(gw, it->second) : gw;
                dot += gval * it->second;
            }
            double sim = dot / (g.norm * r.norm);
            if (cider_d) {
                double delta = g.len - r.len;
                sim *= std::exp(-delta * delta / (2.0 * sigma * sigma));
            }
            acc += sim;
        }
        sum_n += acc / static_cast<double>(refs.size());
    }
    return 10.0 * sum_n / 4.0;
}

// ---------------------------------------------------------------------------
// corpus scoring
// ---------------------------------------------------------------------------

struct MetricReport {
    double bleu1 = 0.0, bleu2 = 0.0, bleu3 = 0.0, bleu4 = 0.0;
    double meteor = 0.0, rouge_l = 0.0, cider = 0.0;
};

struct CorpusScores {
    std::array<double, 4> bleu{0.0, 0.0, 0.0, 0.0};
    double meteor = 0.0, rouge_l = 0.0, cider = 0.0;  // raw scales
    std::vector<double> per_image_cider, per_image_rouge, per_image_meteor;

    MetricReport report() const {
        MetricReport r;
        r.bleu1 = 100.0 * bleu[0];
        r.bleu2 = 100.0 * bleu[1];
        r.bleu3 = 100.0 * bleu[2];
        r.bleu4 = 100.0 * bleu[3];
        r.meteor = 100.0 * meteor;
        r.rouge_l = 100.0 * rouge_l;
        r.cider = 100.0 * cider;
        return r;
    }
};

inline CorpusScores score_corpus(const std::vector<Sentence>& cands,
                                 const std::vector<RefSet>& refs, bool cider_d = false) {
    if (cands.size() != refs.size())
        throw DataError("score_corpus: candidate/reference count mismatch");
    if (cands.empty()) throw DataError("score_corpus: empty corpus");
    CorpusScores out;
    out.bleu = bleu_corpus(cands, refs);
    CorpusStats st = build_corpus_stats(refs);
    double n = static_cast<double>(cands.size());
    for (std::size_t i = 0; i < cands.size(); ++i) {
        double c = cider_one(cands[i], refs[i], st, cider_d);
        double r = rouge_l_one(cands[i], refs[i]);
        double m = meteor_lite_one(cands[i], refs[i]);
        out.per_image_cider.push_back(c);
        out.per_image_rouge.push_back(r);
        out.per_image_meteor.push_back(m);
        out.cider += c / n;
        out.rouge_l += r / n;
        out.meteor += m / n;
    }
    return out;
}

}  // namespace sqrl
