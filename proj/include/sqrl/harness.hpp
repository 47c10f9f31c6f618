#pragma once

#include <chrono>
#include <cinttypes>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sqrl/checkpoint.hpp"
#include "sqrl/data.hpp"
#include "sqrl/decode.hpp"
#include "sqrl/metrics.hpp"
#include "sqrl/model.hpp"
#include "sqrl/optim.hpp"
#include "sqrl/rl.hpp"

namespace sqrl {

// ---------------------------------------------------------------------------
// run configuration: flat key = value text, CLI flags override file entries
// ---------------------------------------------------------------------------

struct RunConfig {
    std::string stage;  // ce | scst | grpo | eval | score | gen-data
    std::string data_dir;
    std::string out_dir;
    std::string checkpoint_in;
    std::string checkpoint_out;
    std::uint64_t seed = 0;

    // desk-scale decoder profile; vocab_size and feat_dim resolve from data
    std::size_t d_model = 32;
    std::size_t n_heads = 2;
    std::size_t n_layers = 1;
    std::size_t ffn_dim = 64;
    std::size_t max_len = 12;

    std::size_t ce_epochs = 10;
    double ce_lr = 1e-3;
    std::size_t batch_size = 32;
    double warmup_frac = 0.1;

    GrpoConfig grpo;
    ScstConfig scst;
    std::size_t rl_batch = 8;
    std::size_t val_every = 100;  // grpo validation cadence in optimizer steps

    std::size_t beam_size = 3;
    double temperature = 1.0;
    std::string eval_split = "test";

    std::size_t gen_train = 2000;
    std::size_t gen_val = 250;
    std::size_t gen_test = 250;
    int gen_grid = 3;
    double gen_noise = 0.05;

    bool cider_d = false;  // score stage only

    DecoderConfig decoder(std::size_t vocab_size, std::size_t feat_dim) const {
        DecoderConfig cfg;
        cfg.vocab_size = vocab_size;
        cfg.d_model = d_model;
        cfg.n_heads = n_heads;
        cfg.n_layers = n_layers;
        cfg.ffn_dim = ffn_dim;
        cfg.max_len = max_len;
        cfg.feat_dim = feat_dim;
        cfg.validate();
        return cfg;
    }

    DecodeConfig decode_cfg() const {
        DecodeConfig dc;
        dc.max_len = max_len - 2;  // room for bos and eos inside the position budget
        dc.beam_size = beam_size;
        dc.temperature = temperature;
        dc.seed = seed;
        dc.validate();
        return dc;
    }
};

namespace detail {

inline std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        unsigned long long n = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return n;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' wants an integer, got '" + v + "'");
    }
}

inline double parse_double(const std::string& key, const std::string& v) {
    try {
        std::size_t pos = 0;
        double d = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return d;
    } catch (const std::exception&) {
        throw ConfigError("config key '" + key + "' wants a number, got '" + v + "'");
    }
}

inline bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("config key '" + key + "' wants true/false, got '" + v + "'");
}

inline std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

}  // namespace detail

inline void apply_config_kv(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail::parse_bool;
    using detail::parse_double;
    using detail::parse_u64;
    if (key == "stage") cfg.stage = value;
    else if (key == "data_dir") cfg.data_dir = value;
    else if (key == "out_dir") cfg.out_dir = value;
    else if (key == "checkpoint_in") cfg.checkpoint_in = value;
    else if (key == "checkpoint_out") cfg.checkpoint_out = value;
    else if (key == "seed") cfg.seed = parse_u64(key, value);
    else if (key == "d_model") cfg.d_model = parse_u64(key, value);
    else if (key == "n_heads") cfg.n_heads = parse_u64(key, value);
    else if (key == "n_layers") cfg.n_layers = parse_u64(key, value);
    else if (key == "ffn_dim") cfg.ffn_dim = parse_u64(key, value);
    else if (key == "max_len") cfg.max_len = parse_u64(key, value);
    else if (key == "ce_epochs") cfg.ce_epochs = parse_u64(key, value);
    else if (key == "ce_lr") cfg.ce_lr = parse_double(key, value);
    else if (key == "batch_size") cfg.batch_size = parse_u64(key, value);
    else if (key == "warmup_frac") cfg.warmup_frac = parse_double(key, value);
    else if (key == "grpo_group") cfg.grpo.group_size = parse_u64(key, value);
    else if (key == "grpo_clip") cfg.grpo.clip_eps = parse_double(key, value);
    else if (key == "grpo_beta") cfg.grpo.kl_beta = parse_double(key, value);
    else if (key == "grpo_update_steps") cfg.grpo.update_steps = parse_u64(key, value);
    else if (key == "grpo_epochs") cfg.grpo.epochs = parse_u64(key, value);
    else if (key == "grpo_lr") cfg.grpo.lr = parse_double(key, value);
    else if (key == "ratio_agg") {
        if (value == "token_mean") cfg.grpo.ratio_agg = RatioAgg::token_mean;
        else if (value == "sequence") cfg.grpo.ratio_agg = RatioAgg::sequence;
        else throw ConfigError("config key 'ratio_agg' wants token_mean or sequence");
    }
    else if (key == "scst_epochs") cfg.scst.epochs = parse_u64(key, value);
    else if (key == "scst_lr") cfg.scst.lr = parse_double(key, value);
    else if (key == "rl_batch") cfg.rl_batch = parse_u64(key, value);
    else if (key == "val_every") cfg.val_every = parse_u64(key, value);
    else if (key == "beam_size") cfg.beam_size = parse_u64(key, value);
    else if (key == "temperature") cfg.temperature = parse_double(key, value);
    else if (key == "eval_split") cfg.eval_split = value;
    else if (key == "gen_train") cfg.gen_train = parse_u64(key, value);
    else if (key == "gen_val") cfg.gen_val = parse_u64(key, value);
    else if (key == "gen_test") cfg.gen_test = parse_u64(key, value);
    else if (key == "gen_grid") cfg.gen_grid = static_cast<int>(parse_u64(key, value));
    else if (key == "gen_noise") cfg.gen_noise = parse_double(key, value);
    else if (key == "cider_d") cfg.cider_d = parse_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

inline void load_config_file(RunConfig& cfg, const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("cannot open config file " + path);
    std::string line;
    int lineno = 0;
    while (std::getline(f, line)) {
        ++lineno;
        std::string s = detail::trim(line);
        if (s.empty() || s[0] == '#') continue;
        std::size_t eq = s.find('=');
        if (eq == std::string::npos)
            throw ConfigError(path + ":" + std::to_string(lineno) + ": expected key = value");
        std::string key = detail::trim(s.substr(0, eq));
        std::string value = detail::trim(s.substr(eq + 1));
        if (key.empty()) throw ConfigError(path + ":" + std::to_string(lineno) + ": empty key");
        apply_config_kv(cfg, key, value);
    }
}

inline std::string serialize_config(const RunConfig& cfg) {
    std::ostringstream os;
    os << "stage = " << cfg.stage << "\n";
    os << "data_dir = " << cfg.data_dir << "\n";
    os << "out_dir = " << cfg.out_dir << "\n";
    os << "checkpoint_in = " << cfg.checkpoint_in << "\n";
    os << "checkpoint_out = " << cfg.checkpoint_out << "\n";
    os << "seed = " << cfg.seed << "\n";
    os << "d_model = " << cfg.d_model << "\n";
    os << "n_heads = " << cfg.n_heads << "\n";
    os << "n_layers = " << cfg.n_layers << "\n";
    os << "ffn_dim = " << cfg.ffn_dim << "\n";
    os << "max_len = " << cfg.max_len << "\n";
    os << "ce_epochs = " << cfg.ce_epochs << "\n";
    os << "ce_lr = " << detail::fmt_double(cfg.ce_lr) << "\n";
    os << "batch_size = " << cfg.batch_size << "\n";
    os << "warmup_frac = " << detail::fmt_double(cfg.warmup_frac) << "\n";
    os << "grpo_group = " << cfg.grpo.group_size << "\n";
    os << "grpo_clip = " << detail::fmt_double(cfg.grpo.clip_eps) << "\n";
    os << "grpo_beta = " << detail::fmt_double(cfg.grpo.kl_beta) << "\n";
    os << "grpo_update_steps = " << cfg.grpo.update_steps << "\n";
    os << "grpo_epochs = " << cfg.grpo.epochs << "\n";
    os << "grpo_lr = " << detail::fmt_double(cfg.grpo.lr) << "\n";
    os << "ratio_agg = "
       << (cfg.grpo.ratio_agg == RatioAgg::token_mean ? "token_mean" : "sequence") << "\n";
    os << "scst_epochs = " << cfg.scst.epochs << "\n";
    os << "scst_lr = " << detail::fmt_double(cfg.scst.lr) << "\n";
    os << "rl_batch = " << cfg.rl_batch << "\n";
    os << "val_every = " << cfg.val_every << "\n";
    os << "beam_size = " << cfg.beam_size << "\n";
    os << "temperature = " << detail::fmt_double(cfg.temperature) << "\n";
    os << "eval_split = " << cfg.eval_split << "\n";
    os << "gen_train = " << cfg.gen_train << "\n";
    os << "gen_val = " << cfg.gen_val << "\n";
    os << "gen_test = " << cfg.gen_test << "\n";
    os << "gen_grid = " << cfg.gen_grid << "\n";
    os << "gen_noise = " << detail::fmt_double(cfg.gen_noise) << "\n";
    os << "cider_d = " << (cfg.cider_d ? "true" : "false") << "\n";
    return os.str();
}

inline std::string config_hash(const RunConfig& cfg) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%016" PRIx64, fnv1a64(serialize_config(cfg)));
    return buf;
}

// ---------------------------------------------------------------------------
// run directory provenance
// ---------------------------------------------------------------------------

namespace detail {

inline void write_text(const std::string& path, const std::string& body) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write " + path);
    f << body;
    if (!f) throw DataError("write failed for " + path);
}

inline void prepare_run_dir(const RunConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.out_dir.empty()) throw ConfigError("out_dir is required");
    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw DataError("cannot create " + cfg.out_dir + ": " + ec.message());
    write_text(cfg.out_dir + "/config.resolved.txt", serialize_config(cfg));
    write_text(cfg.out_dir + "/version.txt", "sqrl " + std::string(kVersion) + "\n");
}

class JsonlLogger {
  public:
    explicit JsonlLogger(const std::string& path) : f_(path, std::ios::binary) {
        if (!f_) throw DataError("cannot open log " + path);
    }

    void line(const std::vector<std::pair<std::string, std::string>>& fields) {
        f_ << "{";
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) f_ << ",";
            f_ << "\"" << fields[i].first << "\":" << fields[i].second;
        }
        f_ << "}\n";
        f_.flush();
    }

  private:
    std::ofstream f_;
};

inline std::string jnum(double v) { return fmt_double(v); }
inline std::string jnum(std::size_t v) { return std::to_string(v); }
inline std::string jnum(long long v) { return std::to_string(v); }
inline std::string jstr(const std::string& s) { return "\"" + s + "\""; }

class WallClock {
  public:
    WallClock() : start_(std::chrono::steady_clock::now()) {}
    long long ms() const {
        return std::chrono::duration_cast<std::chrono::milliseconds>(
                   std::chrono::steady_clock::now() - start_)
            .count();
    }

  private:
    std::chrono::steady_clock::time_point start_;
};

}  // namespace detail

// Strips wall_ms fields, the only nondeterministic part of any output file,
// so reruns can be compared byte for byte.
inline std::string canonical_log_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open " + path);
    std::ostringstream out;
    std::string line;
    while (std::getline(f, line)) {
        std::size_t pos = line.find(",\"wall_ms\":");
        if (pos != std::string::npos) {
            std::size_t end = pos + 11;
            while (end < line.size() && line[end] != ',' && line[end] != '}') ++end;
            line = line.substr(0, pos) + line.substr(end);
        } else if (detail::trim(line).rfind("\"wall_ms\":", 0) == 0) {
            continue;  // pretty-printed json puts the field on its own line
        }
        out << line << "\n";
    }
    return out.str();
}

// ---------------------------------------------------------------------------
// dataset bundle used by the training and eval stages
// ---------------------------------------------------------------------------

struct LoadedData {
    Dataset ds;
    Vocab vocab;
    std::map<int, FeatureGrid> feats;
    std::map<int, RefSet> refs;
    std::size_t feat_dim = 0;

    const FeatureGrid& feat_of(int id) const {
        auto it = feats.find(id);
        if (it == feats.end())
            throw DataError("no features loaded for image " + std::to_string(id));
        return it->second;
    }
};

inline LoadedData load_data(const std::string& data_dir, bool with_features = true) {
    if (data_dir.empty()) throw ConfigError("data_dir is required");
    LoadedData d;
    d.ds = load_karpathy_json(data_dir + "/captions.json");
    d.vocab = Vocab::load(data_dir + "/vocab.txt");
    for (const CaptionSet& cs : d.ds.images) {
        d.refs[cs.id] = tokenized_refs(cs);
        if (with_features) {
            FeatureGrid g = read_features(feature_path(data_dir, cs.id));
            if (d.feat_dim == 0) d.feat_dim = g.feat_dim;
            else if (d.feat_dim != g.feat_dim)
                throw DataError("feature dim mismatch at image " + std::to_string(cs.id));
            d.feats.emplace(cs.id, std::move(g));
        }
    }
    return d;
}

// ---------------------------------------------------------------------------
// checkpoint metadata <-> decoder config
// ---------------------------------------------------------------------------

namespace detail {

inline std::map<std::string, double> decoder_meta(const DecoderConfig& cfg) {
    return {{"vocab_size", static_cast<double>(cfg.vocab_size)},
            {"d_model", static_cast<double>(cfg.d_model)},
            {"n_heads", static_cast<double>(cfg.n_heads)},
            {"n_layers", static_cast<double>(cfg.n_layers)},
            {"ffn_dim", static_cast<double>(cfg.ffn_dim)},
            {"max_len", static_cast<double>(cfg.max_len)},
            {"feat_dim", static_cast<double>(cfg.feat_dim)}};
}

inline double meta_of(const TrainCheckpoint& ck, const std::string& key) {
    auto it = ck.meta.find(key);
    if (it == ck.meta.end()) throw DataError("checkpoint missing meta field " + key);
    return it->second;
}

inline DecoderConfig decoder_from_meta(const TrainCheckpoint& ck) {
    DecoderConfig cfg;
    cfg.vocab_size = static_cast<std::size_t>(meta_of(ck, "vocab_size"));
    cfg.d_model = static_cast<std::size_t>(meta_of(ck, "d_model"));
    cfg.n_heads = static_cast<std::size_t>(meta_of(ck, "n_heads"));
    cfg.n_layers = static_cast<std::size_t>(meta_of(ck, "n_layers"));
    cfg.ffn_dim = static_cast<std::size_t>(meta_of(ck, "ffn_dim"));
    cfg.max_len = static_cast<std::size_t>(meta_of(ck, "max_len"));
    cfg.feat_dim = static_cast<std::size_t>(meta_of(ck, "feat_dim"));
    cfg.validate();
    return cfg;
}

inline TrainCheckpoint load_model_checkpoint(const std::string& path, const DecoderConfig& want) {
    if (path.empty()) throw ConfigError("checkpoint_in is required for this stage");
    TrainCheckpoint ck = load_checkpoint(path);
    DecoderConfig got = decoder_from_meta(ck);
    if (got.vocab_size != want.vocab_size || got.d_model != want.d_model ||
        got.n_heads != want.n_heads || got.n_layers != want.n_layers ||
        got.ffn_dim != want.ffn_dim || got.max_len != want.max_len ||
        got.feat_dim != want.feat_dim)
        throw ConfigError("checkpoint " + path + " dims disagree with the run config (" +
                          std::to_string(got.d_model) + "d/" + std::to_string(got.vocab_size) +
                          "v vs " + std::to_string(want.d_model) + "d/" +
                          std::to_string(want.vocab_size) + "v)");
    validate_params(got, ck.params);
    return ck;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// shared evaluation helpers
// ---------------------------------------------------------------------------

struct SplitEval {
    CorpusScores scores;
    std::vector<int> ids;
    std::vector<Sentence> candidates;
};

inline const std::vector<int>& split_ids(const Dataset& ds, const std::string& split) {
    if (split == "train") return ds.manifest.train;
    if (split == "val") return ds.manifest.val;
    if (split == "test") return ds.manifest.test;
    throw ConfigError("unknown split '" + split + "'");
}

inline SplitEval decode_and_score(const LoadedData& data, const DecoderConfig& dcfg,
                                  const ModelParams& params, const std::vector<int>& ids,
                                  const DecodeConfig& dc, bool cider_d = false) {
    if (ids.empty()) throw DataError("cannot evaluate an empty split");
    SplitEval ev;
    ev.ids = ids;
    std::vector<RefSet> refs;
    for (int id : ids) {
        StepFn step = model_step(dcfg, params, data.feat_of(id));
        DecodeResult r = beam_decode(step, dc);
        ev.candidates.push_back(data.vocab.decode(content_tokens(r.ids)));
        refs.push_back(data.refs.at(id));
    }
    ev.scores = score_corpus(ev.candidates, refs, cider_d);
    return ev;
}

// Uniformly random captions from the content vocabulary; the floor any
// trained model has to clear.
inline CorpusScores random_caption_scores(const LoadedData& data, const std::vector<int>& ids,
                                          std::uint64_t seed, std::size_t max_tokens) {
    if (ids.empty()) throw DataError("cannot score an empty split");
    std::vector<Sentence> cands;
    std::vector<RefSet> refs;
    Rng rng(substream(seed, "random-baseline"));
    std::size_t content_words = data.vocab.size() - 3;
    if (content_words == 0) throw DataError("vocabulary has no content words");
    for (int id : ids) {
        std::size_t len = 1 + rng.randint(max_tokens);
        Sentence s;
        for (std::size_t i = 0; i < len; ++i)
            s.push_back(data.vocab.word(3 + static_cast<int>(rng.randint(content_words))));
        cands.push_back(std::move(s));
        refs.push_back(data.refs.at(id));
    }
    return score_corpus(cands, refs);
}

// ---------------------------------------------------------------------------
// stage: gen-data
// ---------------------------------------------------------------------------

inline Dataset run_gen_data(const RunConfig& cfg) {
    GenConfig gc;
    gc.out_dir = cfg.out_dir;
    gc.seed = cfg.seed;
    gc.n_train = cfg.gen_train;
    gc.n_val = cfg.gen_val;
    gc.n_test = cfg.gen_test;
    gc.grid = cfg.gen_grid;
    gc.noise = cfg.gen_noise;
    Dataset ds = generate_dataset(gc);
    detail::write_text(cfg.out_dir + "/version.txt", "sqrl " + std::string(kVersion) + "\n");
    return ds;
}

// ---------------------------------------------------------------------------
// stage: ce training
// ---------------------------------------------------------------------------

struct CeResult {
    std::string final_ckpt;
    double first_epoch_loss = 0.0;
    double last_epoch_loss = 0.0;
    double last_val_cider = 0.0;
    std::size_t steps = 0;
};

inline CeResult run_ce(const RunConfig& cfg) {
    detail::prepare_run_dir(cfg);
    detail::WallClock clock;
    LoadedData data = load_data(cfg.data_dir);
    DecoderConfig dcfg = cfg.decoder(data.vocab.size(), data.feat_dim);
    if (cfg.ce_epochs == 0) throw ConfigError("ce_epochs must be >= 1");
    if (cfg.batch_size == 0) throw ConfigError("batch_size must be >= 1");

    struct Pair {
        int image;
        TokenSeq seq;
    };
    std::vector<Pair> pairs;
    for (int id : data.ds.manifest.train) {
        for (const Sentence& s : data.refs.at(id)) {
            TokenSeq seq = data.vocab.encode(s);
            if (seq.size() - 1 > dcfg.max_len)
                throw DataError("caption for image " + std::to_string(id) +
                                " needs max_len >= " + std::to_string(seq.size() - 1));
            pairs.push_back({id, std::move(seq)});
        }
    }
    if (pairs.empty()) throw DataError("train split is empty");

    ModelParams theta;
    AdamState opt;
    std::size_t start_epoch = 0;
    std::size_t global_step = 0;
    if (!cfg.checkpoint_in.empty()) {
        TrainCheckpoint ck = detail::load_model_checkpoint(cfg.checkpoint_in, dcfg);
        theta = std::move(ck.params);
        if (ck.has_opt) opt = std::move(ck.opt);
        start_epoch = static_cast<std::size_t>(detail::meta_of(ck, "epoch"));
        global_step = static_cast<std::size_t>(detail::meta_of(ck, "global_step"));
    } else {
        theta = init_params(dcfg, substream(cfg.seed, "init"));
    }

    std::size_t steps_per_epoch = (pairs.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t total_steps = steps_per_epoch * cfg.ce_epochs;
    detail::JsonlLogger log(cfg.out_dir + "/train.log.jsonl");
    DecodeConfig val_dc = cfg.decode_cfg();

    auto save = [&](const std::string& path, std::size_t next_epoch) {
        std::map<std::string, double> meta = detail::decoder_meta(dcfg);
        meta["epoch"] = static_cast<double>(next_epoch);
        meta["global_step"] = static_cast<double>(global_step);
        save_checkpoint(path, theta, &opt, meta);
    };

    CeResult res;
    for (std::size_t epoch = start_epoch; epoch < cfg.ce_epochs; ++epoch) {
        std::vector<std::size_t> order(pairs.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng(substream(cfg.seed, "ce-shuffle", epoch));
        shuffle_rng.shuffle(order);

        double epoch_loss = 0.0;
        std::size_t epoch_steps = 0;
        for (std::size_t off = 0; off < order.size(); off += cfg.batch_size) {
            std::vector<CeItem> batch;
            std::size_t hi = std::min(order.size(), off + cfg.batch_size);
            for (std::size_t i = off; i < hi; ++i) {
                const Pair& p = pairs[order[i]];
                batch.push_back({&data.feat_of(p.image), &p.seq});
            }
            double lr = lr_schedule(global_step, total_steps, cfg.ce_lr, cfg.warmup_frac);
            double loss = ce_step(batch, dcfg, theta, opt, lr);
            if (!std::isfinite(loss))
                throw NumericError("ce: non-finite loss at step " + std::to_string(global_step));
            ++global_step;
            ++epoch_steps;
            epoch_loss += loss;
            log.line({{"step", detail::jnum(global_step)},
                      {"stage", detail::jstr("ce")},
                      {"epoch", detail::jnum(epoch)},
                      {"loss", detail::jnum(loss)},
                      {"lr", detail::jnum(lr)},
                      {"wall_ms", detail::jnum(clock.ms())}});
        }
        epoch_loss /= static_cast<double>(epoch_steps);
        if (epoch == start_epoch) res.first_epoch_loss = epoch_loss;
        res.last_epoch_loss = epoch_loss;

        if (!data.ds.manifest.val.empty()) {
            SplitEval ev = decode_and_score(data, dcfg, theta, data.ds.manifest.val, val_dc);
            res.last_val_cider = ev.scores.report().cider;
            log.line({{"step", detail::jnum(global_step)},
                      {"stage", detail::jstr("ce-val")},
                      {"epoch", detail::jnum(epoch)},
                      {"cider", detail::jnum(res.last_val_cider)},
                      {"wall_ms", detail::jnum(clock.ms())}});
        }
        save(cfg.out_dir + "/ckpt_epoch" + std::to_string(epoch + 1) + ".sqrl", epoch + 1);
    }

    res.final_ckpt =
        cfg.checkpoint_out.empty() ? cfg.out_dir + "/final.sqrl" : cfg.checkpoint_out;
    save(res.final_ckpt, cfg.ce_epochs);
    res.steps = global_step;
    return res;
}

// ---------------------------------------------------------------------------
// stage: rl training (scst or grpo) from a ce checkpoint
// ---------------------------------------------------------------------------

struct RlResult {
    std::string final_ckpt;
    std::string best_ckpt;
    double best_val_cider = 0.0;
    double final_val_cider = 0.0;
    std::size_t steps = 0;
};

inline RlResult run_rl(const RunConfig& cfg, const std::string& algo) {
    if (algo != "scst" && algo != "grpo") throw ConfigError("run_rl: algorithm must be scst or grpo");
    detail::prepare_run_dir(cfg);
    detail::WallClock clock;
    LoadedData data = load_data(cfg.data_dir);
    DecoderConfig dcfg = cfg.decoder(data.vocab.size(), data.feat_dim);
    if (cfg.rl_batch == 0) throw ConfigError("rl_batch must be >= 1");
    cfg.grpo.validate();
    cfg.scst.validate();

    TrainCheckpoint ck = detail::load_model_checkpoint(cfg.checkpoint_in, dcfg);
    ModelParams theta = std::move(ck.params);
    AdamState opt;  // fresh optimizer for the rl stage

    // idf statistics for the reward come from the train references
    std::vector<RefSet> train_refs;
    for (int id : data.ds.manifest.train) train_refs.push_back(data.refs.at(id));
    if (train_refs.empty()) throw DataError("train split is empty");
    CorpusStats stats = build_corpus_stats(train_refs);
    RewardFn reward = [&](int image, const TokenSeq& content) {
        return cider_one(data.vocab.decode(content), data.refs.at(image), stats);
    };

    DecodeConfig sample_dc = cfg.decode_cfg();
    sample_dc.beam_size = 1;
    DecodeConfig val_dc = cfg.decode_cfg();

    PolicySnapshot pi_ref = PolicySnapshot::of(theta);  // frozen at the ce checkpoint
    PolicySnapshot pi_old = PolicySnapshot::of(theta);

    detail::JsonlLogger log(cfg.out_dir + "/train.log.jsonl");
    RlResult res;
    res.best_val_cider = -1.0;
    std::size_t global_step = 0;
    std::size_t epochs = algo == "grpo" ? cfg.grpo.epochs : cfg.scst.epochs;
    double lr = algo == "grpo" ? cfg.grpo.lr : cfg.scst.lr;

    auto save = [&](const std::string& path) {
        std::map<std::string, double> meta = detail::decoder_meta(dcfg);
        meta["epoch"] = 0.0;
        meta["global_step"] = static_cast<double>(global_step);
        save_checkpoint(path, theta, &opt, meta);
    };
    auto validate_now = [&](const std::string& tag) {
        SplitEval ev = decode_and_score(data, dcfg, theta, data.ds.manifest.val, val_dc);
        double cider = ev.scores.report().cider;
        log.line({{"step", detail::jnum(global_step)},
                  {"stage", detail::jstr(tag)},
                  {"cider", detail::jnum(cider)},
                  {"wall_ms", detail::jnum(clock.ms())}});
        if (cider > res.best_val_cider) {
            res.best_val_cider = cider;
            res.best_ckpt = cfg.out_dir + "/best.sqrl";
            save(res.best_ckpt);
        }
        res.final_val_cider = cider;
        return cider;
    };

    for (std::size_t epoch = 0; epoch < epochs; ++epoch) {
        std::vector<int> order = data.ds.manifest.train;
        Rng shuffle_rng(substream(cfg.seed, algo + "-shuffle", epoch));
        shuffle_rng.shuffle(order);
        for (std::size_t off = 0; off < order.size(); off += cfg.rl_batch) {
            std::vector<RolloutItem> batch;
            std::size_t hi = std::min(order.size(), off + cfg.rl_batch);
            for (std::size_t i = off; i < hi; ++i)
                batch.push_back({order[i], &data.feat_of(order[i])});

            RlStats st;
            if (algo == "grpo") {
                if (global_step % cfg.grpo.update_steps == 0) pi_old = PolicySnapshot::of(theta);
                st = grpo_step(batch, dcfg, theta, pi_old, pi_ref, opt, cfg.grpo, sample_dc,
                               reward, lr, cfg.seed, static_cast<long long>(global_step));
            } else {
                st = scst_step(batch, dcfg, theta, opt, sample_dc, reward, lr, cfg.seed,
                               static_cast<long long>(global_step));
            }
            if (!std::isfinite(st.loss))
                throw NumericError(algo + ": non-finite loss at step " +
                                   std::to_string(global_step));
            ++global_step;
            if (algo == "grpo") {
                log.line({{"step", detail::jnum(global_step)},
                          {"stage", detail::jstr("grpo")},
                          {"loss", detail::jnum(st.loss)},
                          {"mean_reward", detail::jnum(st.mean_reward)},
                          {"mean_kl", detail::jnum(st.mean_kl)},
                          {"clip_frac", detail::jnum(st.clip_frac)},
                          {"lr", detail::jnum(lr)},
                          {"wall_ms", detail::jnum(clock.ms())}});
                if (cfg.val_every && global_step % cfg.val_every == 0) validate_now("grpo-val");
            } else {
                log.line({{"step", detail::jnum(global_step)},
                          {"stage", detail::jstr("scst")},
                          {"loss", detail::jnum(st.loss)},
                          {"mean_reward", detail::jnum(st.mean_reward)},
                          {"mean_adv", detail::jnum(st.mean_adv)},
                          {"lr", detail::jnum(lr)},
                          {"wall_ms", detail::jnum(clock.ms())}});
            }
        }
        if (algo == "scst") validate_now("scst-val");
    }
    validate_now(algo + "-val");

    res.final_ckpt =
        cfg.checkpoint_out.empty() ? cfg.out_dir + "/final.sqrl" : cfg.checkpoint_out;
    save(res.final_ckpt);
    if (res.best_ckpt.empty()) res.best_ckpt = res.final_ckpt;
    res.steps = global_step;
    return res;
}

// ---------------------------------------------------------------------------
// stage: eval
// ---------------------------------------------------------------------------

struct EvalResult {
    MetricReport report;
    std::size_t n_images = 0;
    std::string report_json;
    std::string report_csv;
};

namespace detail {

inline std::string metrics_csv(const MetricReport& r) {
    std::ostringstream os;
    os << "BLEU-1,BLEU-2,BLEU-3,BLEU-4,METEOR,ROUGE-L,CIDEr\n";
    os << fmt_double(r.bleu1) << "," << fmt_double(r.bleu2) << "," << fmt_double(r.bleu3) << ","
       << fmt_double(r.bleu4) << "," << fmt_double(r.meteor) << "," << fmt_double(r.rouge_l)
       << "," << fmt_double(r.cider) << "\n";
    return os.str();
}

inline std::string report_json_text(const RunConfig& cfg, const std::string& split,
                                    const SplitEval& ev, long long wall_ms) {
    const MetricReport r = ev.scores.report();
    nlohmann::json root;
    root["config_hash"] = config_hash(cfg);
    root["split"] = split;
    root["n_images"] = ev.ids.size();
    root["metrics"] = {{"bleu1", r.bleu1},   {"bleu2", r.bleu2},     {"bleu3", r.bleu3},
                       {"bleu4", r.bleu4},   {"meteor", r.meteor},   {"rouge_l", r.rouge_l},
                       {"cider", r.cider}};
    root["wall_ms"] = wall_ms;
    nlohmann::json per = nlohmann::json::array();
    for (std::size_t i = 0; i < ev.ids.size(); ++i) {
        nlohmann::json img;
        img["id"] = ev.ids[i];
        std::string cap;
        for (std::size_t w = 0; w < ev.candidates[i].size(); ++w) {
            if (w) cap += ' ';
            cap += ev.candidates[i][w];
        }
        img["caption"] = cap;
        img["cider"] = ev.scores.per_image_cider[i] * 100.0;
        img["rouge_l"] = ev.scores.per_image_rouge[i] * 100.0;
        img["meteor"] = ev.scores.per_image_meteor[i] * 100.0;
        per.push_back(std::move(img));
    }
    root["images"] = std::move(per);
    return root.dump(2) + "\n";
}

}  // namespace detail

inline EvalResult run_eval(const RunConfig& cfg) {
    detail::prepare_run_dir(cfg);
    detail::WallClock clock;
    LoadedData data = load_data(cfg.data_dir);
    DecoderConfig dcfg = cfg.decoder(data.vocab.size(), data.feat_dim);
    TrainCheckpoint ck = detail::load_model_checkpoint(cfg.checkpoint_in, dcfg);

    const std::vector<int>& ids = split_ids(data.ds, cfg.eval_split);
    SplitEval ev = decode_and_score(data, dcfg, ck.params, ids, cfg.decode_cfg());

    EvalResult res;
    res.report = ev.scores.report();
    res.n_images = ids.size();
    res.report_json = cfg.out_dir + "/report.json";
    res.report_csv = cfg.out_dir + "/report.csv";
    detail::write_text(res.report_json,
                       detail::report_json_text(cfg, cfg.eval_split, ev, clock.ms()));
    detail::write_text(res.report_csv, detail::metrics_csv(res.report));
    return res;
}

// ---------------------------------------------------------------------------
// stage: score (metrics only, no model)
// ---------------------------------------------------------------------------

inline MetricReport run_score(const std::string& refs_path, const std::string& cands_path,
                              bool cider_d, const std::string& out_dir) {
    Dataset refs_ds = load_karpathy_json(refs_path);
    std::map<int, RefSet> refs;
    for (const CaptionSet& cs : refs_ds.images) refs[cs.id] = tokenized_refs(cs);

    std::ifstream f(cands_path, std::ios::binary);
    if (!f) throw DataError("run_score: cannot open " + cands_path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("run_score: " + cands_path + ": " + e.what());
    }
    if (!root.is_object() || !root.contains("images") || !root["images"].is_array())
        throw DataError("run_score: " + cands_path + " has no images array");

    std::vector<Sentence> cands;
    std::vector<RefSet> ref_sets;
    for (const nlohmann::json& img : root["images"]) {
        if (!img.is_object() || !img.contains("id") || !img.contains("caption"))
            throw DataError("run_score: candidate entries need id and caption");
        int id = img["id"].get<int>();
        auto it = refs.find(id);
        if (it == refs.end())
            throw DataError("run_score: candidate image " + std::to_string(id) +
                            " has no references");
        cands.push_back(tokenize(img["caption"].get<std::string>()));
        ref_sets.push_back(it->second);
    }
    if (cands.empty()) throw DataError("run_score: no candidates in " + cands_path);

    CorpusScores scores = score_corpus(cands, ref_sets, cider_d);
    MetricReport report = scores.report();
    if (!out_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(out_dir, ec);
        if (ec) throw DataError("cannot create " + out_dir + ": " + ec.message());
        detail::write_text(out_dir + "/report.csv", detail::metrics_csv(report));
    }
    return report;
}

}  // namespace sqrl
