#pragma once

#include <algorithm>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "sqrl/metrics.hpp"
#include "sqrl/model.hpp"

namespace sqrl {

// ---------------------------------------------------------------------------
// synthetic scenes
// ---------------------------------------------------------------------------

inline constexpr int kShapeKinds = 3;  // circle, square, triangle; empty cells are "none"
inline constexpr int kColorKinds = 4;
inline constexpr std::size_t kCellFeatDim = 8;  // one-hot shape (incl. none) + one-hot color

inline const char* shape_name(int s) {
    static const char* names[] = {"circle", "square", "triangle"};
    if (s < 0 || s >= kShapeKinds) throw ConfigError("shape_name: bad shape index");
    return names[s];
}

inline const char* color_name(int c) {
    static const char* names[] = {"red", "blue", "green", "yellow"};
    if (c < 0 || c >= kColorKinds) throw ConfigError("color_name: bad color index");
    return names[c];
}

struct SceneObject {
    int cell = 0;
    int shape = 0;
    int color = 0;
};

struct SyntheticScene {
    int grid = 3;
    std::vector<SceneObject> objects;  // sorted by cell, 1 or 2 entries

    static SyntheticScene of(std::uint64_t seed, int id, int grid = 3) {
        if (grid < 2) throw ConfigError("SyntheticScene: grid must be >= 2");
        Rng rng(substream(seed, "scene", static_cast<std::uint64_t>(id)));
        SyntheticScene sc;
        sc.grid = grid;
        int cells = grid * grid;
        std::size_t n_obj = 1 + rng.randint(2);
        std::vector<int> used;
        for (std::size_t i = 0; i < n_obj; ++i) {
            int cell;
            do {
                cell = static_cast<int>(rng.randint(static_cast<std::size_t>(cells)));
            } while (std::find(used.begin(), used.end(), cell) != used.end());
            used.push_back(cell);
            SceneObject obj;
            obj.cell = cell;
            obj.shape = static_cast<int>(rng.randint(kShapeKinds));
            obj.color = static_cast<int>(rng.randint(kColorKinds));
            sc.objects.push_back(obj);
        }
        std::sort(sc.objects.begin(), sc.objects.end(),
                  [](const SceneObject& a, const SceneObject& b) { return a.cell < b.cell; });
        return sc;
    }
};

inline FeatureGrid scene_features(const SyntheticScene& sc, std::uint64_t seed, int id,
                                  double sigma = 0.05) {
    Rng rng(substream(seed, "noise", static_cast<std::uint64_t>(id)));
    std::size_t cells = static_cast<std::size_t>(sc.grid) * static_cast<std::size_t>(sc.grid);
    Tensor t = Tensor::zeros({cells, kCellFeatDim});
    for (std::size_t cell = 0; cell < cells; ++cell) {
        const SceneObject* obj = nullptr;
        for (const SceneObject& o : sc.objects)
            if (o.cell == static_cast<int>(cell)) obj = &o;
        double* row = t.data->data() + cell * kCellFeatDim;
        if (obj) {
            row[static_cast<std::size_t>(obj->shape)] = 1.0;
            row[4 + static_cast<std::size_t>(obj->color)] = 1.0;
        } else {
            row[3] = 1.0;  // "none" slot; color stays all-zero
        }
        for (std::size_t k = 0; k < kCellFeatDim; ++k) row[k] += sigma * rng.normal();
    }
    // features travel through f32 files; quantize up front so in-memory and
    // reloaded values agree bit for bit
    for (double& v : *t.data) v = static_cast<double>(static_cast<float>(v));
    return FeatureGrid::of(std::move(t));
}

namespace detail {

struct Relation {
    const char* fwd;
    const char* rev;
};

inline Relation relation_of(const SyntheticScene& sc) {
    const SceneObject& a = sc.objects[0];
    const SceneObject& b = sc.objects[1];
    int ra = a.cell / sc.grid, rb = b.cell / sc.grid;
    if (ra < rb) return {"above", "below"};
    if (ra > rb) return {"below", "above"};
    int ca = a.cell % sc.grid, cb = b.cell % sc.grid;
    if (ca < cb) return {"left of", "right of"};
    return {"right of", "left of"};
}

}  // namespace detail

inline std::vector<std::string> scene_captions(const SyntheticScene& sc) {
    if (sc.objects.empty() || sc.objects.size() > 2)
        throw DataError("scene_captions: scene must hold 1 or 2 objects");
    std::vector<std::string> caps;
    if (sc.objects.size() == 1) {
        std::string obj = std::string(color_name(sc.objects[0].color)) + " " +
                          shape_name(sc.objects[0].shape);
        caps.push_back("a " + obj);
        caps.push_back("there is a " + obj);
        caps.push_back("the " + obj + " stands alone");
        caps.push_back("a picture of a " + obj);
        caps.push_back("just a " + obj);
        return caps;
    }
    std::string a = std::string(color_name(sc.objects[0].color)) + " " +
                    shape_name(sc.objects[0].shape);
    std::string b = std::string(color_name(sc.objects[1].color)) + " " +
                    shape_name(sc.objects[1].shape);
    detail::Relation rel = detail::relation_of(sc);
    caps.push_back("a " + a + " " + rel.fwd + " a " + b);
    caps.push_back("the " + b + " is " + rel.rev + " the " + a);
    caps.push_back("there is a " + a + " " + rel.fwd + " a " + b);
    caps.push_back("a " + b + " " + rel.rev + " a " + a);
    caps.push_back("a picture of a " + a + " " + rel.fwd + " a " + b);
    return caps;
}

// ---------------------------------------------------------------------------
// caption sets, splits, vocabulary
// ---------------------------------------------------------------------------

struct CaptionSet {
    int id = 0;
    std::string split;  // train | val | test
    std::vector<std::string> captions;
};

struct SplitManifest {
    std::vector<int> train, val, test;

    void validate() const {
        std::map<int, int> seen;
        for (int id : train) ++seen[id];
        for (int id : val) ++seen[id];
        for (int id : test) ++seen[id];
        for (const auto& [id, n] : seen)
            if (n > 1)
                throw DataError("SplitManifest: image " + std::to_string(id) +
                                " appears in multiple splits");
    }
};

struct Dataset {
    std::vector<CaptionSet> images;
    SplitManifest manifest;
    std::map<int, std::size_t> index;

    const CaptionSet& by_id(int id) const {
        auto it = index.find(id);
        if (it == index.end())
            throw DataError("Dataset: unknown image id " + std::to_string(id));
        return images[it->second];
    }

    void finalize() {
        index.clear();
        manifest = SplitManifest{};
        for (std::size_t i = 0; i < images.size(); ++i) {
            const CaptionSet& cs = images[i];
            if (!index.emplace(cs.id, i).second)
                throw DataError("Dataset: duplicate image id " + std::to_string(cs.id));
            if (cs.split == "train")
                manifest.train.push_back(cs.id);
            else if (cs.split == "val")
                manifest.val.push_back(cs.id);
            else if (cs.split == "test")
                manifest.test.push_back(cs.id);
            else
                throw DataError("Dataset: image " + std::to_string(cs.id) +
                                " has unknown split '" + cs.split + "'");
        }
        manifest.validate();
    }
};

inline RefSet tokenized_refs(const CaptionSet& cs) {
    RefSet refs;
    for (const std::string& c : cs.captions) refs.push_back(tokenize(c));
    return refs;
}

struct Vocab {
    std::vector<std::string> words;
    std::map<std::string, int> ids;

    static constexpr const char* kPadWord = "<pad>";
    static constexpr const char* kBosWord = "<bos>";
    static constexpr const char* kEosWord = "<eos>";

    std::size_t size() const { return words.size(); }

    const std::string& word(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= words.size())
            throw DataError("Vocab: id " + std::to_string(id) + " out of range");
        return words[static_cast<std::size_t>(id)];
    }

    int id_of(const std::string& w) const {
        auto it = ids.find(w);
        if (it == ids.end()) throw DataError("Vocab: unknown word '" + w + "'");
        return it->second;
    }

    bool contains(const std::string& w) const { return ids.count(w) > 0; }

    TokenSeq encode(const Sentence& tokens) const {
        TokenSeq seq = {kBos};
        for (const std::string& w : tokens) seq.push_back(id_of(w));
        seq.push_back(kEos);
        return seq;
    }

    Sentence decode(const TokenSeq& content) const {
        Sentence out;
        for (int id : content) out.push_back(word(id));
        return out;
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary);
        if (!f) throw DataError("Vocab: cannot write " + path);
        for (const std::string& w : words) f << w << "\n";
        if (!f) throw DataError("Vocab: write failed for " + path);
    }

    static Vocab load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("Vocab: cannot read " + path);
        Vocab v;
        std::string line;
        while (std::getline(f, line)) {
            if (!line.empty() && line.back() == '\r') line.pop_back();
            if (line.empty()) continue;
            if (!v.ids.emplace(line, static_cast<int>(v.words.size())).second)
                throw DataError("Vocab: duplicate word '" + line + "' in " + path);
            v.words.push_back(line);
        }
        if (v.words.size() < 3 || v.words[0] != kPadWord || v.words[1] != kBosWord ||
            v.words[2] != kEosWord)
            throw DataError("Vocab: " + path + " must start with the three special tokens");
        return v;
    }
};

inline Vocab build_vocab(const std::vector<CaptionSet>& images) {
    std::map<std::string, int> seen;
    for (const CaptionSet& cs : images)
        for (const std::string& cap : cs.captions)
            for (const std::string& w : tokenize(cap)) seen[w] = 1;
    Vocab v;
    v.words = {Vocab::kPadWord, Vocab::kBosWord, Vocab::kEosWord};
    for (const auto& [w, n] : seen) v.words.push_back(w);
    for (std::size_t i = 0; i < v.words.size(); ++i)
        v.ids[v.words[i]] = static_cast<int>(i);
    return v;
}

inline std::string caption_text(const Vocab& v, const TokenSeq& content) {
    std::string out;
    for (std::size_t i = 0; i < content.size(); ++i) {
        if (i) out += ' ';
        out += v.word(content[i]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// feature files: magic "FEAT", u32 version, u32 n_regions, u32 dim, f32 LE
// ---------------------------------------------------------------------------

inline constexpr char kFeatMagic[4] = {'F', 'E', 'A', 'T'};
inline constexpr std::uint32_t kFeatVersion = 1;

namespace detail {

inline void put_u32le(std::ostream& os, std::uint32_t v) {
    char b[4];
    for (int i = 0; i < 4; ++i) b[i] = static_cast<char>((v >> (8 * i)) & 0xff);
    os.write(b, 4);
}

inline std::uint32_t get_u32le(std::istream& is, const std::string& path) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4))
        throw DataError("read_features: " + path + " truncated");
    return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
}

}  // namespace detail

inline void write_features(const std::string& path, const FeatureGrid& grid) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("write_features: cannot open " + path);
    f.write(kFeatMagic, 4);
    detail::put_u32le(f, kFeatVersion);
    detail::put_u32le(f, static_cast<std::uint32_t>(grid.n_regions));
    detail::put_u32le(f, static_cast<std::uint32_t>(grid.feat_dim));
    for (double v : *grid.values.data)
        detail::put_u32le(f, std::bit_cast<std::uint32_t>(static_cast<float>(v)));
    if (!f) throw DataError("write_features: write failed for " + path);
}

inline FeatureGrid read_features(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("read_features: cannot open " + path);
    char magic[4];
    if (!f.read(magic, 4) || std::memcmp(magic, kFeatMagic, 4) != 0)
        throw DataError("read_features: " + path + " is not a feature file");
    std::uint32_t version = detail::get_u32le(f, path);
    if (version != kFeatVersion)
        throw DataError("read_features: " + path + " has unsupported version " +
                        std::to_string(version));
    std::uint32_t n_regions = detail::get_u32le(f, path);
    std::uint32_t dim = detail::get_u32le(f, path);
    if (n_regions == 0 || dim == 0)
        throw DataError("read_features: " + path + " declares an empty grid");
    Tensor t = Tensor::zeros({n_regions, dim});
    for (double& v : *t.data)
        v = static_cast<double>(std::bit_cast<float>(detail::get_u32le(f, path)));
    char extra;
    if (f.read(&extra, 1))
        throw DataError("read_features: " + path + " has trailing bytes");
    return FeatureGrid::of(std::move(t));
}

inline std::string feature_path(const std::string& dir, int id) {
    return dir + "/features/img" + std::to_string(id) + ".feat";
}

// ---------------------------------------------------------------------------
// dataset generation
// ---------------------------------------------------------------------------

struct GenConfig {
    std::string out_dir;
    std::uint64_t seed = 0;
    std::size_t n_train = 2000;
    std::size_t n_val = 250;
    std::size_t n_test = 250;
    int grid = 3;
    double noise = 0.05;

    std::size_t total() const { return n_train + n_val + n_test; }

    void validate() const {
        if (out_dir.empty()) throw ConfigError("GenConfig: out_dir is empty");
        if (total() < 10) throw ConfigError("GenConfig: need at least 10 images");
        if (n_val == 0 || n_test == 0)
            throw ConfigError("GenConfig: val and test splits must be non-empty");
        if (grid < 2) throw ConfigError("GenConfig: grid must be >= 2");
        if (noise < 0.0) throw ConfigError("GenConfig: noise must be >= 0");
    }
};

inline Dataset generate_dataset(const GenConfig& cfg) {
    cfg.validate();
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(cfg.out_dir + "/features", ec);
    if (ec) throw DataError("generate_dataset: cannot create " + cfg.out_dir + ": " + ec.message());

    Dataset ds;
    for (std::size_t i = 0; i < cfg.total(); ++i) {
        int id = static_cast<int>(i);
        SyntheticScene scene = SyntheticScene::of(cfg.seed, id, cfg.grid);
        FeatureGrid feat = scene_features(scene, cfg.seed, id, cfg.noise);
        write_features(feature_path(cfg.out_dir, id), feat);
        CaptionSet cs;
        cs.id = id;
        cs.split = i < cfg.n_train ? "train" : (i < cfg.n_train + cfg.n_val ? "val" : "test");
        cs.captions = scene_captions(scene);
        ds.images.push_back(std::move(cs));
    }
    ds.finalize();

    nlohmann::json root;
    root["images"] = nlohmann::json::array();
    for (const CaptionSet& cs : ds.images) {
        nlohmann::json img;
        img["id"] = cs.id;
        img["split"] = cs.split;
        img["captions"] = cs.captions;
        root["images"].push_back(std::move(img));
    }
    std::string cap_path = cfg.out_dir + "/captions.json";
    std::ofstream cf(cap_path, std::ios::binary);
    if (!cf) throw DataError("generate_dataset: cannot write " + cap_path);
    cf << root.dump(2) << "\n";
    if (!cf) throw DataError("generate_dataset: write failed for " + cap_path);

    build_vocab(ds.images).save(cfg.out_dir + "/vocab.txt");
    return ds;
}

// ---------------------------------------------------------------------------
// caption JSON loading (native and Karpathy-style schemas)
// ---------------------------------------------------------------------------

inline Dataset load_karpathy_json(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("load_karpathy_json: cannot open " + path);
    nlohmann::json root;
    try {
        root = nlohmann::json::parse(f);
    } catch (const nlohmann::json::exception& e) {
        throw DataError("load_karpathy_json: " + path + ": " + e.what());
    }
    if (!root.is_object() || !root.contains("images") || !root["images"].is_array())
        throw DataError("load_karpathy_json: " + path + " has no images array");

    Dataset ds;
    int auto_id = 0;
    for (const nlohmann::json& img : root["images"]) {
        if (!img.is_object())
            throw DataError("load_karpathy_json: " + path + " has a non-object image entry");
        CaptionSet cs;
        if (img.contains("id"))
            cs.id = img["id"].get<int>();
        else if (img.contains("imgid"))
            cs.id = img["imgid"].get<int>();
        else
            cs.id = auto_id;
        ++auto_id;

        std::string split = img.value("split", std::string("train"));
        if (split == "restval") split = "train";
        if (split != "train" && split != "val" && split != "test")
            throw DataError("load_karpathy_json: image " + std::to_string(cs.id) +
                            " has unknown split '" + split + "'");
        cs.split = split;

        if (img.contains("captions") && img["captions"].is_array()) {
            for (const nlohmann::json& c : img["captions"])
                cs.captions.push_back(c.get<std::string>());
        } else if (img.contains("sentences") && img["sentences"].is_array()) {
            for (const nlohmann::json& s : img["sentences"]) {
                if (!s.is_object() || !s.contains("raw"))
                    throw DataError("load_karpathy_json: image " + std::to_string(cs.id) +
                                    " has a sentence without raw text");
                cs.captions.push_back(s["raw"].get<std::string>());
            }
        } else {
            throw DataError("load_karpathy_json: image " + std::to_string(cs.id) +
                            " is missing sentences");
        }
        if (cs.captions.size() < 5)
            throw DataError("load_karpathy_json: image " + std::to_string(cs.id) + " has " +
                            std::to_string(cs.captions.size()) + " captions, need 5");
        cs.captions.resize(5);
        ds.images.push_back(std::move(cs));
    }
    ds.finalize();
    return ds;
}

}  // namespace sqrl
