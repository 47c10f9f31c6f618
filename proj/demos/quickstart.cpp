// Minimal tour of the library: make a few synthetic scenes, teach a tiny
// decoder their captions, then sharpen it with one round of grpo. Runs in a
// couple of seconds on one core; no files are written.

#include <cstdio>
#include <string>
#include <vector>

#include "sqrl/data.hpp"
#include "sqrl/decode.hpp"
#include "sqrl/metrics.hpp"
#include "sqrl/rl.hpp"

using namespace sqrl;

int main() {
    const std::uint64_t seed = 7;
    const int n_scenes = 24;

    // scenes, features, captions, vocabulary
    std::vector<FeatureGrid> feats;
    std::vector<CaptionSet> images;
    for (int id = 0; id < n_scenes; ++id) {
        SyntheticScene sc = SyntheticScene::of(seed, id);
        feats.push_back(scene_features(sc, seed, id));
        images.push_back({id, "train", scene_captions(sc)});
    }
    Vocab vocab = build_vocab(images);
    std::printf("vocab: %zu words\n", vocab.size());

    DecoderConfig cfg;
    cfg.vocab_size = vocab.size();
    cfg.d_model = 24;
    cfg.n_heads = 2;
    cfg.n_layers = 1;
    cfg.ffn_dim = 48;
    cfg.max_len = 12;
    cfg.feat_dim = feats[0].feat_dim;
    cfg.validate();
    ModelParams theta = init_params(cfg, substream(seed, "init"));

    DecodeConfig dc;
    dc.max_len = cfg.max_len - 2;

    auto caption_of = [&](int id) {
        DecodeResult r = greedy_decode(model_step(cfg, theta, feats[id]), dc);
        return caption_text(vocab, content_tokens(r.ids));
    };
    std::printf("before training, image 0: \"%s\"\n", caption_of(0).c_str());

    // a short teacher-forced phase
    std::vector<TokenSeq> seqs;
    std::vector<CeItem> batch;
    for (int id = 0; id < n_scenes; ++id)
        for (const std::string& c : images[id].captions)
            seqs.push_back(vocab.encode(tokenize(c)));
    std::size_t k = 0;
    for (int id = 0; id < n_scenes; ++id)
        for (std::size_t j = 0; j < images[id].captions.size(); ++j)
            batch.push_back({&feats[id], &seqs[k++]});
    AdamState opt;
    for (int step = 0; step < 80; ++step) {
        double loss = ce_step(batch, cfg, theta, opt, 3e-3);
        if (step % 20 == 0) std::printf("ce step %3d  loss %.4f\n", step, loss);
    }
    std::printf("after ce, image 0: \"%s\"  (truth: \"%s\")\n", caption_of(0).c_str(),
                images[0].captions[0].c_str());

    // cider against each scene's own references, idf from the whole corpus
    std::vector<RefSet> refs;
    for (const CaptionSet& img : images) refs.push_back(tokenized_refs(img));
    CorpusStats stats = build_corpus_stats(refs);
    RewardFn reward = [&](int image, const TokenSeq& content) {
        return cider_one(vocab.decode(content), refs[static_cast<std::size_t>(image)], stats);
    };

    // one grpo pass over the corpus
    PolicySnapshot ref = PolicySnapshot::of(theta);
    PolicySnapshot old = PolicySnapshot::of(theta);
    AdamState rl_opt;
    GrpoConfig gc;
    std::vector<RolloutItem> items;
    for (int id = 0; id < n_scenes; ++id) items.push_back({id, &feats[id]});
    for (std::size_t off = 0; off < items.size(); off += 8) {
        std::vector<RolloutItem> chunk(items.begin() + static_cast<long>(off),
                                       items.begin() + static_cast<long>(std::min(off + 8, items.size())));
        RlStats st = grpo_step(chunk, cfg, theta, old, ref, rl_opt, gc, dc, reward, 1e-4, seed,
                               static_cast<long long>(off / 8));
        std::printf("grpo step %zu  loss % .5f  mean reward %.3f  kl %.5f\n", off / 8, st.loss,
                    st.mean_reward, st.mean_kl);
    }

    double mean_cider = 0.0;
    for (int id = 0; id < n_scenes; ++id) {
        DecodeResult r = greedy_decode(model_step(cfg, theta, feats[id]), dc);
        mean_cider += reward(id, content_tokens(r.ids));
    }
    std::printf("mean cider over %d scenes: %.3f (max 10)\n", n_scenes, mean_cider / n_scenes);
    std::printf("image 0 now: \"%s\"\n", caption_of(0).c_str());
    return 0;
}
