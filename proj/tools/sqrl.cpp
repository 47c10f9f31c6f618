#include <cstdio>
#include <string>
#include <utility>
#include <vector>

#include <CLI11.hpp>

#include "sqrl/harness.hpp"

namespace {

using KvList = std::vector<std::pair<std::string, std::string>>;

// every flag funnels through the same key=value channel the config file uses,
// so flags override file entries uniformly
void kv_option(CLI::App* app, const std::string& flag, const std::string& key, KvList& sink,
               const std::string& desc) {
    app->add_option_function<std::string>(
        flag, [&sink, key](const std::string& v) { sink.emplace_back(key, v); }, desc);
}

sqrl::RunConfig resolve(const std::string& config_path, const KvList& overrides) {
    sqrl::RunConfig cfg;
    if (!config_path.empty()) sqrl::load_config_file(cfg, config_path);
    for (const auto& [key, value] : overrides) sqrl::apply_config_kv(cfg, key, value);
    return cfg;
}

void print_report(const sqrl::MetricReport& r) {
    std::printf("BLEU-1 %.2f  BLEU-2 %.2f  BLEU-3 %.2f  BLEU-4 %.2f  METEOR %.2f  "
                "ROUGE-L %.2f  CIDEr %.2f\n",
                r.bleu1, r.bleu2, r.bleu3, r.bleu4, r.meteor, r.rouge_l, r.cider);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"caption model trainer and scorer"};
    app.require_subcommand(1);

    std::string config_path;
    KvList kv;

    CLI::App* gen = app.add_subcommand("gen-data", "generate the synthetic captioning dataset");
    gen->add_option("--config", config_path, "config file (key = value lines)");
    kv_option(gen, "--out", "out_dir", kv, "dataset directory to create");
    kv_option(gen, "--seed", "seed", kv, "root seed");
    kv_option(gen, "--train", "gen_train", kv, "train images");
    kv_option(gen, "--val", "gen_val", kv, "val images");
    kv_option(gen, "--test", "gen_test", kv, "test images");
    kv_option(gen, "--grid", "gen_grid", kv, "scene grid side");
    kv_option(gen, "--noise", "gen_noise", kv, "feature noise sigma");

    CLI::App* train = app.add_subcommand("train", "train a caption model");
    train->add_option("--config", config_path, "config file (key = value lines)");
    kv_option(train, "--stage", "stage", kv, "ce, scst, or grpo");
    kv_option(train, "--data", "data_dir", kv, "dataset directory");
    kv_option(train, "--out", "out_dir", kv, "run directory");
    kv_option(train, "--seed", "seed", kv, "root seed");
    kv_option(train, "--ckpt-in", "checkpoint_in", kv, "checkpoint to start from");
    kv_option(train, "--ckpt-out", "checkpoint_out", kv, "final checkpoint path");
    kv_option(train, "--d-model", "d_model", kv, "model width");
    kv_option(train, "--n-heads", "n_heads", kv, "attention heads");
    kv_option(train, "--n-layers", "n_layers", kv, "decoder layers");
    kv_option(train, "--ffn-dim", "ffn_dim", kv, "feed-forward width");
    kv_option(train, "--max-len", "max_len", kv, "max sequence positions");
    kv_option(train, "--ce-epochs", "ce_epochs", kv, "cross-entropy epochs");
    kv_option(train, "--ce-lr", "ce_lr", kv, "cross-entropy peak lr");
    kv_option(train, "--batch-size", "batch_size", kv, "cross-entropy batch size");
    kv_option(train, "--warmup-frac", "warmup_frac", kv, "lr warmup fraction");
    kv_option(train, "--grpo-group", "grpo_group", kv, "grpo group size G");
    kv_option(train, "--grpo-clip", "grpo_clip", kv, "grpo clip epsilon");
    kv_option(train, "--grpo-beta", "grpo_beta", kv, "grpo kl weight");
    kv_option(train, "--grpo-update-steps", "grpo_update_steps", kv, "steps between syncs");
    kv_option(train, "--grpo-epochs", "grpo_epochs", kv, "grpo epochs");
    kv_option(train, "--grpo-lr", "grpo_lr", kv, "grpo lr");
    kv_option(train, "--ratio-agg", "ratio_agg", kv, "token_mean or sequence");
    kv_option(train, "--scst-epochs", "scst_epochs", kv, "scst epochs");
    kv_option(train, "--scst-lr", "scst_lr", kv, "scst lr");
    kv_option(train, "--rl-batch", "rl_batch", kv, "images per rl step");
    kv_option(train, "--val-every", "val_every", kv, "grpo validation cadence (steps)");
    kv_option(train, "--beam-size", "beam_size", kv, "validation beam size");

    CLI::App* eval_cmd = app.add_subcommand("eval", "decode a split and score it");
    eval_cmd->add_option("--config", config_path, "config file (key = value lines)");
    kv_option(eval_cmd, "--data", "data_dir", kv, "dataset directory");
    kv_option(eval_cmd, "--out", "out_dir", kv, "run directory");
    kv_option(eval_cmd, "--ckpt-in", "checkpoint_in", kv, "checkpoint to evaluate");
    kv_option(eval_cmd, "--split", "eval_split", kv, "train, val, or test");
    kv_option(eval_cmd, "--beam-size", "beam_size", kv, "beam size");
    kv_option(eval_cmd, "--seed", "seed", kv, "root seed");
    kv_option(eval_cmd, "--d-model", "d_model", kv, "model width");
    kv_option(eval_cmd, "--n-heads", "n_heads", kv, "attention heads");
    kv_option(eval_cmd, "--n-layers", "n_layers", kv, "decoder layers");
    kv_option(eval_cmd, "--ffn-dim", "ffn_dim", kv, "feed-forward width");
    kv_option(eval_cmd, "--max-len", "max_len", kv, "max sequence positions");

    CLI::App* score = app.add_subcommand("score", "score caption files without a model");
    std::string refs_path, cands_path, score_out;
    bool cider_d = false;
    score->add_option("--refs", refs_path, "reference captions json")->required();
    score->add_option("--cands", cands_path, "candidate captions json")->required();
    score->add_option("--out", score_out, "directory for report.csv");
    score->add_flag("--cider-d", cider_d, "length-penalized cider variant");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    }

    try {
        if (gen->parsed()) {
            sqrl::RunConfig cfg = resolve(config_path, kv);
            cfg.stage = "gen-data";
            sqrl::Dataset ds = sqrl::run_gen_data(cfg);
            std::printf("wrote %zu images (%zu/%zu/%zu) to %s\n", ds.images.size(),
                        ds.manifest.train.size(), ds.manifest.val.size(),
                        ds.manifest.test.size(), cfg.out_dir.c_str());
        } else if (train->parsed()) {
            sqrl::RunConfig cfg = resolve(config_path, kv);
            if (cfg.stage == "ce") {
                sqrl::CeResult r = sqrl::run_ce(cfg);
                std::printf("ce done: %zu steps, epoch loss %.4f -> %.4f, val CIDEr %.2f\n",
                            r.steps, r.first_epoch_loss, r.last_epoch_loss, r.last_val_cider);
                std::printf("checkpoint: %s\n", r.final_ckpt.c_str());
            } else if (cfg.stage == "scst" || cfg.stage == "grpo") {
                sqrl::RlResult r = sqrl::run_rl(cfg, cfg.stage);
                std::printf("%s done: %zu steps, val CIDEr best %.2f final %.2f\n",
                            cfg.stage.c_str(), r.steps, r.best_val_cider, r.final_val_cider);
                std::printf("checkpoint: %s (best: %s)\n", r.final_ckpt.c_str(),
                            r.best_ckpt.c_str());
            } else if (cfg.stage.empty()) {
                throw sqrl::ConfigError("train needs a stage (ce, scst, or grpo)");
            } else {
                throw sqrl::ConfigError("unknown stage '" + cfg.stage + "'");
            }
        } else if (eval_cmd->parsed()) {
            sqrl::RunConfig cfg = resolve(config_path, kv);
            cfg.stage = "eval";
            sqrl::EvalResult r = sqrl::run_eval(cfg);
            std::printf("evaluated %zu images on %s\n", r.n_images, cfg.eval_split.c_str());
            print_report(r.report);
            std::printf("report: %s\n", r.report_json.c_str());
        } else if (score->parsed()) {
            sqrl::MetricReport r = sqrl::run_score(refs_path, cands_path, cider_d, score_out);
            print_report(r);
        }
    } catch (const sqrl::ConfigError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const sqrl::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const sqrl::NumericError& e) {
        std::fprintf(stderr, "numeric error: %s\n", e.what());
        return 4;
    } catch (const sqrl::ShapeError& e) {
        std::fprintf(stderr, "shape error: %s\n", e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
