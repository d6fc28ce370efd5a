// vaedet command line: synth | train | score | eval | reconstruct | config.
// One subcommand per pipeline stage. Exit codes: 0 success, 1 runtime
// failure, 2 usage or configuration error.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "vaedet/config.hpp"
#include "vaedet/data.hpp"
#include "vaedet/metrics.hpp"
#include "vaedet/model.hpp"
#include "vaedet/scores.hpp"
#include "vaedet/train.hpp"

namespace {

constexpr int kExitOk = 0;
constexpr int kExitRuntime = 1;
constexpr int kExitUsage = 2;

namespace fs = std::filesystem;
using nlohmann::json;

bool quiet() {
    const char* v = std::getenv("VAEDET_LOG");
    return v && std::string(v) == "quiet";
}

void info(const std::string& line) {
    if (!quiet()) std::cout << line << "\n";
}

std::vector<std::string> split_csv_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::stringstream ss(s);
    while (std::getline(ss, item, ','))
        if (!item.empty()) out.push_back(item);
    return out;
}

void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path))
        throw vaedet::ConfigError(std::string(what) + " not found: " + path);
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

struct SynthArgs {
    vaedet::SynthConfig cfg;
    std::string out_dir;
    int train_count = -1, val_count = -1, test_normal_count = -1;
};

int cmd_synth(const SynthArgs& args) {
    vaedet::SynthConfig cfg = args.cfg;
    if (args.train_count >= 0 || args.val_count >= 0 || args.test_normal_count >= 0) {
        if (args.train_count < 0 || args.val_count < 0 || args.test_normal_count < 0)
            throw vaedet::ConfigError(
                "synth: --train-count, --val-count and --test-normal-count go together");
        vaedet::SplitCounts counts;
        counts.train = args.train_count;
        counts.val = args.val_count + args.test_normal_count;
        counts.test_normal = args.test_normal_count;
        cfg.counts = counts;
    }
    const auto manifest = vaedet::synth_generate(cfg, args.out_dir);
    int normal = 0, anomaly = 0;
    for (const auto& r : manifest.records) (r.label == "normal" ? normal : anomaly) += 1;
    info("synth: wrote " + std::to_string(manifest.records.size()) + " records (" +
         std::to_string(normal) + " normal, " + std::to_string(anomaly) + " anomaly)");
    std::cout << (fs::path(args.out_dir) / "manifest.jsonl").string() << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainOverrides {
    std::string config_path;
    std::string manifest, checkpoint_dir;
    int epochs = -1, batch_size = -1, latent_dim = -1, image_size = -1, base_channels = -1;
    double learning_rate = -1, beta = -1;
    int64_t seed = -1;
};

int cmd_train(const TrainOverrides& o) {
    vaedet::RunConfig cfg =
        o.config_path.empty() ? vaedet::RunConfig{} : vaedet::load_run_config(o.config_path);
    if (!o.manifest.empty()) cfg.data.manifest = o.manifest;
    if (!o.checkpoint_dir.empty()) cfg.train.checkpoint_dir = o.checkpoint_dir;
    if (o.epochs > 0) cfg.train.epochs = o.epochs;
    if (o.batch_size > 0) cfg.train.batch_size = o.batch_size;
    if (o.learning_rate > 0) cfg.train.learning_rate = o.learning_rate;
    if (o.seed >= 0) cfg.train.seed = static_cast<uint64_t>(o.seed);
    if (o.beta > 0) cfg.model.beta = o.beta;
    if (o.latent_dim > 0) cfg.model.latent_dim = o.latent_dim;
    if (o.image_size > 0) cfg.model.image_size = o.image_size;
    if (o.base_channels > 0) cfg.model.base_channels = o.base_channels;
    cfg.model.validate();
    cfg.train.validate();

    if (cfg.data.manifest.empty())
        throw vaedet::ConfigError("train: no manifest configured (data.manifest or --manifest)");
    require_file(cfg.data.manifest, "train: manifest");
    const auto manifest = vaedet::load_manifest(cfg.data.manifest);

    auto model = vaedet::make_vae_model<float>(cfg.model, cfg.train.seed);
    info("train: " + std::to_string(cfg.train.epochs) + " epochs, batch " +
         std::to_string(cfg.train.batch_size) + ", lr " +
         std::to_string(cfg.train.learning_rate) + ", beta " + std::to_string(cfg.model.beta));
    const auto result = vaedet::train(
        model, manifest, cfg.train, [](const vaedet::EpochStats& st, double wall) {
            if (quiet()) return;
            std::printf("epoch %3d  train %.4f (reconst %.4f, kl %.4f)  val %.4f  %.1fs\n",
                        st.epoch, st.train_loss, st.train_reconst, st.train_kl, st.val_loss,
                        wall);
            std::fflush(stdout);
        });
    info("train: best epoch " + std::to_string(result.best_epoch) + ", checkpoints in " +
         cfg.train.checkpoint_dir);
    std::cout << result.best_path << "\n";
    return kExitOk;
}

// ---------------------------------------------------------------------------
// score
// ---------------------------------------------------------------------------

struct ScoreArgs {
    std::string checkpoint, manifest, out_csv;
    std::string splits = "test_normal,test_anomaly";
    std::vector<std::string> scores = {"all"};
    int num_samples = 15;
    int64_t seed = 0;
};

std::string sidecar_path(const std::string& csv_path) {
    fs::path p(csv_path);
    if (p.extension() == ".csv") return p.replace_extension(".json").string();
    return csv_path + ".json";
}

int cmd_score(const ScoreArgs& args) {
    require_file(args.checkpoint, "score: checkpoint");
    require_file(args.manifest, "score: manifest");
    const auto ck = vaedet::load_checkpoint<float>(args.checkpoint);
    const auto model = vaedet::model_from_checkpoint(ck);
    const auto manifest = vaedet::load_manifest(args.manifest);

    vaedet::ScoreConfig cfg;
    cfg.num_samples = args.num_samples;
    cfg.seed = static_cast<uint64_t>(args.seed);
    cfg.score_set = vaedet::parse_score_names(args.scores);
    cfg.validate();

    std::vector<vaedet::ImageRecord<float>> items;
    for (const auto& split : split_csv_list(args.splits)) {
        auto part = vaedet::load_split<float>(manifest, split, model.config.image_size);
        items.insert(items.end(), std::make_move_iterator(part.begin()),
                     std::make_move_iterator(part.end()));
    }
    if (items.empty()) throw vaedet::ConfigError("score: no images in splits " + args.splits);

    auto report = vaedet::score_batch(model, items, cfg);
    report.checkpoint_id = ck.id;
    vaedet::write_score_csv(report, args.out_csv);
    vaedet::write_score_sidecar(report, vaedet::model_config_to_json(model.config),
                                sidecar_path(args.out_csv));
    info("score: " + std::to_string(report.rows.size()) + " images -> " + args.out_csv);
    if (!report.failures.empty()) {
        std::cerr << "score: " << report.failures.size() << " images failed:\n";
        for (const auto& f : report.failures)
            std::cerr << "  " << f.image_id << ": " << f.message << "\n";
        return kExitRuntime;
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

struct EvalArgs {
    std::vector<std::string> score_csvs;
    std::string manifest, out_prefix = "eval", normal_label = "normal";
    std::string roc_dir;
};

int cmd_eval(const EvalArgs& args) {
    require_file(args.manifest, "eval: manifest");
    std::vector<vaedet::ScoreTable> runs;
    for (const auto& path : args.score_csvs) {
        require_file(path, "eval: score file");
        runs.push_back(vaedet::read_score_csv(path));
    }
    const auto manifest = vaedet::load_manifest(args.manifest);
    const auto report = vaedet::evaluate(runs, manifest, args.normal_label);

    const std::string csv_path = args.out_prefix + ".csv";
    std::ofstream csv(csv_path);
    if (!csv) throw std::runtime_error("eval: cannot write " + csv_path);
    csv << "score";
    for (const auto& cls : report.class_names) csv << "," << cls;
    csv << "\n";
    char buf[32];
    for (const auto& score : report.score_names) {
        csv << score;
        for (const auto& cls : report.class_names) {
            std::snprintf(buf, sizeof(buf), "%.6f", report.cells.at(score).at(cls).mean);
            csv << "," << buf;
        }
        csv << "\n";
    }
    csv.close();

    json j;
    j["scores"] = report.score_names;
    j["classes"] = report.class_names;
    j["runs"] = report.run_count;
    j["aggregation"] = "mean over " + std::to_string(report.run_count) + " runs";
    j["run_files"] = [&] {
        json files = json::array();
        for (const auto& p : args.score_csvs) files.push_back(fs::path(p).filename().string());
        return files;
    }();
    for (const auto& score : report.score_names)
        for (const auto& cls : report.class_names) {
            const auto& cell = report.cells.at(score).at(cls);
            j["cells"][score][cls] = {{"mean", cell.mean}, {"runs", cell.runs}};
        }
    std::ofstream js(args.out_prefix + ".json");
    if (!js) throw std::runtime_error("eval: cannot write " + args.out_prefix + ".json");
    js << j.dump(2) << "\n";
    js.close();

    // stdout table
    std::printf("%-16s", "score");
    for (const auto& cls : report.class_names) std::printf(" %10s", cls.c_str());
    std::printf("\n");
    for (const auto& score : report.score_names) {
        std::printf("%-16s", score.c_str());
        for (const auto& cls : report.class_names)
            std::printf(" %10.3f", report.cells.at(score).at(cls).mean);
        std::printf("\n");
    }

    if (!args.roc_dir.empty()) {
        fs::create_directories(args.roc_dir);
        // ROC of the first run, per score and class
        std::map<std::string, const vaedet::ManifestRecord*> by_path;
        for (const auto& r : manifest.records) by_path[r.path] = &r;
        for (const auto& score : report.score_names)
            for (const auto& cls : report.class_names) {
                vaedet::LabeledScores ls;
                for (const auto& [id, values] : runs.front().rows) {
                    const auto* rec = by_path.at(id);
                    auto vit = values.find(score);
                    if (vit == values.end()) continue;
                    if (rec->split == "test_normal" && rec->label == args.normal_label)
                        ls.add(vit->second, false);
                    else if (rec->split == "test_anomaly" && rec->label != args.normal_label &&
                             (cls == "all" || rec->label == cls))
                        ls.add(vit->second, true);
                }
                const auto curve = vaedet::roc_curve(ls);
                std::ofstream roc(fs::path(args.roc_dir) /
                                  ("roc_" + score + "_" + cls + ".csv"));
                roc << "threshold,fpr,tpr\n";
                for (const auto& pt : curve) {
                    std::snprintf(buf, sizeof(buf), "%.10g", pt.threshold);
                    roc << buf << ",";
                    std::snprintf(buf, sizeof(buf), "%.10g", pt.fpr);
                    roc << buf << ",";
                    std::snprintf(buf, sizeof(buf), "%.10g", pt.tpr);
                    roc << buf << "\n";
                }
            }
    }
    return kExitOk;
}

// ---------------------------------------------------------------------------
// reconstruct
// ---------------------------------------------------------------------------

struct ReconstructArgs {
    std::string checkpoint, manifest, out_ppm;
    std::string split = "val";
    int n = 4;
};

// Grid layout: each row holds one image, original on the left and its
// reconstruction on the right, separated by a 2-pixel white column; rows are
// separated by 2-pixel white bands. Total size (2s+2) x (n*s + 2(n-1)).
int cmd_reconstruct(const ReconstructArgs& args) {
    if (args.n < 1) throw vaedet::ConfigError("reconstruct: n must be >= 1");
    require_file(args.checkpoint, "reconstruct: checkpoint");
    require_file(args.manifest, "reconstruct: manifest");
    const auto ck = vaedet::load_checkpoint<float>(args.checkpoint);
    const auto model = vaedet::model_from_checkpoint(ck);
    const auto manifest = vaedet::load_manifest(args.manifest);
    auto items = vaedet::load_split<float>(manifest, args.split, model.config.image_size);
    if (static_cast<int>(items.size()) < args.n)
        throw std::runtime_error("reconstruct: split '" + args.split + "' has " +
                                 std::to_string(items.size()) + " images, need " +
                                 std::to_string(args.n));

    const int s = model.config.image_size;
    const int c = model.config.in_channels;
    const int grid_w = 2 * s + 2;
    const int grid_h = args.n * s + 2 * (args.n - 1);
    vaedet::ImageU8 grid;
    grid.h = grid_h;
    grid.w = grid_w;
    grid.c = 3;
    grid.data.assign(static_cast<size_t>(grid_h) * grid_w * 3, 255);  // white separators

    vaedet::NoGradGuard no_grad;
    auto put = [&](int y0, int x0, const float* chw) {
        for (int y = 0; y < s; ++y)
            for (int x = 0; x < s; ++x)
                for (int ch = 0; ch < 3; ++ch) {
                    const float v = chw[((c == 3 ? ch : 0) * s + y) * s + x];
                    const double d = std::clamp((v + 1.0) * 127.5, 0.0, 255.0);
                    grid.data[static_cast<size_t>(((y0 + y) * grid_w + x0 + x) * 3 + ch)] =
                        static_cast<uint8_t>(std::lround(d));
                }
    };
    for (int i = 0; i < args.n; ++i) {
        const auto& px = items[static_cast<size_t>(i)].pixels;
        vaedet::Tensor<float> x({1, c, s, s},
                                std::vector<float>(px.values().begin(), px.values().end()));
        const auto q = vaedet::encode(model, x);
        const auto recon = vaedet::decode(model, q.mean);
        const int y0 = i * (s + 2);
        put(y0, 0, px.values().data());
        put(y0, s + 2, recon.values().data());
    }
    vaedet::save_pnm(grid, args.out_ppm);
    info("reconstruct: wrote " + args.out_ppm + " (" + std::to_string(grid_w) + "x" +
         std::to_string(grid_h) + ")");
    return kExitOk;
}

// ---------------------------------------------------------------------------
// config
// ---------------------------------------------------------------------------

int cmd_config(bool dump_defaults, const std::string& check_path) {
    if (dump_defaults) {
        std::cout << vaedet::run_config_to_json(vaedet::RunConfig{}).dump(2) << "\n";
        return kExitOk;
    }
    if (!check_path.empty()) {
        require_file(check_path, "config: file");
        vaedet::load_run_config(check_path);
        std::cout << "ok: " << check_path << "\n";
        return kExitOk;
    }
    throw vaedet::ConfigError("config: pass --dump-defaults or --check <path>");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"beta-VAE anomaly detection: train on normal images, score outliers"};
    app.require_subcommand(1);

    SynthArgs synth_args;
    auto* synth = app.add_subcommand("synth", "generate a synthetic blob corpus");
    synth->add_option("--kind", synth_args.cfg.kind, "corpus kind (blobs)")
        ->default_val("blobs");
    synth->add_option("--n", synth_args.cfg.n, "total images")->default_val(600);
    synth->add_option("--image-size", synth_args.cfg.image_size, "square image size")
        ->default_val(32);
    synth->add_option("--anomaly-rate", synth_args.cfg.anomaly_rate, "fraction of anomalies")
        ->default_val(0.25);
    synth->add_option("--seed", synth_args.cfg.seed, "corpus seed")->default_val(0);
    synth->add_option("--out", synth_args.out_dir, "output directory")->required();
    synth->add_option("--train-count", synth_args.train_count, "explicit train count");
    synth->add_option("--val-count", synth_args.val_count, "explicit val count");
    synth->add_option("--test-normal-count", synth_args.test_normal_count,
                      "explicit held-out normal count");

    TrainOverrides train_args;
    auto* train = app.add_subcommand("train", "train the VAE on the normal class");
    train->add_option("--config", train_args.config_path, "run config JSON");
    train->add_option("--manifest", train_args.manifest, "dataset manifest (JSONL)");
    train->add_option("--checkpoint-dir", train_args.checkpoint_dir, "output directory");
    train->add_option("--epochs", train_args.epochs, "training epochs (default 40)");
    train->add_option("--batch-size", train_args.batch_size, "batch size (default 32)");
    train->add_option("--learning-rate", train_args.learning_rate,
                      "Adam learning rate (default 1e-4)");
    train->add_option("--beta", train_args.beta, "KL weight (default 0.01)");
    train->add_option("--latent-dim", train_args.latent_dim,
                      "latent dimension (default 300)");
    train->add_option("--image-size", train_args.image_size, "square input size (default 128)");
    train->add_option("--base-channels", train_args.base_channels, "first conv width");
    train->add_option("--seed", train_args.seed, "run seed");

    ScoreArgs score_args;
    auto* score = app.add_subcommand("score", "compute anomaly scores for manifest splits");
    score->add_option("--checkpoint", score_args.checkpoint, "trained checkpoint")->required();
    score->add_option("--manifest", score_args.manifest, "dataset manifest")->required();
    score->add_option("--splits", score_args.splits, "comma-separated splits to score")
        ->default_val("test_normal,test_anomaly");
    score->add_option("--scores", score_args.scores,
                      "score names or 'all' (s_vae, s_vae_kl, s_vae_reconst, s_iwae, "
                      "s_iwae_kl, s_iwae_reconst)")
        ->delimiter(',');
    score->add_option("--L", score_args.num_samples, "samples per image (default 15)")
        ->default_val(15);
    score->add_option("--seed", score_args.seed, "scoring seed")->default_val(0);
    score->add_option("--out", score_args.out_csv, "output CSV path")->required();

    EvalArgs eval_args;
    auto* eval = app.add_subcommand("eval", "AUC-ROC per anomaly class from score CSVs");
    eval->add_option("csvs", eval_args.score_csvs, "score CSV files (multiple = runs)")
        ->required();
    eval->add_option("--manifest", eval_args.manifest, "dataset manifest")->required();
    eval->add_option("--normal-label", eval_args.normal_label, "label of the normal class")
        ->default_val("normal");
    eval->add_option("--out", eval_args.out_prefix, "output prefix for .csv/.json")
        ->default_val("eval");
    eval->add_option("--roc-dir", eval_args.roc_dir, "also write ROC curves here");

    ReconstructArgs rec_args;
    auto* rec = app.add_subcommand("reconstruct", "emit an originals|reconstructions grid");
    rec->add_option("--checkpoint", rec_args.checkpoint, "trained checkpoint")->required();
    rec->add_option("--manifest", rec_args.manifest, "dataset manifest")->required();
    rec->add_option("--split", rec_args.split, "split to draw from")->default_val("val");
    rec->add_option("--n", rec_args.n, "number of images")->default_val(4);
    rec->add_option("--out", rec_args.out_ppm, "output PPM path")->required();

    bool dump_defaults = false;
    std::string check_path;
    auto* config = app.add_subcommand("config", "inspect or validate run configuration");
    config->add_flag("--dump-defaults", dump_defaults, "print the default config JSON");
    config->add_option("--check", check_path, "validate a config file");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitUsage;
    }

    try {
        if (synth->parsed()) return cmd_synth(synth_args);
        if (train->parsed()) return cmd_train(train_args);
        if (score->parsed()) return cmd_score(score_args);
        if (eval->parsed()) return cmd_eval(eval_args);
        if (rec->parsed()) return cmd_reconstruct(rec_args);
        if (config->parsed()) return cmd_config(dump_defaults, check_path);
    } catch (const vaedet::ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
