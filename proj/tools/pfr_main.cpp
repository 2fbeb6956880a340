// Command-line front end: toy data generation, degradation, base training,
// personalization, restoration (plain and tiled), and evaluation. Every run
// is seeded and writes a manifest next to its outputs.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pfr/checkpoint.hpp"
#include "pfr/dataset.hpp"
#include "pfr/degradation.hpp"
#include "pfr/denoiser.hpp"
#include "pfr/digest.hpp"
#include "pfr/manifest.hpp"
#include "pfr/metrics.hpp"
#include "pfr/sampler.hpp"
#include "pfr/tiled.hpp"
#include "pfr/trainer.hpp"

namespace fs = std::filesystem;
using namespace pfr;

namespace {

Manifest new_manifest(const std::string& command, uint64_t seed) {
    Manifest m;
    m.set("version", std::string(kVersion));
    m.set("command", command);
    m.set("seed", seed);
    return m;
}

std::vector<fs::path> collect_images(const fs::path& root) {
    std::vector<fs::path> files;
    if (!fs::exists(root)) throw IoError("input path not found: " + root.string());
    auto is_image = [](const fs::path& p) {
        const auto e = p.extension().string();
        return e == ".png" || e == ".jpg" || e == ".jpeg";
    };
    if (fs::is_regular_file(root)) {
        files.push_back(root);
        return files;
    }
    for (const auto& e : fs::recursive_directory_iterator(root)) {
        if (e.is_regular_file() && is_image(e.path())) {
            files.push_back(e.path());
        }
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw IoError("no images under " + root.string());
    return files;
}

// ---------------------------------------------------------------------------

struct MakeToyDataArgs {
    std::string out;
    int identities = 200;
    int images_per = 4;
    int size = 80;
    uint64_t seed = 0;
};

void run_make_toy_data(const MakeToyDataArgs& a) {
    IdentityDataset ds = make_synthetic_dataset(a.identities, a.images_per, a.size, a.seed);
    write_dataset(ds, a.out);
    Manifest m = new_manifest("make-toy-data", a.seed);
    m.set("out", a.out);
    m.set("identities", a.identities);
    m.set("images_per", a.images_per);
    m.set("size", a.size);
    m.write((fs::path(a.out) / "manifest.txt").string());
    std::printf("wrote %d identities x %d images at %dpx to %s\n", a.identities,
                a.images_per, a.size, a.out.c_str());
}

// ---------------------------------------------------------------------------

struct DegradeArgs {
    std::string level = "heavy";
    uint64_t seed = 0;
    std::string in;
    std::string out;
    int jobs = 1;
};

void run_degrade(const DegradeArgs& a) {
    const DegradationLevel level = level_from_name(a.level);
    const fs::path in_root(a.in);
    const fs::path out_root(a.out);
    auto files = collect_images(in_root);
    fs::create_directories(out_root);

    std::mutex io_mutex;
    parallel_for(static_cast<int>(files.size()), a.jobs, [&](int i) {
        const fs::path& src = files[static_cast<size_t>(i)];
        const fs::path rel = fs::is_regular_file(in_root)
                                 ? src.filename()
                                 : fs::relative(src, in_root);
        ImageBuffer img = read_image(src.string());
        RandomStream rng = RandomStream(a.seed).child(static_cast<uint64_t>(i));
        const DegradationRecord rec = sample_degradation(level, rng);
        ImageBuffer lq = degrade(img, rec);

        fs::path dst = out_root / rel;
        dst.replace_extension(".png");
        {
            std::lock_guard<std::mutex> lock(io_mutex);
            fs::create_directories(dst.parent_path());
        }
        write_png(dst.string(), lq);
        std::ofstream sidecar(dst.string() + ".json");
        sidecar << record_to_json(rec).dump(2) << "\n";
    });

    Manifest m = new_manifest("degrade", a.seed);
    m.set("level", a.level);
    m.set("in", a.in);
    m.set("out", a.out);
    m.set("count", static_cast<int64_t>(files.size()));
    m.write((out_root / "manifest.txt").string());
    std::printf("degraded %zu images (%s) into %s\n", files.size(), a.level.c_str(),
                a.out.c_str());
}

// ---------------------------------------------------------------------------

struct TrainBaseArgs {
    std::string data;
    std::string out;
    int steps = 3000;
    double lr = 1e-3;
    uint64_t seed = 0;
    double crop_prob = 0.5;
    double p_hq = 0.03;
    std::string level = "heavy";
    int size = 64;
    std::string log_path;
};

void run_train_base(const TrainBaseArgs& a) {
    IdentityDataset ds = load_dataset(a.data);
    DenoiserConfig cfg;
    cfg.image_size = a.size;
    Denoiser<float> model(cfg, a.seed);
    NoiseSchedule sched = default_schedule();

    BaseTrainConfig tc;
    tc.steps = a.steps;
    tc.lr = a.lr;
    tc.seed = a.seed;
    tc.crop_prob = a.crop_prob;
    tc.p_hq = a.p_hq;
    tc.level = level_from_name(a.level);
    tc.crop_size = a.size;

    std::ofstream log;
    if (!a.log_path.empty()) {
        log.open(a.log_path);
        if (!log) throw IoError("cannot open log: " + a.log_path);
    }
    train_base(model, ds, tc, sched, [&](const TrainLogRecord& r) {
        if (log.is_open()) {
            log << r.step << " " << r.l_diff << "\n";
        }
        if (r.step % 200 == 0) {
            std::printf("step %5d  l_diff %.4f\n", r.step, r.l_diff);
            std::fflush(stdout);
        }
    });

    save_base_checkpoint(a.out, model);
    Manifest m = new_manifest("train-base", a.seed);
    m.set("data", a.data);
    m.set("out", a.out);
    m.set("steps", a.steps);
    m.set("lr", a.lr);
    m.set("crop_prob", a.crop_prob);
    m.set("p_hq", a.p_hq);
    m.set("level", a.level);
    m.set("size", a.size);
    m.set("checkpoint_sha256", sha256_file(a.out));
    m.write(a.out + ".manifest");
    std::printf("saved base checkpoint to %s\n", a.out.c_str());
}

// ---------------------------------------------------------------------------

struct PersonalizeArgs {
    std::string base;
    std::string refs;
    std::string out;
    std::string train_dir;
    int iters = 500;
    int n_ref = 5;
    int batch = 2;
    uint64_t seed = 0;
    double lr_adapter = 1e-4;
    double lr_token = 5e-3;
    double lambda_gen = 0.1;
    double lambda_pers = 0.01;
    double lambda_att = 1.0;
    std::string log_path;
};

void run_personalize(const PersonalizeArgs& a) {
    Denoiser<float> model = load_base_checkpoint<float>(a.base);
    NoiseSchedule sched = default_schedule();

    auto ref_files = collect_images(a.refs);
    ReferenceSet refs;
    refs.identity_id = fs::path(a.refs).filename().string();
    const int take = std::min<int>(a.n_ref, static_cast<int>(ref_files.size()));
    check(take >= 1, "personalize: no reference images");
    for (int i = 0; i < take; ++i) {
        refs.images.push_back(read_image(ref_files[static_cast<size_t>(i)].string()));
    }

    std::vector<ImageBuffer> train_images;
    if (!a.train_dir.empty()) {
        for (const auto& f : collect_images(a.train_dir)) {
            train_images.push_back(read_image(f.string()));
        }
    }

    PersonalizeConfig pc;
    pc.iterations = a.iters;
    pc.n_ref = take;
    pc.batch = a.batch;
    pc.seed = a.seed;
    pc.lr_adapter = a.lr_adapter;
    pc.lr_token = a.lr_token;
    pc.loss.lambda_gen = a.lambda_gen;
    pc.loss.lambda_pers = a.lambda_pers;
    pc.lambda_att = a.lambda_att;
    pc.crop_size = model.cfg.image_size;

    std::ofstream log;
    if (!a.log_path.empty()) {
        log.open(a.log_path);
        if (!log) throw IoError("cannot open log: " + a.log_path);
    }
    auto state = personalize(model, refs, train_images, pc, sched,
                             [&](const TrainLogRecord& r) {
                                 if (log.is_open()) {
                                     log << r.step << " " << r.l_diff << " " << r.l_gen
                                         << " " << r.l_pers << " " << r.total << "\n";
                                 }
                                 if (r.step % 100 == 0) {
                                     std::printf("iter %4d  diff %.4f  gen %.4f  pers %.5f\n",
                                                 r.step, r.l_diff, r.l_gen, r.l_pers);
                                     std::fflush(stdout);
                                 }
                             });

    save_personalization(a.out, state);
    Manifest m = new_manifest("personalize", a.seed);
    m.set("base", a.base);
    m.set("refs", a.refs);
    m.set("out", a.out);
    m.set("iters", a.iters);
    m.set("n_ref", take);
    m.set("batch", a.batch);
    m.set("lambda_gen", a.lambda_gen);
    m.set("lambda_pers", a.lambda_pers);
    m.set("lambda_att", a.lambda_att);
    m.set("base_sha256", base_weights_sha256(model));
    m.set("state_sha256", sha256_file(a.out));
    m.write(a.out + ".manifest");
    std::printf("saved personalization state to %s\n", a.out.c_str());
}

// ---------------------------------------------------------------------------

struct RestoreArgs {
    std::string in;
    std::string out;
    std::string base;
    std::string state;
    int tile = 32;
    int overlap = 16;
    double lambda_cfg = 4.0;
    int steps = 200;
    uint64_t seed = 0;
    int upscale = 1;
    double lambda_att = 1.0;
    bool null_lq_negative = false;
};

void run_restore(const RestoreArgs& a) {
    Denoiser<float> model = load_base_checkpoint<float>(a.base);
    NoiseSchedule sched = default_schedule();

    PersonalizationState<float> state;
    PersonalizationState<float>* pstate = nullptr;
    if (!a.state.empty()) {
        state = load_personalization<float>(a.state, model);
        pstate = &state;
    }

    ImageBuffer img = read_image(a.in);
    if (a.upscale > 1) {
        img = resize_bicubic(img, img.height() * a.upscale, img.width() * a.upscale);
    }
    // The UNet needs latent dims divisible by 4.
    const int round_to = 2 * kLatentFactor * 2;
    if (img.height() % round_to != 0 || img.width() % round_to != 0) {
        const int nh = std::max(round_to, (img.height() + round_to - 1) / round_to * round_to);
        const int nw = std::max(round_to, (img.width() + round_to - 1) / round_to * round_to);
        img = resize_bicubic(img, nh, nw);
    }

    SamplerConfig sc;
    sc.num_steps = a.steps;
    sc.lambda_cfg = a.lambda_cfg;
    sc.seed = a.seed;
    sc.lambda_att = a.lambda_att;
    sc.null_lq_negative = a.null_lq_negative;

    const int lh = img.height() / kLatentFactor;
    const int lw = img.width() / kLatentFactor;
    ImageBuffer out;
    bool tiled = false;
    if (lh <= a.tile && lw <= a.tile) {
        out = sample(model, img, pstate, sc, sched);
    } else {
        tiled = true;
        TilePlan plan = plan_tiles(lh, lw, a.tile, a.overlap);
        out = restore_tiled(model, img, pstate, sc, sched, plan);
    }
    write_png(a.out, out);

    Manifest m = new_manifest("restore", a.seed);
    m.set("in", a.in);
    m.set("out", a.out);
    m.set("base", a.base);
    m.set("state", a.state.empty() ? "-" : a.state);
    m.set("tile", a.tile);
    m.set("overlap", a.overlap);
    m.set("cfg", a.lambda_cfg);
    m.set("steps", a.steps);
    m.set("upscale", a.upscale);
    m.set("lambda_att", a.lambda_att);
    m.set("null_lq_negative", a.null_lq_negative);
    m.set("tiled", tiled);
    m.set("output_sha256", sha256_file(a.out));
    m.write(a.out + ".manifest");
    std::printf("restored %s -> %s (%s)\n", a.in.c_str(), a.out.c_str(),
                tiled ? "tiled" : "single tile");
}

// ---------------------------------------------------------------------------

struct EvaluateArgs {
    std::string restored;
    std::string gt;
    std::string out = "report.csv";
    int jobs = 1;
};

void run_evaluate(const EvaluateArgs& a) {
    auto restored_files = collect_images(a.restored);
    std::vector<EvalPair> pairs;
    for (const auto& rf : restored_files) {
        const fs::path rel = fs::relative(rf, a.restored);
        fs::path gt_path = fs::path(a.gt) / rel;
        if (!fs::exists(gt_path)) {
            gt_path.replace_extension(".png");
            if (!fs::exists(gt_path)) continue;
        }
        EvalPair p;
        p.name = rel.generic_string();
        p.restored = read_image(rf.string());
        p.ground_truth = read_image(gt_path.string());
        pairs.push_back(std::move(p));
    }
    if (pairs.empty()) throw IoError("no aligned (restored, gt) pairs found");

    PatchGridEmbedder embedder;
    BlobLandmarkDetector detector;
    MetricsReport report = evaluate_dataset(pairs, embedder, detector);

    std::ofstream csv(a.out);
    if (!csv) throw IoError("cannot write report: " + a.out);
    csv << report_to_csv(report);
    csv.close();
    std::fputs(report_to_table(report).c_str(), stdout);

    Manifest m = new_manifest("evaluate", 0);
    m.set("restored", a.restored);
    m.set("gt", a.gt);
    m.set("out", a.out);
    m.set("pairs", static_cast<int64_t>(pairs.size()));
    m.set("report_sha256", sha256_file(a.out));
    m.write(a.out + ".manifest");
}


// Flat key = value config support: the file's entries become flags unless the
// same flag already appears on the command line, so explicit flags win and
// unknown keys fail parsing like any unknown flag.
std::vector<std::string> expand_config(int argc, char** argv) {
    std::vector<std::string> args;
    std::string config_path;
    for (int i = 1; i < argc; ++i) {
        std::string a = argv[i];
        if (a == "--config") {
            if (i + 1 >= argc) throw InvalidArgument("--config needs a file path");
            config_path = argv[++i];
            continue;
        }
        if (a.rfind("--config=", 0) == 0) {
            config_path = a.substr(9);
            continue;
        }
        args.push_back(std::move(a));
    }
    if (config_path.empty()) return args;

    std::ifstream f(config_path);
    if (!f) throw IoError("cannot read config: " + config_path);
    auto has_flag = [&](const std::string& flag) {
        for (const auto& a : args) {
            if (a == flag || a.rfind(flag + "=", 0) == 0) return true;
        }
        return false;
    };
    std::string line;
    while (std::getline(f, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t\r");
            const auto b = s.find_last_not_of(" \t\r");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) continue;
        const std::string flag = "--" + key;
        if (!has_flag(flag)) {
            args.push_back(flag);
            args.push_back(value);
        }
    }
    return args;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"personalized face restoration (desk scale)"};
    app.require_subcommand(1);

    MakeToyDataArgs toy;
    auto* toy_cmd = app.add_subcommand("make-toy-data",
                                       "generate a synthetic identity dataset");
    toy_cmd->add_option("--out", toy.out, "output dataset directory")->required();
    toy_cmd->add_option("--identities", toy.identities, "number of identities");
    toy_cmd->add_option("--images-per", toy.images_per, "images per identity");
    toy_cmd->add_option("--size", toy.size, "render size in pixels");
    toy_cmd->add_option("--seed", toy.seed, "random seed");

    DegradeArgs deg;
    auto* deg_cmd = app.add_subcommand("degrade", "apply the synthetic degradations");
    deg_cmd->add_option("--level", deg.level, "light or heavy")
        ->check(CLI::IsMember({"light", "heavy"}));
    deg_cmd->add_option("--seed", deg.seed, "random seed");
    deg_cmd->add_option("--in", deg.in, "input image or directory")->required();
    deg_cmd->add_option("--out", deg.out, "output directory")->required();
    deg_cmd->add_option("--jobs", deg.jobs, "worker threads");

    TrainBaseArgs tb;
    auto* tb_cmd = app.add_subcommand("train-base", "train the base restoration model");
    tb_cmd->add_option("--data", tb.data, "dataset directory")->required();
    tb_cmd->add_option("--out", tb.out, "output checkpoint path")->required();
    tb_cmd->add_option("--steps", tb.steps, "training steps");
    tb_cmd->add_option("--lr", tb.lr, "learning rate");
    tb_cmd->add_option("--seed", tb.seed, "random seed");
    tb_cmd->add_option("--crop-prob", tb.crop_prob, "random-crop probability");
    tb_cmd->add_option("--p-hq", tb.p_hq, "clean passthrough probability");
    tb_cmd->add_option("--level", tb.level, "degradation level")
        ->check(CLI::IsMember({"light", "heavy"}));
    tb_cmd->add_option("--size", tb.size, "working resolution");
    tb_cmd->add_option("--log", tb.log_path, "line-delimited loss log");

    PersonalizeArgs pz;
    auto* pz_cmd = app.add_subcommand("personalize", "fine-tune adapters for one identity");
    pz_cmd->add_option("--base", pz.base, "base checkpoint")->required();
    pz_cmd->add_option("--refs", pz.refs, "reference image directory")->required();
    pz_cmd->add_option("--out", pz.out, "output personalization state")->required();
    pz_cmd->add_option("--train", pz.train_dir, "training images (defaults to refs)");
    pz_cmd->add_option("--iters", pz.iters, "personalization iterations");
    pz_cmd->add_option("--n-ref", pz.n_ref, "number of references to use");
    pz_cmd->add_option("--batch", pz.batch, "batch size");
    pz_cmd->add_option("--seed", pz.seed, "random seed");
    pz_cmd->add_option("--lr-adapter", pz.lr_adapter, "adapter learning rate");
    pz_cmd->add_option("--lr-token", pz.lr_token, "token embedding learning rate");
    pz_cmd->add_option("--lambda-gen", pz.lambda_gen, "generative regularizer weight");
    pz_cmd->add_option("--lambda-pers", pz.lambda_pers, "attention regularizer weight");
    pz_cmd->add_option("--lambda-att", pz.lambda_att, "image cross-attention weight");
    pz_cmd->add_option("--log", pz.log_path, "line-delimited loss log");

    RestoreArgs rs;
    auto* rs_cmd = app.add_subcommand("restore", "restore one image");
    rs_cmd->add_option("--in", rs.in, "input image (png or jpeg)")->required();
    rs_cmd->add_option("--out", rs.out, "output png")->required();
    rs_cmd->add_option("--base", rs.base, "base checkpoint")->required();
    rs_cmd->add_option("--state", rs.state, "personalization state (optional)");
    rs_cmd->add_option("--tile", rs.tile, "tile size in latent pixels");
    rs_cmd->add_option("--overlap", rs.overlap, "tile overlap in latent pixels");
    rs_cmd->add_option("--cfg", rs.lambda_cfg, "classifier-free guidance weight");
    rs_cmd->add_option("--steps", rs.steps, "sampling steps");
    rs_cmd->add_option("--seed", rs.seed, "random seed");
    rs_cmd->add_option("--upscale", rs.upscale, "bicubic pre-upsampling factor");
    rs_cmd->add_option("--lambda-att", rs.lambda_att, "image cross-attention weight");
    rs_cmd->add_flag("--null-lq-neg", rs.null_lq_negative,
                     "null-condition the LQ image on the negative branch");

    EvaluateArgs ev;
    auto* ev_cmd = app.add_subcommand("evaluate", "metrics over (restored, gt) pairs");
    ev_cmd->add_option("--restored", ev.restored, "restored image directory")->required();
    ev_cmd->add_option("--gt", ev.gt, "ground-truth image directory")->required();
    ev_cmd->add_option("--out", ev.out, "output csv path");
    ev_cmd->add_option("--jobs", ev.jobs, "worker threads");

    app.footer("Each subcommand also accepts --config FILE, a flat key = value\n"
               "file whose entries stand in for flags; explicit flags override it.");

    try {
        std::vector<std::string> args = expand_config(argc, argv);
        std::vector<const char*> cargv;
        cargv.push_back(argv[0]);
        for (const auto& a : args) cargv.push_back(a.c_str());
        app.parse(static_cast<int>(cargv.size()), cargv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::fprintf(stderr, "%s\n", e.what());
        std::fprintf(stderr, "%s\n", app.help().c_str());
        return 2;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }

    try {
        if (toy_cmd->parsed()) run_make_toy_data(toy);
        if (deg_cmd->parsed()) run_degrade(deg);
        if (tb_cmd->parsed()) run_train_base(tb);
        if (pz_cmd->parsed()) run_personalize(pz);
        if (rs_cmd->parsed()) run_restore(rs);
        if (ev_cmd->parsed()) run_evaluate(ev);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
