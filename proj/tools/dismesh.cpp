// dismesh: command-line entry point for data generation, training,
// evaluation, the downstream tasks and the inference service.

#include <algorithm>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <spdlog/sinks/stdout_sinks.h>
#include <spdlog/spdlog.h>

#include "dismesh/eval.hpp"
#include "dismesh/run_config.hpp"
#include "dismesh/serve.hpp"
#include "dismesh/synth.hpp"
#include "dismesh/tasks.hpp"
#include "dismesh/trainer.hpp"

namespace fs = std::filesystem;
using namespace dismesh;

namespace {

void configure_logging() {
    auto logger = spdlog::stderr_logger_mt("dismesh");
    spdlog::set_default_logger(logger);
    spdlog::set_pattern("[%H:%M:%S] [%l] %v");
    const char* env = std::getenv("DISMESH_LOG");
    const std::string level = env ? env : "info";
    if (level == "error") spdlog::set_level(spdlog::level::err);
    else if (level == "info") spdlog::set_level(spdlog::level::info);
    else if (level == "debug") spdlog::set_level(spdlog::level::debug);
    else throw ValidationError("DISMESH_LOG must be one of error, info, debug (got '" + level + "')");
}

/// A run directory resolves to its best checkpoint.
fs::path resolve_checkpoint(const fs::path& p) {
    if (fs::exists(p / "config.json")) return p;
    if (fs::exists(p / "best" / "config.json")) return p / "best";
    throw IoError("no checkpoint at " + p.string() + " (expected config.json or best/config.json)");
}

std::shared_ptr<TrainedModel> load_model(const fs::path& p) {
    const auto dir = resolve_checkpoint(p);
    spdlog::info("loading checkpoint {}", dir.string());
    return load_checkpoint(dir).model;
}

std::vector<TriangleMesh> load_sequence(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("sequence directory not found: " + dir.string());
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".obj") files.push_back(e.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw ValidationError("sequence directory has no .obj files: " + dir.string());
    std::vector<TriangleMesh> out;
    for (const auto& f : files) out.push_back(load_obj(f));
    return out;
}

std::string fmt6(double v) { return fmt::format("{:.6f}", v); }

std::string fmt_opt(const std::optional<double>& v) { return v ? fmt6(*v) : "null"; }

struct Options {
    std::string config;
    std::uint64_t seed = 0;
    std::size_t subjects = 20, poses = 30;
    std::string data = "data", out, checkpoint = "run";
    std::size_t epochs = 200, batch_size = 16;
    double lr = 1e-3;
    bool no_wall_time = false;
    std::string shape_from, pose_from, seq_a, seq_b, query, gallery;
    std::size_t n = 8;
    std::string host = "127.0.0.1";
    int port = 8080;
    std::size_t max_body = kDefaultMaxBody;
    std::vector<std::string> cors{"*"};
};

/// Config file first, then every flag the user actually passed.
RunConfig resolve(const Options& o, CLI::App* sub) {
    RunConfig rc = o.config.empty() ? RunConfig{} : RunConfig::load(o.config);
    auto given = [&](const char* name) { return sub->get_option_no_throw(name) && sub->count(name) > 0; };
    if (given("--seed")) rc.seed = o.seed;
    if (given("--subjects")) rc.subjects = o.subjects;
    if (given("--poses")) rc.poses = o.poses;
    if (given("--data")) rc.data_dir = o.data;
    if (given("--epochs")) rc.trainer.epochs = o.epochs;
    if (given("--batch-size")) rc.trainer.batch_size = o.batch_size;
    if (given("--lr")) rc.trainer.adam.learning_rate = o.lr;
    if (given("--no-wall-time")) rc.trainer.record_wall_time = false;
    rc.trainer.validate();
    return rc;
}

int cmd_generate(const Options& o, CLI::App* sub) {
    auto rc = resolve(o, sub);
    const fs::path out = o.out.empty() ? fs::path(rc.data_dir) : fs::path(o.out);
    const auto m = sample_dataset(rc.subjects, rc.poses, rc.seed, out);
    std::cout << "generated " << m.samples.size() << " meshes (" << rc.subjects << " subjects x " << rc.poses
              << " poses) -> " << (out / "manifest.json").string() << "\n";
    return 0;
}

int cmd_train(const Options& o, CLI::App* sub) {
    auto rc = resolve(o, sub);
    const fs::path out = o.out.empty() ? fs::path(rc.run_dir) : fs::path(o.out);
    rc.run_dir = out.string();
    const auto manifest = load_manifest(rc.data_dir);
    io::ensure_directory(out);
    io::write_file(out / "run_config.json", rc.to_json().dump(2) + "\n");
    const auto s = train(manifest, rc.model, rc.trainer, out, rc.seed);
    std::cout << "trained " << s.epochs_run << " epochs, best " << s.validation_split << " RMSE " << fmt6(s.best_val_rmse)
              << " at epoch " << s.best_epoch << " (mean-mesh baseline " << fmt6(s.baseline_rmse) << ") -> "
              << out.string() << "\n";
    return 0;
}

int cmd_eval(const Options& o, CLI::App* sub) {
    auto rc = resolve(o, sub);
    const auto model = load_model(o.checkpoint);
    const auto report = evaluate(*model, load_manifest(rc.data_dir), rc.seed);
    const fs::path out = o.out.empty() ? fs::path("eval") : fs::path(o.out);
    io::ensure_directory(out);
    io::write_file(out / "eval_report.json", report.to_json().dump(2) + "\n");
    std::cout << "recon_rmse " << fmt_opt(report.recon_rmse) << ", match_p@1 " << fmt_opt(report.match_precision_at_1)
              << ", sync " << fmt_opt(report.sync_frame_accuracy) << " -> " << (out / "eval_report.json").string() << "\n";
    return 0;
}

int cmd_transfer(const Options& o) {
    const auto model = load_model(o.checkpoint);
    const auto mesh = transfer(*model, load_obj(o.shape_from), load_obj(o.pose_from));
    const fs::path out = o.out.empty() ? fs::path("transfer.obj") : fs::path(o.out);
    if (out.has_parent_path()) io::ensure_directory(out.parent_path());
    save_obj(mesh, out);
    std::cout << "shape of " << o.shape_from << " in the pose of " << o.pose_from << " -> " << out.string() << "\n";
    return 0;
}

int cmd_sync(const Options& o) {
    const auto model = load_model(o.checkpoint);
    const auto a = load_sequence(o.seq_a), b = load_sequence(o.seq_b);
    const auto path = synchronize(*model, a, b);
    nlohmann::json j;
    j["cost"] = path.cost;
    j["path"] = nlohmann::json::array();
    for (auto [i, k] : path.steps) j["path"].push_back({i, k});
    const fs::path out = o.out.empty() ? fs::path("sync.json") : fs::path(o.out);
    if (out.has_parent_path()) io::ensure_directory(out.parent_path());
    io::write_file(out, j.dump(2) + "\n");
    std::cout << "aligned " << a.size() << " x " << b.size() << " frames, " << path.steps.size() << " steps, cost "
              << fmt6(path.cost) << " -> " << out.string() << "\n";
    return 0;
}

int cmd_match(const Options& o) {
    const auto model = load_model(o.checkpoint);
    nlohmann::json entries;
    try {
        entries = nlohmann::json::parse(io::read_file(o.gallery));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(o.gallery + ": " + e.what());
    }
    if (!entries.is_array() || entries.empty()) throw ValidationError(o.gallery + ": expected a non-empty array of {mesh, subject_id}");
    const auto base = fs::path(o.gallery).parent_path();
    std::vector<std::pair<TriangleMesh, int>> gallery;
    for (const auto& e : entries) {
        reject_unknown_keys(e, {"mesh", "subject_id"}, "gallery entry");
        fs::path p = e.at("mesh").get<std::string>();
        if (p.is_relative()) p = base / p;
        gallery.emplace_back(load_obj(p), e.at("subject_id").get<int>());
    }
    const auto ranked = match(*model, load_obj(o.query), gallery);
    nlohmann::json j = nlohmann::json::array();
    for (std::size_t r = 0; r < ranked.size(); ++r)
        j.push_back({{"rank", r + 1},
                     {"gallery_index", ranked[r].gallery_index},
                     {"subject_id", ranked[r].subject_id},
                     {"distance", ranked[r].distance}});
    const fs::path out = o.out.empty() ? fs::path("match.json") : fs::path(o.out);
    if (out.has_parent_path()) io::ensure_directory(out.parent_path());
    io::write_file(out, j.dump(2) + "\n");
    std::cout << "top match subject " << ranked.front().subject_id << " (distance " << fmt6(ranked.front().distance)
              << ") of " << ranked.size() << " -> " << out.string() << "\n";
    return 0;
}

int cmd_sample(const Options& o, CLI::App* sub) {
    auto rc = resolve(o, sub);
    const auto model = load_model(o.checkpoint);
    std::vector<TriangleMesh> reference;
    if (sub->count("--data") > 0) {
        const auto manifest = load_manifest(rc.data_dir);
        const auto all = load_dataset_meshes(manifest);
        for (auto i : manifest.samples_in(Split::Train)) reference.push_back(all[i]);
    }
    std::vector<const TriangleMesh*> refs;
    for (const auto& m : reference) refs.push_back(&m);
    const auto s = sample_prior(*model, o.n, rc.seed, refs);
    const fs::path out = o.out.empty() ? fs::path("samples") : fs::path(o.out);
    io::ensure_directory(out);
    for (std::size_t k = 0; k < s.meshes.size(); ++k) save_obj(s.meshes[k], out / fmt::format("sample_{:03d}.obj", k));
    nlohmann::json j{{"n", o.n},
                     {"seed", rc.seed},
                     {"diversity", s.diversity ? nlohmann::json(*s.diversity) : nlohmann::json(nullptr)},
                     {"specificity", s.specificity ? nlohmann::json(*s.specificity) : nlohmann::json(nullptr)}};
    io::write_file(out / "samples.json", j.dump(2) + "\n");
    std::cout << "sampled " << o.n << " meshes, diversity " << fmt_opt(s.diversity) << ", specificity "
              << fmt_opt(s.specificity) << " -> " << out.string() << "\n";
    return 0;
}

int cmd_serve(const Options& o) {
    std::shared_ptr<const TrainedModel> model = load_model(o.checkpoint);
    auto api = std::make_shared<const InferenceApi>(model, o.max_body);
    ServeOptions opt;
    opt.host = o.host;
    opt.port = o.port;
    opt.max_body = o.max_body;
    opt.cors_origins = o.cors;
    httplib::Server server;
    mount(server, api, opt);
    if (!server.bind_to_port(opt.host, opt.port)) throw IoError("cannot bind " + opt.host + ":" + std::to_string(opt.port));
    std::cout << "serving model " << api->model_hash() << " -> http://" << opt.host << ":" << opt.port << "\n" << std::flush;
    if (!server.listen_after_bind()) throw IoError("server stopped unexpectedly");
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    keep_freed_memory();
    CLI::App app{"Disentangled mesh VAE: synthetic data, training, evaluation and inference."};
    app.name("dismesh");
    app.require_subcommand(1);
    app.option_defaults()->always_capture_default();
    app.footer("Exit codes: 0 success, 1 invalid input, 2 runtime failure. DISMESH_LOG=error|info|debug sets verbosity.");

    Options o;
    auto add_config = [&](CLI::App* s) {
        s->add_option("--config", o.config, "RunConfig JSON file; flags given on the command line override it");
    };
    auto add_seed = [&](CLI::App* s) { s->add_option("--seed", o.seed, "Random seed"); };
    auto add_checkpoint = [&](CLI::App* s) {
        s->add_option("--checkpoint", o.checkpoint, "Checkpoint directory, or a run directory (uses its best/)");
    };

    auto* gen = app.add_subcommand("generate-data", "Write the synthetic tube dataset and its manifest");
    add_config(gen);
    gen->add_option("--subjects", o.subjects, "Number of subjects")->check(CLI::PositiveNumber);
    gen->add_option("--poses", o.poses, "Poses per subject")->check(CLI::PositiveNumber);
    add_seed(gen);
    gen->add_option("--out", o.out, "Output directory (default: paths.data of the config, else 'data')");

    auto* tr = app.add_subcommand("train", "Train a model; writes metrics.jsonl, best/ and last/ checkpoints");
    add_config(tr);
    tr->add_option("--data", o.data, "Dataset directory holding manifest.json");
    tr->add_option("--epochs", o.epochs, "Training epochs")->check(CLI::PositiveNumber);
    tr->add_option("--batch-size", o.batch_size, "Anchor meshes per batch")->check(CLI::PositiveNumber);
    tr->add_option("--lr", o.lr, "Adam learning rate")->check(CLI::PositiveNumber);
    tr->add_flag("--no-wall-time", o.no_wall_time, "Write wall_time_s as null so metrics.jsonl is reproducible");
    add_seed(tr);
    tr->add_option("--out", o.out, "Run directory (default: paths.run of the config, else 'run')");

    auto* ev = app.add_subcommand("eval", "Evaluate a checkpoint on the test split; writes eval_report.json");
    add_config(ev);
    add_checkpoint(ev);
    ev->add_option("--data", o.data, "Dataset directory holding manifest.json");
    add_seed(ev);
    ev->add_option("--out", o.out, "Output directory (default: 'eval')");

    auto* tf = app.add_subcommand("transfer", "Combine the shape of one mesh with the pose of another");
    add_checkpoint(tf);
    tf->add_option("--shape-from", o.shape_from, "OBJ supplying the shape")->required();
    tf->add_option("--pose-from", o.pose_from, "OBJ supplying the pose")->required();
    tf->add_option("--out", o.out, "Output OBJ (default: 'transfer.obj')");

    auto* sy = app.add_subcommand("sync", "Align two mesh sequences by pose (dynamic time warping)");
    add_checkpoint(sy);
    sy->add_option("--seq-a", o.seq_a, "Directory of OBJ frames, in file-name order")->required();
    sy->add_option("--seq-b", o.seq_b, "Directory of OBJ frames, in file-name order")->required();
    sy->add_option("--out", o.out, "Output JSON path (default: 'sync.json')");

    auto* ma = app.add_subcommand("match", "Rank gallery subjects by shape similarity to a query mesh");
    add_checkpoint(ma);
    ma->add_option("--query", o.query, "Query OBJ")->required();
    ma->add_option("--gallery", o.gallery, "JSON array of {\"mesh\": path, \"subject_id\": int}")->required();
    ma->add_option("--out", o.out, "Output JSON path (default: 'match.json')");

    auto* sa = app.add_subcommand("sample", "Decode random codes drawn from the prior");
    add_config(sa);
    add_checkpoint(sa);
    sa->add_option("--n", o.n, "Number of samples")->check(CLI::PositiveNumber);
    add_seed(sa);
    sa->add_option("--data", o.data, "Dataset for the specificity metric (omit to skip it)");
    sa->add_option("--out", o.out, "Output directory (default: 'samples')");

    auto* se = app.add_subcommand("serve", "Serve encode/decode/transfer/sample over HTTP");
    add_checkpoint(se);
    se->add_option("--host", o.host, "Bind address");
    se->add_option("--port", o.port, "TCP port")->check(CLI::Range(0, 65535));
    se->add_option("--max-body", o.max_body, "Request payload cap in bytes")->check(CLI::PositiveNumber);
    se->add_option("--cors-origin", o.cors, "Allowed CORS origin; repeat for several ('*' allows any)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n\n" << app.help();
        return 1;
    }

    try {
        configure_logging();
        if (*gen) return cmd_generate(o, gen);
        if (*tr) return cmd_train(o, tr);
        if (*ev) return cmd_eval(o, ev);
        if (*tf) return cmd_transfer(o);
        if (*sy) return cmd_sync(o);
        if (*ma) return cmd_match(o);
        if (*sa) return cmd_sample(o, sa);
        if (*se) return cmd_serve(o);
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
