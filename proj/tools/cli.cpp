#include "cli.hpp"

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <random>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "vistok/bench.hpp"
#include "vistok/io.hpp"
#include "vistok/solver.hpp"
#include "vistok/suites.hpp"
#include "vistok/tokenizer.hpp"

namespace vistok::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

constexpr int kManifestVersion = 1;
constexpr const char* kManifestName = "manifest.json";
constexpr const char* kScenesName = "scenes.vtk";
constexpr const char* kCheckpointName = "checkpoint.vtk";
constexpr const char* kMetricsName = "metrics.jsonl";

// Thrown when a suite or replay comparison fails; maps to exit code 2.
struct InvariantFailure : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Relative data paths resolve against VISTOK_DATA_ROOT when it is set.
fs::path data_path(const std::string& p) {
    fs::path path(p);
    if (path.is_relative()) {
        if (const char* root = std::getenv("VISTOK_DATA_ROOT"); root && *root) path = fs::path(root) / path;
    }
    return fs::absolute(path).lexically_normal();
}

// A run directory or a file inside one.
fs::path artifact_file(const fs::path& p, const char* default_name) {
    return fs::is_directory(p) ? p / default_name : p;
}

std::string file_hash(const fs::path& p) { return io::content_hash(io::read_file(p)); }

json read_json(const fs::path& p) {
    try {
        return json::parse(io::read_file(p));
    } catch (const json::exception& e) {
        throw IoError(p.string() + ": " + e.what());
    }
}

// Config file contents under the defaults; flags are applied by the caller afterwards.
json layered(json defaults, const std::string& config_path) {
    if (!config_path.empty()) defaults.merge_patch(read_json(data_path(config_path)));
    return defaults;
}

std::vector<bench::SyntheticScene> load_scenes(const fs::path& p) {
    return bench::get_scenes(io::load_checkpoint(artifact_file(p, kScenesName)));
}

std::vector<DepthMap> depth_maps(const std::vector<bench::SyntheticScene>& scenes) {
    std::vector<DepthMap> out;
    for (const auto& s : scenes) out.push_back(s.depth);
    return out;
}

std::vector<DepthMap> mask_maps(const std::vector<bench::SyntheticScene>& scenes) {
    std::vector<DepthMap> out;
    for (const auto& s : scenes)
        for (const auto& inst : s.instances) {
            Tensor<float> v({kMaskCrop, kMaskCrop});
            for (std::size_t i = 0; i < v.numel(); ++i) v[i] = inst.mask64[i];
            out.push_back(DepthMap::all_valid(std::move(v)));
        }
    return out;
}

TokenizerTask parse_tokenizer_task(const std::string& s) {
    if (s == "depth") return TokenizerTask::depth;
    if (s == "mask") return TokenizerTask::mask;
    throw ContractError("unknown tokenizer task '" + s + "' (expected depth or mask)");
}

std::vector<std::string> split_tasks(const std::string& s) {
    std::vector<std::string> out;
    std::stringstream ss(s);
    for (std::string t; std::getline(ss, t, ',');)
        if (!t.empty()) out.push_back(t);
    return out;
}

// One command invocation: resolved config, file inputs by flag name, output directory.
struct Run {
    std::string command;
    json config;
    std::map<std::string, fs::path> inputs;
    fs::path out;
    std::uint64_t seed = 0;
};

json run_manifest(const Run& run, const std::vector<std::string>& outputs) {
    json inputs = json::object();
    for (const auto& [flag, path] : run.inputs) inputs[flag] = {{"path", path.string()}, {"hash", file_hash(path)}};
    json outs = json::object();
    for (const auto& name : outputs) outs[name] = file_hash(run.out / name);
    return {{"version", kManifestVersion}, {"command", run.command}, {"seed", run.seed},
            {"config", run.config},        {"inputs", inputs},       {"outputs", outs},
            {"out", run.out.string()}};
}

void write_manifest(const Run& run, const std::vector<std::string>& outputs) {
    io::atomic_write(run.out / kManifestName, run_manifest(run, outputs).dump(2) + "\n");
}

void write_jsonl(const fs::path& path, const std::vector<std::string>& lines) {
    std::string all;
    for (const auto& l : lines) all += l + "\n";
    io::atomic_write(path, all);
}

// Rows already logged for the epochs a resumed checkpoint covers.
std::vector<std::string> resume_lines(const fs::path& path, int epochs_done) {
    std::vector<std::string> lines;
    if (fs::exists(path)) {
        std::istringstream in(io::read_file(path));
        for (std::string l; std::getline(in, l);)
            if (!l.empty()) lines.push_back(l);
    }
    if (static_cast<int>(lines.size()) < epochs_done)
        throw IoError(path.string() + " has fewer rows than the checkpoint has epochs");
    lines.resize(epochs_done);
    return lines;
}

// The epoch budget may grow on resume; everything else must match.
void check_resume_config(const io::Checkpoint& ckpt, const json& config, const json::json_pointer& epochs) {
    if (!ckpt.manifest.contains("run_config")) throw IoError("checkpoint has no run config to resume from");
    json saved = ckpt.manifest.at("run_config");
    saved[epochs] = config.at(epochs);
    if (saved != config)
        throw ContractError("resolved config differs from the checkpoint's: " + json::diff(saved, config).dump());
}

fs::path prepare_out(const std::string& out) {
    const auto dir = fs::absolute(fs::path(out)).lexically_normal();
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

// ---- gen-data ----

struct GenDataArgs {
    std::string spec, config, out;
    std::optional<std::size_t> n, image_size;
    std::optional<std::uint64_t> seed;
    bool pgm = false;
};

json gen_data_defaults() { return {{"spec", bench::SceneSpec{}}, {"n", 512}, {"seed", 0}, {"pgm", false}}; }

int cmd_gen_data(const GenDataArgs& a, std::ostream& out) {
    json cfg = layered(gen_data_defaults(), a.config);
    if (!a.spec.empty()) {
        cfg["spec"].merge_patch(a.spec.front() == '{' ? json::parse(a.spec) : read_json(data_path(a.spec)));
    }
    if (a.image_size) cfg["spec"]["image_size"] = *a.image_size;
    if (a.n) cfg["n"] = *a.n;
    if (a.seed) cfg["seed"] = *a.seed;
    if (a.pgm) cfg["pgm"] = true;
    const auto spec = cfg.at("spec").get<bench::SceneSpec>();
    spec.validate();
    cfg["spec"] = spec;

    Run run{"gen-data", cfg, {}, prepare_out(a.out), cfg.at("seed").get<std::uint64_t>()};
    const auto n = cfg.at("n").get<std::size_t>();
    std::vector<bench::SyntheticScene> scenes;
    for (std::size_t i = 0; i < n; ++i) {
        std::seed_seq seq{run.seed & 0xffffffffu, run.seed >> 32, static_cast<std::uint64_t>(i)};
        std::uint64_t s = 0;
        seq.generate(reinterpret_cast<std::uint32_t*>(&s), reinterpret_cast<std::uint32_t*>(&s) + 2);
        scenes.push_back(bench::gen_scene(spec, s));
    }
    std::vector<std::string> outputs;
    if (n > 0) {
        io::Checkpoint ckpt;
        ckpt.manifest["scene_spec"] = spec;
        bench::put_scenes(ckpt, scenes);
        io::save_checkpoint(run.out / kScenesName, ckpt);
        outputs.push_back(kScenesName);
    }
    if (cfg.at("pgm").get<bool>()) {
        fs::create_directories(run.out / "preview");
        for (std::size_t i = 0; i < n; ++i) {
            const auto& s = scenes[i];
            const std::size_t H = s.image.dim(1), W = s.image.dim(2);
            Tensor<float> gray({H, W});
            for (std::size_t p = 0; p < H * W; ++p)
                gray[p] = (s.image[p] + s.image[H * W + p] + s.image[2 * H * W + p]) / 3.0f;
            char stem[48];
            std::snprintf(stem, sizeof stem, "preview/scene_%05zu", i);
            io::atomic_write(run.out / (std::string(stem) + "_image.pgm"), io::pgm_bytes(gray, 0.0f, 1.0f));
            io::atomic_write(run.out / (std::string(stem) + "_depth.pgm"),
                             io::pgm_bytes(s.depth.values, 0.0f, static_cast<float>(spec.depth_max)));
            outputs.push_back(std::string(stem) + "_image.pgm");
            outputs.push_back(std::string(stem) + "_depth.pgm");
        }
    }
    write_manifest(run, outputs);
    out << json{{"command", "gen-data"}, {"n", n}, {"out", run.out.string()}}.dump() << "\n";
    return kOk;
}

// ---- train-tokenizer ----

struct TrainCommon {
    std::string data, config, out;
    std::optional<int> epochs, batch_size;
    std::optional<double> lr;
    std::optional<std::uint64_t> seed;
    bool resume = false;
};

void apply_train_flags(json& train, const TrainCommon& a) {
    if (a.epochs) train["epochs"] = *a.epochs;
    if (a.batch_size) train["batch_size"] = *a.batch_size;
    if (a.lr) train["lr"] = *a.lr;
    if (a.seed) train["seed"] = *a.seed;
}

struct TokenizerArgs : TrainCommon {
    std::string task;
    std::optional<double> mask_ratio;
    std::optional<std::size_t> patch_size;
};

int cmd_train_tokenizer(const TokenizerArgs& a, std::ostream& out, std::ostream& err) {
    json cfg_file = a.config.empty() ? json::object() : read_json(data_path(a.config));
    const std::string task_name = !a.task.empty() ? a.task : cfg_file.value("task", std::string("depth"));
    const auto task = parse_tokenizer_task(task_name);
    json cfg = {{"task", task_name},
                {"tokenizer", task == TokenizerTask::depth ? TokenizerConfig::depth_default()
                                                           : TokenizerConfig::mask_default()},
                {"train", TrainConfig{}},
                {"mask_ratio", 0.0},
                {"patch_size", 16}};
    cfg.merge_patch(cfg_file);
    cfg["task"] = task_name;
    apply_train_flags(cfg["train"], a);
    if (a.mask_ratio) cfg["mask_ratio"] = *a.mask_ratio;
    if (a.patch_size) cfg["patch_size"] = *a.patch_size;

    const auto tok_cfg = cfg.at("tokenizer").get<TokenizerConfig>();
    if (tok_cfg.task != task) throw ContractError("config tokenizer.task disagrees with --task " + task_name);
    tok_cfg.validate();
    const auto train_cfg = cfg.at("train").get<TrainConfig>();
    train_cfg.validate();
    cfg["tokenizer"] = tok_cfg;
    cfg["train"] = train_cfg;
    std::optional<MaskAugSpec> aug;
    const double ratio = cfg.at("mask_ratio").get<double>();
    if (ratio > 0) aug = MaskAugSpec{ratio, cfg.at("patch_size").get<std::size_t>(), 0.0f};

    const auto data_file = artifact_file(data_path(a.data), kScenesName);
    Run run{"train-tokenizer", cfg, {{"data", data_file}}, prepare_out(a.out), train_cfg.seed};
    const auto scenes = load_scenes(data_file);
    const auto maps = task == TokenizerTask::depth ? depth_maps(scenes) : mask_maps(scenes);
    if (maps.empty()) throw ContractError("no training samples in " + data_file.string());
    if (aug) aug->validate(maps.front().height(), maps.front().width());

    const auto ckpt_path = run.out / kCheckpointName;
    const auto metrics_path = run.out / kMetricsName;
    TokenizerModel<float> model;
    std::unique_ptr<TokenizerTrainer<float>> trainer;
    std::vector<std::string> lines;
    if (a.resume) {
        const auto ckpt = io::load_checkpoint(ckpt_path);
        check_resume_config(ckpt, cfg, json::json_pointer("/train/epochs"));
        model = TokenizerModel<float>::load(ckpt);
        trainer = std::make_unique<TokenizerTrainer<float>>(model, train_cfg, aug);
        trainer->load(ckpt);
        lines = resume_lines(metrics_path, trainer->epoch());
        err << "resuming at epoch " << trainer->epoch() << "\n";
    } else {
        model = build_tokenizer<float>(tok_cfg, train_cfg.seed);
        trainer = std::make_unique<TokenizerTrainer<float>>(model, train_cfg, aug);
    }
    const auto checkpoint = [&] {
        write_jsonl(metrics_path, lines);
        io::Checkpoint ckpt;
        model.save(ckpt);
        trainer->save(ckpt);
        ckpt.manifest["run_config"] = cfg;
        io::save_checkpoint(ckpt_path, ckpt);
    };
    train_tokenizer(*trainer, maps, train_cfg.epochs, nullptr, [&](const TokenizerEpochMetrics& m) {
        lines.push_back(json(m).dump());
        checkpoint();
        err << "epoch " << m.epoch << " loss " << m.loss << " recon " << m.recon_metric << "\n";
    });
    if (!fs::exists(ckpt_path)) checkpoint();
    write_manifest(run, {kCheckpointName, kMetricsName});
    out << json{{"command", "train-tokenizer"}, {"epochs", trainer->epoch()}, {"out", run.out.string()}}.dump()
        << "\n";
    return kOk;
}

// ---- train-solver ----

struct SolverArgs : TrainCommon {
    std::string tasks, depth_tokenizer, mask_tokenizer, preset;
    std::optional<double> aux_weight;
    std::optional<std::size_t> max_instances;
    bool parallel_depth = false;
};

struct LoadedTokenizers {
    std::optional<TokenizerModel<float>> depth, mask;
    Tokenizers<float> view() const { return {depth ? &*depth : nullptr, mask ? &*mask : nullptr}; }
};

std::optional<TokenizerModel<float>> load_tokenizer(const fs::path& path, TokenizerTask expect) {
    const auto model = TokenizerModel<float>::load(io::load_checkpoint(path));
    if (model.config.task != expect)
        throw ContractError(path.string() + " holds a " +
                            (model.config.task == TokenizerTask::depth ? "depth" : "mask") + " tokenizer");
    return model;
}

void check_depth_grid(const SolverConfig& sc, const TokenizerConfig& tc, std::size_t H, std::size_t W) {
    const std::size_t r = static_cast<std::size_t>(tc.downsample_ratio);
    if (H % r || W % r || (H / r) * (W / r) != sc.depth_tokens)
        throw ContractError("depth_tokens " + std::to_string(sc.depth_tokens) + " vs depth tokenizer grid " +
                            std::to_string(H / r) + "x" + std::to_string(W / r) + " on " + std::to_string(H) +
                            "x" + std::to_string(W) + " scenes");
}

int cmd_train_solver(const SolverArgs& a, std::ostream& out, std::ostream& err) {
    json cfg_file = a.config.empty() ? json::object() : read_json(data_path(a.config));
    const std::string preset = !a.preset.empty() ? a.preset : cfg_file.value("preset", std::string("full"));
    if (preset != "full" && preset != "toy") throw ContractError("unknown preset '" + preset + "'");
    json cfg = {{"preset", preset},
                {"solver", preset == "toy" ? SolverConfig::toy() : SolverConfig{}},
                {"train", SolverTrainConfig{}}};
    cfg.merge_patch(cfg_file);
    cfg["preset"] = preset;
    auto& tj = cfg["train"];
    apply_train_flags(tj["train"], a);
    if (!a.tasks.empty()) tj["tasks"] = split_tasks(a.tasks);
    if (a.aux_weight) tj["loss"]["aux_weight"] = *a.aux_weight;
    if (a.max_instances) tj["max_instances"] = *a.max_instances;
    if (a.parallel_depth) tj["parallel_depth"] = true;

    const auto solver_cfg = cfg.at("solver").get<SolverConfig>();
    solver_cfg.validate();
    const auto train_cfg = cfg.at("train").get<SolverTrainConfig>();
    train_cfg.train.validate();
    train_cfg.loss.validate();
    if (train_cfg.tasks.empty()) throw ContractError("no tasks to train");
    cfg["solver"] = solver_cfg;
    cfg["train"] = train_cfg;

    const auto has = [&](SeqTask t) {
        return std::find(train_cfg.tasks.begin(), train_cfg.tasks.end(), t) != train_cfg.tasks.end();
    };
    const auto data_file = artifact_file(data_path(a.data), kScenesName);
    Run run{"train-solver", cfg, {{"data", data_file}}, prepare_out(a.out), train_cfg.train.seed};
    LoadedTokenizers toks;
    if (has(SeqTask::dep)) {
        if (a.depth_tokenizer.empty()) throw ContractError("--tasks dep needs --depth-tokenizer");
        run.inputs["depth-tokenizer"] = artifact_file(data_path(a.depth_tokenizer), kCheckpointName);
        toks.depth = load_tokenizer(run.inputs["depth-tokenizer"], TokenizerTask::depth);
    }
    if (has(SeqTask::ins)) {
        if (a.mask_tokenizer.empty()) throw ContractError("--tasks ins needs --mask-tokenizer");
        run.inputs["mask-tokenizer"] = artifact_file(data_path(a.mask_tokenizer), kCheckpointName);
        toks.mask = load_tokenizer(run.inputs["mask-tokenizer"], TokenizerTask::mask);
    }
    check_vocabulary(solver_cfg, toks.view());

    const auto scenes = load_scenes(data_file);
    if (scenes.empty()) throw ContractError("no training scenes in " + data_file.string());
    if (toks.depth)
        check_depth_grid(solver_cfg, toks.depth->config, scenes.front().depth.height(), scenes.front().depth.width());
    const auto tokens = tokenize_scenes(scenes, toks.view());

    const auto ckpt_path = run.out / kCheckpointName;
    const auto metrics_path = run.out / kMetricsName;
    SolverModel<float> model;
    std::vector<std::string> lines;
    io::Checkpoint resumed;
    if (a.resume) {
        resumed = io::load_checkpoint(ckpt_path);
        check_resume_config(resumed, cfg, json::json_pointer("/train/train/epochs"));
        model = SolverModel<float>::load(resumed);
    } else {
        model = build_solver<float>(solver_cfg, train_cfg.train.seed);
    }
    SolverTrainer<float> trainer(model, toks.view(), train_cfg);
    if (a.resume) {
        trainer.load(resumed);
        lines = resume_lines(metrics_path, trainer.epoch());
        err << "resuming at epoch " << trainer.epoch() << "\n";
    }
    json tok_refs = json::object();
    for (const auto& [flag, path] : run.inputs)
        if (flag != "data") tok_refs[flag] = {{"path", path.string()}, {"hash", file_hash(path)}};
    const auto checkpoint = [&] {
        write_jsonl(metrics_path, lines);
        io::Checkpoint ckpt;
        model.save(ckpt);
        trainer.save(ckpt);
        ckpt.manifest["run_config"] = cfg;
        ckpt.manifest["tokenizers"] = tok_refs;
        io::save_checkpoint(ckpt_path, ckpt);
    };
    train_solver(trainer, scenes, tokens, train_cfg.train.epochs, nullptr, [&](const SolverEpochMetrics& m) {
        lines.push_back(json(m).dump());
        checkpoint();
        err << "epoch " << m.epoch << " dep " << m.depth_token_loss << " ins " << m.instance_token_loss << "\n";
    });
    if (!fs::exists(ckpt_path)) checkpoint();
    write_manifest(run, {kCheckpointName, kMetricsName});
    out << json{{"command", "train-solver"}, {"epochs", trainer.epoch()}, {"out", run.out.string()}}.dump() << "\n";
    return kOk;
}

// ---- eval ----

struct EvalArgs {
    std::string ckpt, data, task, mode, config, out, depth_tokenizer, mask_tokenizer, detokenize;
    std::optional<double> temperature;
    std::optional<std::size_t> max_instances;
    bool parallel = false;
};

// Tokenizer paths come from flags, else from the references stored with the solver.
fs::path tokenizer_ref(const std::string& flag_value, const io::Checkpoint& ckpt, const std::string& key) {
    if (!flag_value.empty()) return artifact_file(data_path(flag_value), kCheckpointName);
    const auto& refs = ckpt.manifest.value("tokenizers", json::object());
    if (!refs.contains(key)) throw ContractError("no --" + key + " given and none recorded in the checkpoint");
    const fs::path p = refs.at(key).at("path").get<std::string>();
    if (file_hash(p) != refs.at(key).at("hash").get<std::string>())
        throw ContractError(p.string() + " changed since the solver was trained");
    return p;
}

int cmd_eval(const EvalArgs& a, std::ostream& out) {
    const auto ckpt_file = artifact_file(data_path(a.ckpt), kCheckpointName);
    const auto data_file = artifact_file(data_path(a.data), kScenesName);
    const auto ckpt = io::load_checkpoint(ckpt_file);
    const bool is_solver = ckpt.manifest.contains("solver_config");
    if (!is_solver && !ckpt.manifest.contains("tokenizer_config"))
        throw IoError(ckpt_file.string() + " is neither a solver nor a tokenizer checkpoint");

    json cfg = layered({{"task", is_solver ? "dep" : ""},
                        {"mode", "hard"},
                        {"parallel", false},
                        {"temperature", 1.0},
                        {"max_instances", DecodeOptions{}.max_instances},
                        {"detokenize", "soft"}},
                       a.config);
    if (!a.task.empty()) cfg["task"] = a.task;
    if (!a.mode.empty()) cfg["mode"] = a.mode;
    if (a.parallel) cfg["parallel"] = true;
    if (a.temperature) cfg["temperature"] = *a.temperature;
    if (a.max_instances) cfg["max_instances"] = *a.max_instances;
    if (!a.detokenize.empty()) cfg["detokenize"] = a.detokenize;

    Run run{"eval", cfg, {{"ckpt", ckpt_file}, {"data", data_file}}, {}, 0};
    const auto scenes = load_scenes(data_file);
    const auto start = std::chrono::steady_clock::now();
    json metrics;
    if (is_solver) {
        const auto model = SolverModel<float>::load(ckpt);
        DecodeOptions opt;
        const std::string mode = cfg.at("mode"), detok = cfg.at("detokenize");
        if (mode != "hard" && mode != "soft") throw ContractError("--mode must be hard or soft");
        if (detok != "hard" && detok != "soft") throw ContractError("--detokenize must be hard or soft");
        opt.mode = mode == "soft" ? DecodeMode::soft : DecodeMode::hard;
        opt.soft_detokenize = detok == "soft";
        opt.parallel = cfg.at("parallel").get<bool>();
        opt.temperature = cfg.at("temperature").get<double>();
        opt.max_instances = cfg.at("max_instances").get<std::size_t>();
        opt.validate();
        const std::string task = cfg.at("task");
        LoadedTokenizers toks;
        if (task == "dep") {
            run.inputs["depth-tokenizer"] = tokenizer_ref(a.depth_tokenizer, ckpt, "depth-tokenizer");
            toks.depth = load_tokenizer(run.inputs["depth-tokenizer"], TokenizerTask::depth);
            check_vocabulary(model.config, toks.view());
            metrics["rmse"] = solver_depth_rmse(model, toks.view(), scenes, opt);
        } else if (task == "ins") {
            run.inputs["mask-tokenizer"] = tokenizer_ref(a.mask_tokenizer, ckpt, "mask-tokenizer");
            toks.mask = load_tokenizer(run.inputs["mask-tokenizer"], TokenizerTask::mask);
            check_vocabulary(model.config, toks.view());
            const auto m = solver_mask_metrics(model, toks.view(), scenes, opt);
            metrics["mean_iou"] = m.mean_iou;
            metrics["ap"] = m.ap;
        } else {
            throw ContractError("unknown solver task '" + task + "' (expected dep or ins)");
        }
        metrics["kind"] = "solver";
        metrics["decode"] = opt;
    } else {
        const auto model = TokenizerModel<float>::load(ckpt);
        const bool depth = model.config.task == TokenizerTask::depth;
        cfg["task"] = depth ? "depth" : "mask";
        const auto maps = depth ? depth_maps(scenes) : mask_maps(scenes);
        if (maps.empty()) throw ContractError("no evaluation samples in " + data_file.string());
        const auto recon = reconstruct(model, maps);
        metrics["kind"] = "tokenizer";
        if (depth) {
            metrics["rmse"] = reconstruction_rmse(recon, maps, model.config.value_scale);
        } else {
            const InterpCodec codec{static_cast<std::size_t>(model.config.downsample_ratio), InterpMode::nearest, 2,
                                    0.0, 1.0};
            std::vector<Tensor<float>> interp;
            for (const auto& m : maps) interp.push_back(interp_detokenize(interp_tokenize(m.values, codec), codec));
            metrics["iou"] = reconstruction_iou(recon, maps);
            metrics["interp_iou"] = reconstruction_iou(interp, maps);
        }
    }
    run.config = cfg;
    metrics["task"] = cfg.at("task");
    metrics["n_scenes"] = scenes.size();
    if (!a.out.empty()) {
        run.out = prepare_out(a.out);
        io::atomic_write(run.out / "metrics.json", metrics.dump(2) + "\n");
        write_manifest(run, {"metrics.json"});
    }
    metrics["seconds"] = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    out << metrics.dump() << "\n";
    return kOk;
}

// ---- roundtrip / gradcheck ----

int report_suite(const suites::SuiteReport& rep, const json& cfg, const std::string& command, const std::string& out_dir,
                 std::ostream& out) {
    json j = rep;
    if (!out_dir.empty()) {
        Run run{command, cfg, {}, prepare_out(out_dir), cfg.value("seed", std::uint64_t{0})};
        json stable = j;
        stable.erase("seconds");
        io::atomic_write(run.out / "report.json", stable.dump(2) + "\n");
        write_manifest(run, {"report.json"});
    }
    if (command == "gradcheck") {
        double worst = 0;
        for (const auto& c : rep.checks) worst = std::max(worst, c.value);
        j["max_rel_error"] = worst;
    }
    out << j.dump() << "\n";
    return rep.passed() ? kOk : kInvariant;
}

struct SuiteArgs {
    std::string suite, config, out;
    std::optional<std::size_t> n;
    std::optional<std::uint64_t> seed;
    std::optional<double> eps, tol;
};

int cmd_roundtrip(const SuiteArgs& a, std::ostream& out) {
    json cfg = layered({{"suite", "codec"}, {"n", 1000}, {"seed", 0}}, a.config);
    if (!a.suite.empty()) cfg["suite"] = a.suite;
    if (a.n) cfg["n"] = *a.n;
    if (a.seed) cfg["seed"] = *a.seed;
    const std::string suite = cfg.at("suite");
    const auto n = cfg.at("n").get<std::size_t>();
    const auto seed = cfg.at("seed").get<std::uint64_t>();
    suites::SuiteReport rep;
    if (suite == "vq") rep = suites::vq_suite(n, seed);
    else if (suite == "codec") rep = suites::codec_suite(n, seed);
    else if (suite == "interp") rep = suites::interp_suite(n, seed);
    else throw ContractError("unknown suite '" + suite + "' (expected vq, codec or interp)");
    return report_suite(rep, cfg, "roundtrip", a.out, out);
}

int cmd_gradcheck(const SuiteArgs& a, std::ostream& out) {
    json cfg = layered({{"eps", 1e-5}, {"tol", 1e-4}}, a.config);
    if (a.eps) cfg["eps"] = *a.eps;
    if (a.tol) cfg["tol"] = *a.tol;
    return report_suite(suites::gradient_suite(cfg.at("eps").get<double>(), cfg.at("tol").get<double>()), cfg, "gradcheck", a.out, out);
}

// ---- replay ----

int cmd_replay(const std::string& manifest_arg, const std::string& out_arg, std::ostream& out, std::ostream& err) {
    const auto manifest_file = artifact_file(data_path(manifest_arg), kManifestName);
    const auto m = read_json(manifest_file);
    if (m.value("version", 0) != kManifestVersion) throw IoError(manifest_file.string() + ": unsupported manifest");
    for (const auto& [flag, in] : m.at("inputs").items()) {
        const fs::path p = in.at("path").get<std::string>();
        if (file_hash(p) != in.at("hash").get<std::string>())
            throw IoError("input --" + flag + " " + p.string() + " changed since the manifest was written");
    }
    const fs::path target = out_arg.empty() ? fs::path(m.at("out").get<std::string>()) : prepare_out(out_arg);
    const auto cfg_file = fs::temp_directory_path() / ("vistok-replay-" + io::content_hash(target.string()) + ".json");
    io::atomic_write(cfg_file, m.at("config").dump());
    std::vector<std::string> args{m.at("command").get<std::string>(), "--config", cfg_file.string(), "--out",
                                  target.string()};
    for (const auto& [flag, in] : m.at("inputs").items()) {
        args.push_back("--" + flag);
        args.push_back(in.at("path").get<std::string>());
    }
    std::ostringstream sink;
    const int code = run(args, sink, err);
    fs::remove(cfg_file);
    if (code != kOk && code != kInvariant) return code;

    const auto replayed = read_json(target / kManifestName);
    json diff = json::object();
    bool same = replayed.at("outputs").size() == m.at("outputs").size();
    for (const auto& [name, hash] : m.at("outputs").items()) {
        const auto now = replayed.at("outputs").value(name, std::string());
        if (now != hash.get<std::string>()) {
            same = false;
            diff[name] = {{"recorded", hash}, {"replayed", now}};
        }
    }
    out << json{{"command", "replay"}, {"identical", same}, {"outputs", m.at("outputs").size()}, {"differences", diff}}
               .dump()
        << "\n";
    if (!same) throw InvariantFailure("replay of " + manifest_file.string() + " is not bit-identical");
    return kOk;
}

}  // namespace

int run(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
    CLI::App app{"Task-output tokenizers and a sequence solver on synthetic scenes", "vistok"};
    app.require_subcommand(1);

    GenDataArgs gen;
    auto* g = app.add_subcommand("gen-data", "Generate synthetic scenes");
    g->add_option("--spec", gen.spec, "SceneSpec JSON file or inline JSON object");
    g->add_option("--n", gen.n, "Number of scenes");
    g->add_option("--seed", gen.seed);
    g->add_option("--image-size", gen.image_size);
    g->add_option("--config", gen.config);
    g->add_option("--out", gen.out)->required();
    g->add_flag("--pgm", gen.pgm, "Write PGM previews");

    TokenizerArgs tok;
    auto* t = app.add_subcommand("train-tokenizer", "Train a depth or mask tokenizer");
    t->add_option("--task", tok.task, "depth or mask");
    t->add_option("--mask-ratio", tok.mask_ratio);
    t->add_option("--patch-size", tok.patch_size);

    SolverArgs sol;
    auto* s = app.add_subcommand("train-solver", "Train the task solver against frozen tokenizers");
    s->add_option("--tasks", sol.tasks, "Comma list of dep, ins");
    s->add_option("--depth-tokenizer", sol.depth_tokenizer);
    s->add_option("--mask-tokenizer", sol.mask_tokenizer);
    s->add_option("--preset", sol.preset, "full or toy");
    s->add_option("--aux-weight", sol.aux_weight);
    s->add_option("--max-instances", sol.max_instances);
    s->add_flag("--parallel-depth", sol.parallel_depth);

    for (auto [sub, c] : {std::pair<CLI::App*, TrainCommon*>{t, &tok}, {s, &sol}}) {
        sub->add_option("--data", c->data)->required();
        sub->add_option("--config", c->config);
        sub->add_option("--out", c->out)->required();
        sub->add_option("--epochs", c->epochs);
        sub->add_option("--lr", c->lr);
        sub->add_option("--batch-size", c->batch_size);
        sub->add_option("--seed", c->seed);
        sub->add_flag("--resume", c->resume, "Continue from the checkpoint in --out");
    }

    EvalArgs ev;
    auto* e = app.add_subcommand("eval", "Evaluate a solver or tokenizer checkpoint");
    e->add_option("--ckpt", ev.ckpt)->required();
    e->add_option("--data", ev.data)->required();
    e->add_option("--task", ev.task, "dep or ins (solver)");
    e->add_option("--mode", ev.mode, "hard or soft");
    e->add_flag("--parallel", ev.parallel);
    e->add_option("--temperature", ev.temperature);
    e->add_option("--max-instances", ev.max_instances);
    e->add_option("--detokenize", ev.detokenize, "hard or soft (soft mode only)");
    e->add_option("--depth-tokenizer", ev.depth_tokenizer);
    e->add_option("--mask-tokenizer", ev.mask_tokenizer);
    e->add_option("--config", ev.config);
    e->add_option("--out", ev.out, "Also write metrics.json and a manifest here");

    SuiteArgs rt;
    auto* r = app.add_subcommand("roundtrip", "Codec and quantizer invariant suites");
    r->add_option("--suite", rt.suite, "vq, codec or interp");
    r->add_option("--n", rt.n);
    r->add_option("--seed", rt.seed);
    r->add_option("--config", rt.config);
    r->add_option("--out", rt.out);

    SuiteArgs gc;
    auto* gcs = app.add_subcommand("gradcheck", "Finite-difference gradient suite");
    gcs->add_option("--eps", gc.eps);
    gcs->add_option("--tol", gc.tol);
    gcs->add_option("--config", gc.config);
    gcs->add_option("--out", gc.out);

    std::string manifest, replay_out;
    auto* rp = app.add_subcommand("replay", "Rerun a command from its manifest and compare output hashes");
    rp->add_option("--manifest", manifest)->required();
    rp->add_option("--out", replay_out, "Directory for the rerun (default: the recorded one)");

    std::vector<const char*> argv{"vistok"};
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::ParseError& pe) {
        return app.exit(pe, out, err) == 0 ? kOk : kOperational;
    }

    try {
        if (g->parsed()) return cmd_gen_data(gen, out);
        if (t->parsed()) return cmd_train_tokenizer(tok, out, err);
        if (s->parsed()) return cmd_train_solver(sol, out, err);
        if (e->parsed()) return cmd_eval(ev, out);
        if (r->parsed()) return cmd_roundtrip(rt, out);
        if (gcs->parsed()) return cmd_gradcheck(gc, out);
        if (rp->parsed()) return cmd_replay(manifest, replay_out, out, err);
    } catch (const InvariantFailure& f) {
        err << "invariant failure: " << f.what() << "\n";
        return kInvariant;
    } catch (const DivergenceError& d) {
        err << "training diverged: " << d.what() << "\n";
        return kOperational;
    } catch (const std::exception& x) {
        err << "error: " << x.what() << "\n";
        return kOperational;
    }
    return kOperational;
}

}  // namespace vistok::cli
