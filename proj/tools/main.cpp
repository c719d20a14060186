// plaqnet command-line tool: phantom generation, tissue-area preprocessing,
// training, segmentation, cross-validation and scoring.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <cerrno>
#include <cmath>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "plaqnet/error.hpp"
#include "plaqnet/eval.hpp"
#include "plaqnet/image.hpp"
#include "plaqnet/model.hpp"
#include "plaqnet/parallel.hpp"
#include "plaqnet/phantom.hpp"
#include "plaqnet/preprocess.hpp"
#include "plaqnet/rng.hpp"
#include "plaqnet/sampler.hpp"
#include "plaqnet/train.hpp"
#include "plaqnet/version.hpp"

namespace fs = std::filesystem;
using nlohmann::ordered_json;
using namespace plaqnet;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitDivergence = 3;

int exit_code_for(ErrorKind kind) {
    switch (kind) {
        case ErrorKind::Usage:
        case ErrorKind::Config:
        case ErrorKind::Spec:
        case ErrorKind::Architecture:
            return kExitUsage;
        case ErrorKind::Divergence:
        case ErrorKind::Numeric:
            return kExitDivergence;
        default:
            return kExitData;
    }
}

void note(const std::string& message) { std::cerr << "plaqnet: " << message << '\n'; }

std::string utc_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string fmt(double v) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// Written once when a command starts and again, with the outcome, when it
// ends. `replay` holds an argument list with every setting spelled out.
class Manifest {
public:
    Manifest(std::string command, const fs::path& out_dir) : path_(out_dir / "manifest.json") {
        doc_["tool"] = "plaqnet";
        doc_["version"] = std::string(kVersion);
        doc_["command"] = std::move(command);
        doc_["started_at"] = utc_now();
        doc_["status"] = "running";
    }

    ordered_json& operator[](const char* key) { return doc_[key]; }

    void write() const {
        std::ofstream out(path_, std::ios::trunc);
        if (!out) fail(ErrorKind::Io, "cannot write " + path_.string());
        out << doc_.dump(2) << '\n';
    }

    ~Manifest() {
        if (finished_) return;
        try {
            doc_["finished_at"] = utc_now();
            doc_["status"] = "failed";
            write();
        } catch (...) {
        }
    }

    void finish(int code) {
        finished_ = true;
        doc_["finished_at"] = utc_now();
        doc_["status"] = code == 0 ? "ok" : "failed";
        doc_["exit_code"] = code;
        write();
    }

private:
    fs::path path_;
    ordered_json doc_;
    bool finished_ = false;
};

fs::path prepare_out_dir(const std::string& out, const std::vector<std::string>& inputs) {
    const fs::path dir(out);
    for (const auto& in : inputs) {
        std::error_code ec;
        if (fs::exists(in, ec) && fs::exists(dir, ec) && fs::equivalent(in, dir, ec)) {
            fail(ErrorKind::Usage, "--out must differ from the input directory " + in);
        }
    }
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) fail(ErrorKind::Io, "cannot create " + dir.string() + ": " + ec.message());
    return dir;
}

struct SeedChoice {
    std::uint64_t value = 0;
    std::string source = "default";
};

std::optional<std::uint64_t> env_seed() {
    const char* text = std::getenv("OCT_PLAQNET_SEED");
    if (text == nullptr || *text == '\0') return std::nullopt;
    char* end = nullptr;
    errno = 0;
    const unsigned long long v = std::strtoull(text, &end, 10);
    if (errno != 0 || *end != '\0' || text[0] == '-') {
        fail(ErrorKind::Config, std::string("OCT_PLAQNET_SEED is not an unsigned integer: ") + text);
    }
    return v;
}

// Flag first, then a config-file value, then the environment.
SeedChoice resolve_seed(const CLI::Option* flag, std::uint64_t flag_value, std::optional<std::uint64_t> from_config) {
    if (flag->count() > 0) return {flag_value, "flag"};
    if (from_config) return {*from_config, "config"};
    if (auto env = env_seed()) return {*env, "environment"};
    return {};
}

std::size_t apply_threads(std::size_t threads) {
    set_worker_count(threads);
    return worker_count();
}

bool is_image_file(const fs::path& p) {
    const auto ext = p.extension().string();
    return ext == ".png" || ext == ".pgm";
}

bool ends_with(const std::string& s, const std::string& suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

bool is_derived_stem(const std::string& stem) {
    for (const char* suffix : {"_labels", "_mask", "_pred", "_overlay"}) {
        if (ends_with(stem, suffix)) return true;
    }
    return false;
}

// Primary frames in `dir`, sorted by stem.
std::vector<fs::path> list_frames(const fs::path& dir) {
    std::error_code ec;
    if (!fs::is_directory(dir, ec)) fail(ErrorKind::Io, "not a directory: " + dir.string());
    std::vector<fs::path> frames;
    for (const auto& entry : fs::directory_iterator(dir)) {
        if (!entry.is_regular_file() || !is_image_file(entry.path())) continue;
        if (is_derived_stem(entry.path().stem().string())) continue;
        frames.push_back(entry.path());
    }
    std::sort(frames.begin(), frames.end());
    return frames;
}

std::optional<fs::path> find_sibling(const fs::path& dir, const std::string& stem, const std::string& suffix) {
    for (const char* ext : {".png", ".pgm"}) {
        fs::path p = dir / (stem + suffix + ext);
        if (fs::exists(p)) return p;
    }
    return std::nullopt;
}

fs::path require_sibling(const fs::path& dir, const std::string& stem, const std::string& suffix) {
    auto p = find_sibling(dir, stem, suffix);
    if (!p) fail(ErrorKind::Io, "missing " + (dir / (stem + suffix + ".png")).string());
    return *p;
}

std::string patient_of(const fs::path& dir, const std::string& stem) {
    const fs::path meta = dir / (stem + ".meta");
    if (!fs::exists(meta)) return stem;
    const KeyValues kv = read_key_values(meta);
    auto it = kv.find("patient_id");
    return it == kv.end() || it->second.empty() ? stem : it->second;
}

// A preprocessed dataset: <stem>.png with <stem>_mask and <stem>_labels.
std::vector<LabeledImage> load_dataset(const fs::path& dir) {
    std::vector<LabeledImage> images;
    for (const auto& frame : list_frames(dir)) {
        const std::string stem = frame.stem().string();
        Image8 image = read_image(frame);
        Image8 mask = read_image(require_sibling(dir, stem, "_mask"));
        Image8 labels = read_image(require_sibling(dir, stem, "_labels"));
        images.push_back(make_labeled_image(stem, std::move(image), std::move(labels), std::move(mask),
                                            patient_of(dir, stem)));
    }
    if (images.empty()) fail(ErrorKind::Io, "no images in " + dir.string());
    return images;
}

std::vector<std::string> ids_of(const std::vector<LabeledImage>& images) {
    std::vector<std::string> ids;
    for (const auto& img : images) ids.push_back(img.id);
    return ids;
}

// Options shared by train and crossval, bound to a TrainConfig so that --help
// shows the defaults.
struct TrainFlags {
    TrainConfig config;
    std::string optimizer = "standard";
    std::string config_file;
    std::vector<std::pair<std::string, CLI::Option*>> options;

    void attach(CLI::App* app) {
        options = {
            {"learning_rate", app->add_option("--lr", config.learning_rate, "learning rate")},
            {"momentum", app->add_option("--momentum", config.momentum, "momentum coefficient")},
            {"batch_size", app->add_option("--batch-size", config.batch_size, "patches per batch")},
            {"max_iterations", app->add_option("--iterations", config.max_iterations, "training iterations")},
            {"augmentation_period",
             app->add_option("--aug-period", config.augmentation_period, "iterations between re-rotations")},
            {"validation_period",
             app->add_option("--val-period", config.validation_period, "iterations between validations")},
            {"validation_per_image",
             app->add_option("--val-per-image", config.validation_per_image, "validation patches per image")},
            {"optimizer", app->add_option("--optimizer", optimizer, "update rule")
                              ->check(CLI::IsMember({"standard", "paper-literal"}))},
        };
        app->add_option("--config", config_file, "key-value file with TrainConfig fields; flags take precedence");
    }

    // Config file values, then explicit flags on top.
    TrainConfig resolve(std::optional<std::uint64_t>& config_seed) const {
        TrainConfig flags = config;
        flags.optimizer = parse_optimizer_mode(optimizer);
        TrainConfig out;
        if (!config_file.empty()) {
            const KeyValues kv = read_key_values(config_file);
            out = TrainConfig::from_key_values(kv);
            if (kv.count("seed")) config_seed = out.seed;
        }
        const KeyValues flag_values = flags.to_key_values();
        KeyValues merged = out.to_key_values();
        for (const auto& [key, opt] : options) {
            if (opt->count() > 0) merged[key] = flag_values.at(key);
        }
        out = TrainConfig::from_key_values(merged);
        out.validate();
        return out;
    }
};

ordered_json config_json(const TrainConfig& c) {
    ordered_json j;
    for (const auto& [k, v] : c.to_key_values()) j[k] = v;
    return j;
}

std::vector<std::string> train_replay_args(const TrainConfig& c) {
    return {"--lr",           fmt(c.learning_rate),
            "--momentum",     fmt(c.momentum),
            "--batch-size",   std::to_string(c.batch_size),
            "--iterations",   std::to_string(c.max_iterations),
            "--aug-period",   std::to_string(c.augmentation_period),
            "--val-period",   std::to_string(c.validation_period),
            "--val-per-image", std::to_string(c.validation_per_image),
            "--optimizer",    to_string(c.optimizer)};
}

std::string metrics_line(const MetricSummary& s) {
    std::ostringstream out;
    out << "accuracy " << fmt(s.accuracy);
    for (std::size_t j = 0; j < kNumClasses; ++j) {
        out << "  " << kClassNames[j] << ' ' << (s.sensitivity[j] ? fmt(*s.sensitivity[j]) : "n/a");
    }
    return out.str();
}

void write_text(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) fail(ErrorKind::Io, "cannot write " + path.string());
    out << text;
}

TrainProgress progress_printer(std::size_t every, std::string prefix = {}) {
    return [every, prefix = std::move(prefix)](const TrainLogRow& row) {
        if (!row.val_accuracy && (every == 0 || row.iteration % every != 0)) return;
        std::ostringstream line;
        line << prefix << "iteration " << row.iteration << " loss " << fmt(row.loss);
        if (row.val_accuracy) line << " validation accuracy " << fmt(*row.val_accuracy);
        note(line.str());
    };
}

// ---------------------------------------------------------------- phantom gen

struct PhantomGenArgs {
    std::string spec;
    std::size_t count = 25;
    std::string out;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    CLI::Option* seed_opt = nullptr;
};

int run_phantom_gen(const PhantomGenArgs& a) {
    const SeedChoice seed = resolve_seed(a.seed_opt, a.seed, std::nullopt);
    const PhantomSpec spec = a.spec.empty() ? PhantomSpec{} : load_phantom_spec(a.spec);
    spec.validate();
    const fs::path out = prepare_out_dir(a.out, {});
    const std::size_t threads = apply_threads(a.threads);

    Manifest m("phantom gen", out);
    ordered_json resolved;
    for (const auto& [k, v] : spec.to_key_values()) resolved[k] = v;
    m["config"] = resolved;
    m["count"] = a.count;
    m["seed"] = seed.value;
    m["seed_source"] = seed.source;
    m["threads"] = threads;
    m["inputs"] = {{"spec", a.spec}};
    m["outputs"] = {{"dir", out.string()}};
    std::vector<std::string> replay{"phantom", "gen", "--count", std::to_string(a.count), "--out", a.out,
                                    "--seed", std::to_string(seed.value)};
    if (!a.spec.empty()) replay.insert(replay.end(), {"--spec", a.spec});
    m["replay"] = replay;
    m.write();

    const auto entries = generate_dataset(spec, a.count, seed.value, out);
    note("wrote " + std::to_string(entries.size()) + " phantoms to " + out.string());
    m.finish(kExitOk);
    return kExitOk;
}

// ----------------------------------------------------------------- preprocess

struct PreprocessArgs {
    std::string in;
    std::string out;
    double pixel_pitch = 0.0;
    std::size_t threads = 0;
    CLI::Option* pitch_opt = nullptr;
};

int run_preprocess(const PreprocessArgs& a) {
    const fs::path in(a.in);
    const auto frames = list_frames(in);
    const fs::path out = prepare_out_dir(a.out, {a.in});
    const std::size_t threads = apply_threads(a.threads);
    const bool pitch_flag = a.pitch_opt->count() > 0;
    if (pitch_flag && !(a.pixel_pitch > 0.0)) fail(ErrorKind::Config, "--pixel-pitch must be positive");

    Manifest m("preprocess", out);
    m["config"] = {{"pixel_pitch_mm", pitch_flag ? ordered_json(a.pixel_pitch) : ordered_json("from .meta")},
                   {"tissue_depth_mm", kTissueDepthMm}};
    m["threads"] = threads;
    m["inputs"] = {{"dir", in.string()}, {"frames", frames.size()}};
    m["outputs"] = {{"dir", out.string()}};
    std::vector<std::string> replay{"preprocess", "--in", a.in, "--out", a.out};
    if (pitch_flag) replay.insert(replay.end(), {"--pixel-pitch", fmt(a.pixel_pitch)});
    m["replay"] = replay;
    m.write();

    std::size_t done = 0;
    ordered_json failures = ordered_json::array();
    for (const auto& frame : frames) {
        const std::string stem = frame.stem().string();
        try {
            FrameMeta meta;
            const fs::path meta_path = in / (stem + ".meta");
            if (fs::exists(meta_path)) meta = read_frame_meta(meta_path);
            if (pitch_flag) meta.pixel_pitch_mm = a.pixel_pitch;
            if (!(meta.pixel_pitch_mm > 0.0)) {
                fail(ErrorKind::Config, "no pixel pitch for " + stem + " (add " + meta_path.string() +
                                            " or pass --pixel-pitch)");
            }
            if (meta.patient_id.empty()) meta.patient_id = stem;

            PolarImage polar{read_image(frame), meta.pixel_pitch_mm};
            std::optional<Image8> labels;
            if (auto lp = find_sibling(in, stem, "_labels")) labels = read_image(*lp);
            const PreprocessedFrame result = preprocess_frame(polar, labels ? &*labels : nullptr);

            write_png(result.image, out / (stem + ".png"));
            write_png(result.mask, out / (stem + "_mask.png"));
            if (!result.labels.empty()) write_png(result.labels, out / (stem + "_labels.png"));
            write_frame_meta(meta, out / (stem + ".meta"));
            ++done;
        } catch (const Error& e) {
            note("skipping " + frame.string() + ": " + e.what());
            failures.push_back({{"frame", frame.string()}, {"error", e.what()}});
        }
    }
    m["processed"] = done;
    m["failures"] = failures;
    note("preprocessed " + std::to_string(done) + " of " + std::to_string(frames.size()) + " frames");
    const int code = done == 0 ? kExitData : kExitOk;
    if (done == 0) note("no frame could be processed");
    m.finish(code);
    return code;
}

// ---------------------------------------------------------------------- train

struct TrainArgs {
    std::string data;
    std::string val_data;
    std::string out;
    double val_fraction = 0.2;
    bool val_on_train = false;
    std::size_t log_every = 100;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    CLI::Option* seed_opt = nullptr;
    TrainFlags flags;
};

int run_train(const TrainArgs& a) {
    std::optional<std::uint64_t> config_seed;
    TrainConfig config = a.flags.resolve(config_seed);
    const SeedChoice seed = resolve_seed(a.seed_opt, a.seed, config_seed);
    config.seed = seed.value;
    if (!(a.val_fraction > 0.0 && a.val_fraction < 1.0)) fail(ErrorKind::Config, "--val-fraction must lie in (0, 1)");

    std::vector<std::string> inputs{a.data};
    if (!a.val_data.empty()) inputs.push_back(a.val_data);
    const fs::path out = prepare_out_dir(a.out, inputs);
    const std::size_t threads = apply_threads(a.threads);

    Manifest m("train", out);
    m["config"] = config_json(config);
    m["seed"] = seed.value;
    m["seed_source"] = seed.source;
    m["threads"] = threads;
    m["validation"] = !a.val_data.empty() ? ordered_json("directory")
                      : a.val_on_train    ? ordered_json("training images")
                                          : ordered_json({{"split_fraction", a.val_fraction}});
    m["inputs"] = {{"data", a.data}, {"val_data", a.val_data}, {"config_file", a.flags.config_file}};
    m["outputs"] = {{"dir", out.string()},
                    {"best_checkpoint", (out / "best.ckpt").string()},
                    {"final_checkpoint", (out / "final.ckpt").string()},
                    {"log", (out / "train_log.csv").string()}};
    m["trainable_params"] = ArchitectureSpec::plaquenet().trainable_param_count();
    std::vector<std::string> replay{"train", "--data", a.data, "--out", a.out, "--seed", std::to_string(seed.value)};
    for (auto& s : train_replay_args(config)) replay.push_back(s);
    if (!a.val_data.empty()) replay.insert(replay.end(), {"--val-data", a.val_data});
    if (a.val_on_train) replay.push_back("--val-on-train");
    else replay.insert(replay.end(), {"--val-fraction", fmt(a.val_fraction)});
    m["replay"] = replay;
    m.write();

    std::vector<LabeledImage> images = load_dataset(a.data);
    TrainData data;
    if (!a.val_data.empty()) {
        data.train = std::move(images);
        data.validation = load_dataset(a.val_data);
    } else if (a.val_on_train || images.size() == 1) {
        if (!a.val_on_train) note("only one image; validating on the training image");
        data.validation = images;
        data.train = std::move(images);
    } else {
        // Seeded hold-out split, at least one image on each side.
        std::vector<std::size_t> order(images.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng rng(Rng::derive(seed.value, 300));
        for (std::size_t i = order.size() - 1; i > 0; --i) std::swap(order[i], order[rng.below(i + 1)]);
        auto n_val = static_cast<std::size_t>(std::lround(a.val_fraction * static_cast<double>(images.size())));
        n_val = std::clamp<std::size_t>(n_val, 1, images.size() - 1);
        std::vector<bool> is_val(images.size(), false);
        for (std::size_t i = 0; i < n_val; ++i) is_val[order[i]] = true;
        for (std::size_t i = 0; i < images.size(); ++i) {
            (is_val[i] ? data.validation : data.train).push_back(std::move(images[i]));
        }
    }
    std::ostringstream split;
    for (const auto& img : data.train) split << "train " << img.id << '\n';
    for (const auto& img : data.validation) split << "validation " << img.id << '\n';
    write_text(out / "split.txt", split.str());

    note("training on " + std::to_string(data.train.size()) + " images, validating on " +
         std::to_string(data.validation.size()));
    const TrainResult result = train(data, config, progress_printer(a.log_every));

    save_checkpoint(result.best.net, result.best.meta, out / "best.ckpt");
    save_checkpoint(result.final_net, {config.max_iterations, result.best.meta.best_val_accuracy, config.seed},
                    out / "final.ckpt");
    write_train_log(result.log, out / "train_log.csv");
    KeyValues resolved = config.to_key_values();
    write_key_values(resolved, out / "config.txt");

    ordered_json weights = ordered_json::array();
    ordered_json counts = ordered_json::array();
    for (std::size_t j = 0; j < kNumClasses; ++j) {
        weights.push_back(result.class_weights[j]);
        counts.push_back(result.class_counts[j]);
    }
    m["class_counts"] = counts;
    m["class_weights"] = weights;
    m["best_iteration"] = result.best.meta.iteration;
    m["best_val_accuracy"] = result.best.meta.best_val_accuracy;
    note("best validation accuracy " + fmt(result.best.meta.best_val_accuracy) + " at iteration " +
         std::to_string(result.best.meta.iteration));
    m.finish(kExitOk);
    return kExitOk;
}

// -------------------------------------------------------------------- segment

struct SegmentArgs {
    std::string checkpoint;
    std::string in;
    std::string out;
    std::size_t stride = 1;
    std::size_t batch = 256;
    std::size_t threads = 0;
};

int run_segment(const SegmentArgs& a) {
    if (a.stride == 0) fail(ErrorKind::Config, "--stride must be positive");
    if (a.batch == 0) fail(ErrorKind::Config, "--batch must be positive");
    const fs::path in(a.in);
    const fs::path out = prepare_out_dir(a.out, {a.in});
    const std::size_t threads = apply_threads(a.threads);

    Manifest m("segment", out);
    m["config"] = {{"stride", a.stride}, {"batch", a.batch}};
    m["threads"] = threads;
    m["inputs"] = {{"checkpoint", a.checkpoint}, {"dir", a.in}};
    m["outputs"] = {{"dir", out.string()}};
    m["replay"] = std::vector<std::string>{"segment", "--checkpoint", a.checkpoint, "--in", a.in, "--out", a.out,
                                           "--stride", std::to_string(a.stride), "--batch", std::to_string(a.batch)};
    m.write();

    Checkpoint ckpt = load_checkpoint(a.checkpoint);
    m["checkpoint"] = {{"iteration", ckpt.meta.iteration},
                       {"best_val_accuracy", ckpt.meta.best_val_accuracy},
                       {"seed", ckpt.meta.seed}};
    NetClassifier classifier(ckpt.net);
    const auto frames = list_frames(in);
    if (frames.empty()) fail(ErrorKind::Io, "no images in " + in.string());
    for (const auto& frame : frames) {
        const std::string stem = frame.stem().string();
        const Image8 image = read_image(frame);
        const Image8 mask = read_image(require_sibling(in, stem, "_mask"));
        const Segmentation seg = segment_image(classifier, image, mask, a.stride, a.batch);
        write_png(seg.labels, out / (stem + "_pred.png"));
        emit_overlay(image, seg.labels, out / (stem + "_overlay.png"));
        note("segmented " + stem);
    }
    m["images"] = frames.size();
    m.finish(kExitOk);
    return kExitOk;
}

// ----------------------------------------------------------------------- eval

struct EvalArgs {
    std::string truth;
    std::string pred;
    std::string out;
    bool ignore_mask = false;
};

int run_eval(const EvalArgs& a) {
    const fs::path truth_dir(a.truth);
    const fs::path pred_dir(a.pred);
    const fs::path out = prepare_out_dir(a.out, {a.truth, a.pred});

    Manifest m("eval", out);
    m["config"] = {{"ignore_mask", a.ignore_mask}};
    m["inputs"] = {{"truth", a.truth}, {"pred", a.pred}};
    m["outputs"] = {{"dir", out.string()}};
    std::vector<std::string> replay{"eval", "--truth", a.truth, "--pred", a.pred, "--out", a.out};
    if (a.ignore_mask) replay.push_back("--ignore-mask");
    m["replay"] = replay;
    m.write();

    // Truth stems are those with a label map.
    std::vector<std::string> stems;
    std::error_code ec;
    if (!fs::is_directory(truth_dir, ec)) fail(ErrorKind::Io, "not a directory: " + truth_dir.string());
    for (const auto& entry : fs::directory_iterator(truth_dir)) {
        const std::string stem = entry.path().stem().string();
        if (is_image_file(entry.path()) && ends_with(stem, "_labels")) stems.push_back(stem.substr(0, stem.size() - 7));
    }
    std::sort(stems.begin(), stems.end());
    if (stems.empty()) fail(ErrorKind::Io, "no *_labels images in " + truth_dir.string());

    std::ostringstream csv;
    csv << "image,pixels,accuracy";
    for (const char* name : kClassNames) csv << ",sens_" << name;
    csv << '\n';
    auto csv_row = [&](const std::string& id, const ConfusionMatrix& cm) {
        const MetricSummary s = summarize(cm);
        csv << id << ',' << cm.total() << ',' << fmt(s.accuracy);
        for (const auto& v : s.sensitivity) {
            csv << ',';
            if (v) csv << fmt(*v);
        }
        csv << '\n';
    };

    ConfusionMatrix total;
    for (const auto& stem : stems) {
        const Image8 truth = read_image(require_sibling(truth_dir, stem, "_labels"));
        const Image8 pred = read_image(require_sibling(pred_dir, stem, "_pred"));
        std::optional<Image8> mask;
        if (!a.ignore_mask) {
            if (auto mp = find_sibling(truth_dir, stem, "_mask")) mask = read_image(*mp);
        }
        const ConfusionMatrix cm = confusion_from_maps(truth, pred, mask ? &*mask : nullptr);
        if (cm.total() == 0) fail(ErrorKind::EmptyMask, "no pixels to score in " + stem);
        csv_row(stem, cm);
        total += cm;
    }
    csv_row("all", total);
    write_text(out / "metrics.csv", csv.str());
    write_confusion_csv(total, out / "confusion.csv");

    const MetricSummary s = summarize(total);
    const std::string summary = std::to_string(stems.size()) + " images, " + std::to_string(total.total()) +
                                " pixels: " + metrics_line(s) + '\n';
    write_text(out / "summary.txt", summary);
    std::cout << summary;
    m["images"] = stems.size();
    m["accuracy"] = s.accuracy;
    m.finish(kExitOk);
    return kExitOk;
}

// ------------------------------------------------------------------- crossval

struct CrossValArgs {
    std::string data;
    std::string out;
    std::size_t folds = 5;
    bool by_patient = false;
    std::size_t eval_stride = 1;
    std::size_t test_patches = 1000;
    bool no_maps = false;
    std::size_t log_every = 100;
    std::uint64_t seed = 0;
    std::size_t threads = 0;
    CLI::Option* seed_opt = nullptr;
    TrainFlags flags;
};

int run_crossval(const CrossValArgs& a) {
    std::optional<std::uint64_t> config_seed;
    CrossValConfig cv;
    cv.train = a.flags.resolve(config_seed);
    const SeedChoice seed = resolve_seed(a.seed_opt, a.seed, config_seed);
    cv.seed = seed.value;
    cv.train.seed = seed.value;
    cv.folds = a.folds;
    cv.by_patient = a.by_patient;
    cv.eval_stride = a.eval_stride;
    cv.test_patches_per_image = a.test_patches;
    if (cv.eval_stride == 0) fail(ErrorKind::Config, "--eval-stride must be positive");

    const fs::path out = prepare_out_dir(a.out, {a.data});
    const std::size_t threads = apply_threads(a.threads);

    Manifest m("crossval", out);
    ordered_json config = config_json(cv.train);
    config.erase("seed");
    m["config"] = {{"folds", cv.folds},
                   {"by_patient", cv.by_patient},
                   {"eval_stride", cv.eval_stride},
                   {"test_patches_per_image", cv.test_patches_per_image},
                   {"train", config}};
    m["seed"] = seed.value;
    m["seed_source"] = seed.source;
    m["threads"] = threads;
    m["inputs"] = {{"data", a.data}, {"config_file", a.flags.config_file}};
    m["outputs"] = {{"dir", out.string()}};
    std::vector<std::string> replay{"crossval", "--data", a.data, "--out", a.out,
                                    "--seed", std::to_string(seed.value),
                                    "--folds", std::to_string(cv.folds),
                                    "--eval-stride", std::to_string(cv.eval_stride),
                                    "--test-patches", std::to_string(cv.test_patches_per_image)};
    for (auto& s : train_replay_args(cv.train)) replay.push_back(s);
    if (cv.by_patient) replay.push_back("--by-patient");
    if (a.no_maps) replay.push_back("--no-maps");
    m["replay"] = replay;
    m.write();

    const std::vector<LabeledImage> images = load_dataset(a.data);
    std::map<std::string, const LabeledImage*> by_id;
    for (const auto& img : images) by_id[img.id] = &img;

    const CrossValReport report = cross_validate(images, cv, [&](std::size_t fold, const TrainLogRow& row) {
        progress_printer(a.log_every, "fold " + std::to_string(fold) + ": ")(row);
    });

    const auto ids = ids_of(images);
    write_fold_plan(report.plan, ids, out / "fold_plan.txt");
    for (const auto& f : report.folds) {
        const fs::path dir = out / ("fold_" + std::to_string(f.fold));
        fs::create_directories(dir);
        write_train_log(f.log, dir / "train_log.csv");
        write_confusion_csv(f.pixels, dir / "confusion_pixels.csv");
        write_confusion_csv(f.patches, dir / "confusion_patches.csv");
        std::ostringstream text;
        auto list = [&](const char* label, const std::vector<std::string>& v) {
            text << label << ':';
            for (const auto& id : v) text << ' ' << id;
            text << '\n';
        };
        text << "fold " << f.fold << '\n';
        list("test", f.test_ids);
        list("validation", f.validation_ids);
        list("train", f.train_ids);
        text << "best iteration " << f.best_iteration << ", validation accuracy " << fmt(f.best_val_accuracy)
             << '\n';
        text << "pixels: " << metrics_line(summarize(f.pixels)) << '\n';
        text << "patches: " << metrics_line(summarize(f.patches)) << '\n';
        write_text(dir / "report.txt", text.str());
        if (!a.no_maps) {
            for (std::size_t i = 0; i < f.test_ids.size(); ++i) {
                const auto& id = f.test_ids[i];
                write_png(f.segmentations[i].labels, dir / (id + "_pred.png"));
                emit_overlay(by_id.at(id)->image, f.segmentations[i].labels, dir / (id + "_overlay.png"));
            }
        }
    }
    std::ostringstream mean;
    mean << "mean over " << report.folds.size() << " folds\n";
    mean << "pixels: " << metrics_line(report.mean_pixels) << '\n';
    mean << "patches: " << metrics_line(report.mean_patches) << '\n';
    write_text(out / "mean_report.txt", mean.str());
    write_metrics_csv(report, out / "metrics.csv");
    const std::string summary = format_summary(report);
    write_text(out / "summary.txt", summary);
    std::cout << summary;

    m["mean_pixel_accuracy"] = report.mean_pixels.accuracy;
    m["mean_patch_accuracy"] = report.mean_patches.accuracy;
    m.finish(kExitOk);
    return kExitOk;
}

// --------------------------------------------------------------------- replay

int run(std::vector<std::string> args);

int run_replay(const std::string& manifest_path, const std::string& out, std::size_t threads, bool threads_given) {
    std::ifstream in(manifest_path);
    if (!in) fail(ErrorKind::Io, "cannot read " + manifest_path);
    ordered_json doc;
    try {
        in >> doc;
    } catch (const std::exception& e) {
        fail(ErrorKind::Config, manifest_path + ": " + e.what());
    }
    if (!doc.contains("replay") || !doc["replay"].is_array()) fail(ErrorKind::Config, manifest_path + ": no replay");
    std::vector<std::string> args = doc["replay"].get<std::vector<std::string>>();
    if (!out.empty()) {
        auto it = std::find(args.begin(), args.end(), "--out");
        if (it == args.end() || it + 1 == args.end()) fail(ErrorKind::Config, manifest_path + ": replay has no --out");
        *(it + 1) = out;
    }
    if (threads_given) args.insert(args.end(), {"--threads", std::to_string(threads)});
    else if (doc.contains("threads") && doc["command"] != "eval") {
        args.insert(args.end(), {"--threads", std::to_string(doc["threads"].get<std::size_t>())});
    }
    return run(std::move(args));
}

// ------------------------------------------------------------------------ cli

void add_threads(CLI::App* app, std::size_t& threads) {
    app->add_option("--threads", threads, "worker threads (0: all cores)");
}

int run(std::vector<std::string> args) {
    CLI::App app{"plaqnet: OCT plaque characterization with a patch CNN"};
    app.option_defaults()->always_capture_default();
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    PhantomGenArgs gen;
    auto* phantom = app.add_subcommand("phantom", "synthetic labelled frames");
    phantom->require_subcommand(1);
    auto* gen_cmd = phantom->add_subcommand("gen", "write <stem>.png, <stem>_labels.png and <stem>.meta per frame");
    gen_cmd->add_option("--spec", gen.spec, "phantom spec key-value file (built-in defaults when omitted)");
    gen_cmd->add_option("--count", gen.count, "number of frames")->check(CLI::PositiveNumber);
    gen_cmd->add_option("--out", gen.out, "output directory")->required();
    gen.seed_opt = gen_cmd->add_option("--seed", gen.seed, "dataset seed (fallback: OCT_PLAQNET_SEED, then 0)");
    add_threads(gen_cmd, gen.threads);

    PreprocessArgs pre;
    auto* pre_cmd = app.add_subcommand("preprocess", "tissue-area extraction and polar to Cartesian conversion");
    pre_cmd->add_option("--in", pre.in, "directory of polar frames with .meta sidecars")->required();
    pre_cmd->add_option("--out", pre.out, "output directory")->required();
    pre.pitch_opt = pre_cmd->add_option("--pixel-pitch", pre.pixel_pitch,
                                        "pixel pitch in mm, overriding the .meta sidecars (0: use sidecars)");
    add_threads(pre_cmd, pre.threads);

    TrainArgs tr;
    auto* train_cmd = app.add_subcommand("train", "train on a preprocessed dataset");
    train_cmd->add_option("--data", tr.data, "preprocessed dataset directory")->required();
    train_cmd->add_option("--out", tr.out, "output directory")->required();
    train_cmd->add_option("--val-data", tr.val_data, "separate validation dataset directory");
    train_cmd->add_option("--val-fraction", tr.val_fraction, "share of --data held out for validation");
    train_cmd->add_flag("--val-on-train", tr.val_on_train, "validate on the training images");
    train_cmd->add_option("--log-every", tr.log_every, "progress line every N iterations (0: validations only)");
    tr.seed_opt = train_cmd->add_option("--seed", tr.seed, "seed (fallback: config file, OCT_PLAQNET_SEED, 0)");
    tr.flags.attach(train_cmd);
    add_threads(train_cmd, tr.threads);

    SegmentArgs seg;
    auto* seg_cmd = app.add_subcommand("segment", "label maps and overlays from a checkpoint");
    seg_cmd->add_option("--checkpoint", seg.checkpoint, "checkpoint file")->required();
    seg_cmd->add_option("--in", seg.in, "directory of Cartesian frames with <stem>_mask images")->required();
    seg_cmd->add_option("--out", seg.out, "output directory")->required();
    seg_cmd->add_option("--stride", seg.stride, "classify one pixel per stride-by-stride block");
    seg_cmd->add_option("--batch", seg.batch, "patches per forward pass");
    add_threads(seg_cmd, seg.threads);

    CrossValArgs cvx;
    auto* cv_cmd = app.add_subcommand("crossval", "k-fold cross-validation over a preprocessed dataset");
    cv_cmd->add_option("--data", cvx.data, "preprocessed dataset directory")->required();
    cv_cmd->add_option("--out", cvx.out, "output directory")->required();
    cv_cmd->add_option("--folds", cvx.folds, "number of folds (at least 3)");
    cv_cmd->add_flag("--by-patient", cvx.by_patient, "keep each patient's frames in one fold");
    cv_cmd->add_option("--eval-stride", cvx.eval_stride, "segmentation stride on test frames");
    cv_cmd->add_option("--test-patches", cvx.test_patches, "sampled test patches per image");
    cv_cmd->add_flag("--no-maps", cvx.no_maps, "skip writing predicted label maps and overlays");
    cv_cmd->add_option("--log-every", cvx.log_every, "progress line every N iterations (0: validations only)");
    cvx.seed_opt = cv_cmd->add_option("--seed", cvx.seed, "seed (fallback: config file, OCT_PLAQNET_SEED, 0)");
    cvx.flags.attach(cv_cmd);
    add_threads(cv_cmd, cvx.threads);

    EvalArgs ev;
    auto* eval_cmd = app.add_subcommand("eval", "score <stem>_pred maps against <stem>_labels");
    eval_cmd->add_option("--truth", ev.truth, "directory with <stem>_labels and optional <stem>_mask")->required();
    eval_cmd->add_option("--pred", ev.pred, "directory with <stem>_pred maps")->required();
    eval_cmd->add_option("--out", ev.out, "output directory")->required();
    eval_cmd->add_flag("--ignore-mask", ev.ignore_mask, "score every pixel even when a mask exists");

    std::string replay_manifest;
    std::string replay_out;
    std::size_t replay_threads = 0;
    auto* replay_cmd = app.add_subcommand("replay", "rerun the command recorded in a manifest.json");
    replay_cmd->add_option("--manifest", replay_manifest, "manifest written by an earlier run")->required();
    replay_cmd->add_option("--out", replay_out, "output directory (default: the recorded one)");
    auto* replay_threads_opt = replay_cmd->add_option("--threads", replay_threads, "worker threads (default: recorded)");

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    if (*gen_cmd) return run_phantom_gen(gen);
    if (*pre_cmd) return run_preprocess(pre);
    if (*train_cmd) return run_train(tr);
    if (*seg_cmd) return run_segment(seg);
    if (*cv_cmd) return run_crossval(cvx);
    if (*eval_cmd) return run_eval(ev);
    if (*replay_cmd) return run_replay(replay_manifest, replay_out, replay_threads, replay_threads_opt->count() > 0);
    return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
    std::vector<std::string> args(argv + 1, argv + argc);
    try {
        return run(std::move(args));
    } catch (const Error& e) {
        note(e.what());
        return exit_code_for(e.kind());
    } catch (const std::exception& e) {
        note(e.what());
        return kExitData;
    }
}
