// ptdn: data generation, training, denoising, evaluation, attention inspection, checks, benchmarks.

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <numbers>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "ptdn/attention.hpp"
#include "ptdn/checks.hpp"
#include "ptdn/models.hpp"
#include "ptdn/parallel.hpp"
#include "ptdn/ptns.hpp"
#include "ptdn/simdata.hpp"
#include "ptdn/training.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ptdn;

namespace {

constexpr int exit_runtime = 1;
constexpr int exit_usage = 2;

struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct Globals {
    std::uint64_t seed = 0;
    bool seed_set = false;
    std::size_t threads = 1;
    std::string config;
};

// Relative dataset paths resolve against PTDN_DATA_DIR when it is set.
fs::path data_path(const std::string& p) {
    fs::path path(p);
    if (path.is_absolute()) return path;
    if (const char* root = std::getenv("PTDN_DATA_DIR"); root && *root) return fs::path(root) / path;
    return path;
}

std::optional<json> raw_config(const Globals& g) {
    if (g.config.empty()) return std::nullopt;
    std::ifstream in(g.config);
    if (!in) throw std::runtime_error("cannot open config " + g.config);
    try {
        return json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::runtime_error(g.config + ": " + e.what());
    }
}

RunConfig run_config(const Globals& g, bool* has_noise = nullptr) {
    auto raw = raw_config(g);
    if (has_noise) *has_noise = raw && (raw->contains("noise") || (raw->contains("train") && (*raw)["train"].contains("noise")));
    if (!raw) return {};
    try {
        return run_config_from_json(*raw);
    } catch (const std::exception& e) {
        throw std::runtime_error(g.config + ": " + e.what());
    }
}

void write_text(const fs::path& path, const std::string& text) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
    out << text;
    if (!out) throw std::runtime_error("failed writing " + path.string());
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.9g", v);
    return buf;
}

double wrap_angle(double a) {
    constexpr double two_pi = 2.0 * std::numbers::pi;
    a = std::fmod(a, two_pi);
    return a < 0 ? a + two_pi : a;
}

double angle_distance(double a, double b) {
    const double d = wrap_angle(a - b);
    return std::min(d, 2.0 * std::numbers::pi - d);
}

// ---- gen ------------------------------------------------------------------------------------

struct GenArgs {
    std::string task = "directional", noise = "gaussian", out;
    std::size_t phantoms = 10, views = 10, K = 8, L = 32, components = 8;
    double snr = 0.1;
};

void cmd_gen(const Globals& g, const GenArgs& a) {
    DatasetSpec spec;
    spec.task = task_from_string(a.task);
    spec.n_phantoms = a.phantoms;
    spec.views_per_phantom = a.views;
    spec.K = a.K;
    spec.L = a.L;
    spec.components = a.components;
    spec.noise.model = noise_model_from_string(a.noise);
    spec.noise.snr = a.snr;
    spec.seed = g.seed;
    const auto data = gen_dataset(spec, data_path(a.out));
    std::printf("wrote %zu sets (%zu images) to %s\n", data.sets.size(), data.image_count(), data_path(a.out).c_str());
}

// ---- train ----------------------------------------------------------------------------------

struct TrainArgs {
    std::string data, eval, out, log, init;
    std::optional<std::size_t> epochs, batch, max_batches;
    std::optional<double> lr, snr;
    bool f64 = false;
};

template <typename T>
void run_train(const Globals& g, const TrainArgs& a) {
    bool config_noise = false;
    RunConfig rc = run_config(g, &config_noise);
    const Dataset train_data = load_dataset(data_path(a.data));
    std::optional<Dataset> eval_data;
    if (!a.eval.empty()) eval_data = load_dataset(data_path(a.eval));

    TrainConfig tc = rc.train;
    if (!config_noise) tc.noise = train_data.spec.noise;
    if (g.seed_set) tc.seed = g.seed;
    if (a.epochs) tc.epochs = *a.epochs;
    if (a.batch) tc.batch_size = *a.batch;
    if (a.max_batches) tc.max_batches = *a.max_batches;
    if (a.lr) tc.adam.lr = *a.lr;
    if (a.snr) tc.noise.snr = *a.snr;
    tc.validate();

    std::optional<PolarModel<T>> model;
    if (!a.init.empty()) {
        model.emplace(load_weights<T>(a.init));
    } else {
        ModelConfig mc = rc.model;
        if (!rc.model_json.contains("L")) mc.L = train_data.spec.L;
        if (!rc.model_json.contains("K")) mc.K = set_size(train_data.spec.task, train_data.spec.K);
        mc.validate();
        model.emplace(mc);
        model->initialize(derive_seed(tc.seed, {1}));
    }
    const auto& mc = model->config();
    if (mc.L != train_data.spec.L)
        throw std::runtime_error("model side L=" + std::to_string(mc.L) + " does not match data side L=" +
                                 std::to_string(train_data.spec.L));
    if (mc.kind == ModelKind::polar_transformer && train_data.spec.task == Task::single)
        throw std::runtime_error("a polar transformer needs sets; dataset " + a.data + " holds the single task");

    std::fprintf(stderr, "%s, %zu parameters, %zu training images\n", to_string(mc.kind).c_str(),
                 model->parameter_count(), train_data.image_count());
    MetricLog log;
    const fs::path log_path = a.log.empty() ? fs::path() : fs::path(a.log);
    log = train(*model, train_data, eval_data ? &*eval_data : nullptr, tc, [&](const MetricRecord& r) {
        std::fprintf(stderr, "epoch %zu  train_mse %.6g  eval_rel_mse %.6g  %.1fs\n", r.epoch, r.train_mse,
                     r.eval_rel_mse, r.seconds);
    });
    const fs::path out(a.out);
    if (out.has_parent_path()) fs::create_directories(out.parent_path());
    save_weights(*model, out);
    if (!log_path.empty()) {
        if (log_path.has_parent_path()) fs::create_directories(log_path.parent_path());
        log.write_csv(log_path);
    }
    std::cout << log.csv();
}

// ---- denoise --------------------------------------------------------------------------------

struct DenoiseArgs {
    std::string model, in, out, pgm;
};

void cmd_denoise(const DenoiseArgs& a) {
    const auto model = load_weights<double>(a.model);
    const TensorFile input = load_ptns(a.in);
    const auto xs = images_from_tensor<double>(input);
    if (xs.front().L != model.config().L)
        throw std::runtime_error("input images have side " + std::to_string(xs.front().L) + ", model expects " +
                                 std::to_string(model.config().L));
    const auto ys = model.forward(xs);
    save_ptns(a.out, tensor_from_images(ys, input.dtype, input.dims.size() == 2));
    if (!a.pgm.empty()) {
        fs::create_directories(a.pgm);
        for (std::size_t k = 0; k < xs.size(); ++k) {
            char name[32];
            std::snprintf(name, sizeof name, "%04zu", k);
            write_pgm(fs::path(a.pgm) / (std::string("in_") + name + ".pgm"), xs[k]);
            write_pgm(fs::path(a.pgm) / (std::string("out_") + name + ".pgm"), ys[k]);
        }
    }
}

// ---- eval -----------------------------------------------------------------------------------

struct EvalArgs {
    std::string model, data, pred, target;
    std::optional<double> snr;
    bool per_image = false;
};

void cmd_eval(const Globals& g, const EvalArgs& a) {
    std::cout << "method,relative_mse,images\n";
    if (!a.pred.empty() || !a.target.empty()) {
        if (a.pred.empty() || a.target.empty()) throw UsageError("--pred and --target go together");
        const auto pred = images_from_tensor<double>(load_ptns(a.pred));
        const auto target = images_from_tensor<double>(load_ptns(a.target));
        if (pred.size() != target.size() || pred.front().L != target.front().L)
            throw std::runtime_error("prediction and target tensors differ in shape");
        std::cout << "prediction," << fmt(relative_mse(pred, target, a.per_image)) << "," << pred.size() << "\n";
        return;
    }
    if (a.data.empty()) throw UsageError("eval needs --data (with optional --model) or --pred/--target");
    bool config_noise = false;
    const RunConfig rc = run_config(g, &config_noise);
    const Dataset data = load_dataset(data_path(a.data));
    NoiseSpec noise = config_noise ? rc.train.noise : data.spec.noise;
    if (a.snr) noise.snr = *a.snr;
    if (a.model.empty()) {
        // identity baseline only: a depth-1 model would still need weights, so score directly
        std::vector<CartesianImage<double>> noisy, clean;
        std::size_t item = 0;
        for (const auto& set : data.sets)
            for (const auto& x : set.images) {
                noisy.push_back(corrupt(x, noise, data.signal_power,
                                        derive_seed(noise_seed(g.seed, UINT64_MAX, item), {0})));
                clean.push_back(x);
                ++item;
            }
        std::cout << "identity," << fmt(relative_mse(noisy, clean, a.per_image)) << "," << clean.size() << "\n";
        return;
    }
    const auto model = load_weights<double>(a.model);
    if (model.config().L != data.spec.L)
        throw std::runtime_error("model side L=" + std::to_string(model.config().L) + " does not match data side L=" +
                                 std::to_string(data.spec.L));
    if (model.config().kind == ModelKind::polar_transformer && data.spec.task == Task::single)
        throw std::runtime_error("a polar transformer needs sets; dataset " + a.data + " holds the single task");
    const EvalResult r = evaluate(model, data, noise, g.seed, a.per_image);
    std::cout << "identity," << fmt(r.identity) << "," << r.images << "\n";
    std::cout << "model," << fmt(r.model) << "," << r.images << "\n";
}

// ---- attn -----------------------------------------------------------------------------------

struct AttnArgs {
    std::string model, data, in, out;
    std::size_t set = 0;
    std::optional<double> snr;
    bool clean = false;
};

void cmd_attn(const Globals& g, const AttnArgs& a) {
    const auto model = load_weights<double>(a.model);
    if (model.config().kind != ModelKind::polar_transformer)
        throw std::runtime_error(a.model + " is a polar CNN; attention needs a polar transformer");
    std::vector<CartesianImage<double>> xs;
    std::optional<SetLabels> labels;
    if (!a.in.empty()) {
        xs = images_from_tensor<double>(load_ptns(a.in));
    } else if (!a.data.empty()) {
        const Dataset data = load_dataset(data_path(a.data));
        if (a.set >= data.sets.size())
            throw std::runtime_error("set " + std::to_string(a.set) + " out of range (dataset has " +
                                     std::to_string(data.sets.size()) + ")");
        const auto& s = data.sets[a.set];
        labels = s.labels;
        NoiseSpec noise = data.spec.noise;
        if (a.snr) noise.snr = *a.snr;
        for (std::size_t k = 0; k < s.images.size(); ++k)
            xs.push_back(a.clean ? s.images[k]
                                 : corrupt(s.images[k], noise, data.signal_power,
                                           derive_seed(noise_seed(g.seed, UINT64_MAX, a.set), {k})));
    } else {
        throw UsageError("attn needs --data or --in");
    }
    if (xs.front().L != model.config().L)
        throw std::runtime_error("input images have side " + std::to_string(xs.front().L) + ", model expects " +
                                 std::to_string(model.config().L));

    const auto alpha = model.attention(xs);
    const std::size_t K = alpha.K, M = alpha.M;
    const fs::path out(a.out);
    fs::create_directories(out);
    TensorFile t;
    t.dtype = DType::f64;
    t.dims = {K, K, M};
    t.values.assign(alpha.data.begin(), alpha.data.end());
    save_ptns(out / "alpha.ptns", t);

    const auto summary = attention_summary(alpha);
    std::ostringstream s;
    for (std::size_t k = 0; k < K; ++k) {
        for (std::size_t kp = 0; kp < K; ++kp) s << (kp ? "," : "") << fmt(summary[k * K + kp]);
        s << "\n";
    }
    write_text(out / "summary.csv", s.str());

    // The coefficient profile of (k, k') peaks at l* = -t when image k' is image k turned by t
    // angular steps, so the estimated rotation of k' relative to k is 2 pi (M - l*) / M.
    std::ostringstream c;
    c << "k,kp,index,estimated_angle,true_angle,error,same_cluster,degenerate\n";
    for (std::size_t k = 0; k < K; ++k)
        for (std::size_t kp = 0; kp < K; ++kp) {
            const auto e = alignment_estimate(alpha, k, kp);
            const double est = wrap_angle(2.0 * std::numbers::pi * static_cast<double>((M - e.index) % M) / M);
            c << k << "," << kp << "," << e.index << "," << fmt(est) << ",";
            if (labels && k < labels->angles.size() && kp < labels->angles.size()) {
                const bool same = labels->clusters[k] == labels->clusters[kp];
                const double truth = wrap_angle(labels->angles[kp] - labels->angles[k]);
                c << fmt(truth) << "," << (same ? fmt(angle_distance(est, truth)) : std::string()) << ","
                  << (same ? 1 : 0);
            } else {
                c << ",,";
            }
            c << "," << (e.degenerate ? 1 : 0) << "\n";
        }
    write_text(out / "alignment.csv", c.str());
    std::cout << s.str();
}

// ---- check / bench --------------------------------------------------------------------------

struct CheckArgs {
    std::string suite = "all", model = "tiny-transformer";
    std::size_t L = 64;
};

int cmd_check(const Globals& g, const CheckArgs& a) {
    const json report = run_check(a.suite, a.L, g.seed, a.model);
    std::cout << report.dump(2) << "\n";
    return report.value("pass", false) ? 0 : exit_runtime;
}

struct BenchArgs {
    std::vector<std::size_t> sizes{32, 64, 128};
    std::size_t repeats = 5;
    std::string out;
};

void cmd_bench(const Globals& g, const BenchArgs& a) {
    if (a.repeats < 1) throw UsageError("--repeats must be positive");
    const auto rows = bench_polar(a.sizes, a.repeats, g.seed);
    std::ostringstream s;
    s << "op,L,median_seconds,repeats\n";
    for (const auto& r : rows) s << r.op << "," << r.L << "," << fmt(r.median_seconds) << "," << r.repeats << "\n";
    if (!a.out.empty()) write_text(a.out, s.str());
    std::cout << s.str();
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Rotation-equivariant polar denoising of projection images"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--seed", g.seed, "Random seed")->each([&](const std::string&) { g.seed_set = true; });
    app.add_option("--threads", g.threads, "Worker threads")->check(CLI::PositiveNumber);
    app.add_option("--config", g.config, "Run configuration (JSON)");

    GenArgs gen;
    auto* c_gen = app.add_subcommand("gen", "Generate a synthetic dataset");
    c_gen->add_option("--task", gen.task, "single | directional | general")->capture_default_str();
    c_gen->add_option("--phantoms", gen.phantoms)->capture_default_str();
    c_gen->add_option("--views", gen.views, "Viewing directions per phantom")->capture_default_str();
    c_gen->add_option("--K", gen.K, "Images per direction")->capture_default_str();
    c_gen->add_option("--L", gen.L, "Image side")->capture_default_str();
    c_gen->add_option("--components", gen.components, "Gaussians per phantom")->capture_default_str();
    c_gen->add_option("--noise", gen.noise, "gaussian | gaussian_ctf_shift | poisson")->capture_default_str();
    c_gen->add_option("--snr", gen.snr)->capture_default_str();
    c_gen->add_option("--out", gen.out, "Output directory")->required();

    TrainArgs tr;
    auto* c_train = app.add_subcommand("train", "Train a model");
    c_train->add_option("--data", tr.data, "Training dataset directory")->required();
    c_train->add_option("--eval", tr.eval, "Evaluation dataset directory");
    c_train->add_option("--out", tr.out, "Weights file")->required();
    c_train->add_option("--log", tr.log, "Metrics CSV");
    c_train->add_option("--init", tr.init, "Start from these weights");
    c_train->add_option("--epochs", tr.epochs);
    c_train->add_option("--lr", tr.lr);
    c_train->add_option("--batch", tr.batch);
    c_train->add_option("--max-batches", tr.max_batches);
    c_train->add_option("--snr", tr.snr);
    c_train->add_flag("--f64", tr.f64, "Train in double precision");

    DenoiseArgs dn;
    auto* c_denoise = app.add_subcommand("denoise", "Denoise an image tensor");
    c_denoise->add_option("--model", dn.model)->required();
    c_denoise->add_option("--in", dn.in, "L x L or K x L x L tensor")->required();
    c_denoise->add_option("--out", dn.out)->required();
    c_denoise->add_option("--pgm", dn.pgm, "Also write PGM images here");

    EvalArgs ev;
    auto* c_eval = app.add_subcommand("eval", "Relative MSE of the identity baseline and a model");
    c_eval->add_option("--model", ev.model);
    c_eval->add_option("--data", ev.data);
    c_eval->add_option("--snr", ev.snr);
    c_eval->add_option("--pred", ev.pred);
    c_eval->add_option("--target", ev.target);
    c_eval->add_flag("--per-image", ev.per_image, "Mean of per-image ratios");

    AttnArgs at;
    auto* c_attn = app.add_subcommand("attn", "Inspect attention coefficients of a set");
    c_attn->add_option("--model", at.model)->required();
    c_attn->add_option("--data", at.data);
    c_attn->add_option("--set", at.set)->capture_default_str();
    c_attn->add_option("--in", at.in);
    c_attn->add_option("--snr", at.snr);
    c_attn->add_flag("--clean", at.clean, "Use the clean images");
    c_attn->add_option("--out", at.out)->required();

    CheckArgs ck;
    auto* c_check = app.add_subcommand("check", "Run invariant suites");
    c_check->add_option("suite", ck.suite)->check(CLI::IsMember([] {
        auto s = check_suites();
        s.push_back("all");
        return s;
    }()))->capture_default_str();
    c_check->add_option("--L", ck.L)->capture_default_str();
    c_check->add_option("--model", ck.model)->check(CLI::IsMember({"layers", "tiny-cnn", "tiny-transformer"}))
        ->capture_default_str();

    BenchArgs bn;
    auto* c_bench = app.add_subcommand("bench", "Time the polar map and attention");
    c_bench->add_option("--sizes", bn.sizes)->delimiter(',')->capture_default_str();
    c_bench->add_option("--repeats", bn.repeats)->capture_default_str();
    c_bench->add_option("--out", bn.out, "Also write the CSV here");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : exit_usage;
    }

    try {
        set_thread_count(g.threads);
        if (c_gen->parsed()) cmd_gen(g, gen);
        else if (c_train->parsed()) tr.f64 ? run_train<double>(g, tr) : run_train<float>(g, tr);
        else if (c_denoise->parsed()) cmd_denoise(dn);
        else if (c_eval->parsed()) cmd_eval(g, ev);
        else if (c_attn->parsed()) cmd_attn(g, at);
        else if (c_check->parsed()) return cmd_check(g, ck);
        else if (c_bench->parsed()) cmd_bench(g, bn);
    } catch (const UsageError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_usage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return exit_runtime;
    }
    return 0;
}
