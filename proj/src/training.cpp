#include "ptdn/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numeric>
#include <random>
#include <sstream>

#include "ptdn/parallel.hpp"

namespace ptdn {

using json = nlohmann::json;

template <typename T>
LossAndGradient<T> mse_loss(const std::vector<CartesianImage<T>>& pred, const std::vector<CartesianImage<T>>& target) {
    if (pred.size() != target.size() || pred.empty())
        throw std::invalid_argument("mse_loss: " + std::to_string(pred.size()) + " predictions for " +
                                    std::to_string(target.size()) + " targets");
    std::size_t count = 0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        if (pred[k].L != target[k].L) throw std::invalid_argument("mse_loss: image sizes differ");
        count += pred[k].data.size();
    }
    LossAndGradient<T> r;
    r.gradient.reserve(pred.size());
    const double scale = 2.0 / static_cast<double>(count);
    for (std::size_t k = 0; k < pred.size(); ++k) {
        CartesianImage<T> g(pred[k].L);
        for (std::size_t i = 0; i < g.data.size(); ++i) {
            const double d = static_cast<double>(pred[k].data[i]) - static_cast<double>(target[k].data[i]);
            r.loss += d * d;
            g.data[i] = static_cast<T>(scale * d);
        }
        r.gradient.push_back(std::move(g));
    }
    r.loss /= static_cast<double>(count);
    return r;
}

template <typename T, typename U>
double relative_mse(const std::vector<CartesianImage<T>>& pred, const std::vector<CartesianImage<U>>& target,
                    bool per_image) {
    if (pred.empty() || pred.size() != target.size())
        throw std::invalid_argument("relative_mse: need matching, nonempty prediction and target lists");
    double num = 0.0, den = 0.0, ratios = 0.0;
    for (std::size_t k = 0; k < pred.size(); ++k) {
        if (pred[k].L != target[k].L) throw std::invalid_argument("relative_mse: image sizes differ");
        double e = 0.0, t = 0.0;
        for (std::size_t i = 0; i < pred[k].data.size(); ++i) {
            const double y = static_cast<double>(target[k].data[i]);
            const double d = static_cast<double>(pred[k].data[i]) - y;
            e += d * d;
            t += y * y;
        }
        if (per_image) {
            if (t == 0.0) throw std::invalid_argument("relative_mse: target " + std::to_string(k) + " is all zero");
            ratios += e / t;
        }
        num += e;
        den += t;
    }
    if (den == 0.0) throw std::invalid_argument("relative_mse: all targets are zero");
    return per_image ? ratios / static_cast<double>(pred.size()) : num / den;
}

template <typename T>
void adam_step(std::vector<ParamRef<T>>& params, const std::vector<ParamRef<T>>& grads, AdamState& state,
               const AdamConfig& config) {
    if (grads.size() != params.size()) throw std::invalid_argument("adam_step: gradient list does not match parameters");
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.values.size(), 0.0);
            state.v.emplace_back(p.values.size(), 0.0);
        }
    }
    if (state.m.size() != params.size()) throw std::invalid_argument("adam_step: state does not match parameters");
    ++state.step;
    const double c1 = 1.0 - std::pow(config.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(config.beta2, static_cast<double>(state.step));
    for (std::size_t t = 0; t < params.size(); ++t) {
        auto& m = state.m[t];
        auto& v = state.v[t];
        if (grads[t].values.size() != m.size() || params[t].values.size() != m.size())
            throw std::invalid_argument("adam_step: shape mismatch in '" + params[t].name + "'");
        for (std::size_t i = 0; i < m.size(); ++i) {
            const double g = grads[t].values[i];
            m[i] = config.beta1 * m[i] + (1 - config.beta1) * g;
            v[i] = config.beta2 * v[i] + (1 - config.beta2) * g * g;
            const double step = config.lr * (m[i] / c1) / (std::sqrt(v[i] / c2) + config.eps);
            params[t].values[i] = static_cast<T>(static_cast<double>(params[t].values[i]) - step);
        }
    }
}

void TrainConfig::validate() const {
    if (!(adam.lr >= 0) || !std::isfinite(adam.lr)) throw std::invalid_argument("train config: lr must be >= 0");
    if (batch_size == 0) throw std::invalid_argument("train config: batch_size must be >= 1");
    if (!(adam.beta1 >= 0 && adam.beta1 < 1 && adam.beta2 >= 0 && adam.beta2 < 1))
        throw std::invalid_argument("train config: Adam betas must lie in [0, 1)");
    if (!(adam.eps > 0)) throw std::invalid_argument("train config: eps_adam must be positive");
    if (!(noise.snr > 0)) throw std::invalid_argument("train config: snr must be positive");
}

json to_json(const TrainConfig& c) {
    return {{"lr", c.adam.lr},         {"beta1", c.adam.beta1},   {"beta2", c.adam.beta2},
            {"eps_adam", c.adam.eps},  {"batch_size", c.batch_size}, {"epochs", c.epochs},
            {"seed", c.seed},          {"max_batches", c.max_batches}, {"noise", to_json(c.noise)}};
}

TrainConfig train_config_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("train config must be a JSON object");
    TrainConfig c;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "noise") {
                c.noise = noise_spec_from_json(value);
                continue;
            }
            if (!value.is_number()) throw std::invalid_argument("train config: '" + key + "' must be a number");
            const bool integral = value.is_number_unsigned() || (value.is_number_integer() && value.get<long long>() >= 0);
            auto count = [&]() -> std::uint64_t {
                if (!integral) throw std::invalid_argument("train config: '" + key + "' must be a nonnegative integer");
                return value.get<std::uint64_t>();
            };
            if (key == "lr") c.adam.lr = value.get<double>();
            else if (key == "beta1") c.adam.beta1 = value.get<double>();
            else if (key == "beta2") c.adam.beta2 = value.get<double>();
            else if (key == "eps_adam") c.adam.eps = value.get<double>();
            else if (key == "batch_size") c.batch_size = count();
            else if (key == "epochs") c.epochs = count();
            else if (key == "seed") c.seed = count();
            else if (key == "max_batches") c.max_batches = count();
            else throw std::invalid_argument("train config: unknown key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("train config: ") + e.what());
    }
    c.validate();
    return c;
}

RunConfig run_config_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("run config must be a JSON object");
    RunConfig c;
    for (const auto& [key, value] : j.items())
        if (key != "model" && key != "train" && key != "noise")
            throw std::invalid_argument("run config: unknown key '" + key + "' (expected model, train, noise)");
    if (j.contains("model")) {
        c.model_json = j["model"];
        c.model = model_config_from_json(j["model"]);
    }
    if (j.contains("train")) c.train = train_config_from_json(j["train"]);
    if (j.contains("noise")) {
        if (j.contains("train") && j["train"].is_object() && j["train"].contains("noise"))
            throw std::invalid_argument("run config: noise given both at top level and inside train");
        c.train.noise = noise_spec_from_json(j["noise"]);
    }
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open config " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw std::invalid_argument(path.string() + ": not valid JSON: " + e.what());
    }
    try {
        return run_config_from_json(j);
    } catch (const std::invalid_argument& e) {
        throw std::invalid_argument(path.string() + ": " + e.what());
    }
}

json to_json(const RunConfig& c) {
    json train = to_json(c.train);
    json noise = train["noise"];
    train.erase("noise");
    return {{"model", to_json(c.model)}, {"train", train}, {"noise", noise}};
}

void MetricLog::append(const MetricRecord& r) {
    if (!records.empty() && r.epoch <= records.back().epoch)
        throw std::invalid_argument("MetricLog: epoch " + std::to_string(r.epoch) + " after " +
                                    std::to_string(records.back().epoch));
    records.push_back(r);
}

std::string MetricLog::csv() const {
    std::ostringstream out;
    out << "epoch,train_mse,eval_rel_mse,seconds\n";
    char line[160];
    for (const auto& r : records) {
        std::snprintf(line, sizeof line, "%zu,%.9g,%.9g,%.3f\n", r.epoch, r.train_mse, r.eval_rel_mse, r.seconds);
        out << line;
    }
    return out.str();
}

void MetricLog::write_csv(const std::filesystem::path& path) const {
    std::ofstream out(path);
    out << csv();
    if (!out) throw std::runtime_error("cannot write " + path.string());
}

std::vector<std::vector<const CartesianImage<double>*>> training_items(const Dataset& data, ModelKind kind) {
    std::vector<std::vector<const CartesianImage<double>*>> items;
    if (kind == ModelKind::polar_transformer) {
        if (data.spec.task == Task::single)
            throw std::invalid_argument("a polar transformer needs a set task (directional or general), the data is '" +
                                        to_string(data.spec.task) + "'");
        for (const auto& set : data.sets) {
            items.emplace_back();
            for (const auto& x : set.images) items.back().push_back(&x);
        }
    } else {
        for (const auto& set : data.sets)
            for (const auto& x : set.images) items.push_back({&x});
    }
    return items;
}

std::uint64_t noise_seed(std::uint64_t seed, std::uint64_t epoch, std::uint64_t item) {
    return derive_seed(seed, {3, epoch, item});
}

template <typename T>
std::vector<CartesianImage<T>> noisy_item(const std::vector<const CartesianImage<double>*>& item, const NoiseSpec& noise,
                                          double power, std::uint64_t seed) {
    std::vector<CartesianImage<T>> out;
    out.reserve(item.size());
    for (std::size_t k = 0; k < item.size(); ++k)
        out.push_back(cast_image<T>(corrupt(*item[k], noise, power, derive_seed(seed, {k}))));
    return out;
}

namespace {

template <typename T>
std::vector<CartesianImage<T>> clean_item(const std::vector<const CartesianImage<double>*>& item) {
    std::vector<CartesianImage<T>> out;
    for (const auto* x : item) out.push_back(cast_image<T>(*x));
    return out;
}

void check_size(const ModelConfig& c, const Dataset& data) {
    if (data.spec.L != c.L)
        throw std::invalid_argument("model expects L = " + std::to_string(c.L) + " but the data has L = " +
                                    std::to_string(data.spec.L));
}

}  // namespace

template <typename T>
EvalResult evaluate(const PolarModel<T>& model, const Dataset& data, const NoiseSpec& noise, std::uint64_t seed,
                    bool per_image) {
    check_size(model.config(), data);
    const auto items = training_items(data, model.config().kind);
    if (items.empty()) throw std::invalid_argument("evaluate: empty dataset");
    std::vector<std::vector<CartesianImage<T>>> preds(items.size()), noisy(items.size());
    parallel_for(items.size(), [&](std::size_t i) {
        noisy[i] = noisy_item<T>(items[i], noise, data.signal_power, noise_seed(seed, ~std::uint64_t{0}, i));
        preds[i] = model.forward(noisy[i]);
    });
    std::vector<CartesianImage<T>> flat_pred, flat_noisy;
    std::vector<CartesianImage<double>> flat_clean;
    for (std::size_t i = 0; i < items.size(); ++i)
        for (std::size_t k = 0; k < items[i].size(); ++k) {
            flat_pred.push_back(std::move(preds[i][k]));
            flat_noisy.push_back(std::move(noisy[i][k]));
            flat_clean.push_back(*items[i][k]);
        }
    return {relative_mse(flat_pred, flat_clean, per_image), relative_mse(flat_noisy, flat_clean, per_image),
            flat_clean.size()};
}

template <typename T>
MetricLog train(PolarModel<T>& model, const Dataset& train_data, const Dataset* eval_data, const TrainConfig& config,
                const EpochCallback& on_epoch) {
    config.validate();
    check_size(model.config(), train_data);
    const auto items = training_items(train_data, model.config().kind);
    if (items.empty()) throw TrainingError("cannot train on an empty dataset");

    std::vector<ParamRef<T>> params;
    model.collect(params);
    // one gradient accumulator per worker; items are split into contiguous chunks and the
    // chunk sums are added in chunk order
    const std::size_t workers = std::max<std::size_t>(1, std::min(thread_count(), config.batch_size));
    std::vector<PolarModel<T>> accum(workers, PolarModel<T>(model.config()));
    std::vector<std::vector<ParamRef<T>>> accum_refs(workers);
    for (std::size_t w = 0; w < workers; ++w) accum[w].collect(accum_refs[w]);
    AdamState state;

    MetricLog log;
    const auto start = std::chrono::steady_clock::now();
    std::vector<std::size_t> order(items.size());
    for (std::size_t epoch = 1; epoch <= config.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 shuffle_rng(derive_seed(config.seed, {2, epoch}));
        std::shuffle(order.begin(), order.end(), shuffle_rng);

        double loss_sum = 0.0;
        std::size_t loss_items = 0;
        const std::size_t batches = (items.size() + config.batch_size - 1) / config.batch_size;
        const std::size_t run = config.max_batches ? std::min(batches, config.max_batches) : batches;
        for (std::size_t b = 0; b < run; ++b) {
            const std::size_t first = b * config.batch_size;
            const std::size_t count = std::min(config.batch_size, items.size() - first);
            const std::size_t used = std::min(workers, count);
            std::vector<double> chunk_loss(used, 0.0);
            const std::string where = "epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + " (seed " +
                                      std::to_string(config.seed) + ")";
            parallel_for(used, [&](std::size_t w) {
                accum[w].zero();
                for (std::size_t j = count * w / used; j < count * (w + 1) / used; ++j) {
                    const std::size_t idx = order[first + j];
                    const auto noisy =
                        noisy_item<T>(items[idx], config.noise, train_data.signal_power, noise_seed(config.seed, epoch, idx));
                    ModelTape<T> tape;
                    std::vector<CartesianImage<T>> pred;
                    try {
                        pred = model.forward(noisy, &tape);
                    } catch (const std::invalid_argument& e) {
                        // non-finite weights surface here before the loss is formed
                        throw TrainingError(std::string("training failed in ") + where + ": " + e.what());
                    }
                    auto lg = mse_loss(pred, clean_item<T>(items[idx]));
                    for (auto& g : lg.gradient)
                        for (auto& v : g.data) v = static_cast<T>(v / static_cast<T>(count));
                    model.backward(tape, lg.gradient, accum[w]);
                    chunk_loss[w] += lg.loss;
                }
            });
            double batch_loss = 0.0;
            for (double l : chunk_loss) batch_loss += l;
            if (!std::isfinite(batch_loss))
                throw TrainingError("non-finite training loss in " + where);
            for (std::size_t w = 1; w < used; ++w)
                for (std::size_t t = 0; t < params.size(); ++t) {
                    auto dst = accum_refs[0][t].values;
                    const auto src = accum_refs[w][t].values;
                    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
                }
            adam_step(params, accum_refs[0], state, config.adam);
            loss_sum += batch_loss;
            loss_items += count;
        }

        MetricRecord r;
        r.epoch = epoch;
        r.train_mse = loss_sum / static_cast<double>(loss_items);
        r.eval_rel_mse = eval_data ? evaluate(model, *eval_data, config.noise, config.seed).model
                                   : std::numeric_limits<double>::quiet_NaN();
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        log.append(r);
        if (on_epoch) on_epoch(r);
    }
    return log;
}

namespace {

// Filter slots whose radial partner falls outside the grid are stored but never used.
bool on_band(const ParamRef<double>& r, std::size_t i) {
    if (!r.name.ends_with(".filter")) return true;
    const std::size_t N = r.shape[2], band = r.shape[3], taps = r.shape[4];
    const std::size_t W = band / 2;
    const std::size_t d = (i / taps) % band, n = (i / (taps * band)) % N;
    const long p = static_cast<long>(n + d) - static_cast<long>(W);
    return p >= 0 && p < static_cast<long>(N);
}

double batch_loss(const PolarModel<double>& model, const std::vector<std::vector<CartesianImage<double>>>& inputs,
                  const std::vector<std::vector<CartesianImage<double>>>& targets) {
    double s = 0.0;
    for (std::size_t i = 0; i < inputs.size(); ++i) s += mse_loss(model.forward(inputs[i]), targets[i]).loss;
    return s / static_cast<double>(inputs.size());
}

}  // namespace

GradCheckReport grad_check(PolarModel<double>& model, const std::vector<std::vector<CartesianImage<double>>>& inputs,
                           const std::vector<std::vector<CartesianImage<double>>>& targets, double step,
                           std::size_t min_samples, std::uint64_t seed) {
    if (inputs.empty() || inputs.size() != targets.size())
        throw std::invalid_argument("grad_check: need matching, nonempty input and target batches");
    PolarModel<double> grads(model.config());
    grads.zero();
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        ModelTape<double> tape;
        auto lg = mse_loss(model.forward(inputs[i], &tape), targets[i]);
        for (auto& g : lg.gradient)
            for (auto& v : g.data) v /= static_cast<double>(inputs.size());
        model.backward(tape, lg.gradient, grads);
    }
    std::vector<ParamRef<double>> refs, grefs;
    model.collect(refs);
    grads.collect(grefs);

    std::vector<std::pair<std::size_t, std::size_t>> candidates;
    for (std::size_t t = 0; t < refs.size(); ++t)
        for (std::size_t i = 0; i < refs[t].values.size(); ++i)
            if (on_band(refs[t], i)) candidates.emplace_back(t, i);
    if (candidates.size() > 2 * min_samples) {
        std::mt19937_64 rng(seed);
        std::shuffle(candidates.begin(), candidates.end(), rng);
        candidates.resize(min_samples);
        std::sort(candidates.begin(), candidates.end());
    }

    GradCheckReport report;
    for (const auto& [t, i] : candidates) {
        double& w = refs[t].values[i];
        const double keep = w;
        w = keep + step;
        const double up = batch_loss(model, inputs, targets);
        w = keep - step;
        const double down = batch_loss(model, inputs, targets);
        w = keep;
        const double fd = (up - down) / (2 * step);
        const double an = grefs[t].values[i];
        // the floor keeps round-off in the differences from dominating exactly-zero gradients
        const double err = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-6});
        if (report.checked == 0 || err > report.max_rel_error) {
            report.max_rel_error = err;
            report.worst_parameter = refs[t].name + "[" + std::to_string(i) + "]";
        }
        ++report.checked;
    }
    return report;
}

#define PTDN_INSTANTIATE(T)                                                                                        \
    template LossAndGradient<T> mse_loss<T>(const std::vector<CartesianImage<T>>&,                                 \
                                            const std::vector<CartesianImage<T>>&);                                \
    template double relative_mse<T, T>(const std::vector<CartesianImage<T>>&, const std::vector<CartesianImage<T>>&, \
                                       bool);                                                                      \
    template void adam_step<T>(std::vector<ParamRef<T>>&, const std::vector<ParamRef<T>>&, AdamState&,             \
                               const AdamConfig&);                                                                 \
    template std::vector<CartesianImage<T>> noisy_item<T>(const std::vector<const CartesianImage<double>*>&,       \
                                                          const NoiseSpec&, double, std::uint64_t);                \
    template EvalResult evaluate<T>(const PolarModel<T>&, const Dataset&, const NoiseSpec&, std::uint64_t, bool);  \
    template MetricLog train<T>(PolarModel<T>&, const Dataset&, const Dataset*, const TrainConfig&,                \
                                const EpochCallback&);

PTDN_INSTANTIATE(float)
PTDN_INSTANTIATE(double)
template double relative_mse<float, double>(const std::vector<CartesianImage<float>>&,
                                            const std::vector<CartesianImage<double>>&, bool);

}  // namespace ptdn
