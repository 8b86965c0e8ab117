#include "ptdn/models.hpp"

#include <bit>
#include <cmath>
#include <fstream>
#include <sstream>

#include "ptdn/parallel.hpp"
#include "ptdn/ptns.hpp"

namespace ptdn {

using json = nlohmann::json;

std::string to_string(ModelKind k) { return k == ModelKind::polar_cnn ? "polar-cnn" : "polar-transformer"; }

ModelKind model_kind_from_string(const std::string& s) {
    if (s == "polar-cnn") return ModelKind::polar_cnn;
    if (s == "polar-transformer") return ModelKind::polar_transformer;
    throw std::invalid_argument("unknown model kind '" + s + "' (expected polar-cnn or polar-transformer)");
}

void ModelConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw std::invalid_argument(std::string("model config: ") + name + " must be positive");
    };
    positive(L, "L");
    positive(groups, "groups");
    if (kind == ModelKind::polar_cnn) {
        positive(depth, "depth");
        positive(channels, "channels");
        if (channels % groups) throw std::invalid_argument("model config: channels not divisible by groups");
    } else {
        positive(pre_depth, "pre_depth");
        positive(attn_depth, "attn_depth");
        positive(post_depth, "post_depth");
        positive(pre_channels, "pre_channels");
        positive(attn_channels, "attn_channels");
        positive(post_channels, "post_channels");
        positive(attention_blocks, "attention_blocks");
        positive(K, "K");
        for (auto c : {pre_channels, attn_channels, post_channels})
            if (c % groups) throw std::invalid_argument("model config: channels not divisible by groups");
    }
    if (delta < 0 || bandwidth < 0) throw std::invalid_argument("model config: negative grid parameter");
}

GridParams ModelConfig::grid_params() const {
    GridParams p{.L = L};
    if (N) p.N = N;
    if (M) p.M = M;
    if (delta > 0) p.delta = delta;
    if (bandwidth > 0) p.bandwidth = bandwidth;
    return p;
}

json to_json(const ModelConfig& c) {
    return {{"kind", to_string(c.kind)},
            {"L", c.L},
            {"N", c.N},
            {"M", c.M},
            {"delta", c.delta},
            {"bandwidth", c.bandwidth},
            {"depth", c.depth},
            {"channels", c.channels},
            {"pre_depth", c.pre_depth},
            {"attn_depth", c.attn_depth},
            {"post_depth", c.post_depth},
            {"pre_channels", c.pre_channels},
            {"attn_channels", c.attn_channels},
            {"post_channels", c.post_channels},
            {"attention_blocks", c.attention_blocks},
            {"share_block_weights", c.share_block_weights},
            {"K", c.K},
            {"Q", c.Q},
            {"W", c.W},
            {"groups", c.groups}};
}

ModelConfig model_config_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("model config must be a JSON object");
    ModelConfig c;
    const json defaults = to_json(c);
    for (const auto& [key, value] : j.items()) {
        if (!defaults.contains(key)) throw std::invalid_argument("model config: unknown key '" + key + "'");
        if (key != "kind" && value.type() != defaults[key].type() &&
            !(value.is_number() && defaults[key].is_number()))
            throw std::invalid_argument("model config: wrong type for '" + key + "'");
    }
    try {
        if (j.contains("kind")) c.kind = model_kind_from_string(j["kind"].get<std::string>());
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) field = j[key].get<std::remove_reference_t<decltype(field)>>();
        };
        get("L", c.L);
        get("N", c.N);
        get("M", c.M);
        get("delta", c.delta);
        get("bandwidth", c.bandwidth);
        get("depth", c.depth);
        get("channels", c.channels);
        get("pre_depth", c.pre_depth);
        get("attn_depth", c.attn_depth);
        get("post_depth", c.post_depth);
        get("pre_channels", c.pre_channels);
        get("attn_channels", c.attn_channels);
        get("post_channels", c.post_channels);
        get("attention_blocks", c.attention_blocks);
        get("share_block_weights", c.share_block_weights);
        get("K", c.K);
        get("Q", c.Q);
        get("W", c.W);
        get("groups", c.groups);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("model config: ") + e.what());
    }
    c.validate();
    return c;
}

template <typename T>
PolarModel<T>::PolarModel(const ModelConfig& config) : config_(config) {
    config_.validate();
    grid_ = std::make_shared<const PolarGrid>(build_grid(config_.grid_params()));
    const std::size_t N = grid_->N;
    const auto& c = config_;
    if (c.kind == ModelKind::polar_cnn) {
        first_ = ConvStack<T>({.in_channels = 1, .hidden_channels = c.channels, .out_channels = 1, .depth = c.depth,
                               .N = N, .Q = c.Q, .W = c.W, .groups = c.groups, .final_activation = false});
    } else {
        first_ = ConvStack<T>({.in_channels = 1, .hidden_channels = c.pre_channels, .out_channels = c.pre_channels,
                               .depth = c.pre_depth, .N = N, .Q = c.Q, .W = c.W, .groups = c.groups,
                               .final_activation = true});
        const std::size_t nets = c.share_block_weights ? 1 : c.attention_blocks;
        for (std::size_t b = 0; b < nets; ++b)
            kq_.emplace_back(ConvStackSpec{.in_channels = c.pre_channels, .hidden_channels = c.attn_channels,
                                           .out_channels = c.attn_channels, .depth = c.attn_depth, .N = N, .Q = c.Q,
                                           .W = c.W, .groups = c.groups, .final_activation = false});
        last_ = ConvStack<T>({.in_channels = c.pre_channels, .hidden_channels = c.post_channels, .out_channels = 1,
                              .depth = c.post_depth, .N = N, .Q = c.Q, .W = c.W, .groups = c.groups,
                              .final_activation = false});
    }
}

template <typename T>
void PolarModel<T>::initialize(std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    first_.initialize(rng);
    for (auto& net : kq_) net.initialize(rng);
    if (!kq_.empty()) last_.initialize(rng);
}

template <typename T>
void PolarModel<T>::zero() {
    first_.zero();
    for (auto& net : kq_) net.zero();
    if (!kq_.empty()) last_.zero();
}

template <typename T>
PolarImageSet<T> PolarModel<T>::encode(const std::vector<CartesianImage<T>>& xs) const {
    PolarImageSet<T> z(xs.size());
    parallel_for(xs.size(), [&](std::size_t i) {
        if (xs[i].L != config_.L)
            throw std::invalid_argument("model expects " + std::to_string(config_.L) + "x" + std::to_string(config_.L) +
                                        " images, got side " + std::to_string(xs[i].L));
        z[i] = to_polar(xs[i], *grid_);
    });
    return z;
}

template <typename T>
std::vector<CartesianImage<T>> PolarModel<T>::forward(const std::vector<CartesianImage<T>>& xs,
                                                      ModelTape<T>* tape) const {
    if (xs.empty()) throw std::invalid_argument("model forward: empty input");
    const std::size_t K = xs.size();
    auto z = encode(xs);
    if (tape) {
        *tape = ModelTape<T>{};
        tape->first.resize(K);
    }
    std::vector<CartesianImage<T>> out(K);
    if (config_.kind == ModelKind::polar_cnn) {
        parallel_for(K, [&](std::size_t i) {
            out[i] = from_polar(first_.forward(z[i], tape ? &tape->first[i] : nullptr), *grid_);
        });
        return out;
    }
    PolarImageSet<T> h(K);
    parallel_for(K, [&](std::size_t i) { h[i] = first_.forward(z[i], tape ? &tape->first[i] : nullptr); });
    if (tape) tape->attention.resize(config_.attention_blocks);
    for (std::size_t b = 0; b < config_.attention_blocks; ++b) {
        const auto& net = key_query(b);
        h = angular_attention_block(h, AttentionNets<T>{&net, &net, nullptr}, tape ? &tape->attention[b] : nullptr);
    }
    if (tape) tape->last.resize(K);
    parallel_for(K, [&](std::size_t i) {
        out[i] = from_polar(last_.forward(h[i], tape ? &tape->last[i] : nullptr), *grid_);
    });
    return out;
}

template <typename T>
void PolarModel<T>::backward(const ModelTape<T>& tape, const std::vector<CartesianImage<T>>& upstream,
                             PolarModel& grads) const {
    const std::size_t K = upstream.size();
    if (tape.first.size() != K) throw std::invalid_argument("model backward: tape does not match upstream count");
    std::vector<PolarImage<T>> g(K);
    parallel_for(K, [&](std::size_t i) { g[i] = from_polar_adjoint(upstream[i], *grid_); });
    if (config_.kind == ModelKind::polar_cnn) {
        for (std::size_t i = 0; i < K; ++i) first_.backward(tape.first[i], g[i], grads.first_);
        return;
    }
    for (std::size_t i = 0; i < K; ++i) g[i] = last_.backward(tape.last[i], g[i], grads.last_);
    for (std::size_t b = config_.attention_blocks; b-- > 0;) {
        const auto& net = key_query(b);
        auto& gnet = grads.kq_mut(b);
        g = angular_attention_block_backward(tape.attention[b], AttentionNets<T>{&net, &net, nullptr}, g,
                                             AttentionNetGrads<T>{&gnet, &gnet, nullptr});
    }
    for (std::size_t i = 0; i < K; ++i) first_.backward(tape.first[i], g[i], grads.first_);
}

template <typename T>
AttentionCoefficients<T> PolarModel<T>::attention(const std::vector<CartesianImage<T>>& xs) const {
    if (config_.kind != ModelKind::polar_transformer)
        throw std::invalid_argument("attention coefficients need a polar transformer");
    ModelTape<T> tape;
    forward(xs, &tape);
    return tape.attention.back().alpha;
}

template <typename T>
void PolarModel<T>::collect(std::vector<ParamRef<T>>& out) {
    if (config_.kind == ModelKind::polar_cnn) {
        first_.collect("cnn", out);
        return;
    }
    first_.collect("pre", out);
    for (std::size_t b = 0; b < kq_.size(); ++b)
        kq_[b].collect(kq_.size() == 1 ? std::string("keyquery") : "keyquery" + std::to_string(b), out);
    last_.collect("post", out);
}

template <typename T>
std::size_t PolarModel<T>::parameter_count() const {
    std::size_t n = first_.parameter_count();
    for (const auto& net : kq_) n += net.parameter_count();
    if (!kq_.empty()) n += last_.parameter_count();
    return n;
}

template <typename T>
CartesianImage<T> forward_single(const PolarModel<T>& model, const CartesianImage<T>& x) {
    return model.forward({x}).front();
}

template <typename T>
std::vector<CartesianImage<T>> forward_set(const PolarModel<T>& model, const std::vector<CartesianImage<T>>& xs) {
    if (model.config().kind != ModelKind::polar_transformer)
        throw std::invalid_argument("forward_set needs a polar transformer");
    for (const auto& x : xs)
        if (x.L != xs.front().L) throw std::invalid_argument("forward_set: images of different sizes");
    return model.forward(xs);
}

namespace {

std::string shape_text(const std::vector<std::size_t>& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) out += (i ? ", " : "") + std::to_string(s[i]);
    return out + "]";
}

void write_u64(std::ostream& out, std::uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
    out.write(reinterpret_cast<const char*>(b), 8);
}

json read_manifest(std::istream& in, const std::filesystem::path& path) {
    unsigned char b[8];
    if (!in.read(reinterpret_cast<char*>(b), 8)) throw WeightsError(path.string() + ": truncated file, no manifest");
    std::uint64_t len = 0;
    for (int i = 0; i < 8; ++i) len |= std::uint64_t(b[i]) << (8 * i);
    if (len > (1u << 28)) throw WeightsError(path.string() + ": corrupt manifest length");
    std::string text(len, '\0');
    if (!in.read(text.data(), static_cast<std::streamsize>(len)))
        throw WeightsError(path.string() + ": truncated file inside the manifest");
    json m;
    try {
        m = json::parse(text);
    } catch (const json::exception& e) {
        throw WeightsError(path.string() + ": corrupt manifest: " + e.what());
    }
    if (!m.is_object() || m.value("format", "") != "ptdn-weights" || !m.contains("config") || !m.contains("tensors"))
        throw WeightsError(path.string() + ": corrupt manifest: not a ptdn weights file");
    return m;
}

}  // namespace

template <typename T>
void save_weights(PolarModel<T>& model, const std::filesystem::path& path) {
    std::vector<ParamRef<T>> refs;
    model.collect(refs);
    json tensors = json::array();
    for (const auto& r : refs) tensors.push_back({{"name", r.name}, {"shape", r.shape}});
    const json manifest = {{"format", "ptdn-weights"},
                           {"version", 1},
                           {"dtype", sizeof(T) == 4 ? "f32" : "f64"},
                           {"config", to_json(model.config())},
                           {"tensors", tensors}};
    const std::string text = manifest.dump();
    std::ofstream out(path, std::ios::binary);
    if (!out) throw WeightsError("cannot open " + path.string() + " for writing");
    write_u64(out, text.size());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& r : refs) {
        TensorFile t;
        t.dtype = sizeof(T) == 4 ? DType::f32 : DType::f64;
        t.dims.assign(r.shape.begin(), r.shape.end());
        t.values.assign(r.values.begin(), r.values.end());
        write_ptns(out, t);
    }
    if (!out) throw WeightsError("failed writing " + path.string());
}

template <typename T>
PolarModel<T> load_weights(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WeightsError("cannot open " + path.string());
    const json m = read_manifest(in, path);
    ModelConfig config;
    try {
        config = model_config_from_json(m["config"]);
    } catch (const std::invalid_argument& e) {
        throw WeightsError(path.string() + ": " + e.what());
    }
    PolarModel<T> model(config);
    std::vector<ParamRef<T>> refs;
    model.collect(refs);
    const auto& listed = m["tensors"];
    if (!listed.is_array()) throw WeightsError(path.string() + ": corrupt manifest: tensors is not a list");
    for (std::size_t i = 0; i < refs.size(); ++i) {
        if (i >= listed.size())
            throw WeightsError(path.string() + ": manifest lists no tensor for layer '" + refs[i].name + "'");
        const auto name = listed[i].value("name", std::string{});
        if (name != refs[i].name)
            throw WeightsError(path.string() + ": manifest tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                               refs[i].name + "'");
        std::vector<std::size_t> shape;
        try {
            shape = listed[i].at("shape").get<std::vector<std::size_t>>();
        } catch (const json::exception&) {
            throw WeightsError(path.string() + ": corrupt manifest entry for '" + name + "'");
        }
        if (shape != refs[i].shape)
            throw WeightsError(path.string() + ": shape mismatch in layer '" + name + "': manifest has " + shape_text(shape) +
                               ", config implies " + shape_text(refs[i].shape));
    }
    if (listed.size() != refs.size())
        throw WeightsError(path.string() + ": manifest lists " + std::to_string(listed.size()) + " tensors, config implies " +
                           std::to_string(refs.size()));
    for (auto& r : refs) {
        TensorFile t;
        try {
            t = read_ptns(in);
        } catch (const PtnsError& e) {
            throw WeightsError(path.string() + ": truncated file: tensor '" + r.name + "' is missing (" + e.what() + ")");
        }
        if (std::vector<std::size_t>(t.dims.begin(), t.dims.end()) != r.shape)
            throw WeightsError(path.string() + ": tensor '" + r.name + "' has shape " +
                               shape_text({t.dims.begin(), t.dims.end()}) + ", expected " + shape_text(r.shape));
        for (std::size_t k = 0; k < t.values.size(); ++k) {
            if (!std::isfinite(t.values[k])) throw WeightsError(path.string() + ": tensor '" + r.name + "' is not finite");
            r.values[k] = static_cast<T>(t.values[k]);
        }
    }
    if (in.peek() != std::char_traits<char>::eof()) throw WeightsError(path.string() + ": trailing data after tensors");
    return model;
}

ModelConfig read_weights_config(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw WeightsError("cannot open " + path.string());
    try {
        return model_config_from_json(read_manifest(in, path)["config"]);
    } catch (const std::invalid_argument& e) {
        throw WeightsError(path.string() + ": " + e.what());
    }
}

#define PTDN_INSTANTIATE(T)                                                                                     \
    template class PolarModel<T>;                                                                               \
    template CartesianImage<T> forward_single<T>(const PolarModel<T>&, const CartesianImage<T>&);               \
    template std::vector<CartesianImage<T>> forward_set<T>(const PolarModel<T>&,                                \
                                                           const std::vector<CartesianImage<T>>&);              \
    template void save_weights<T>(PolarModel<T>&, const std::filesystem::path&);                                \
    template PolarModel<T> load_weights<T>(const std::filesystem::path&);

PTDN_INSTANTIATE(float)
PTDN_INSTANTIATE(double)

}  // namespace ptdn
