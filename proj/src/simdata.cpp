#include "ptdn/simdata.hpp"

#include <cmath>
#include <complex>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

#include "ptdn/fft.hpp"
#include "ptdn/parallel.hpp"
#include "ptdn/ptns.hpp"

namespace ptdn {

using json = nlohmann::json;

Mat3 matmul(const Mat3& a, const Mat3& b) {
    Mat3 c{};
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
            for (int k = 0; k < 3; ++k) c[3 * i + j] += a[3 * i + k] * b[3 * k + j];
    return c;
}

Mat3 transpose(const Mat3& a) {
    return {a[0], a[3], a[6], a[1], a[4], a[7], a[2], a[5], a[8]};
}

Mat3 random_orientation(std::mt19937_64& rng) {
    std::normal_distribution<double> d;
    double w, x, y, z, n;
    do {
        w = d(rng), x = d(rng), y = d(rng), z = d(rng);
        n = std::sqrt(w * w + x * x + y * y + z * z);
    } while (n < 1e-8);
    w /= n, x /= n, y /= n, z /= n;
    return {1 - 2 * (y * y + z * z), 2 * (x * y - z * w),     2 * (x * z + y * w),
            2 * (x * y + z * w),     1 - 2 * (x * x + z * z), 2 * (y * z - x * w),
            2 * (x * z - y * w),     2 * (y * z + x * w),     1 - 2 * (x * x + y * y)};
}

Mat3 inplane_rotation(double gamma) {
    const double c = std::cos(gamma), s = std::sin(gamma);
    return {c, -s, 0, s, c, 0, 0, 0, 1};
}

Phantom make_phantom(std::uint64_t seed, std::size_t n_components) {
    if (n_components == 0) throw std::invalid_argument("make_phantom: need at least one component");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> weight(0.5, 1.5), coord(-0.6, 0.6),
        variance(0.02 * 0.02, 0.15 * 0.15);
    Phantom ph;
    for (std::size_t c = 0; c < n_components; ++c) {
        GaussianBlob blob;
        blob.weight = weight(rng);
        // keep |mean| + 3 sigma_max inside the unit square after any rotation
        do {
            blob.mean = {coord(rng), coord(rng), coord(rng)};
        } while (blob.mean[0] * blob.mean[0] + blob.mean[1] * blob.mean[1] + blob.mean[2] * blob.mean[2] >
                 0.55 * 0.55);
        const Mat3 U = random_orientation(rng);
        const Mat3 D = {variance(rng), 0, 0, 0, variance(rng), 0, 0, 0, variance(rng)};
        blob.covariance = matmul(matmul(U, D), transpose(U));
        ph.components.push_back(blob);
    }
    // unit total mass
    double total = 0.0;
    for (const auto& c : ph.components) total += c.weight;
    for (auto& c : ph.components) c.weight /= total;
    return ph;
}

CartesianImage<double> project(const Phantom& phantom, const Mat3& O, std::size_t L) {
    if (L == 0 || L % 2) throw std::invalid_argument("project: L must be even and positive");
    CartesianImage<double> img(L);
    for (const auto& blob : phantom.components) {
        const auto& m = blob.mean;
        const double mx = O[0] * m[0] + O[1] * m[1] + O[2] * m[2];
        const double my = O[3] * m[0] + O[4] * m[1] + O[5] * m[2];
        const Mat3 S = matmul(matmul(O, blob.covariance), transpose(O));
        const double a = S[0], b = S[1], d = S[4];
        const double det = a * d - b * b;
        if (!(det > 0)) throw std::invalid_argument("project: degenerate covariance");
        const double ia = d / det, ib = -b / det, id = a / det;
        const double amp = blob.weight / (2 * std::numbers::pi * std::sqrt(det));
        for (std::size_t i = 0; i < L; ++i) {
            const double dx = img.coord(i) - mx;
            for (std::size_t j = 0; j < L; ++j) {
                const double dy = img.coord(j) - my;
                img(i, j) += amp * std::exp(-0.5 * (ia * dx * dx + 2 * ib * dx * dy + id * dy * dy));
            }
        }
    }
    return img;
}

namespace {

long signed_frequency(std::size_t a, std::size_t L) {
    return a < L / 2 ? static_cast<long>(a) : static_cast<long>(a) - static_cast<long>(L);
}

std::vector<std::complex<double>> spectrum(const CartesianImage<double>& x) {
    std::vector<std::complex<double>> f(x.data.begin(), x.data.end());
    fft::fft2(f, x.L, false);
    return f;
}

CartesianImage<double> real_part(std::vector<std::complex<double>>& f, std::size_t L) {
    fft::fft2(f, L, true);
    CartesianImage<double> out(L);
    for (std::size_t i = 0; i < f.size(); ++i) out.data[i] = f[i].real();
    return out;
}

}  // namespace

double ctf_value(double rho, double defocus) {
    return std::sin(-std::numbers::pi * kElectronWavelength * defocus * rho * rho);
}

CartesianImage<double> apply_ctf(const CartesianImage<double>& x, double defocus) {
    if (!(defocus > 0)) throw std::invalid_argument("apply_ctf: defocus must be positive");
    const std::size_t L = x.L;
    auto f = spectrum(x);
    const double unit = 1.0 / (static_cast<double>(L) * kPixelSize);
    for (std::size_t a = 0; a < L; ++a)
        for (std::size_t b = 0; b < L; ++b) {
            const double kx = signed_frequency(a, L) * unit, ky = signed_frequency(b, L) * unit;
            f[a * L + b] *= ctf_value(std::sqrt(kx * kx + ky * ky), defocus);
        }
    return real_part(f, L);
}

CartesianImage<double> apply_shift(const CartesianImage<double>& x, double dx, double dy, double max_shift) {
    if (std::abs(dx) > max_shift || std::abs(dy) > max_shift)
        throw std::invalid_argument("apply_shift: shift exceeds the bound of " + std::to_string(max_shift) + " pixels");
    const std::size_t L = x.L;
    auto ramp = [L](double s) {
        std::vector<std::complex<double>> r(L);
        for (std::size_t a = 0; a < L; ++a) {
            const long k = signed_frequency(a, L);
            const double phase = -2 * std::numbers::pi * static_cast<double>(k) * s / static_cast<double>(L);
            r[a] = (2 * k == -static_cast<long>(L)) ? std::complex<double>(std::cos(phase), 0.0)
                                                     : std::polar(1.0, phase);
        }
        return r;
    };
    const auto rx = ramp(dx), ry = ramp(dy);
    auto f = spectrum(x);
    for (std::size_t a = 0; a < L; ++a)
        for (std::size_t b = 0; b < L; ++b) f[a * L + b] *= rx[a] * ry[b];
    return real_part(f, L);
}

double signal_power(const std::vector<CartesianImage<double>>& images) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& x : images) {
        for (double v : x.data) sum += v * v;
        count += x.data.size();
    }
    if (count == 0) throw std::invalid_argument("signal_power: no pixels");
    return sum / static_cast<double>(count);
}

CartesianImage<double> add_gaussian_noise(const CartesianImage<double>& x, double snr, double power,
                                          std::uint64_t seed) {
    if (!(snr > 0)) throw std::invalid_argument("add_gaussian_noise: snr must be positive");
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> noise(0.0, std::sqrt(power / snr));
    CartesianImage<double> y = x;
    for (auto& v : y.data) v += noise(rng);
    return y;
}

CartesianImage<double> add_poisson_noise(const CartesianImage<double>& x, double snr, double eta, double power,
                                         std::uint64_t seed) {
    if (!(snr > 0)) throw std::invalid_argument("add_poisson_noise: snr must be positive");
    if (eta == 0.0) throw std::invalid_argument("add_poisson_noise: eta must be nonzero");
    const double lambda0 = power / (snr * eta * eta);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        if (lambda0 - x.data[i] / eta < 0) {
            // eta x <= S^2 / snr bounds |eta| by the most extreme pixel of matching sign
            double extreme = 0.0;
            for (double v : x.data) extreme = std::max(extreme, eta > 0 ? v : -v);
            std::ostringstream msg;
            msg << "add_poisson_noise: negative rate at pixel (" << i / x.L << ", " << i % x.L
                << "); largest admissible |eta| is " << power / (snr * extreme);
            throw std::invalid_argument(msg.str());
        }
    }
    std::mt19937_64 rng(seed);
    CartesianImage<double> y(x.L);
    for (std::size_t i = 0; i < x.data.size(); ++i) {
        std::poisson_distribution<long long> counts(lambda0 - x.data[i] / eta);
        y.data[i] = eta * (lambda0 - static_cast<double>(counts(rng)));
    }
    return y;
}

std::string to_string(NoiseModel m) {
    switch (m) {
        case NoiseModel::gaussian: return "gaussian";
        case NoiseModel::gaussian_ctf_shift: return "gaussian-ctf-shift";
        case NoiseModel::poisson: return "poisson";
    }
    return "?";
}

NoiseModel noise_model_from_string(const std::string& s) {
    if (s == "gaussian") return NoiseModel::gaussian;
    if (s == "gaussian-ctf-shift") return NoiseModel::gaussian_ctf_shift;
    if (s == "poisson") return NoiseModel::poisson;
    throw std::invalid_argument("unknown noise model '" + s + "'");
}

CartesianImage<double> corrupt(const CartesianImage<double>& x, const NoiseSpec& spec, double power,
                               std::uint64_t seed) {
    switch (spec.model) {
        case NoiseModel::gaussian:
            return add_gaussian_noise(x, spec.snr, power, seed);
        case NoiseModel::gaussian_ctf_shift: {
            std::mt19937_64 rng(derive_seed(seed, {0}));
            const double bound = spec.max_shift < 0 ? static_cast<double>(x.L) / 8 : spec.max_shift;
            std::uniform_real_distribution<double> defocus(spec.defocus_min, spec.defocus_max), shift(-bound, bound);
            const double df = defocus(rng), dx = shift(rng), dy = shift(rng);
            return add_gaussian_noise(apply_shift(apply_ctf(x, df), dx, dy, bound), spec.snr, power,
                                      derive_seed(seed, {1}));
        }
        case NoiseModel::poisson: {
            const double eta = spec.eta == 0.0 ? 0.1 * std::sqrt(power) : spec.eta;
            return add_poisson_noise(x, spec.snr, eta, power, seed);
        }
    }
    throw std::invalid_argument("corrupt: bad noise model");
}

std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path) {
    auto mix = [](std::uint64_t z) {
        z += 0x9e3779b97f4a7c15ULL;
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    };
    std::uint64_t h = mix(seed);
    for (auto p : path) h = mix(h ^ mix(p + 0x632be59bd9b4e019ULL));
    return h;
}

std::string to_string(Task t) {
    switch (t) {
        case Task::single: return "single";
        case Task::directional: return "directional";
        case Task::general: return "general";
    }
    return "?";
}

Task task_from_string(const std::string& s) {
    if (s == "single") return Task::single;
    if (s == "directional") return Task::directional;
    if (s == "general") return Task::general;
    throw std::invalid_argument("unknown task '" + s + "'");
}

std::size_t set_size(Task task, std::size_t K) {
    switch (task) {
        case Task::single: return 1;
        case Task::directional: return K;
        case Task::general: return 2 * K;
    }
    return 0;
}

ImageSet make_set(const DatasetSpec& spec, std::size_t index) {
    const std::size_t p = index / spec.views_per_phantom;
    const Phantom phantom = make_phantom(derive_seed(spec.seed, {0, p}), spec.components);
    std::mt19937_64 rng(derive_seed(spec.seed, {1, index}));
    std::uniform_real_distribution<double> angle(0.0, 2 * std::numbers::pi);

    const std::size_t views = spec.task == Task::general ? 2 : 1;
    const std::size_t copies = spec.task == Task::single ? 1 : spec.K;
    ImageSet set;
    set.labels.phantom = p;
    for (std::size_t v = 0; v < views; ++v) {
        const Mat3 O = random_orientation(rng);
        for (std::size_t k = 0; k < copies; ++k) {
            const double gamma = spec.task == Task::single ? 0.0 : angle(rng);
            const Mat3 Ok = matmul(inplane_rotation(gamma), O);
            set.images.push_back(project(phantom, Ok, spec.L));
            set.labels.angles.push_back(gamma);
            set.labels.clusters.push_back(static_cast<int>(v));
            set.labels.orientations.push_back(Ok);
        }
    }
    return set;
}

std::size_t Dataset::image_count() const {
    std::size_t n = 0;
    for (const auto& s : sets) n += s.images.size();
    return n;
}

namespace {

void validate(const DatasetSpec& spec) {
    if (spec.n_phantoms == 0 || spec.views_per_phantom == 0) throw std::invalid_argument("dataset: empty");
    if (spec.task != Task::single && spec.K == 0) throw std::invalid_argument("dataset: K must be positive");
    if (spec.L < 4 || spec.L % 2) throw std::invalid_argument("dataset: L must be even and at least 4");
    if (spec.components == 0) throw std::invalid_argument("dataset: components must be positive");
    if (!(spec.noise.snr > 0)) throw std::invalid_argument("dataset: snr must be positive");
}

std::string set_id(std::size_t i) {
    std::ostringstream s;
    s << std::setw(6) << std::setfill('0') << i;
    return s.str();
}

}  // namespace

json to_json(const NoiseSpec& n) {
    return {{"model", to_string(n.model)}, {"snr", n.snr},       {"defocus_min", n.defocus_min},
            {"defocus_max", n.defocus_max}, {"max_shift", n.max_shift}, {"eta", n.eta}};
}

NoiseSpec noise_spec_from_json(const json& j) {
    if (!j.is_object()) throw std::invalid_argument("noise spec must be a JSON object");
    NoiseSpec n;
    try {
        for (const auto& [key, value] : j.items()) {
            if (key == "model") n.model = noise_model_from_string(value.get<std::string>());
            else if (!value.is_number()) throw std::invalid_argument("noise spec: '" + key + "' must be a number");
            else if (key == "snr") n.snr = value.get<double>();
            else if (key == "defocus_min") n.defocus_min = value.get<double>();
            else if (key == "defocus_max") n.defocus_max = value.get<double>();
            else if (key == "max_shift") n.max_shift = value.get<double>();
            else if (key == "eta") n.eta = value.get<double>();
            else throw std::invalid_argument("noise spec: unknown key '" + key + "'");
        }
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("noise spec: ") + e.what());
    }
    if (!(n.snr > 0)) throw std::invalid_argument("noise spec: snr must be positive");
    return n;
}

Dataset generate_dataset(const DatasetSpec& spec) {
    validate(spec);
    Dataset data;
    data.spec = spec;
    data.sets.resize(spec.n_phantoms * spec.views_per_phantom);
    parallel_for(data.sets.size(), [&](std::size_t i) { data.sets[i] = make_set(spec, i); });
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& s : data.sets)
        for (const auto& x : s.images) {
            for (double v : x.data) sum += v * v;
            count += x.data.size();
        }
    data.signal_power = sum / static_cast<double>(count);
    return data;
}

void save_dataset(const Dataset& data, const std::filesystem::path& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir / "clean");
    fs::create_directories(dir / "labels");
    const auto& s = data.spec;
    json manifest = {{"format", "ptdn-dataset"},
                     {"version", 1},
                     {"task", to_string(s.task)},
                     {"n_phantoms", s.n_phantoms},
                     {"views_per_phantom", s.views_per_phantom},
                     {"K", s.K},
                     {"L", s.L},
                     {"components", s.components},
                     {"seed", s.seed},
                     {"set_count", data.sets.size()},
                     {"images_per_set", set_size(s.task, s.K)},
                     {"signal_power", data.signal_power},
                     {"noise", to_json(s.noise)}};
    {
        std::ofstream out(dir / "manifest.json");
        out << manifest.dump(2) << "\n";
        if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
    }
    for (std::size_t i = 0; i < data.sets.size(); ++i) {
        const auto& set = data.sets[i];
        TensorFile t;
        t.dtype = DType::f64;
        t.dims = {set.images.size(), s.L, s.L};
        for (const auto& x : set.images) t.values.insert(t.values.end(), x.data.begin(), x.data.end());
        save_ptns(dir / "clean" / (set_id(i) + ".ptns"), t);

        json orient = json::array();
        for (const auto& o : set.labels.orientations) orient.push_back(o);
        json labels = {{"phantom", set.labels.phantom},
                       {"angles", set.labels.angles},
                       {"clusters", set.labels.clusters},
                       {"orientations", orient}};
        std::ofstream out(dir / "labels" / (set_id(i) + ".json"));
        out << labels.dump() << "\n";
        if (!out) throw std::runtime_error("cannot write labels for set " + set_id(i));
    }
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw std::runtime_error("no manifest.json in " + dir.string());
    json m;
    try {
        in >> m;
    } catch (const json::exception& e) {
        throw std::runtime_error("corrupt manifest.json in " + dir.string() + ": " + e.what());
    }
    if (m.value("format", "") != "ptdn-dataset") throw std::runtime_error(dir.string() + " is not a ptdn dataset");
    Dataset data;
    auto& s = data.spec;
    s.task = task_from_string(m.at("task").get<std::string>());
    s.n_phantoms = m.at("n_phantoms").get<std::size_t>();
    s.views_per_phantom = m.at("views_per_phantom").get<std::size_t>();
    s.K = m.at("K").get<std::size_t>();
    s.L = m.at("L").get<std::size_t>();
    s.components = m.at("components").get<std::size_t>();
    s.seed = m.at("seed").get<std::uint64_t>();
    s.noise = noise_spec_from_json(m.at("noise"));
    data.signal_power = m.at("signal_power").get<double>();
    const std::size_t count = m.at("set_count").get<std::size_t>();
    const std::size_t per_set = set_size(s.task, s.K);
    data.sets.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
        const auto t = load_ptns(dir / "clean" / (set_id(i) + ".ptns"));
        if (t.dims != std::vector<std::uint64_t>{per_set, s.L, s.L})
            throw std::runtime_error("set " + set_id(i) + ": tensor shape does not match the manifest");
        auto& set = data.sets[i];
        for (std::size_t k = 0; k < per_set; ++k) {
            CartesianImage<double> x(s.L);
            std::copy_n(t.values.begin() + static_cast<std::ptrdiff_t>(k * s.L * s.L), s.L * s.L, x.data.begin());
            set.images.push_back(std::move(x));
        }
        std::ifstream lin(dir / "labels" / (set_id(i) + ".json"));
        if (lin) {
            json l;
            lin >> l;
            set.labels.phantom = l.at("phantom").get<std::size_t>();
            set.labels.angles = l.at("angles").get<std::vector<double>>();
            set.labels.clusters = l.at("clusters").get<std::vector<int>>();
            for (const auto& o : l.at("orientations")) set.labels.orientations.push_back(o.get<Mat3>());
        }
    }
    return data;
}

Dataset gen_dataset(const DatasetSpec& spec, const std::filesystem::path& dir) {
    auto data = generate_dataset(spec);
    save_dataset(data, dir);
    return data;
}

}  // namespace ptdn
