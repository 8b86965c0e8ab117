#include "ptdn/fft.hpp"

#include <fftw3.h>

#include <algorithm>
#include <map>
#include <mutex>
#include <stdexcept>
#include <tuple>
#include <vector>

namespace ptdn::fft {
namespace {

std::mutex& planner_mutex() {
    static std::mutex m;
    return m;
}

enum class Kind { r2c, c2r, c2c_fwd, c2c_inv };

template <typename T>
struct Traits;

template <>
struct Traits<double> {
    using plan = fftw_plan;
    using cplx = fftw_complex;
    static plan r2c(int n) {
        std::vector<double> in(n);
        std::vector<std::complex<double>> out(n / 2 + 1);
        return fftw_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<cplx*>(out.data()), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    static plan c2r(int n) {
        std::vector<std::complex<double>> in(n / 2 + 1);
        std::vector<double> out(n);
        return fftw_plan_dft_c2r_1d(n, reinterpret_cast<cplx*>(in.data()), out.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    static void destroy(plan p) { fftw_destroy_plan(p); }
};

template <>
struct Traits<float> {
    using plan = fftwf_plan;
    using cplx = fftwf_complex;
    static plan r2c(int n) {
        std::vector<float> in(n);
        std::vector<std::complex<float>> out(n / 2 + 1);
        return fftwf_plan_dft_r2c_1d(n, in.data(), reinterpret_cast<cplx*>(out.data()), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    static plan c2r(int n) {
        std::vector<std::complex<float>> in(n / 2 + 1);
        std::vector<float> out(n);
        return fftwf_plan_dft_c2r_1d(n, reinterpret_cast<cplx*>(in.data()), out.data(), FFTW_ESTIMATE | FFTW_UNALIGNED);
    }
    static void destroy(plan p) { fftwf_destroy_plan(p); }
};

template <typename Plan, typename Destroy>
class PlanCache {
public:
    explicit PlanCache(Destroy destroy) : destroy_(destroy) {}
    PlanCache(const PlanCache&) = delete;
    PlanCache& operator=(const PlanCache&) = delete;
    ~PlanCache() {
        std::lock_guard lock(planner_mutex());
        for (auto& [key, plan] : plans_) destroy_(plan);
    }

    template <typename Make>
    Plan get(std::tuple<Kind, std::size_t> key, Make make) {
        auto it = plans_.find(key);
        if (it != plans_.end()) return it->second;
        Plan plan;
        {
            std::lock_guard lock(planner_mutex());
            plan = make();
        }
        if (plan == nullptr) throw std::runtime_error("FFTW plan creation failed");
        plans_.emplace(key, plan);
        return plan;
    }

private:
    Destroy destroy_;
    std::map<std::tuple<Kind, std::size_t>, Plan> plans_;
};

template <typename T>
auto& plan_cache() {
    using P = typename Traits<T>::plan;
    thread_local PlanCache<P, void (*)(P)> cache(&Traits<T>::destroy);
    return cache;
}

auto& plan_cache_2d() {
    thread_local PlanCache<fftw_plan, void (*)(fftw_plan)> cache(&fftw_destroy_plan);
    return cache;
}

}  // namespace

template <>
void rfft<double>(std::span<const double> in, std::span<std::complex<double>> out) {
    const std::size_t n = in.size();
    if (out.size() != n / 2 + 1) throw std::invalid_argument("rfft: output size mismatch");
    auto plan = plan_cache<double>().get({Kind::r2c, n}, [n] { return Traits<double>::r2c(static_cast<int>(n)); });
    fftw_execute_dft_r2c(plan, const_cast<double*>(in.data()), reinterpret_cast<fftw_complex*>(out.data()));
}

template <>
void rfft<float>(std::span<const float> in, std::span<std::complex<float>> out) {
    const std::size_t n = in.size();
    if (out.size() != n / 2 + 1) throw std::invalid_argument("rfft: output size mismatch");
    auto plan = plan_cache<float>().get({Kind::r2c, n}, [n] { return Traits<float>::r2c(static_cast<int>(n)); });
    fftwf_execute_dft_r2c(plan, const_cast<float*>(in.data()), reinterpret_cast<fftwf_complex*>(out.data()));
}

template <>
void irfft<double>(std::span<const std::complex<double>> in, std::span<double> out) {
    const std::size_t n = out.size();
    if (in.size() != n / 2 + 1) throw std::invalid_argument("irfft: input size mismatch");
    thread_local std::vector<std::complex<double>> scratch;
    scratch.assign(in.begin(), in.end());  // c2r overwrites its input
    auto plan = plan_cache<double>().get({Kind::c2r, n}, [n] { return Traits<double>::c2r(static_cast<int>(n)); });
    fftw_execute_dft_c2r(plan, reinterpret_cast<fftw_complex*>(scratch.data()), out.data());
    const double scale = 1.0 / static_cast<double>(n);
    for (auto& v : out) v *= scale;
}

template <>
void irfft<float>(std::span<const std::complex<float>> in, std::span<float> out) {
    const std::size_t n = out.size();
    if (in.size() != n / 2 + 1) throw std::invalid_argument("irfft: input size mismatch");
    thread_local std::vector<std::complex<float>> scratch;
    scratch.assign(in.begin(), in.end());
    auto plan = plan_cache<float>().get({Kind::c2r, n}, [n] { return Traits<float>::c2r(static_cast<int>(n)); });
    fftwf_execute_dft_c2r(plan, reinterpret_cast<fftwf_complex*>(scratch.data()), out.data());
    const float scale = 1.0f / static_cast<float>(n);
    for (auto& v : out) v *= scale;
}

void fft2(std::span<std::complex<double>> data, std::size_t n, bool inverse) {
    if (data.size() != n * n) throw std::invalid_argument("fft2: data size must be n * n");
    const Kind kind = inverse ? Kind::c2c_inv : Kind::c2c_fwd;
    auto plan = plan_cache_2d().get({kind, n}, [n, inverse] {
        std::vector<std::complex<double>> tmp(n * n);
        auto* p = reinterpret_cast<fftw_complex*>(tmp.data());
        return fftw_plan_dft_2d(static_cast<int>(n), static_cast<int>(n), p, p, inverse ? FFTW_BACKWARD : FFTW_FORWARD,
                                FFTW_ESTIMATE | FFTW_UNALIGNED);
    });
    auto* p = reinterpret_cast<fftw_complex*>(data.data());
    fftw_execute_dft(plan, p, p);
    if (inverse) {
        const double scale = 1.0 / static_cast<double>(n * n);
        for (auto& v : data) v *= scale;
    }
}

}  // namespace ptdn::fft
