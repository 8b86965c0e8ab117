#pragma once

// Synthetic projection data: Gaussian-mixture phantoms with closed-form
// tomographic projections, a phase CTF, Fourier shifts, and noise models.

#include <array>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include <json.hpp>

#include "ptdn/image.hpp"

namespace ptdn {

using Vec3 = std::array<double, 3>;
/// Row-major 3 x 3.
using Mat3 = std::array<double, 9>;

Mat3 matmul(const Mat3& a, const Mat3& b);
Mat3 transpose(const Mat3& a);
/// Uniform over SO(3) (normalized Gaussian quaternion).
Mat3 random_orientation(std::mt19937_64& rng);
/// Rotation about the projection axis; rotates the projected image counterclockwise by gamma.
Mat3 inplane_rotation(double gamma);

struct GaussianBlob {
    double weight = 1.0;
    Vec3 mean{};
    Mat3 covariance{};
};

struct Phantom {
    std::vector<GaussianBlob> components;
};

/// Means inside [-0.6, 0.6]^3 restricted to |mean| <= 0.55, covariance eigenvalues in (0.02^2, 0.15^2),
/// weights normalized to unit total mass.
Phantom make_phantom(std::uint64_t seed, std::size_t n_components);

/// Line integral along the third axis after rotating the phantom by orientation,
/// point-sampled at pixel centres (2i/L, 2j/L).
CartesianImage<double> project(const Phantom& phantom, const Mat3& orientation, std::size_t L);

inline constexpr double kElectronWavelength = 0.0197;  // Angstrom, 300 kV
inline constexpr double kPixelSize = 1.0;              // Angstrom

/// c(rho) = sin(-pi lambda defocus rho^2), rho in cycles per Angstrom.
double ctf_value(double rho, double defocus);
CartesianImage<double> apply_ctf(const CartesianImage<double>& x, double defocus);

/// Periodic sub-pixel shift by a Fourier phase ramp. The Nyquist row/column uses the
/// real part of its ramp so the output stays real.
CartesianImage<double> apply_shift(const CartesianImage<double>& x, double dx, double dy, double max_shift);

/// Mean square pixel value over a collection of images.
double signal_power(const std::vector<CartesianImage<double>>& images);

/// y = x + nu, nu ~ N(0, S^2 / snr), where S^2 = power.
CartesianImage<double> add_gaussian_noise(const CartesianImage<double>& x, double snr, double power,
                                          std::uint64_t seed);
/// y = eta (lambda0 - c), c ~ Poisson(lambda0 - x / eta), lambda0 = S^2 / (snr eta^2).
CartesianImage<double> add_poisson_noise(const CartesianImage<double>& x, double snr, double eta, double power,
                                         std::uint64_t seed);

enum class NoiseModel { gaussian, gaussian_ctf_shift, poisson };
std::string to_string(NoiseModel m);
NoiseModel noise_model_from_string(const std::string& s);

struct NoiseSpec {
    NoiseModel model = NoiseModel::gaussian;
    double snr = 0.1;
    double defocus_min = 1.5e4;
    double defocus_max = 2.5e4;
    double max_shift = -1.0;  // negative: L / 8
    double eta = 0.0;         // poisson only; 0 means 0.1 * S
};

nlohmann::json to_json(const NoiseSpec& s);
/// Unknown keys are rejected; missing keys keep their defaults.
NoiseSpec noise_spec_from_json(const nlohmann::json& j);

/// Noisy observation of clean image x. For gaussian_ctf_shift the CTF (random defocus)
/// is applied first, then a random shift, then Gaussian noise.
CartesianImage<double> corrupt(const CartesianImage<double>& x, const NoiseSpec& spec, double power,
                               std::uint64_t seed);

/// splitmix64-style mixing of a seed with a stream of indices.
std::uint64_t derive_seed(std::uint64_t seed, std::initializer_list<std::uint64_t> path);

enum class Task { single, directional, general };
std::string to_string(Task t);
Task task_from_string(const std::string& s);

struct DatasetSpec {
    Task task = Task::directional;
    std::size_t n_phantoms = 10;
    std::size_t views_per_phantom = 10;
    std::size_t K = 8;
    std::size_t L = 32;
    std::size_t components = 8;
    NoiseSpec noise;
    std::uint64_t seed = 0;
};

struct SetLabels {
    std::vector<double> angles;          // in-plane angle of each member
    std::vector<int> clusters;           // viewing-direction id of each member
    std::vector<Mat3> orientations;      // full orientation of each member
    std::size_t phantom = 0;
};

struct ImageSet {
    std::vector<CartesianImage<double>> images;
    SetLabels labels;
};

/// Images per set: 1 (single), K (directional), 2K (general).
std::size_t set_size(Task task, std::size_t K);

/// Deterministic: set i depends only on (seed, i).
ImageSet make_set(const DatasetSpec& spec, std::size_t index);

struct Dataset {
    DatasetSpec spec;
    double signal_power = 0.0;
    std::vector<ImageSet> sets;

    [[nodiscard]] std::size_t image_count() const;
};

Dataset generate_dataset(const DatasetSpec& spec);

/// Writes manifest.json, clean/<set-id>.ptns and labels/<set-id>.json.
void save_dataset(const Dataset& data, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);
Dataset gen_dataset(const DatasetSpec& spec, const std::filesystem::path& dir);

}  // namespace ptdn
