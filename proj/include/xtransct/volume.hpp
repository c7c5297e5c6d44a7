#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

namespace xtransct {

// Normalized 3D scalar field. Index order is (z,y,x) with z the slice axis;
// values are stored z-major and kept in [0,1]. World coordinates are in
// millimeters with the volume center at the isocenter origin. Values are
// held as float so the .vol round trip is bit-exact.
struct Volume {
    std::array<std::size_t, 3> dims{0, 0, 0};   // D,H,W
    std::array<double, 3> spacing{1.0, 1.0, 1.0};  // sz,sy,sx mm per voxel
    std::vector<float> values;                   // z-major

    std::size_t size() const { return dims[0] * dims[1] * dims[2]; }

    float& at(std::size_t z, std::size_t y, std::size_t x) {
        return values[(z * dims[1] + y) * dims[2] + x];
    }
    float at(std::size_t z, std::size_t y, std::size_t x) const {
        return values[(z * dims[1] + y) * dims[2] + x];
    }

    static Volume filled(std::array<std::size_t, 3> dims,
                         std::array<double, 3> spacing, float value);

    // Throws ContractError if dims/spacing are non-positive, the value count
    // is wrong, or any value falls outside [0,1].
    void validate() const;
};

// Binary mask paired with a Volume of the same dims.
struct SegMask {
    std::array<std::size_t, 3> dims{0, 0, 0};
    std::vector<std::uint8_t> values;  // {0,1}, z-major

    std::size_t size() const { return dims[0] * dims[1] * dims[2]; }
    std::size_t count() const;
};

enum class PhantomKind { NestedEllipsoids, Spheres, CubeLattice };

PhantomKind phantom_kind_from_string(const std::string& s);
std::string phantom_kind_to_string(PhantomKind k);

// Dataset substitute: procedurally generated volumes with ground-truth masks.
struct PhantomSpec {
    PhantomKind kind = PhantomKind::NestedEllipsoids;
    std::array<std::size_t, 3> dims{32, 32, 32};
    std::array<double, 3> spacing{1.0, 1.0, 1.0};
    std::uint64_t seed = 0;
    // Density ranges per structure, each within [0,1]. For nested-ellipsoids
    // the entries are {body, cavity, shell}; for spheres {body, inclusion};
    // for cube-lattice one entry per cube.
    std::vector<std::array<double, 2>> density_ranges;

    void validate() const;
};

// Realized analytic shapes, exposed so tests can rasterize independently.
struct Ellipsoid {
    std::array<double, 3> center;     // (x,y,z) in [-1,1] normalized coords
    std::array<double, 3> semi_axes;  // same coords
    double density;

    bool contains(double x, double y, double z) const {
        const double a = (x - center[0]) / semi_axes[0];
        const double b = (y - center[1]) / semi_axes[1];
        const double c = (z - center[2]) / semi_axes[2];
        return a * a + b * b + c * c <= 1.0;
    }
};

struct PhantomRealization {
    std::vector<Ellipsoid> cavities;  // nested-ellipsoids / spheres inclusions
    Ellipsoid body{};
    double shell_inner_radius = 0.0;  // nested-ellipsoids shell band, in
    double shell_outer_radius = 0.0;  // units of sqrt(body quadratic form)
    double body_density = 0.0;
    double shell_density = 0.0;
};

// Deterministic for a fixed spec. The mask marks cavity/inclusion voxels
// (lung analogue). dims must be >= 8 per axis.
std::pair<Volume, SegMask> make_phantom(const PhantomSpec& spec,
                                        PhantomRealization* realization = nullptr);

// Clamp raw HU values to [lo,hi] and map affinely onto [0,1].
// Default window (-1000, 400) HU.
Volume normalize_hu(const std::vector<double>& raw_hu,
                    std::array<std::size_t, 3> dims,
                    std::array<double, 3> spacing,
                    std::array<double, 2> window = {-1000.0, 400.0});

// Trilinear resample in normalized coordinates; exact on constant fields and
// on per-axis linear ramps away from the clamped border.
Volume resample(const Volume& v, std::array<std::size_t, 3> target_dims);

// Raw little-endian float32, z-major, plus a `<path>.json` sidecar carrying
// dims/spacing/value_range/version.
void save_volume(const Volume& v, const std::string& path);
Volume load_volume(const std::string& path);

void save_mask(const SegMask& m, std::array<double, 3> spacing,
               const std::string& path);
SegMask load_mask(const std::string& path);

}  // namespace xtransct
