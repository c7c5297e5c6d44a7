#include "xtransct/volume.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

#include "xtransct/errors.hpp"
#include "xtransct/rng.hpp"

namespace xtransct {

using nlohmann::json;

Volume Volume::filled(std::array<std::size_t, 3> dims,
                      std::array<double, 3> spacing, float value) {
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    v.values.assign(v.size(), value);
    return v;
}

void Volume::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (dims[a] == 0) throw ContractError("Volume: zero extent on axis " + std::to_string(a));
        if (!(spacing[a] > 0.0))
            throw ContractError("Volume: non-positive spacing on axis " + std::to_string(a));
    }
    if (values.size() != size())
        throw ContractError("Volume: " + std::to_string(values.size()) +
                            " values for dims product " + std::to_string(size()));
    for (std::size_t i = 0; i < values.size(); ++i)
        if (!(values[i] >= 0.0f && values[i] <= 1.0f))
            throw ContractError("Volume: value " + std::to_string(values[i]) +
                                " outside [0,1] at flat index " + std::to_string(i));
}

std::size_t SegMask::count() const {
    std::size_t n = 0;
    for (std::uint8_t v : values) n += v;
    return n;
}

PhantomKind phantom_kind_from_string(const std::string& s) {
    if (s == "nested" || s == "nested-ellipsoids") return PhantomKind::NestedEllipsoids;
    if (s == "spheres") return PhantomKind::Spheres;
    if (s == "cube-lattice" || s == "cubes") return PhantomKind::CubeLattice;
    throw ConfigError("unknown phantom kind '" + s +
                      "' (expected nested-ellipsoids | spheres | cube-lattice)");
}

std::string phantom_kind_to_string(PhantomKind k) {
    switch (k) {
        case PhantomKind::NestedEllipsoids: return "nested-ellipsoids";
        case PhantomKind::Spheres: return "spheres";
        case PhantomKind::CubeLattice: return "cube-lattice";
    }
    return "?";
}

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a)
        if (dims[a] < 8)
            throw ConfigError("phantom dims must be >= 8 per axis, got " +
                              std::to_string(dims[a]) + " on axis " + std::to_string(a));
    for (const auto& r : density_ranges)
        if (!(r[0] >= 0.0 && r[1] <= 1.0 && r[0] <= r[1]))
            throw ConfigError("phantom density range [" + std::to_string(r[0]) + "," +
                              std::to_string(r[1]) + "] not within [0,1]");
}

namespace {

double range_draw(SplitMix64& rng, std::array<double, 2> r) {
    return rng.uniform(r[0], r[1]);
}

std::array<double, 2> range_or(const std::vector<std::array<double, 2>>& ranges,
                               std::size_t i, std::array<double, 2> fallback) {
    return i < ranges.size() ? ranges[i] : fallback;
}

// Voxel center in [-1,1] normalized coordinates per axis.
inline double centered(std::size_t i, std::size_t dim) {
    return 2.0 * ((static_cast<double>(i) + 0.5) / static_cast<double>(dim)) - 1.0;
}

// The nested-ellipsoids phantom is a torso-crop analogue: the body ellipsoid
// extends beyond the field of view so every voxel is tissue, a high-density
// shell band sits on a mid-scale ellipsoid (rib analogue), and two
// off-center cavities are the lung analogue. Densities keep the cavity band
// [0,0.2] strictly separated from body (>=0.3) and shell (>=0.8).
void build_nested(const PhantomSpec& spec, SplitMix64& rng, Volume& vol,
                  SegMask& mask, PhantomRealization& real) {
    const auto body_range = range_or(spec.density_ranges, 0, {0.3, 0.5});
    const auto cavity_range = range_or(spec.density_ranges, 1, {0.05, 0.15});
    const auto shell_range = range_or(spec.density_ranges, 2, {0.8, 1.0});

    real.body_density = range_draw(rng, body_range);
    real.shell_density = range_draw(rng, shell_range);

    // Covers the unit cube entirely (corner radius sqrt(3)).
    real.body = Ellipsoid{{0.0, 0.0, 0.0}, {1.9, 1.95, 2.0}, real.body_density};

    // Shell band on an ellipsoid at ~0.78 of the half-extent, about two
    // voxels thick at the smallest lateral dimension.
    const double shell_scale = 0.78 + 0.04 * rng.next_double();
    const double min_lat = static_cast<double>(std::min(spec.dims[1], spec.dims[2]));
    const double thickness = 2.0 / (shell_scale * 0.5 * min_lat);
    real.shell_inner_radius = 1.0 - thickness;
    real.shell_outer_radius = 1.0;

    const std::array<double, 3> shell_axes = {0.95 * shell_scale, shell_scale,
                                              0.9 * shell_scale};

    // Two cavities, mirrored across x with a seeded jitter, well inside the
    // shell ellipsoid.
    for (int side = 0; side < 2; ++side) {
        const double sx = side == 0 ? -1.0 : 1.0;
        Ellipsoid cav;
        cav.center = {sx * (0.33 + 0.04 * rng.next_double()),
                      -0.05 + 0.1 * rng.next_double(),
                      -0.04 + 0.08 * rng.next_double()};
        cav.semi_axes = {0.18 + 0.04 * rng.next_double(),
                         0.28 + 0.05 * rng.next_double(),
                         0.32 + 0.05 * rng.next_double()};
        cav.density = range_draw(rng, cavity_range);
        real.cavities.push_back(cav);
    }

    const auto [D, H, W] = spec.dims;
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double px = centered(x, W);
                const double py = centered(y, H);
                const double pz = centered(z, D);
                double value = real.body_density;
                bool in_cavity = false;
                for (const Ellipsoid& c : real.cavities)
                    if (c.contains(px, py, pz)) {
                        value = c.density;
                        in_cavity = true;
                        break;
                    }
                if (!in_cavity) {
                    const double a = px / shell_axes[0];
                    const double b = py / shell_axes[1];
                    const double c = pz / shell_axes[2];
                    const double r = std::sqrt(a * a + b * b + c * c);
                    if (r >= real.shell_inner_radius && r <= real.shell_outer_radius)
                        value = real.shell_density;
                }
                vol.at(z, y, x) = static_cast<float>(value);
                mask.values[(z * H + y) * W + x] = in_cavity ? 1 : 0;
            }
}

void build_spheres(const PhantomSpec& spec, SplitMix64& rng, Volume& vol,
                   SegMask& mask, PhantomRealization& real) {
    const auto body_range = range_or(spec.density_ranges, 0, {0.3, 0.5});
    const auto incl_range = range_or(spec.density_ranges, 1, {0.05, 0.15});

    real.body_density = range_draw(rng, body_range);
    real.body = Ellipsoid{{0.0, 0.0, 0.0}, {0.85, 0.85, 0.85}, real.body_density};

    // Three off-center inclusions; centers at least 0.3 from the origin so
    // the two DRR views always disagree.
    for (int i = 0; i < 3; ++i) {
        Ellipsoid s;
        const double r = 0.30 + 0.25 * rng.next_double();
        const double phi = rng.uniform(0.0, 6.283185307179586);
        const double cz = rng.uniform(-0.3, 0.3);
        s.center = {r * std::cos(phi), r * std::sin(phi), cz};
        const double rad = 0.10 + 0.08 * rng.next_double();
        s.semi_axes = {rad, rad, rad};
        s.density = range_draw(rng, incl_range);
        real.cavities.push_back(s);
    }

    const auto [D, H, W] = spec.dims;
    for (std::size_t z = 0; z < D; ++z)
        for (std::size_t y = 0; y < H; ++y)
            for (std::size_t x = 0; x < W; ++x) {
                const double px = centered(x, W);
                const double py = centered(y, H);
                const double pz = centered(z, D);
                double value = 0.0;
                bool in_incl = false;
                if (real.body.contains(px, py, pz)) {
                    value = real.body_density;
                    for (const Ellipsoid& s : real.cavities)
                        if (s.contains(px, py, pz)) {
                            value = s.density;
                            in_incl = true;
                            break;
                        }
                }
                vol.at(z, y, x) = static_cast<float>(value);
                mask.values[(z * H + y) * W + x] = in_incl ? 1 : 0;
            }
}

void build_cube_lattice(const PhantomSpec& spec, SplitMix64& rng, Volume& vol,
                        SegMask& mask) {
    const std::size_t n_cubes = spec.density_ranges.empty() ? 8 : spec.density_ranges.size();
    std::size_t m = 1;
    while (m * m * m < n_cubes) ++m;  // lattice cells per axis

    const auto [D, H, W] = spec.dims;
    const std::array<std::size_t, 3> cell = {D / m, H / m, W / m};
    for (std::size_t i = 0; i < n_cubes; ++i) {
        const std::size_t cz = i / (m * m), cy = (i / m) % m, cx = i % m;
        const double density =
            range_draw(rng, range_or(spec.density_ranges, i, {0.2, 0.9}));
        // Cube occupies the middle ~60% of its cell, on integer boundaries.
        auto span = [](std::size_t cell_lo, std::size_t cell_len) {
            const std::size_t side = std::max<std::size_t>(1, (cell_len * 3) / 5);
            const std::size_t lo = cell_lo + (cell_len - side) / 2;
            return std::pair<std::size_t, std::size_t>(lo, lo + side);
        };
        const auto [z0, z1] = span(cz * cell[0], cell[0]);
        const auto [y0, y1] = span(cy * cell[1], cell[1]);
        const auto [x0, x1] = span(cx * cell[2], cell[2]);
        for (std::size_t z = z0; z < z1; ++z)
            for (std::size_t y = y0; y < y1; ++y)
                for (std::size_t x = x0; x < x1; ++x) {
                    vol.at(z, y, x) = static_cast<float>(density);
                    mask.values[(z * H + y) * W + x] = 1;
                }
    }
}

}  // namespace

std::pair<Volume, SegMask> make_phantom(const PhantomSpec& spec,
                                        PhantomRealization* realization) {
    spec.validate();
    SplitMix64 rng(spec.seed);

    Volume vol = Volume::filled(spec.dims, spec.spacing, 0.0f);
    SegMask mask;
    mask.dims = spec.dims;
    mask.values.assign(mask.size(), 0);
    PhantomRealization real;

    switch (spec.kind) {
        case PhantomKind::NestedEllipsoids:
            build_nested(spec, rng, vol, mask, real);
            break;
        case PhantomKind::Spheres:
            build_spheres(spec, rng, vol, mask, real);
            break;
        case PhantomKind::CubeLattice:
            build_cube_lattice(spec, rng, vol, mask);
            break;
    }

    vol.validate();
    if (realization) *realization = real;
    return {std::move(vol), std::move(mask)};
}

Volume normalize_hu(const std::vector<double>& raw_hu,
                    std::array<std::size_t, 3> dims,
                    std::array<double, 3> spacing,
                    std::array<double, 2> window) {
    if (!(window[0] < window[1]))
        throw ConfigError("normalize_hu: window lo " + std::to_string(window[0]) +
                          " must be < hi " + std::to_string(window[1]));
    Volume v;
    v.dims = dims;
    v.spacing = spacing;
    if (raw_hu.size() != v.size())
        throw ContractError("normalize_hu: " + std::to_string(raw_hu.size()) +
                            " values for dims product " + std::to_string(v.size()));
    v.values.resize(raw_hu.size());
    const double inv = 1.0 / (window[1] - window[0]);
    for (std::size_t i = 0; i < raw_hu.size(); ++i) {
        const double clamped = std::clamp(raw_hu[i], window[0], window[1]);
        v.values[i] = static_cast<float>((clamped - window[0]) * inv);
    }
    return v;
}

Volume resample(const Volume& v, std::array<std::size_t, 3> target_dims) {
    for (int a = 0; a < 3; ++a)
        if (target_dims[a] == 0)
            throw ContractError("resample: zero target extent on axis " + std::to_string(a));
    if (target_dims == v.dims) return v;

    Volume out;
    out.dims = target_dims;
    // Preserve the physical extent.
    for (int a = 0; a < 3; ++a)
        out.spacing[a] = v.spacing[a] * static_cast<double>(v.dims[a]) /
                         static_cast<double>(target_dims[a]);
    out.values.resize(out.size());

    auto lattice = [](std::size_t i, std::size_t n_out, std::size_t n_in) {
        // Align voxel centers of the two grids over a shared [0,1] extent.
        const double t = (static_cast<double>(i) + 0.5) / static_cast<double>(n_out);
        return t * static_cast<double>(n_in) - 0.5;
    };

    const auto [D, H, W] = v.dims;
    for (std::size_t z = 0; z < target_dims[0]; ++z) {
        const double fz = std::clamp(lattice(z, target_dims[0], D), 0.0,
                                     static_cast<double>(D - 1));
        const std::size_t z0 = static_cast<std::size_t>(fz);
        const std::size_t z1 = std::min(z0 + 1, D - 1);
        const double tz = fz - static_cast<double>(z0);
        for (std::size_t y = 0; y < target_dims[1]; ++y) {
            const double fy = std::clamp(lattice(y, target_dims[1], H), 0.0,
                                         static_cast<double>(H - 1));
            const std::size_t y0 = static_cast<std::size_t>(fy);
            const std::size_t y1 = std::min(y0 + 1, H - 1);
            const double ty = fy - static_cast<double>(y0);
            for (std::size_t x = 0; x < target_dims[2]; ++x) {
                const double fx = std::clamp(lattice(x, target_dims[2], W), 0.0,
                                             static_cast<double>(W - 1));
                const std::size_t x0 = static_cast<std::size_t>(fx);
                const std::size_t x1 = std::min(x0 + 1, W - 1);
                const double tx = fx - static_cast<double>(x0);

                const double c00 = v.at(z0, y0, x0) + tx * (v.at(z0, y0, x1) - v.at(z0, y0, x0));
                const double c01 = v.at(z0, y1, x0) + tx * (v.at(z0, y1, x1) - v.at(z0, y1, x0));
                const double c10 = v.at(z1, y0, x0) + tx * (v.at(z1, y0, x1) - v.at(z1, y0, x0));
                const double c11 = v.at(z1, y1, x0) + tx * (v.at(z1, y1, x1) - v.at(z1, y1, x0));
                const double c0 = c00 + ty * (c01 - c00);
                const double c1 = c10 + ty * (c11 - c10);
                const double val = std::clamp(c0 + tz * (c1 - c0), 0.0, 1.0);
                out.at(z, y, x) = static_cast<float>(val);
            }
        }
    }
    return out;
}

// ---- I/O -------------------------------------------------------------------

namespace {

json sidecar_for(std::array<std::size_t, 3> dims, std::array<double, 3> spacing,
                 std::array<double, 2> range) {
    return json{{"dims", {dims[0], dims[1], dims[2]}},
                {"spacing_mm", {spacing[0], spacing[1], spacing[2]}},
                {"value_range", {range[0], range[1]}},
                {"version", 1}};
}

json load_sidecar(const std::string& path, std::array<std::size_t, 3>& dims,
                  std::array<double, 3>& spacing) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open sidecar " + path);
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw IoError("malformed sidecar " + path + ": " + e.what());
    }
    if (!j.contains("dims") || !j["dims"].is_array() || j["dims"].size() != 3)
        throw IoError("malformed sidecar " + path + ": missing dims[3]");
    for (int a = 0; a < 3; ++a) dims[a] = j["dims"][a].get<std::size_t>();
    spacing = {1.0, 1.0, 1.0};
    if (j.contains("spacing_mm"))
        for (int a = 0; a < 3; ++a) spacing[a] = j["spacing_mm"][a].get<double>();
    return j;
}

std::vector<float> read_payload(const std::string& path, std::size_t expected) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path);
    in.seekg(0, std::ios::end);
    const std::size_t actual = static_cast<std::size_t>(in.tellg());
    const std::size_t want = expected * sizeof(float);
    if (actual != want)
        throw IoError(path + ": payload length mismatch, expected " +
                      std::to_string(want) + " bytes (" + std::to_string(expected) +
                      " float32), found " + std::to_string(actual) + " bytes");
    in.seekg(0, std::ios::beg);
    std::vector<float> data(expected);
    in.read(reinterpret_cast<char*>(data.data()),
            static_cast<std::streamsize>(want));
    if (!in) throw IoError(path + ": short read");
    return data;
}

void write_payload(const std::string& path, const float* data, std::size_t count) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path);
    out.write(reinterpret_cast<const char*>(data),
              static_cast<std::streamsize>(count * sizeof(float)));
    if (!out) throw IoError("short write to " + path);
}

}  // namespace

void save_volume(const Volume& v, const std::string& path) {
    v.validate();
    write_payload(path, v.values.data(), v.values.size());
    std::ofstream side(path + ".json", std::ios::trunc);
    if (!side) throw IoError("cannot write " + path + ".json");
    side << sidecar_for(v.dims, v.spacing, {0.0, 1.0}).dump(2) << "\n";
}

Volume load_volume(const std::string& path) {
    Volume v;
    load_sidecar(path + ".json", v.dims, v.spacing);
    v.values = read_payload(path, v.size());
    v.validate();
    return v;
}

void save_mask(const SegMask& m, std::array<double, 3> spacing,
               const std::string& path) {
    std::vector<float> data(m.values.size());
    for (std::size_t i = 0; i < data.size(); ++i)
        data[i] = static_cast<float>(m.values[i]);
    write_payload(path, data.data(), data.size());
    std::ofstream side(path + ".json", std::ios::trunc);
    if (!side) throw IoError("cannot write " + path + ".json");
    side << sidecar_for(m.dims, spacing, {0.0, 1.0}).dump(2) << "\n";
}

SegMask load_mask(const std::string& path) {
    SegMask m;
    std::array<double, 3> spacing;
    load_sidecar(path + ".json", m.dims, spacing);
    const std::vector<float> data = read_payload(path, m.size());
    m.values.resize(data.size());
    for (std::size_t i = 0; i < data.size(); ++i) {
        if (data[i] != 0.0f && data[i] != 1.0f)
            throw IoError(path + ": non-binary mask value " + std::to_string(data[i]) +
                          " at flat index " + std::to_string(i));
        m.values[i] = data[i] != 0.0f ? 1 : 0;
    }
    return m;
}

}  // namespace xtransct
