#include "xtransct/drr.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>

#include <json.hpp>

#include "xtransct/errors.hpp"
#include "xtransct/image_io.hpp"

namespace xtransct {

using nlohmann::json;

void ProjectionGeometry::validate() const {
    if (!(sid_mm > 0.0) || !(sdd_mm > sid_mm))
        throw ConfigError("geometry: require 0 < SID < SDD, got SID " +
                          std::to_string(sid_mm) + ", SDD " + std::to_string(sdd_mm));
    if (det_u == 0 || det_v == 0)
        throw ConfigError("geometry: detector extents must be positive");
    if (pitch_mm < 0.0 || step_mm < 0.0)
        throw ConfigError("geometry: pitch/step must be non-negative (0 = derive)");
    if (!(mu > 0.0)) throw ConfigError("geometry: mu must be positive");
}

ProjectionGeometry ProjectionGeometry::resolved(const Volume& v) const {
    validate();
    ProjectionGeometry g = *this;
    if (g.pitch_mm == 0.0) {
        const double dx = static_cast<double>(v.dims[2]) * v.spacing[2];
        const double dy = static_cast<double>(v.dims[1]) * v.spacing[1];
        const double diag = std::hypot(dx, dy);
        const double mag = g.sdd_mm / g.sid_mm;
        g.pitch_mm = diag * mag / (0.9 * static_cast<double>(std::min(g.det_u, g.det_v)));
    }
    if (g.step_mm == 0.0)
        g.step_mm = 0.5 * std::min({v.spacing[0], v.spacing[1], v.spacing[2]});
    return g;
}

double sample_trilinear(const Volume& v, std::array<double, 3> p) {
    const auto [D, H, W] = v.dims;
    const double hx = 0.5 * static_cast<double>(W) * v.spacing[2];
    const double hy = 0.5 * static_cast<double>(H) * v.spacing[1];
    const double hz = 0.5 * static_cast<double>(D) * v.spacing[0];
    if (p[0] < -hx || p[0] > hx || p[1] < -hy || p[1] > hy || p[2] < -hz || p[2] > hz)
        return 0.0;

    // Lattice coordinates of the voxel-center grid, border-clamped.
    const double fx = std::clamp(p[0] / v.spacing[2] + 0.5 * static_cast<double>(W) - 0.5,
                                 0.0, static_cast<double>(W - 1));
    const double fy = std::clamp(p[1] / v.spacing[1] + 0.5 * static_cast<double>(H) - 0.5,
                                 0.0, static_cast<double>(H - 1));
    const double fz = std::clamp(p[2] / v.spacing[0] + 0.5 * static_cast<double>(D) - 0.5,
                                 0.0, static_cast<double>(D - 1));
    const std::size_t x0 = static_cast<std::size_t>(fx);
    const std::size_t y0 = static_cast<std::size_t>(fy);
    const std::size_t z0 = static_cast<std::size_t>(fz);
    const std::size_t x1 = std::min(x0 + 1, W - 1);
    const std::size_t y1 = std::min(y0 + 1, H - 1);
    const std::size_t z1 = std::min(z0 + 1, D - 1);
    const double tx = fx - static_cast<double>(x0);
    const double ty = fy - static_cast<double>(y0);
    const double tz = fz - static_cast<double>(z0);

    const double c00 = v.at(z0, y0, x0) + tx * (v.at(z0, y0, x1) - v.at(z0, y0, x0));
    const double c01 = v.at(z0, y1, x0) + tx * (v.at(z0, y1, x1) - v.at(z0, y1, x0));
    const double c10 = v.at(z1, y0, x0) + tx * (v.at(z1, y0, x1) - v.at(z1, y0, x0));
    const double c11 = v.at(z1, y1, x0) + tx * (v.at(z1, y1, x1) - v.at(z1, y1, x0));
    const double c0 = c00 + ty * (c01 - c00);
    const double c1 = c10 + ty * (c11 - c10);
    return c0 + tz * (c1 - c0);
}

namespace {

struct Frame {
    std::array<double, 3> source;
    std::array<double, 3> det_center;
    std::array<double, 3> u_axis;  // detector columns
    std::array<double, 3> v_axis;  // detector rows (world z)
};

Frame frame_for(const ProjectionGeometry& g) {
    const double phi = g.angle_deg * 0.017453292519943295;
    const std::array<double, 3> dir = {std::cos(phi), std::sin(phi), 0.0};
    Frame f;
    f.source = {-g.sid_mm * dir[0], -g.sid_mm * dir[1], 0.0};
    const double iso_to_det = g.sdd_mm - g.sid_mm;
    f.det_center = {iso_to_det * dir[0], iso_to_det * dir[1], 0.0};
    f.u_axis = {-dir[1], dir[0], 0.0};
    f.v_axis = {0.0, 0.0, 1.0};
    return f;
}

// Slab-method ray/box overlap. Returns false on a miss.
bool ray_box(const std::array<double, 3>& origin, const std::array<double, 3>& dir,
             const std::array<double, 3>& box_half, double& t0, double& t1) {
    t0 = 0.0;
    t1 = std::numeric_limits<double>::infinity();
    for (int a = 0; a < 3; ++a) {
        const double lo = -box_half[a], hi = box_half[a];
        if (std::abs(dir[a]) < 1e-12) {
            if (origin[a] < lo || origin[a] > hi) return false;
            continue;
        }
        double ta = (lo - origin[a]) / dir[a];
        double tb = (hi - origin[a]) / dir[a];
        if (ta > tb) std::swap(ta, tb);
        t0 = std::max(t0, ta);
        t1 = std::min(t1, tb);
        if (t0 > t1) return false;
    }
    return t1 > t0;
}

}  // namespace

std::vector<double> cast_drr(const Volume& v, const ProjectionGeometry& geom) {
    const ProjectionGeometry g = geom.resolved(v);
    const Frame f = frame_for(g);
    const std::array<double, 3> box_half = {
        0.5 * static_cast<double>(v.dims[2]) * v.spacing[2],
        0.5 * static_cast<double>(v.dims[1]) * v.spacing[1],
        0.5 * static_cast<double>(v.dims[0]) * v.spacing[0]};

    std::vector<double> acc(g.det_u * g.det_v, 0.0);
    const std::ptrdiff_t rows = static_cast<std::ptrdiff_t>(g.det_v);
#pragma omp parallel for schedule(static)
    for (std::ptrdiff_t vr = 0; vr < rows; ++vr) {
        for (std::size_t u = 0; u < g.det_u; ++u) {
            const double du = (static_cast<double>(u) + 0.5 -
                               0.5 * static_cast<double>(g.det_u)) * g.pitch_mm;
            const double dv = (static_cast<double>(vr) + 0.5 -
                               0.5 * static_cast<double>(g.det_v)) * g.pitch_mm;
            std::array<double, 3> pixel = {
                f.det_center[0] + du * f.u_axis[0] + dv * f.v_axis[0],
                f.det_center[1] + du * f.u_axis[1] + dv * f.v_axis[1],
                f.det_center[2] + du * f.u_axis[2] + dv * f.v_axis[2]};
            std::array<double, 3> dir = {pixel[0] - f.source[0], pixel[1] - f.source[1],
                                         pixel[2] - f.source[2]};
            const double len = std::sqrt(dir[0] * dir[0] + dir[1] * dir[1] + dir[2] * dir[2]);
            dir = {dir[0] / len, dir[1] / len, dir[2] / len};

            double t0, t1;
            if (!ray_box(f.source, dir, box_half, t0, t1)) continue;

            const double chord = t1 - t0;
            const std::size_t n_full = static_cast<std::size_t>(chord / g.step_mm);
            double sum = 0.0;
            for (std::size_t k = 0; k < n_full; ++k) {
                const double t = t0 + (static_cast<double>(k) + 0.5) * g.step_mm;
                sum += sample_trilinear(v, {f.source[0] + t * dir[0],
                                            f.source[1] + t * dir[1],
                                            f.source[2] + t * dir[2]}) * g.step_mm;
            }
            const double rem = chord - static_cast<double>(n_full) * g.step_mm;
            if (rem > 1e-12) {
                const double t = t0 + static_cast<double>(n_full) * g.step_mm + 0.5 * rem;
                sum += sample_trilinear(v, {f.source[0] + t * dir[0],
                                            f.source[1] + t * dir[1],
                                            f.source[2] + t * dir[2]}) * rem;
            }
            acc[static_cast<std::size_t>(vr) * g.det_u + u] = sum;
        }
    }
    return acc;
}

std::vector<double> attenuation_map(const std::vector<double>& acc, double mu) {
    std::vector<double> out(acc.size());
    for (std::size_t i = 0; i < acc.size(); ++i) out[i] = 1.0 - std::exp(-mu * acc[i]);
    return out;
}

Projection to_grayscale(const std::vector<double>& acc, const ProjectionGeometry& g) {
    if (acc.size() != g.det_u * g.det_v)
        throw ContractError("to_grayscale: " + std::to_string(acc.size()) +
                            " pixels for detector " + std::to_string(g.det_u) + "x" +
                            std::to_string(g.det_v));
    Projection p;
    p.width = g.det_u;
    p.height = g.det_v;
    p.geometry = g;
    p.pixels = attenuation_map(acc, g.mu);

    const auto [lo_it, hi_it] = std::minmax_element(p.pixels.begin(), p.pixels.end());
    const double lo = *lo_it, hi = *hi_it;
    if (hi - lo <= 0.0) {
        std::fill(p.pixels.begin(), p.pixels.end(), 0.0);  // normalization guard
    } else {
        const double inv = 1.0 / (hi - lo);
        for (double& x : p.pixels) x = (x - lo) * inv;
    }
    return p;
}

std::pair<Projection, Projection> biplanar_pair(const Volume& v,
                                                const ProjectionGeometry& base,
                                                std::array<double, 2> angles) {
    ProjectionGeometry g = base.resolved(v);
    g.angle_deg = angles[0];
    Projection p1 = to_grayscale(cast_drr(v, g), g);
    g.angle_deg = angles[1];
    Projection p2 = to_grayscale(cast_drr(v, g), g);
    return {std::move(p1), std::move(p2)};
}

void save_projection(const Projection& p, const std::string& path) {
    write_pgm16(path, p.width, p.height, p.pixels);
    json side{{"version", 1},
              {"angle_deg", p.geometry.angle_deg},
              {"sid_mm", p.geometry.sid_mm},
              {"sdd_mm", p.geometry.sdd_mm},
              {"det", {p.geometry.det_u, p.geometry.det_v}},
              {"pitch_mm", p.geometry.pitch_mm},
              {"step_mm", p.geometry.step_mm},
              {"mu", p.geometry.mu},
              {"value_range", {0.0, 1.0}}};
    std::ofstream out(path + ".json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + path + ".json");
    out << side.dump(2) << "\n";
}

Projection load_projection(const std::string& path) {
    Projection p;
    p.pixels = read_pgm(path, p.width, p.height);
    std::ifstream in(path + ".json");
    if (!in) throw IoError("cannot open sidecar " + path + ".json");
    json side;
    try {
        in >> side;
    } catch (const json::exception& e) {
        throw IoError("malformed sidecar " + path + ".json: " + e.what());
    }
    p.geometry.angle_deg = side.value("angle_deg", 45.0);
    p.geometry.sid_mm = side.value("sid_mm", 1000.0);
    p.geometry.sdd_mm = side.value("sdd_mm", 1500.0);
    if (side.contains("det")) {
        p.geometry.det_u = side["det"][0].get<std::size_t>();
        p.geometry.det_v = side["det"][1].get<std::size_t>();
    }
    p.geometry.pitch_mm = side.value("pitch_mm", 0.0);
    p.geometry.step_mm = side.value("step_mm", 0.0);
    p.geometry.mu = side.value("mu", 0.02);
    if (p.geometry.det_u != p.width || p.geometry.det_v != p.height)
        throw IoError(path + ": sidecar detector " + std::to_string(p.geometry.det_u) +
                      "x" + std::to_string(p.geometry.det_v) + " does not match image " +
                      std::to_string(p.width) + "x" + std::to_string(p.height));
    return p;
}

}  // namespace xtransct
