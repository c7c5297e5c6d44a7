#pragma once

#include <array>
#include <string>
#include <vector>

#include "xtransct/volume.hpp"

namespace xtransct {

// Cone-beam imaging model: point source on a gantry circle in the axial
// plane, flat detector perpendicular to the central ray, volume centered at
// the isocenter. pitch_mm/step_mm of 0 mean "derive from the volume": the
// pitch makes the lateral diagonal's projected footprint fill ~90% of the
// detector, the step is half the smallest voxel spacing.
struct ProjectionGeometry {
    double angle_deg = 45.0;
    double sid_mm = 1000.0;   // source to isocenter
    double sdd_mm = 1500.0;   // source to detector
    std::size_t det_u = 256;  // columns
    std::size_t det_v = 256;  // rows
    double pitch_mm = 0.0;
    double step_mm = 0.0;
    double mu = 0.02;  // attenuation scale per value*mm for the grayscale map

    void validate() const;
    // Fills pitch/step defaults from the volume; returns a fully-specified copy.
    ProjectionGeometry resolved(const Volume& v) const;
};

struct Projection {
    std::size_t width = 0;   // U
    std::size_t height = 0;  // V
    std::vector<double> pixels;  // row-major (v,u), values in [0,1]
    ProjectionGeometry geometry;

    double at(std::size_t v, std::size_t u) const { return pixels[v * width + u]; }
};

// Trilinear sample of the volume at a world point (mm). Points outside the
// volume bounding box are air (0); inside the box but beyond the voxel-center
// hull the lattice is border-clamped.
double sample_trilinear(const Volume& v, std::array<double, 3> point_mm);

// Accumulated line integrals (value*mm) per detector pixel, row-major (v,u).
// Rays march source->pixel at fixed geometry.step within the slab-method
// ray/box intersection segment; the remainder below one step is sampled at
// its midpoint so the covered length equals the chord exactly.
std::vector<double> cast_drr(const Volume& v, const ProjectionGeometry& g);

// Beer-Lambert-style map x -> 1 - exp(-mu*x) applied pixelwise.
std::vector<double> attenuation_map(const std::vector<double>& acc, double mu);

// attenuation_map followed by min-max normalization onto [0,1]; a constant
// accumulation image maps to all zeros.
Projection to_grayscale(const std::vector<double>& acc, const ProjectionGeometry& g);

// Two projections differing only in gantry angle (defaults 45/135).
std::pair<Projection, Projection> biplanar_pair(
    const Volume& v, const ProjectionGeometry& base,
    std::array<double, 2> angles = {45.0, 135.0});

// PGM (16-bit P5) plus a JSON sidecar `<path>.json` with the full geometry.
void save_projection(const Projection& p, const std::string& path);
Projection load_projection(const std::string& path);

}  // namespace xtransct
