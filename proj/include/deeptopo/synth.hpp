#pragma once

#include <optional>
#include <string>
#include <vector>

#include "deeptopo/common.hpp"
#include "deeptopo/rng.hpp"

namespace deeptopo::synth {

enum class Zone { kEpipelagic, kMesopelagic, kAbyssal };

const char* zone_name(Zone z);
std::optional<Zone> parse_zone(const std::string& s);

struct Spotlight {
  double center_r = 0, center_c = 0;
  double radius = 1;
  double intensity = 1;
};

// Per-channel Beer-Lambert attenuation; water absorbs long wavelengths
// fastest, so c_r >= c_g >= c_b is enforced.
struct ZoneOptics {
  double c_rgb[3] = {0, 0, 0};
  double ambient = 0;
  std::optional<Spotlight> spotlight;
  double noise_sigma = 0;
  std::uint64_t noise_seed = 0;
  void validate() const;
};

struct SegSample {
  i64 size = 0;
  std::vector<double> image;          // 3 planes, row-major, in [0,1]
  std::vector<std::uint8_t> mask;     // {0,1}
  std::vector<std::uint8_t> skeleton; // {0,1}, subset of mask
  Zone zone = Zone::kEpipelagic;
  std::uint64_t seed = 0;
  i64 limb_count = 0;
  i64 limb_width_px = 0;
  std::string id;
};

// Reproducible exp built from ldexp plus a Taylor kernel; only IEEE basic
// arithmetic, so results are identical across platforms (compile this TU
// with contraction off).
double detexp(double x);

ZoneOptics default_optics(Zone z, Rng& rng, i64 size);

// Scales channel k by exp(-c_k * depth), applies the optional spotlight
// falloff, adds the ambient floor and seeded noise, clamps to [0,1].
void attenuate(std::vector<double>& image, i64 size, const ZoneOptics& optics,
               double depth);

SegSample generate_scene(Zone zone, i64 size, std::uint64_t seed);

// Binary 8-bit PPM/PGM tree plus a tab-separated manifest
// (id, zone, seed, limb_count). Masks round-trip exactly.
void write_dataset(const std::vector<SegSample>& samples,
                   const std::string& dir);
std::vector<SegSample> read_dataset(const std::string& dir);

}  // namespace deeptopo::synth
