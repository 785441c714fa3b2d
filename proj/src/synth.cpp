#include "deeptopo/synth.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "deeptopo/metrics.hpp"
#include "deeptopo/pnm.hpp"

namespace deeptopo::synth {

const char* zone_name(Zone z) {
  switch (z) {
    case Zone::kEpipelagic: return "epipelagic";
    case Zone::kMesopelagic: return "mesopelagic";
    case Zone::kAbyssal: return "abyssal";
  }
  return "?";
}

std::optional<Zone> parse_zone(const std::string& s) {
  if (s == "epipelagic") return Zone::kEpipelagic;
  if (s == "mesopelagic") return Zone::kMesopelagic;
  if (s == "abyssal") return Zone::kAbyssal;
  return std::nullopt;
}

void ZoneOptics::validate() const {
  DT_CHECK(c_rgb[0] >= 0 && c_rgb[1] >= 0 && c_rgb[2] >= 0,
           "optics: attenuation coefficients must be non-negative");
  DT_CHECK(c_rgb[0] >= c_rgb[1] && c_rgb[1] >= c_rgb[2],
           "optics: expected c_r >= c_g >= c_b, got (", c_rgb[0], ", ",
           c_rgb[1], ", ", c_rgb[2], ")");
}

double detexp(double x) {
  if (x < -700.0) return 0.0;
  DT_CHECK(x <= 700.0, "detexp: argument ", x, " too large");
  constexpr double kLn2 = 0.6931471805599453;
  const double kd = std::floor(x / kLn2 + 0.5);
  const double r = x - kd * kLn2;
  // Taylor kernel on |r| <= 0.3466; degree 12 keeps the tail below 1e-14.
  double p = 1.0;
  for (int i = 12; i >= 1; --i) p = 1.0 + p * r / static_cast<double>(i);
  return std::ldexp(p, static_cast<int>(kd));
}

namespace {

// Value noise: hashed lattice corners, bilinear blend. Pure integer hashing
// plus IEEE arithmetic.
double lattice_value(std::uint64_t seed, i64 gr, i64 gc) {
  Rng r = Rng::stream(seed, (static_cast<std::uint64_t>(gr) << 32) ^
                                static_cast<std::uint64_t>(gc + 0x7fffffff));
  return r.uniform() * 2.0 - 1.0;
}

double value_noise(std::uint64_t seed, double y, double x, double cell) {
  const double fy = y / cell, fx = x / cell;
  const i64 gy = static_cast<i64>(std::floor(fy));
  const i64 gx = static_cast<i64>(std::floor(fx));
  const double ty = fy - static_cast<double>(gy);
  const double tx = fx - static_cast<double>(gx);
  const double v00 = lattice_value(seed, gy, gx);
  const double v01 = lattice_value(seed, gy, gx + 1);
  const double v10 = lattice_value(seed, gy + 1, gx);
  const double v11 = lattice_value(seed, gy + 1, gx + 1);
  const double a = v00 * (1.0 - tx) + v01 * tx;
  const double b = v10 * (1.0 - tx) + v11 * tx;
  return a * (1.0 - ty) + b * ty;
}

struct UnitVec {
  double r, c;
};

// Unit direction from an integer lattice pair; avoids trig entirely.
UnitVec random_unit(Rng& rng) {
  for (;;) {
    const double ir = static_cast<double>(rng.randint(2001) - 1000);
    const double ic = static_cast<double>(rng.randint(2001) - 1000);
    const double n2 = ir * ir + ic * ic;
    if (n2 < 100.0) continue;  // too short to be a stable direction
    const double inv = 1.0 / std::sqrt(n2);
    return {ir * inv, ic * inv};
  }
}

void stamp(std::vector<std::uint8_t>& mask, i64 size, i64 r, i64 c, i64 width) {
  auto put = [&](i64 rr, i64 cc) {
    if (rr >= 0 && rr < size && cc >= 0 && cc < size) {
      mask[static_cast<std::size_t>(rr * size + cc)] = 1;
    }
  };
  if (width <= 1) {
    put(r, c);
  } else if (width == 2) {
    put(r, c);
    put(r, c + 1);
    put(r + 1, c);
    put(r + 1, c + 1);
  } else {
    for (i64 dr = -1; dr <= 1; ++dr) {
      for (i64 dc = -1; dc <= 1; ++dc) put(r + dr, c + dc);
    }
  }
}

}  // namespace

ZoneOptics default_optics(Zone z, Rng& rng, i64 size) {
  ZoneOptics o;
  switch (z) {
    case Zone::kEpipelagic:
      o.c_rgb[0] = 0.50; o.c_rgb[1] = 0.22; o.c_rgb[2] = 0.10;
      o.ambient = 0.22;
      o.noise_sigma = 0.015;
      break;
    case Zone::kMesopelagic:
      o.c_rgb[0] = 0.85; o.c_rgb[1] = 0.45; o.c_rgb[2] = 0.18;
      o.ambient = 0.06;
      o.noise_sigma = 0.02;
      break;
    case Zone::kAbyssal: {
      o.c_rgb[0] = 1.00; o.c_rgb[1] = 0.70; o.c_rgb[2] = 0.45;
      o.ambient = 0.02;
      o.noise_sigma = 0.025;
      Spotlight sp;
      const double s = static_cast<double>(size);
      sp.center_r = s * 0.5 + rng.uniform(-s / 8.0, s / 8.0);
      sp.center_c = s * 0.5 + rng.uniform(-s / 8.0, s / 8.0);
      sp.radius = rng.uniform(s / 3.0, s / 2.2);
      sp.intensity = rng.uniform(0.95, 1.15);
      o.spotlight = sp;
      break;
    }
  }
  o.noise_seed = rng.next_u64();
  o.validate();
  return o;
}

void attenuate(std::vector<double>& image, i64 size, const ZoneOptics& optics,
               double depth) {
  DT_CHECK(depth >= 0.0, "attenuate: depth must be non-negative, got ", depth);
  optics.validate();
  DT_CHECK(static_cast<i64>(image.size()) == 3 * size * size,
           "attenuate: image buffer mismatch");
  const i64 plane = size * size;
  double fall[3];
  for (int k = 0; k < 3; ++k) fall[k] = detexp(-optics.c_rgb[k] * depth);
  Rng noise = Rng::stream(optics.noise_seed, 0x6e6f697365ULL);
  for (i64 p = 0; p < plane; ++p) {
    double spot = 1.0;
    if (optics.spotlight) {
      const auto& sp = *optics.spotlight;
      const double dr = static_cast<double>(p / size) - sp.center_r;
      const double dc = static_cast<double>(p % size) - sp.center_c;
      const double d2 = dr * dr + dc * dc;
      spot = sp.intensity * sp.radius * sp.radius /
             (sp.radius * sp.radius + d2);
    }
    for (int k = 0; k < 3; ++k) {
      double v = image[static_cast<std::size_t>(k * plane + p)];
      v = v * fall[k] * spot + optics.ambient;
      if (optics.noise_sigma > 0.0) v += noise.normal() * optics.noise_sigma;
      image[static_cast<std::size_t>(k * plane + p)] = std::clamp(v, 0.0, 1.0);
    }
  }
}

SegSample generate_scene(Zone zone, i64 size, std::uint64_t seed) {
  DT_CHECK(size >= 32, "generate_scene: size ", size, " below minimum 32");
  SegSample s;
  s.size = size;
  s.zone = zone;
  s.seed = seed;
  const i64 plane = size * size;
  s.image.assign(static_cast<std::size_t>(3 * plane), 0.0);
  s.mask.assign(static_cast<std::size_t>(plane), 0);
  s.skeleton.assign(static_cast<std::size_t>(plane), 0);
  Rng rng(seed);

  // Background: zone base tint modulated by two octaves of value noise.
  double base[3];
  switch (zone) {
    case Zone::kEpipelagic: base[0] = 0.38; base[1] = 0.55; base[2] = 0.58; break;
    case Zone::kMesopelagic: base[0] = 0.30; base[1] = 0.38; base[2] = 0.52; break;
    case Zone::kAbyssal: base[0] = 0.30; base[1] = 0.31; base[2] = 0.35; break;
  }
  const std::uint64_t tex_seed = rng.next_u64();
  const double cell = static_cast<double>(size) / 7.0;
  for (i64 r = 0; r < size; ++r) {
    for (i64 c = 0; c < size; ++c) {
      const double y = static_cast<double>(r), x = static_cast<double>(c);
      const double n1 = value_noise(tex_seed, y, x, cell);
      const double n2 = value_noise(tex_seed ^ 0x5555aaaaULL, y, x, cell * 0.37);
      const double tex = 0.10 * n1 + 0.05 * n2;
      for (int k = 0; k < 3; ++k) {
        s.image[static_cast<std::size_t>(k * plane + r * size + c)] =
            std::clamp(base[k] + tex, 0.0, 1.0);
      }
    }
  }

  // Elliptical body with a lattice-derived orientation.
  const double cx = static_cast<double>(size) * 0.5 +
                    rng.uniform(-static_cast<double>(size) / 8.0,
                                static_cast<double>(size) / 8.0);
  const double cy = static_cast<double>(size) * 0.5 +
                    rng.uniform(-static_cast<double>(size) / 8.0,
                                static_cast<double>(size) / 8.0);
  const double sa = rng.uniform(static_cast<double>(size) / 7.0,
                                static_cast<double>(size) / 5.0);
  const double sb = rng.uniform(static_cast<double>(size) / 12.0,
                                static_cast<double>(size) / 8.0);
  const UnitVec u = random_unit(rng);
  std::vector<std::uint8_t> body(static_cast<std::size_t>(plane), 0);
  for (i64 r = 0; r < size; ++r) {
    for (i64 c = 0; c < size; ++c) {
      const double dy = static_cast<double>(r) - cy;
      const double dx = static_cast<double>(c) - cx;
      const double along = dy * u.r + dx * u.c;
      const double across = -dy * u.c + dx * u.r;
      if ((along * along) / (sa * sa) + (across * across) / (sb * sb) <= 1.0) {
        body[static_cast<std::size_t>(r * size + c)] = 1;
      }
    }
  }

  // Random-walk limbs from the body boundary outward.
  s.limb_count = 3 + rng.randint(4);
  s.limb_width_px = 1 + rng.randint(3);
  std::vector<std::uint8_t> limbs(static_cast<std::size_t>(plane), 0);
  for (i64 li = 0; li < s.limb_count; ++li) {
    UnitVec dir = random_unit(rng);
    // boundary of the rotated ellipse along dir
    const double ca = dir.r * u.r + dir.c * u.c;
    const double cb = -dir.r * u.c + dir.c * u.r;
    const double t = 1.0 / std::sqrt((ca * ca) / (sa * sa) +
                                     (cb * cb) / (sb * sb));
    double pr = cy + dir.r * t;
    double pc = cx + dir.c * t;
    const i64 width = 1 + rng.randint(s.limb_width_px);
    const i64 segments = 4 + rng.randint(4);
    for (i64 seg = 0; seg < segments; ++seg) {
      const double len = rng.uniform(static_cast<double>(size) / 16.0,
                                     static_cast<double>(size) / 9.0);
      const i64 steps = static_cast<i64>(std::floor(len / 0.5));
      for (i64 st = 0; st < steps; ++st) {
        pr += dir.r * 0.5;
        pc += dir.c * 0.5;
        const i64 ir = static_cast<i64>(std::llround(pr));
        const i64 ic = static_cast<i64>(std::llround(pc));
        if (ir < 0 || ir >= size || ic < 0 || ic >= size) break;
        stamp(limbs, size, ir, ic, width);
        s.skeleton[static_cast<std::size_t>(ir * size + ic)] = 1;
      }
      const UnitVec kick = random_unit(rng);
      const double nr = dir.r + 0.45 * kick.r;
      const double nc = dir.c + 0.45 * kick.c;
      const double n2 = nr * nr + nc * nc;
      if (n2 > 1e-6) {
        const double inv = 1.0 / std::sqrt(n2);
        dir = {nr * inv, nc * inv};
      }
    }
  }

  for (i64 p = 0; p < plane; ++p) {
    s.mask[static_cast<std::size_t>(p)] =
        (body[static_cast<std::size_t>(p)] || limbs[static_cast<std::size_t>(p)])
            ? 1
            : 0;
  }
  // Skeleton: thinned body plus the limb polylines (already placed; clip
  // anything that drifted outside the final mask).
  auto body_sk = metrics::skeletonize(body, size, size);
  for (i64 p = 0; p < plane; ++p) {
    if (body_sk[static_cast<std::size_t>(p)]) {
      s.skeleton[static_cast<std::size_t>(p)] = 1;
    }
    if (!s.mask[static_cast<std::size_t>(p)]) {
      s.skeleton[static_cast<std::size_t>(p)] = 0;
    }
  }

  // Organism appearance: warm, bright against the water background.
  double tone[3] = {0.72 + rng.uniform(-0.08, 0.08),
                    0.60 + rng.uniform(-0.08, 0.08),
                    0.46 + rng.uniform(-0.08, 0.08)};
  const std::uint64_t body_tex = rng.next_u64();
  for (i64 r = 0; r < size; ++r) {
    for (i64 c = 0; c < size; ++c) {
      if (!s.mask[static_cast<std::size_t>(r * size + c)]) continue;
      const double tex = 0.06 * value_noise(body_tex, static_cast<double>(r),
                                            static_cast<double>(c), cell * 0.5);
      for (int k = 0; k < 3; ++k) {
        s.image[static_cast<std::size_t>(k * plane + r * size + c)] =
            std::clamp(tone[k] + tex, 0.0, 1.0);
      }
    }
  }

  ZoneOptics optics = default_optics(zone, rng, size);
  double depth = 0;
  switch (zone) {
    case Zone::kEpipelagic: depth = rng.uniform(0.2, 0.8); break;
    case Zone::kMesopelagic: depth = rng.uniform(1.2, 2.0); break;
    case Zone::kAbyssal: depth = rng.uniform(2.4, 3.2); break;
  }
  attenuate(s.image, size, optics, depth);
  return s;
}

namespace {

std::string id_of(i64 index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "%06lld", static_cast<long long>(index));
  return buf;
}

}  // namespace

void write_dataset(const std::vector<SegSample>& samples,
                   const std::string& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  std::ofstream manifest(dir + "/manifest.tsv");
  if (!manifest) fail_data("write_dataset: cannot write manifest in ", dir);
  for (std::size_t i = 0; i < samples.size(); ++i) {
    const auto& s = samples[i];
    const std::string id = s.id.empty() ? id_of(static_cast<i64>(i)) : s.id;
    const i64 plane = s.size * s.size;
    PnmImage img;
    img.width = s.size;
    img.height = s.size;
    img.channels = 3;
    img.data.resize(static_cast<std::size_t>(3 * plane));
    for (i64 p = 0; p < plane; ++p) {
      for (int k = 0; k < 3; ++k) {
        const double v = s.image[static_cast<std::size_t>(k * plane + p)];
        const long q = std::lround(std::clamp(v, 0.0, 1.0) * 255.0);
        img.data[static_cast<std::size_t>(3 * p + k)] =
            static_cast<std::uint8_t>(q);
      }
    }
    write_pnm(dir + "/img_" + id + ".ppm", img);
    PnmImage m;
    m.width = s.size;
    m.height = s.size;
    m.channels = 1;
    m.data.resize(static_cast<std::size_t>(plane));
    for (i64 p = 0; p < plane; ++p) {
      m.data[static_cast<std::size_t>(p)] = s.mask[static_cast<std::size_t>(p)] ? 255 : 0;
    }
    write_pnm(dir + "/mask_" + id + ".pgm", m);
    for (i64 p = 0; p < plane; ++p) {
      m.data[static_cast<std::size_t>(p)] =
          s.skeleton[static_cast<std::size_t>(p)] ? 255 : 0;
    }
    write_pnm(dir + "/skel_" + id + ".pgm", m);
    manifest << id << "\t" << zone_name(s.zone) << "\t" << s.seed << "\t"
             << s.limb_count << "\n";
  }
  if (!manifest) fail_data("write_dataset: short manifest write in ", dir);
}

std::vector<SegSample> read_dataset(const std::string& dir) {
  std::ifstream manifest(dir + "/manifest.tsv");
  if (!manifest) fail_data("read_dataset: missing manifest.tsv in ", dir);
  std::vector<SegSample> out;
  std::string line;
  i64 lineno = 0;
  while (std::getline(manifest, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string id, zone_s, seed_s, limb_s;
    if (!std::getline(ss, id, '\t') || !std::getline(ss, zone_s, '\t') ||
        !std::getline(ss, seed_s, '\t') || !std::getline(ss, limb_s)) {
      fail_data("read_dataset: malformed manifest line ", lineno, " in ", dir);
    }
    auto zone = parse_zone(zone_s);
    if (!zone) {
      fail_data("read_dataset: unknown zone '", zone_s, "' at manifest line ",
                lineno);
    }
    SegSample s;
    s.id = id;
    s.zone = *zone;
    s.seed = std::stoull(seed_s);
    s.limb_count = std::stoll(limb_s);
    const PnmImage img = read_pnm(dir + "/img_" + id + ".ppm");
    if (img.channels != 3) {
      fail_data("read_dataset: img_", id, ".ppm is not a color image");
    }
    if (img.width != img.height) {
      fail_data("read_dataset: img_", id, ".ppm is not square");
    }
    s.size = img.width;
    const i64 plane = s.size * s.size;
    s.image.resize(static_cast<std::size_t>(3 * plane));
    for (i64 p = 0; p < plane; ++p) {
      for (int k = 0; k < 3; ++k) {
        s.image[static_cast<std::size_t>(k * plane + p)] =
            static_cast<double>(img.data[static_cast<std::size_t>(3 * p + k)]) /
            255.0;
      }
    }
    auto load_mask = [&](const std::string& path) {
      const PnmImage m = read_pnm(path);
      if (m.channels != 1 || m.width != s.size || m.height != s.size) {
        fail_data("read_dataset: ", path, " does not match image geometry");
      }
      std::vector<std::uint8_t> v(static_cast<std::size_t>(plane));
      for (i64 p = 0; p < plane; ++p) {
        const std::uint8_t b = m.data[static_cast<std::size_t>(p)];
        if (b != 0 && b != 255) {
          fail_data("read_dataset: ", path, " has non-binary value ",
                    static_cast<int>(b));
        }
        v[static_cast<std::size_t>(p)] = b ? 1 : 0;
      }
      return v;
    };
    s.mask = load_mask(dir + "/mask_" + id + ".pgm");
    s.skeleton = load_mask(dir + "/skel_" + id + ".pgm");
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace deeptopo::synth
