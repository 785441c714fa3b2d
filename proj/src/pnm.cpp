#include "deeptopo/pnm.hpp"

#include <cctype>
#include <fstream>

namespace deeptopo {

void write_pnm(const std::string& path, const PnmImage& img) {
  DT_CHECK(img.channels == 1 || img.channels == 3,
           "write_pnm: unsupported channel count ", img.channels);
  DT_CHECK(static_cast<i64>(img.data.size()) ==
               img.width * img.height * img.channels,
           "write_pnm: payload of ", img.data.size(), " bytes for ",
           img.width, "x", img.height, "x", img.channels);
  std::ofstream f(path, std::ios::binary);
  if (!f) fail_data("write_pnm: cannot open ", path, " for writing");
  f << (img.channels == 3 ? "P6" : "P5") << "\n"
    << img.width << " " << img.height << "\n255\n";
  f.write(reinterpret_cast<const char*>(img.data.data()),
          static_cast<std::streamsize>(img.data.size()));
  if (!f) fail_data("write_pnm: short write to ", path);
}

namespace {

// Reads one whitespace-delimited header token, skipping '#' comments.
std::string next_token(std::istream& in, const std::string& path) {
  std::string tok;
  int c = in.get();
  while (c != EOF) {
    if (c == '#') {
      while (c != EOF && c != '\n') c = in.get();
    } else if (std::isspace(c)) {
      c = in.get();
    } else {
      break;
    }
  }
  while (c != EOF && !std::isspace(c)) {
    tok.push_back(static_cast<char>(c));
    c = in.get();
  }
  if (tok.empty()) fail_data("read_pnm: truncated header in ", path);
  return tok;
}

i64 parse_dim(const std::string& tok, const std::string& what,
              const std::string& path) {
  for (char c : tok) {
    if (!std::isdigit(static_cast<unsigned char>(c))) {
      fail_data("read_pnm: malformed ", what, " '", tok, "' in ", path);
    }
  }
  const long long v = std::stoll(tok);
  if (v <= 0 || v > 1 << 20) {
    fail_data("read_pnm: out-of-range ", what, " ", v, " in ", path);
  }
  return static_cast<i64>(v);
}

}  // namespace

PnmImage read_pnm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_data("read_pnm: cannot open ", path);
  const std::string magic = next_token(f, path);
  PnmImage img;
  if (magic == "P6") {
    img.channels = 3;
  } else if (magic == "P5") {
    img.channels = 1;
  } else {
    fail_data("read_pnm: bad magic '", magic, "' in ", path);
  }
  img.width = parse_dim(next_token(f, path), "width", path);
  img.height = parse_dim(next_token(f, path), "height", path);
  const std::string maxval = next_token(f, path);
  if (maxval != "255") {
    fail_data("read_pnm: unsupported maxval '", maxval, "' in ", path);
  }
  // exactly one whitespace byte separates the header from the payload and
  // next_token has already consumed it
  const i64 n = img.width * img.height * img.channels;
  img.data.resize(static_cast<std::size_t>(n));
  f.read(reinterpret_cast<char*>(img.data.data()),
         static_cast<std::streamsize>(n));
  if (f.gcount() != static_cast<std::streamsize>(n)) {
    fail_data("read_pnm: truncated payload in ", path, " (got ", f.gcount(),
              " of ", n, " bytes)");
  }
  return img;
}

}  // namespace deeptopo
