#include "deeptopo/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>

namespace deeptopo {

namespace {

constexpr const char* kFormat = "deeptopo.ckpt.v1";

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string shape_str(const std::vector<i64>& shape) {
  std::string s;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s.empty() ? "1" : s;
}

std::vector<i64> parse_shape(const std::string& s) {
  std::vector<i64> shape;
  std::istringstream ss(s);
  std::string tok;
  while (std::getline(ss, tok, ',')) shape.push_back(std::stoll(tok));
  return shape;
}

// Little-endian float32 image of a tensor buffer. The host is assumed
// little-endian (checked once).
void to_le_bytes(const float* src, i64 n, std::vector<unsigned char>& out) {
  static_assert(sizeof(float) == 4);
  const std::uint32_t probe = 1;
  DT_CHECK(*reinterpret_cast<const unsigned char*>(&probe) == 1,
           "checkpoint: big-endian hosts are not supported");
  out.resize(static_cast<std::size_t>(4 * n));
  std::memcpy(out.data(), src, static_cast<std::size_t>(4 * n));
}

}  // namespace

template <typename T>
void save_checkpoint(const std::string& path, const ParamStore<T>& store,
                     const std::vector<std::pair<std::string, std::string>>&
                         config_echo) {
  std::ostringstream manifest;
  manifest << kFormat << "\n";
  for (const auto& [k, v] : config_echo) {
    manifest << "config " << k << " = " << v << "\n";
  }
  std::vector<unsigned char> payload;
  i64 offset = 0;
  std::vector<unsigned char> slice;
  for (const auto& e : store.entries) {
    const i64 n = e.t->numel();
    std::vector<float> as_f32(static_cast<std::size_t>(n));
    for (i64 i = 0; i < n; ++i) {
      as_f32[static_cast<std::size_t>(i)] = static_cast<float>(e.t->v[static_cast<std::size_t>(i)]);
    }
    to_le_bytes(as_f32.data(), n, slice);
    const std::uint64_t sum = fnv1a64(slice.data(), slice.size());
    manifest << "param " << e.name << " " << shape_str(e.t->shape) << " "
             << offset << " " << slice.size() << " " << hex64(sum) << "\n";
    payload.insert(payload.end(), slice.begin(), slice.end());
    offset += static_cast<i64>(slice.size());
  }
  manifest << "payload " << payload.size() << "\n";
  std::ofstream f(path, std::ios::binary);
  if (!f) fail_data("save_checkpoint: cannot open ", path, " for writing");
  const std::string head = manifest.str();
  f.write(head.data(), static_cast<std::streamsize>(head.size()));
  f.write(reinterpret_cast<const char*>(payload.data()),
          static_cast<std::streamsize>(payload.size()));
  if (!f) fail_data("save_checkpoint: short write to ", path);
}

namespace {

CheckpointInfo read_manifest(std::istream& f, const std::string& path,
                             i64* payload_bytes) {
  CheckpointInfo info;
  std::string line;
  if (!std::getline(f, line) || line != kFormat) {
    fail_data("checkpoint: ", path, " does not start with '", kFormat, "'");
  }
  *payload_bytes = -1;
  while (std::getline(f, line)) {
    if (line.rfind("config ", 0) == 0) {
      const auto eq = line.find(" = ");
      if (eq == std::string::npos) {
        fail_data("checkpoint: malformed config line in ", path);
      }
      info.config.emplace_back(line.substr(7, eq - 7), line.substr(eq + 3));
    } else if (line.rfind("param ", 0) == 0) {
      std::istringstream ss(line.substr(6));
      CheckpointManifestEntry e;
      std::string shape_s, sum_s;
      if (!(ss >> e.name >> shape_s >> e.offset >> e.bytes >> sum_s)) {
        fail_data("checkpoint: malformed param line in ", path);
      }
      e.shape = parse_shape(shape_s);
      e.checksum = std::stoull(sum_s, nullptr, 16);
      info.params.push_back(std::move(e));
    } else if (line.rfind("payload ", 0) == 0) {
      *payload_bytes = std::stoll(line.substr(8));
      break;
    } else {
      fail_data("checkpoint: unexpected manifest line '", line, "' in ", path);
    }
  }
  if (*payload_bytes < 0) {
    fail_data("checkpoint: missing payload marker in ", path);
  }
  return info;
}

}  // namespace

CheckpointInfo read_checkpoint_info(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_data("checkpoint: cannot open ", path);
  i64 payload_bytes = 0;
  return read_manifest(f, path, &payload_bytes);
}

template <typename T>
void load_checkpoint(const std::string& path, ParamStore<T>& store) {
  std::ifstream f(path, std::ios::binary);
  if (!f) fail_data("checkpoint: cannot open ", path);
  i64 payload_bytes = 0;
  const CheckpointInfo info = read_manifest(f, path, &payload_bytes);

  // Full inventory check before any parameter is written.
  if (info.params.size() != store.entries.size()) {
    fail_data("checkpoint: inventory mismatch, file has ", info.params.size(),
              " parameters, model has ", store.entries.size());
  }
  i64 expect_offset = 0;
  for (std::size_t i = 0; i < info.params.size(); ++i) {
    const auto& fe = info.params[i];
    const auto& me = store.entries[i];
    if (fe.name != me.name) {
      fail_data("checkpoint: parameter ", i, " is '", fe.name,
                "', model expects '", me.name, "'");
    }
    if (fe.shape != me.t->shape) {
      fail_data("checkpoint: shape mismatch for '", fe.name, "'");
    }
    if (fe.offset != expect_offset || fe.bytes != 4 * me.t->numel()) {
      fail_data("checkpoint: layout mismatch for '", fe.name, "'");
    }
    expect_offset += fe.bytes;
  }
  if (expect_offset != payload_bytes) {
    fail_data("checkpoint: payload of ", payload_bytes,
              " bytes does not match inventory total ", expect_offset);
  }

  std::vector<unsigned char> payload(static_cast<std::size_t>(payload_bytes));
  f.read(reinterpret_cast<char*>(payload.data()),
         static_cast<std::streamsize>(payload.size()));
  if (f.gcount() != static_cast<std::streamsize>(payload.size())) {
    fail_data("checkpoint: truncated payload in ", path);
  }
  for (std::size_t i = 0; i < info.params.size(); ++i) {
    const auto& fe = info.params[i];
    const std::uint64_t sum =
        fnv1a64(payload.data() + fe.offset, static_cast<std::size_t>(fe.bytes));
    if (sum != fe.checksum) {
      fail_data("checkpoint: checksum mismatch for '", fe.name, "' in ", path);
    }
  }
  // All verified; now copy.
  for (std::size_t i = 0; i < info.params.size(); ++i) {
    const auto& fe = info.params[i];
    auto& t = *store.entries[i].t;
    const float* src =
        reinterpret_cast<const float*>(payload.data() + fe.offset);
    for (i64 j = 0; j < t.numel(); ++j) {
      t.v[static_cast<std::size_t>(j)] = static_cast<T>(src[j]);
    }
  }
}

template void save_checkpoint<float>(
    const std::string&, const ParamStore<float>&,
    const std::vector<std::pair<std::string, std::string>>&);
template void save_checkpoint<double>(
    const std::string&, const ParamStore<double>&,
    const std::vector<std::pair<std::string, std::string>>&);
template void load_checkpoint<float>(const std::string&, ParamStore<float>&);
template void load_checkpoint<double>(const std::string&, ParamStore<double>&);

}  // namespace deeptopo
