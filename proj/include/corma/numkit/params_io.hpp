#pragma once
// Parameter blobs: u64 header length, JSON header, then little-endian f64
// values. The header lists (name, shape, offset) for every tensor and may
// carry arbitrary metadata.

#include <json.hpp>

#include <sstream>
#include <string>

#include "corma/common.hpp"
#include "corma/numkit/optim.hpp"

namespace corma::nk {

using json = nlohmann::json;

inline std::string payload_bytes(const ParamList& ps) {
  std::ostringstream os;
  for (const auto& p : ps) le::put_f64s(os, p.value.data());
  return os.str();
}

/// Serializes parameters with `meta` stored under header["meta"].
inline std::string serialize_params(const ParamList& ps, const json& meta) {
  json tensors = json::array();
  std::size_t off = 0;
  for (const auto& p : ps) {
    tensors.push_back({{"name", p.name}, {"shape", p.value.shape()}, {"offset", off}});
    off += p.value.size();
  }
  const std::string payload = payload_bytes(ps);
  json header{{"format", "corma-params"},
              {"version", 1},
              {"tensors", tensors},
              {"count", off},
              {"payload_sha256", sha256_hex(payload)},
              {"meta", meta}};
  header["header_sha256"] = sha256_hex(header.dump());
  const std::string h = header.dump();
  std::ostringstream os;
  le::put<std::uint64_t>(os, h.size());
  os.write(h.data(), static_cast<std::streamsize>(h.size()));
  os.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  return os.str();
}

struct LoadedParams {
  ParamList params;
  json meta;
};

/// Parses a blob written by serialize_params. Any inconsistency between
/// header and payload is a FormatError.
inline LoadedParams deserialize_params(const std::string& bytes) {
  std::istringstream is(bytes);
  const auto hlen = le::get<std::uint64_t>(is);
  if (hlen > bytes.size() - 8) throw FormatError("params: header length exceeds file size");
  std::string h(hlen, '\0');
  is.read(h.data(), static_cast<std::streamsize>(hlen));
  json header;
  try {
    header = json::parse(h);
  } catch (const json::exception& e) {
    throw FormatError(std::string("params: unreadable header: ") + e.what());
  }
  try {
    if (header.at("format") != "corma-params" || header.at("version") != 1)
      throw FormatError("params: unknown format or version");
    json bare = header;
    bare.erase("header_sha256");
    if (sha256_hex(bare.dump()) != header.at("header_sha256").get<std::string>())
      throw FormatError("params: header digest mismatch");
    const auto count = header.at("count").get<std::size_t>();
    const std::size_t payload_len = bytes.size() - 8 - hlen;
    if (payload_len != count * 8) throw FormatError("params: payload size does not match header count");
    if (sha256_hex(std::string_view(bytes).substr(8 + hlen)) != header.at("payload_sha256").get<std::string>())
      throw FormatError("params: payload digest mismatch");
    LoadedParams out;
    std::size_t expect = 0;
    for (const auto& t : header.at("tensors")) {
      const auto shape = t.at("shape").get<Shape>();
      if (t.at("offset").get<std::size_t>() != expect) throw FormatError("params: non-contiguous offsets");
      std::vector<double> v(numel(shape));
      le::get_f64s(is, v);
      expect += v.size();
      out.params.push_back({t.at("name").get<std::string>(), Tensor::from(shape, std::move(v), true)});
    }
    if (expect != count) throw FormatError("params: tensor sizes do not add up to count");
    out.meta = header.at("meta");
    return out;
  } catch (const json::exception& e) {
    throw FormatError(std::string("params: malformed header: ") + e.what());
  }
}

}  // namespace corma::nk
