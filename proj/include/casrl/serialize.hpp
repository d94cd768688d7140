#pragma once

#include <json.hpp>

#include <string>

#include "casrl/mlp.hpp"
#include "casrl/normalizer.hpp"
#include "casrl/optim.hpp"
#include "casrl/types.hpp"

namespace casrl {

using Json = nlohmann::json;

// Matrices serialize as {rows, cols, data(row-major)}. nlohmann emits doubles
// in shortest round-trip form, so parse(dump(x)) reproduces bit-identical
// values; replay checks may safely cross a disk round trip.
Json mat_to_json(const Mat& m);
Mat mat_from_json(const Json& j);
Json vec_to_json(const Vec& v);
Vec vec_from_json(const Json& j);

// Versioned parameter snapshot: layer shapes plus row-major values.
inline constexpr const char* kMlpFormatTag = "casrl-mlp-v1";
Json mlp_to_json(const MlpParams& p);
MlpParams mlp_from_json(const Json& j);

Json normalizer_to_json(const RunningNormalizer& n);
RunningNormalizer normalizer_from_json(const Json& j);

Json adam_to_json(const AdamState& s);
AdamState adam_from_json(const Json& j);

// 64-bit FNV-1a over a canonical (sorted-key) JSON dump, as a hex string.
std::string json_hash(const Json& j);

}  // namespace casrl
