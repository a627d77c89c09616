#pragma once

#include <json.hpp>

namespace spherecov {

// Ordered JSON keeps key order stable so serialized output is byte-reproducible.
using Json = nlohmann::ordered_json;

}  // namespace spherecov
