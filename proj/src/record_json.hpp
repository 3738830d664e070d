#pragma once

#include "json.hpp"
#include "widthlab/continual.hpp"

namespace widthlab {

nlohmann::json protocol_to_json(const ProtocolConfig& c);
ProtocolConfig protocol_from_json(const nlohmann::json& j);

}  // namespace widthlab
