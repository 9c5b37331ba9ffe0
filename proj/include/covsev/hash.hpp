#pragma once

#include <string>
#include <string_view>

namespace covsev {

std::string sha256_hex(std::string_view bytes);

/// Short (16 hex chars) content hash used to stamp caches, checkpoints and
/// reports.
std::string content_hash(std::string_view canonical_text);

}  // namespace covsev
