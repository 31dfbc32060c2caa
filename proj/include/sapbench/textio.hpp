#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>

namespace sap {

// Shortest round-trip decimal form; the same value always prints the same
// bytes, which is what makes CSV/manifest outputs byte-reproducible.
std::string format_real(double v);
std::string format_real(float v);

// Write via a sibling temp file + rename so readers never observe a partial
// file. The rename also makes reruns atomic overwrites.
void write_text_file_atomic(const std::filesystem::path& path, std::string_view content);

std::string read_text_file(const std::filesystem::path& path);

// FNV-1a 64-bit; stable content fingerprints for run manifests.
std::uint64_t fnv1a64(std::string_view bytes);
std::string hex64(std::uint64_t v);

}  // namespace sap
