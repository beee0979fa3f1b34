// SPDX-License-Identifier: Apache-2.0
//
// Tensor archive: a JSON manifest `<stem>.json` listing (name, shape, dtype,
// offset, nbytes) per tensor, plus a flat little-endian float64 payload
// `<stem>.bin`. Free-form attributes ride along in the manifest.

#pragma once

#include "reportgen/tensor.hpp"

#include <nlohmann/json.hpp>

#include <filesystem>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace reportgen {

class ArchiveError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using NamedTensors = std::vector<std::pair<std::string, Tensor>>;

struct Archive {
    NamedTensors tensors;
    nlohmann::json attributes = nlohmann::json::object();

    bool contains(const std::string& name) const;
    /// Throws ArchiveError when the name is missing.
    const Tensor& get(const std::string& name) const;
};

std::filesystem::path archive_manifest_path(const std::filesystem::path& stem);
std::filesystem::path archive_payload_path(const std::filesystem::path& stem);

void save_archive(const std::filesystem::path& stem, const NamedTensors& tensors,
                  const nlohmann::json& attributes = nlohmann::json::object());
Archive load_archive(const std::filesystem::path& stem);

/// Little-endian float64 bytes of the tensors, in order. Used for
/// byte-identity checks without touching the filesystem.
std::vector<unsigned char> serialize_payload(const NamedTensors& tensors);

}  // namespace reportgen
