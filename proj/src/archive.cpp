// SPDX-License-Identifier: Apache-2.0

#include "reportgen/archive.hpp"

#include <fmt/format.h>

#include <bit>
#include <cstdint>
#include <fstream>
#include <iterator>

namespace reportgen {

namespace {

constexpr const char* kFormat = "reportgen-tensor-archive";
constexpr int kVersion = 1;

void append_le(std::vector<unsigned char>& out, double value) {
    auto bits = std::bit_cast<std::uint64_t>(value);
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<unsigned char>(bits & 0xffU));
        bits >>= 8;
    }
}

double read_le(const unsigned char* bytes) {
    std::uint64_t bits = 0;
    for (int i = 7; i >= 0; --i) {
        bits = (bits << 8) | bytes[i];
    }
    return std::bit_cast<double>(bits);
}

}  // namespace

bool Archive::contains(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return true;
        }
    }
    return false;
}

const Tensor& Archive::get(const std::string& name) const {
    for (const auto& [n, t] : tensors) {
        if (n == name) {
            return t;
        }
    }
    throw ArchiveError(fmt::format("archive has no tensor named '{}'", name));
}

std::filesystem::path archive_manifest_path(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".json";
    return p;
}

std::filesystem::path archive_payload_path(const std::filesystem::path& stem) {
    auto p = stem;
    p += ".bin";
    return p;
}

std::vector<unsigned char> serialize_payload(const NamedTensors& tensors) {
    std::vector<unsigned char> bytes;
    for (const auto& [name, t] : tensors) {
        for (double v : t.data()) {
            append_le(bytes, v);
        }
    }
    return bytes;
}

void save_archive(const std::filesystem::path& stem, const NamedTensors& tensors,
                  const nlohmann::json& attributes) {
    if (stem.has_parent_path()) {
        std::filesystem::create_directories(stem.parent_path());
    }
    nlohmann::json entries = nlohmann::json::array();
    std::size_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::size_t nbytes = t.numel() * sizeof(double);
        entries.push_back({{"name", name},
                           {"shape", t.shape()},
                           {"dtype", "f64"},
                           {"offset", offset},
                           {"nbytes", nbytes}});
        offset += nbytes;
    }
    nlohmann::json manifest = {{"format", kFormat},
                               {"version", kVersion},
                               {"payload", archive_payload_path(stem).filename().string()},
                               {"byte_order", "little"},
                               {"tensors", entries},
                               {"attributes", attributes}};

    const auto payload = serialize_payload(tensors);
    std::ofstream bin(archive_payload_path(stem), std::ios::binary | std::ios::trunc);
    bin.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    if (!bin) {
        throw ArchiveError(fmt::format("failed writing {}", archive_payload_path(stem).string()));
    }
    std::ofstream js(archive_manifest_path(stem), std::ios::trunc);
    js << manifest.dump(2) << '\n';
    if (!js) {
        throw ArchiveError(fmt::format("failed writing {}", archive_manifest_path(stem).string()));
    }
}

Archive load_archive(const std::filesystem::path& stem) {
    std::ifstream js(archive_manifest_path(stem));
    if (!js) {
        throw ArchiveError(fmt::format("cannot open {}", archive_manifest_path(stem).string()));
    }
    nlohmann::json manifest;
    try {
        manifest = nlohmann::json::parse(js);
    } catch (const nlohmann::json::exception& e) {
        throw ArchiveError(fmt::format("malformed manifest {}: {}", archive_manifest_path(stem).string(), e.what()));
    }
    if (manifest.value("format", "") != kFormat) {
        throw ArchiveError(fmt::format("{} is not a tensor archive manifest", archive_manifest_path(stem).string()));
    }

    std::ifstream bin(archive_payload_path(stem), std::ios::binary);
    if (!bin) {
        throw ArchiveError(fmt::format("cannot open {}", archive_payload_path(stem).string()));
    }
    const std::vector<unsigned char> payload((std::istreambuf_iterator<char>(bin)), std::istreambuf_iterator<char>());

    Archive archive;
    archive.attributes = manifest.value("attributes", nlohmann::json::object());
    for (const auto& entry : manifest.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        const auto shape = entry.at("shape").get<Shape>();
        const auto offset = entry.at("offset").get<std::size_t>();
        const auto nbytes = entry.at("nbytes").get<std::size_t>();
        if (entry.value("dtype", "") != "f64") {
            throw ArchiveError(fmt::format("tensor '{}': unsupported dtype", name));
        }
        if (nbytes != shape_numel(shape) * sizeof(double)) {
            throw ArchiveError(fmt::format("tensor '{}': {} bytes do not match shape {}", name, nbytes,
                                           shape_str(shape)));
        }
        if (offset + nbytes > payload.size()) {
            throw ArchiveError(fmt::format("tensor '{}': payload truncated ({} bytes needed, {} present)", name,
                                           offset + nbytes, payload.size()));
        }
        std::vector<double> values(shape_numel(shape));
        for (std::size_t i = 0; i < values.size(); ++i) {
            values[i] = read_le(payload.data() + offset + i * sizeof(double));
        }
        archive.tensors.emplace_back(name, Tensor::from(shape, std::move(values)));
    }
    return archive;
}

}  // namespace reportgen
