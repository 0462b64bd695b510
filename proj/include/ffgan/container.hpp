#pragma once

#include "ffgan/tensor.hpp"

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace ffgan {

// Flat-tensor container, little-endian throughout:
//   "FFT1" | u32 version
//   then per record: u16 name length | UTF-8 name | u8 rank | u32 extents[rank] | f64 payload[prod(extents)]
// Records run to end of file.

inline constexpr std::uint32_t kContainerVersion = 1;

struct Record {
    std::string name;
    Tensor tensor;
};

struct RecordHeader {
    std::string name;
    Shape shape;
    std::uint64_t payload_offset = 0;
};

/// Writes to a temporary sibling and renames it into place.
void write_container(const std::filesystem::path& path, const std::vector<Record>& records);

/// Serialized bytes of a container; write_container writes exactly these.
std::string encode_container(const std::vector<Record>& records);

std::vector<Record> read_container(const std::filesystem::path& path);

/// Header-only scan: payloads are skipped, never decoded.
std::vector<RecordHeader> scan_container(const std::filesystem::path& path);

/// Looks up a record by name; throws FormatError(missing_record) when absent.
const Tensor& find_record(const std::vector<Record>& records, const std::string& name);

/// Writes bytes atomically (temp file + rename).
void write_file_atomic(const std::filesystem::path& path, const std::string& bytes);

} // namespace ffgan
