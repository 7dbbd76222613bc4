#pragma once

#include <filesystem>
#include <iosfwd>
#include <string>
#include <vector>

#include "phoenix/tensor.hpp"

namespace phoenix {

// PHXT tensor record, little-endian:
//   "PHXT" | u16 version=1 | u8 dtype=0 (f32) | u8 rank | rank x u64 dims | f32 payload
void write_tensor(std::ostream& out, const Tensor& tensor);
Tensor read_tensor(std::istream& in);

void save_tensor(const std::filesystem::path& path, const Tensor& tensor);
Tensor load_tensor(const std::filesystem::path& path);

struct CheckpointEntry {
    std::string name;
    Tensor tensor;
    bool personal = false;
};

// PHXC checkpoint, little-endian:
//   "PHXC" | u16 version=1 | u32 count |
//   count x (u16 name length | UTF-8 name | u8 flags (bit 0 = personal) | PHXT record)
void write_checkpoint(std::ostream& out, const std::vector<CheckpointEntry>& entries);
std::vector<CheckpointEntry> read_checkpoint(std::istream& in);

void save_checkpoint(const std::filesystem::path& path, const std::vector<CheckpointEntry>& entries);
// FormatError messages name the record index (and name when already read).
std::vector<CheckpointEntry> load_checkpoint(const std::filesystem::path& path);

// Binary PGM (1 channel) or PPM (3 channels) of an image [C,H,W] in [-1, 1];
// pixel = round((v + 1) * 127.5) clamped to [0, 255].
void save_netpbm(const std::filesystem::path& path, const Tensor& image);

}  // namespace phoenix
