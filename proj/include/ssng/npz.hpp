#pragma once

// Minimal reader for NumPy .npy arrays stored inside .npz (zip) archives.
// Handles stored and deflated members and zip64 size records, which is what
// numpy.savez / savez_compressed produce.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

namespace ssng::data {

struct NpyHeader {
  std::string descr;  // e.g. "<i8", "|u1", "<f8"
  bool fortran_order = false;
  std::vector<int64_t> shape;

  int64_t count() const;
  int item_size() const;
};

NpyHeader parse_npy_header(const std::string& dict);

class NpzArchive {
 public:
  explicit NpzArchive(std::filesystem::path path);

  std::vector<std::string> names() const;
  bool contains(const std::string& name) const;

  // Reads the whole array; returns header and raw little-endian payload.
  std::pair<NpyHeader, std::vector<uint8_t>> read(const std::string& name) const;

  // Streams the payload in chunks. The callback gets the parsed header, the byte
  // offset of the chunk within the payload, and the chunk itself.
  using ChunkFn = std::function<void(const NpyHeader&, uint64_t, const uint8_t*, size_t)>;
  NpyHeader stream(const std::string& name, const ChunkFn& fn) const;

 private:
  struct Entry {
    std::string name;
    uint16_t method = 0;
    uint64_t compressed_size = 0;
    uint64_t uncompressed_size = 0;
    uint64_t local_header_offset = 0;
  };
  const Entry& find(const std::string& name) const;
  void stream_raw(const Entry& e, const std::function<void(const uint8_t*, size_t)>& fn) const;

  std::filesystem::path path_;
  std::vector<Entry> entries_;
};

}  // namespace ssng::data
