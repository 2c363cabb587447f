#include "ssng/npz.hpp"

#include <zlib.h>

#include <algorithm>
#include <cstring>
#include <fstream>

#include "ssng/errors.hpp"

namespace ssng::data {

namespace {

constexpr uint32_t kEocdSig = 0x06054b50;
constexpr uint32_t kZip64EocdSig = 0x06064b50;
constexpr uint32_t kZip64LocatorSig = 0x07064b50;
constexpr uint32_t kCentralSig = 0x02014b50;
constexpr uint32_t kLocalSig = 0x04034b50;

uint16_t le16(const uint8_t* p) { return static_cast<uint16_t>(p[0] | (p[1] << 8)); }
uint32_t le32(const uint8_t* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}
uint64_t le64(const uint8_t* p) {
  return static_cast<uint64_t>(le32(p)) | (static_cast<uint64_t>(le32(p + 4)) << 32);
}

std::vector<uint8_t> read_at(std::ifstream& in, uint64_t offset, size_t n) {
  std::vector<uint8_t> buf(n);
  in.seekg(static_cast<std::streamoff>(offset));
  in.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(n));
  if (static_cast<size_t>(in.gcount()) != n) throw DataError("npz: truncated archive");
  return buf;
}

std::string strip_npy(const std::string& name) {
  if (name.size() > 4 && name.ends_with(".npy")) return name.substr(0, name.size() - 4);
  return name;
}

// Pulls "key': value" out of the python-literal header dict.
std::string dict_value(const std::string& dict, const std::string& key) {
  auto k = dict.find("'" + key + "'");
  if (k == std::string::npos) throw DataError("npy header missing key " + key);
  auto colon = dict.find(':', k);
  auto start = dict.find_first_not_of(' ', colon + 1);
  if (dict[start] == '(') {
    auto end = dict.find(')', start);
    return dict.substr(start, end - start + 1);
  }
  if (dict[start] == '\'') {
    auto end = dict.find('\'', start + 1);
    return dict.substr(start + 1, end - start - 1);
  }
  auto end = dict.find_first_of(",}", start);
  return dict.substr(start, end - start);
}

}  // namespace

int64_t NpyHeader::count() const {
  int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

int NpyHeader::item_size() const {
  if (descr.size() < 3) throw DataError("npy: bad dtype descriptor " + descr);
  return std::stoi(descr.substr(2));
}

NpyHeader parse_npy_header(const std::string& dict) {
  NpyHeader h;
  h.descr = dict_value(dict, "descr");
  h.fortran_order = dict_value(dict, "fortran_order") == "True";
  auto shape = dict_value(dict, "shape");
  std::string num;
  for (char c : shape) {
    if (c >= '0' && c <= '9') {
      num.push_back(c);
    } else if (!num.empty()) {
      h.shape.push_back(std::stoll(num));
      num.clear();
    }
  }
  if (!h.descr.empty() && h.descr[0] == '>') throw DataError("npy: big-endian arrays unsupported");
  return h;
}

NpzArchive::NpzArchive(std::filesystem::path path) : path_(std::move(path)) {
  std::ifstream in(path_, std::ios::binary);
  if (!in) throw DataError("cannot open " + path_.string());
  in.seekg(0, std::ios::end);
  const uint64_t file_size = static_cast<uint64_t>(in.tellg());
  if (file_size < 22) throw DataError("npz: file too small: " + path_.string());

  const uint64_t tail = std::min<uint64_t>(file_size, 65557);
  auto buf = read_at(in, file_size - tail, tail);
  int64_t eocd = -1;
  for (int64_t i = static_cast<int64_t>(tail) - 22; i >= 0; --i) {
    if (le32(&buf[i]) == kEocdSig) {
      eocd = i;
      break;
    }
  }
  if (eocd < 0) throw DataError("npz: end of central directory not found in " + path_.string());
  const uint8_t* e = &buf[eocd];
  uint64_t n_entries = le16(e + 10);
  uint64_t cd_size = le32(e + 12);
  uint64_t cd_offset = le32(e + 16);

  if (n_entries == 0xFFFF || cd_offset == 0xFFFFFFFF || cd_size == 0xFFFFFFFF) {
    const uint64_t loc_pos = file_size - tail + eocd - 20;
    auto loc = read_at(in, loc_pos, 20);
    if (le32(loc.data()) != kZip64LocatorSig) throw DataError("npz: zip64 locator missing");
    auto rec = read_at(in, le64(loc.data() + 8), 56);
    if (le32(rec.data()) != kZip64EocdSig) throw DataError("npz: zip64 record missing");
    n_entries = le64(rec.data() + 32);
    cd_size = le64(rec.data() + 40);
    cd_offset = le64(rec.data() + 48);
  }

  auto cd = read_at(in, cd_offset, cd_size);
  size_t pos = 0;
  for (uint64_t i = 0; i < n_entries; ++i) {
    if (pos + 46 > cd.size() || le32(&cd[pos]) != kCentralSig) {
      throw DataError("npz: corrupt central directory");
    }
    const uint8_t* c = &cd[pos];
    Entry entry;
    entry.method = le16(c + 10);
    entry.compressed_size = le32(c + 20);
    entry.uncompressed_size = le32(c + 24);
    const uint16_t name_len = le16(c + 28);
    const uint16_t extra_len = le16(c + 30);
    const uint16_t comment_len = le16(c + 32);
    entry.local_header_offset = le32(c + 42);
    entry.name.assign(reinterpret_cast<const char*>(c + 46), name_len);

    // zip64 extended information: only the saturated fields are present, in order.
    const uint8_t* extra = c + 46 + name_len;
    size_t off = 0;
    while (off + 4 <= extra_len) {
      const uint16_t id = le16(extra + off);
      const uint16_t len = le16(extra + off + 2);
      if (id == 0x0001) {
        const uint8_t* f = extra + off + 4;
        if (entry.uncompressed_size == 0xFFFFFFFF) {
          entry.uncompressed_size = le64(f);
          f += 8;
        }
        if (entry.compressed_size == 0xFFFFFFFF) {
          entry.compressed_size = le64(f);
          f += 8;
        }
        if (entry.local_header_offset == 0xFFFFFFFF) entry.local_header_offset = le64(f);
      }
      off += 4 + len;
    }
    entries_.push_back(std::move(entry));
    pos += 46 + name_len + extra_len + comment_len;
  }
}

std::vector<std::string> NpzArchive::names() const {
  std::vector<std::string> out;
  for (const auto& e : entries_) out.push_back(strip_npy(e.name));
  return out;
}

bool NpzArchive::contains(const std::string& name) const {
  return std::any_of(entries_.begin(), entries_.end(),
                     [&](const Entry& e) { return strip_npy(e.name) == strip_npy(name); });
}

const NpzArchive::Entry& NpzArchive::find(const std::string& name) const {
  for (const auto& e : entries_) {
    if (strip_npy(e.name) == strip_npy(name)) return e;
  }
  throw DataError("npz: array '" + name + "' not found in " + path_.string());
}

void NpzArchive::stream_raw(const Entry& e,
                            const std::function<void(const uint8_t*, size_t)>& fn) const {
  std::ifstream in(path_, std::ios::binary);
  auto local = read_at(in, e.local_header_offset, 30);
  if (le32(local.data()) != kLocalSig) throw DataError("npz: bad local header for " + e.name);
  const uint64_t data_start = e.local_header_offset + 30 + le16(&local[26]) + le16(&local[28]);
  in.seekg(static_cast<std::streamoff>(data_start));

  constexpr size_t kChunk = 1 << 20;
  std::vector<uint8_t> src(kChunk);
  uint64_t remaining = e.compressed_size;

  if (e.method == 0) {
    while (remaining > 0) {
      const size_t n = static_cast<size_t>(std::min<uint64_t>(remaining, kChunk));
      in.read(reinterpret_cast<char*>(src.data()), static_cast<std::streamsize>(n));
      if (static_cast<size_t>(in.gcount()) != n) throw DataError("npz: truncated member " + e.name);
      fn(src.data(), n);
      remaining -= n;
    }
    return;
  }
  if (e.method != 8) throw DataError("npz: unsupported compression method for " + e.name);

  z_stream zs{};
  if (inflateInit2(&zs, -MAX_WBITS) != Z_OK) throw DataError("npz: inflateInit failed");
  std::vector<uint8_t> dst(kChunk);
  int ret = Z_OK;
  uint64_t produced = 0;
  while (ret != Z_STREAM_END) {
    if (zs.avail_in == 0) {
      const size_t n = static_cast<size_t>(std::min<uint64_t>(remaining, kChunk));
      if (n == 0) break;
      in.read(reinterpret_cast<char*>(src.data()), static_cast<std::streamsize>(n));
      if (static_cast<size_t>(in.gcount()) != n) {
        inflateEnd(&zs);
        throw DataError("npz: truncated member " + e.name);
      }
      remaining -= n;
      zs.next_in = src.data();
      zs.avail_in = static_cast<uInt>(n);
    }
    zs.next_out = dst.data();
    zs.avail_out = static_cast<uInt>(dst.size());
    ret = inflate(&zs, Z_NO_FLUSH);
    if (ret != Z_OK && ret != Z_STREAM_END) {
      inflateEnd(&zs);
      throw DataError("npz: inflate failed for " + e.name);
    }
    const size_t got = dst.size() - zs.avail_out;
    produced += got;
    if (got > 0) fn(dst.data(), got);
  }
  inflateEnd(&zs);
  if (produced != e.uncompressed_size) throw DataError("npz: size mismatch in " + e.name);
}

NpyHeader NpzArchive::stream(const std::string& name, const ChunkFn& fn) const {
  const Entry& e = find(name);
  // The .npy preamble is parsed incrementally from the front of the stream.
  std::vector<uint8_t> pre;
  bool have_header = false;
  NpyHeader header;
  uint64_t payload_offset = 0;
  size_t header_total = 0;

  stream_raw(e, [&](const uint8_t* data, size_t n) {
    size_t used = 0;
    if (!have_header) {
      pre.insert(pre.end(), data, data + n);
      if (pre.size() < 10) return;
      if (std::memcmp(pre.data(), "\x93NUMPY", 6) != 0) throw DataError("npy: bad magic in " + name);
      const uint8_t major = pre[6];
      const size_t len_bytes = major == 1 ? 2 : 4;
      if (pre.size() < 8 + len_bytes) return;
      const size_t hlen = len_bytes == 2 ? le16(&pre[8]) : le32(&pre[8]);
      header_total = 8 + len_bytes + hlen;
      if (pre.size() < header_total) return;
      header = parse_npy_header(
          std::string(reinterpret_cast<const char*>(&pre[8 + len_bytes]), hlen));
      have_header = true;
      const size_t consumed_before = pre.size() - n;
      // Earlier chunks were all header bytes, so the payload starts inside this one.
      used = header_total - consumed_before;
      pre.clear();
    }
    if (used < n) {
      fn(header, payload_offset, data + used, n - used);
      payload_offset += n - used;
    }
  });
  if (!have_header) throw DataError("npy: missing header in " + name);
  return header;
}

std::pair<NpyHeader, std::vector<uint8_t>> NpzArchive::read(const std::string& name) const {
  std::vector<uint8_t> payload;
  auto header = stream(name, [&](const NpyHeader&, uint64_t, const uint8_t* d, size_t n) {
    payload.insert(payload.end(), d, d + n);
  });
  const auto expected = static_cast<size_t>(header.count()) * header.item_size();
  if (payload.size() != expected) throw DataError("npy: payload size mismatch in " + name);
  return {header, std::move(payload)};
}

}  // namespace ssng::data
