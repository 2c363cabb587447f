#pragma once

// JSON Lines persistence for communication records. One object per listener
// update with keys epoch, batch, speaker, listener, object_index, factors,
// message, loss_align, loss_kl, loss_total.

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "ssng/game.hpp"

namespace ssng::game {

nlohmann::json to_json(const CommTraceRecord& r);
CommTraceRecord record_from_json(const nlohmann::json& j);

// Throws DomainError for tokens outside [0, vocab), wrong message length,
// non-finite losses, unknown roles, or ragged per-object arrays.
void validate_record(const CommTraceRecord& r, int64_t vocab, int64_t length);

class TraceWriter {
 public:
  // Truncates `path`. Records are validated before anything is written.
  TraceWriter(const std::filesystem::path& path, int64_t vocab, int64_t length);
  void write(const CommTraceRecord& r);
  void flush();
  int64_t lines() const { return lines_; }

 private:
  std::ofstream out_;
  std::filesystem::path path_;
  int64_t vocab_, length_;
  int64_t lines_ = 0;
};

std::vector<CommTraceRecord> read_trace(const std::filesystem::path& path);

}  // namespace ssng::game
