#include "ssng/trace.hpp"

#include <cmath>

#include "ssng/errors.hpp"

namespace ssng::game {

using nlohmann::json;

json to_json(const CommTraceRecord& r) {
  json j;
  j["epoch"] = r.epoch;
  j["batch"] = r.batch;
  j["speaker"] = r.speaker;
  j["listener"] = r.listener;
  j["object_index"] = r.object_index;
  j["factors"] = r.factors;
  j["message"] = r.message;
  j["loss_align"] = r.loss_align;
  j["loss_kl"] = r.loss_kl;
  j["loss_total"] = r.loss_total;
  return j;
}

CommTraceRecord record_from_json(const json& j) {
  CommTraceRecord r;
  try {
    r.epoch = j.at("epoch").get<int64_t>();
    r.batch = j.at("batch").get<int64_t>();
    r.speaker = j.at("speaker").get<std::string>();
    r.listener = j.at("listener").get<std::string>();
    r.object_index = j.at("object_index").get<std::vector<int64_t>>();
    r.factors = j.at("factors").get<std::vector<std::array<int64_t, 5>>>();
    r.message = j.at("message").get<std::vector<std::vector<int64_t>>>();
    r.loss_align = j.at("loss_align").get<double>();
    r.loss_kl = j.at("loss_kl").get<double>();
    r.loss_total = j.at("loss_total").get<double>();
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed trace record: ") + e.what());
  }
  return r;
}

void validate_record(const CommTraceRecord& r, int64_t vocab, int64_t length) {
  if ((r.speaker != "A" && r.speaker != "B") || (r.listener != "A" && r.listener != "B") ||
      r.speaker == r.listener) {
    throw DomainError("trace record: speaker/listener must be distinct agents A and B");
  }
  if (r.message.size() != r.object_index.size() ||
      (!r.factors.empty() && r.factors.size() != r.object_index.size())) {
    throw DomainError("trace record: per-object arrays differ in length");
  }
  for (const auto& m : r.message) {
    if (static_cast<int64_t>(m.size()) != length) throw DomainError("trace record: wrong message length");
    for (auto t : m) {
      if (t < 0 || t >= vocab) throw DomainError("trace record: token " + std::to_string(t) + " out of range");
    }
  }
  if (!std::isfinite(r.loss_align) || !std::isfinite(r.loss_kl) || !std::isfinite(r.loss_total)) {
    throw DomainError("trace record: non-finite loss");
  }
}

TraceWriter::TraceWriter(const std::filesystem::path& path, int64_t vocab, int64_t length)
    : path_(path), vocab_(vocab), length_(length) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  out_.open(path, std::ios::out | std::ios::trunc);
  if (!out_) throw IoError("cannot open trace file " + path.string());
}

void TraceWriter::write(const CommTraceRecord& r) {
  validate_record(r, vocab_, length_);
  out_ << to_json(r).dump() << '\n';
  if (!out_) throw IoError("write failed for trace " + path_.string());
  ++lines_;
}

void TraceWriter::flush() {
  out_.flush();
  if (!out_) throw IoError("flush failed for trace " + path_.string());
}

std::vector<CommTraceRecord> read_trace(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open trace file " + path.string());
  std::vector<CommTraceRecord> out;
  std::string line;
  int64_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    try {
      out.push_back(record_from_json(json::parse(line)));
    } catch (const json::parse_error& e) {
      throw IoError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace ssng::game
