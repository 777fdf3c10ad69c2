#include "refstore/trace.hpp"

#include <cinttypes>
#include <cstdio>

namespace refstore {

std::string TraceEvent::format() const {
  char head[64];
  std::snprintf(head, sizeof(head), "%06" PRIu64 " %" PRId64 " ", seq,
                static_cast<std::int64_t>(t.count()));
  std::string out(head);
  out += actor;
  out += ' ';
  out += kind;
  for (const auto& [k, v] : fields) {
    out += ' ';
    out += k;
    out += '=';
    out += v;
  }
  return out;
}

void TraceLog::emit(TraceEvent ev) {
  std::lock_guard lock(m_);
  ev.seq = next_seq_++;
  events_.push_back(std::move(ev));
}

std::vector<TraceEvent> TraceLog::events() const {
  std::lock_guard lock(m_);
  return events_;
}

std::string TraceLog::render() const {
  std::lock_guard lock(m_);
  std::string out;
  for (const auto& ev : events_) {
    out += ev.format();
    out += '\n';
  }
  return out;
}

std::size_t TraceLog::size() const {
  std::lock_guard lock(m_);
  return events_.size();
}

void StderrTrace::emit(TraceEvent ev) {
  std::lock_guard lock(m_);
  ev.seq = next_seq_++;
  std::fprintf(stderr, "%s\n", ev.format().c_str());
}

}  // namespace refstore
