#pragma once

#include <cstdint>
#include <initializer_list>
#include <mutex>
#include <string>
#include <utility>
#include <vector>

#include "refstore/types.hpp"

namespace refstore {

// One structured event. Rendered as:
//   <seq> <t_ns> <actor> <kind> k=v k=v ...
// with seq zero-padded to 6 digits and t_ns the integer nanosecond clock.
struct TraceEvent {
  std::uint64_t seq = 0;
  Time t{0};
  std::string actor;
  std::string kind;
  std::vector<std::pair<std::string, std::string>> fields;

  std::string format() const;
};

class TraceSink {
 public:
  virtual ~TraceSink() = default;
  virtual void emit(TraceEvent ev) = 0;
};

// Collects events in arrival order; thread-safe.
class TraceLog : public TraceSink {
 public:
  void emit(TraceEvent ev) override;
  std::vector<TraceEvent> events() const;
  // Full text, one line per event; identical runs render identical bytes.
  std::string render() const;
  std::size_t size() const;

 private:
  mutable std::mutex m_;
  std::vector<TraceEvent> events_;
  std::uint64_t next_seq_ = 0;
};

class NullTrace : public TraceSink {
 public:
  void emit(TraceEvent) override {}
};

// Writes each event line to stderr as it arrives (debug aid for live runs).
class StderrTrace : public TraceSink {
 public:
  void emit(TraceEvent ev) override;

 private:
  std::mutex m_;
  std::uint64_t next_seq_ = 0;
};

using KV = std::vector<std::pair<std::string, std::string>>;

inline void trace_to(TraceSink* sink, Time t, std::string actor,
                     std::string kind, KV fields = {}) {
  if (!sink) return;
  TraceEvent ev;
  ev.t = t;
  ev.actor = std::move(actor);
  ev.kind = std::move(kind);
  ev.fields = std::move(fields);
  sink->emit(std::move(ev));
}

}  // namespace refstore
