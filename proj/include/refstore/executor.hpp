#pragma once

#include <condition_variable>
#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <mutex>
#include <thread>

#include "refstore/types.hpp"

namespace refstore {

// Serialization point for a state machine: tasks and timers run one at a
// time, in order. Two implementations share the interface so the same core
// logic runs under a virtual clock (sim) or wall clock (threads).
class Executor {
 public:
  virtual ~Executor() = default;
  virtual void post(std::function<void()> fn) = 0;
  // Returns a timer id. fn runs once after `delay` unless canceled.
  virtual std::uint64_t schedule(Duration delay, std::function<void()> fn) = 0;
  virtual void cancel(std::uint64_t timer_id) = 0;
  virtual Time now() const = 0;
};

// Deterministic single-threaded executor over a virtual clock. Ties break by
// insertion sequence, so identical schedules replay identically.
class SimExecutor : public Executor {
 public:
  void post(std::function<void()> fn) override;
  std::uint64_t schedule(Duration delay, std::function<void()> fn) override;
  void cancel(std::uint64_t timer_id) override;
  Time now() const override { return now_; }

  // Runs the next due event; false when empty or the next event is past
  // `horizon` (clock then advances to horizon at most).
  bool step(Time horizon = kTimeNever);
  // Drains events until none remain at or before `horizon`.
  void run_until(Time horizon);
  void run_until_idle() { run_until(kTimeNever); }
  std::size_t pending() const { return queue_.size(); }

 private:
  struct Ev {
    Time t;
    std::uint64_t seq;
    std::function<void()> fn;
  };
  std::map<std::pair<Time, std::uint64_t>, std::function<void()>> queue_;
  std::map<std::uint64_t, Time> alive_;  // timer id -> key time
  Time now_{0};
  std::uint64_t next_seq_ = 0;
};

// Single worker thread draining tasks and timers against the wall clock.
// now() is nanoseconds since a process-wide epoch.
class ThreadExecutor : public Executor {
 public:
  ThreadExecutor();
  ~ThreadExecutor() override;
  void post(std::function<void()> fn) override;
  std::uint64_t schedule(Duration delay, std::function<void()> fn) override;
  void cancel(std::uint64_t timer_id) override;
  Time now() const override;

  void stop();  // drains nothing further; joins the worker
  bool on_worker_thread() const {
    return std::this_thread::get_id() == worker_.get_id();
  }

 private:
  void run();

  mutable std::mutex m_;
  std::condition_variable cv_;
  std::deque<std::function<void()>> tasks_;
  std::map<std::pair<Time, std::uint64_t>, std::function<void()>> timers_;
  std::map<std::uint64_t, Time> alive_;
  std::uint64_t next_seq_ = 0;
  bool stopping_ = false;
  std::thread worker_;
};

// Nanoseconds since the process-wide steady epoch (wall-clock modes).
Time process_now();

}  // namespace refstore
