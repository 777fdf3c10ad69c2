#include "refstore/executor.hpp"

namespace refstore {

void SimExecutor::post(std::function<void()> fn) {
  schedule(Duration(0), std::move(fn));
}

std::uint64_t SimExecutor::schedule(Duration delay, std::function<void()> fn) {
  std::uint64_t id = next_seq_++;
  Time t = now_ + delay;
  queue_.emplace(std::make_pair(t, id), std::move(fn));
  alive_.emplace(id, t);
  return id;
}

void SimExecutor::cancel(std::uint64_t timer_id) {
  auto it = alive_.find(timer_id);
  if (it == alive_.end()) return;
  queue_.erase({it->second, timer_id});
  alive_.erase(it);
}

bool SimExecutor::step(Time horizon) {
  if (queue_.empty()) return false;
  auto it = queue_.begin();
  auto [t, id] = it->first;
  if (t > horizon) {
    if (horizon != kTimeNever && horizon > now_) now_ = horizon;
    return false;
  }
  auto fn = std::move(it->second);
  queue_.erase(it);
  alive_.erase(id);
  if (t > now_) now_ = t;
  fn();
  return true;
}

void SimExecutor::run_until(Time horizon) {
  while (step(horizon)) {
  }
}

Time process_now() {
  static const auto epoch = std::chrono::steady_clock::now();
  return std::chrono::duration_cast<Time>(std::chrono::steady_clock::now() -
                                          epoch);
}

ThreadExecutor::ThreadExecutor() {
  process_now();  // pin the epoch before the worker starts
  worker_ = std::thread([this] { run(); });
}

ThreadExecutor::~ThreadExecutor() { stop(); }

void ThreadExecutor::stop() {
  {
    std::lock_guard lock(m_);
    if (stopping_) {
      return;
    }
    stopping_ = true;
  }
  cv_.notify_all();
  if (worker_.joinable()) worker_.join();
}

void ThreadExecutor::post(std::function<void()> fn) {
  {
    std::lock_guard lock(m_);
    if (stopping_) return;
    tasks_.push_back(std::move(fn));
  }
  cv_.notify_all();
}

std::uint64_t ThreadExecutor::schedule(Duration delay,
                                       std::function<void()> fn) {
  std::uint64_t id;
  {
    std::lock_guard lock(m_);
    id = next_seq_++;
    if (stopping_) return id;
    Time t = process_now() + delay;
    timers_.emplace(std::make_pair(t, id), std::move(fn));
    alive_.emplace(id, t);
  }
  cv_.notify_all();
  return id;
}

void ThreadExecutor::cancel(std::uint64_t timer_id) {
  std::lock_guard lock(m_);
  auto it = alive_.find(timer_id);
  if (it == alive_.end()) return;
  timers_.erase({it->second, timer_id});
  alive_.erase(it);
}

Time ThreadExecutor::now() const { return process_now(); }

void ThreadExecutor::run() {
  std::unique_lock lock(m_);
  while (true) {
    if (stopping_) return;
    if (!tasks_.empty()) {
      auto fn = std::move(tasks_.front());
      tasks_.pop_front();
      lock.unlock();
      fn();
      lock.lock();
      continue;
    }
    if (!timers_.empty()) {
      auto it = timers_.begin();
      Time due = it->first.first;
      Time current = process_now();
      if (due <= current) {
        auto fn = std::move(it->second);
        alive_.erase(it->first.second);
        timers_.erase(it);
        lock.unlock();
        fn();
        lock.lock();
        continue;
      }
      cv_.wait_for(lock, due - current);
      continue;
    }
    cv_.wait(lock);
  }
}

}  // namespace refstore
