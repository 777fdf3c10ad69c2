#include <atomic>
#include <chrono>
#include <vector>

#include "doctest.h"
#include "refstore/executor.hpp"

using namespace refstore;
using namespace std::chrono_literals;

TEST_SUITE("executor") {

TEST_CASE("sim executor runs events in time order with seq tie break") {
  SimExecutor ex;
  std::vector<int> order;
  ex.schedule(10ms, [&] { order.push_back(3); });
  ex.schedule(5ms, [&] { order.push_back(1); });
  ex.schedule(5ms, [&] { order.push_back(2); });  // same time, later seq
  ex.run_until_idle();
  CHECK(order == std::vector<int>{1, 2, 3});
  CHECK(ex.now() == Time(10ms));
}

TEST_CASE("sim executor cancel and horizon") {
  SimExecutor ex;
  std::vector<int> order;
  auto id = ex.schedule(5ms, [&] { order.push_back(1); });
  ex.schedule(10ms, [&] { order.push_back(2); });
  ex.cancel(id);
  ex.run_until(Time(7ms));
  CHECK(order.empty());
  CHECK(ex.now() == Time(7ms));
  ex.run_until_idle();
  CHECK(order == std::vector<int>{2});
}

TEST_CASE("sim executor nested scheduling stays deterministic") {
  SimExecutor ex;
  std::vector<int> order;
  ex.schedule(1ms, [&] {
    order.push_back(1);
    ex.post([&] { order.push_back(2); });
    ex.schedule(1ms, [&] { order.push_back(4); });
    ex.post([&] { order.push_back(3); });
  });
  ex.run_until_idle();
  CHECK(order == std::vector<int>{1, 2, 3, 4});
  CHECK(ex.now() == Time(2ms));
}

TEST_CASE("thread executor serializes posted tasks in order") {
  ThreadExecutor ex;
  std::vector<int> order;
  std::atomic<int> done{0};
  for (int i = 0; i < 100; ++i)
    ex.post([&, i] {
      order.push_back(i);
      done.fetch_add(1);
    });
  while (done.load() < 100) std::this_thread::yield();
  for (int i = 0; i < 100; ++i) CHECK(order[i] == i);
  ex.stop();
}

TEST_CASE("thread executor timers fire and cancel") {
  ThreadExecutor ex;
  std::atomic<bool> fired{false};
  std::atomic<bool> canceled_fired{false};
  auto id = ex.schedule(200ms, [&] { canceled_fired = true; });
  ex.schedule(10ms, [&] { fired = true; });
  ex.cancel(id);
  auto deadline = std::chrono::steady_clock::now() + 2s;
  while (!fired && std::chrono::steady_clock::now() < deadline)
    std::this_thread::sleep_for(1ms);
  CHECK(fired);
  std::this_thread::sleep_for(250ms);
  CHECK(!canceled_fired);
  ex.stop();
}

}  // TEST_SUITE
