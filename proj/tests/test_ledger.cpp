#include <sstream>

#include "doctest.h"
#include "mesp/ledger.hpp"

using namespace mesp;

TEST_CASE("ledger tracks live, peak and category breakdown") {
  Ledger led;
  led.alloc(1, 100, Category::parameter);
  led.alloc(2, 50, Category::intermediate, 0);
  CHECK(led.live_bytes() == 150);
  CHECK(led.peak_bytes() == 150);
  led.release(2);
  CHECK(led.live_bytes() == 100);
  CHECK(led.peak_bytes() == 150);
  led.alloc(3, 20, Category::gradient);
  CHECK(led.peak_bytes() == 150);  // 120 < 150
  led.alloc(4, 40, Category::checkpoint, 1);
  CHECK(led.peak_bytes() == 160);
  auto& at_peak = led.live_by_category_at_peak();
  CHECK(at_peak.at("parameter") == 100);
  CHECK(at_peak.at("gradient") == 20);
  CHECK(at_peak.at("checkpoint") == 40);
  CHECK(led.live_bytes_for(Category::parameter) == 100);
}

TEST_CASE("ledger rejects double release and unknown ids") {
  Ledger led;
  led.alloc(1, 10, Category::parameter);
  led.release(1);
  CHECK_THROWS_AS(led.release(1), std::logic_error);
  CHECK_THROWS_AS(led.release(99), std::logic_error);
  CHECK_THROWS_AS(led.alloc(2, -5, Category::gradient), std::logic_error);
  led.alloc(3, 10, Category::gradient);
  CHECK_THROWS_AS(led.alloc(3, 10, Category::gradient), std::logic_error);
}

TEST_CASE("peak is invariant under matched pairs after the peak") {
  Ledger led;
  led.alloc(1, 1000, Category::intermediate);
  led.release(1);
  int64_t peak = led.peak_bytes();
  for (int i = 0; i < 10; ++i) {
    led.alloc(100 + i, 50, Category::gradient);
    led.release(100 + i);
  }
  CHECK(led.peak_bytes() == peak);
}

TEST_CASE("step peak resets at step_begin") {
  Ledger led;
  led.alloc(1, 100, Category::parameter);
  led.step_begin();
  led.alloc(2, 500, Category::intermediate);
  led.release(2);
  CHECK(led.step_peak_bytes() == 600);
  led.step_begin();
  CHECK(led.step_peak_bytes() == 100);
  led.alloc(3, 10, Category::gradient);
  CHECK(led.step_peak_bytes() == 110);
}

TEST_CASE("trace export records the event stream") {
  Ledger led(/*keep_trace=*/true);
  led.alloc(7, 64, Category::checkpoint, 2);
  led.release(7);
  std::ostringstream os;
  led.export_trace(os);
  std::string trace = os.str();
  CHECK(trace.find("alloc") != std::string::npos);
  CHECK(trace.find("release") != std::string::npos);
  CHECK(trace.find("checkpoint:2") != std::string::npos);
  CHECK(led.events().size() == 2);
}

TEST_CASE("reduction percentage rounds to one decimal") {
  CHECK(reduction_percent(50, 100) == 50.0);
  CHECK(reduction_percent(1362, 3608) == 62.3);
  CHECK(reduction_percent(100, 100) == 0.0);
  CHECK(reduction_percent(150, 100) == -50.0);
  CHECK_THROWS_AS(reduction_percent(10, 0), std::invalid_argument);
}
