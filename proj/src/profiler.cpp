#include "pretune/profiler.hpp"

#include <unistd.h>

#include <atomic>
#include <chrono>
#include <cstdlib>
#include <fstream>
#include <string>
#include <thread>
#include <vector>

namespace pretune {

namespace {

double system_memory_total_bytes() {
  std::ifstream f("/proc/meminfo");
  std::string key;
  long long kb = 0;
  while (f >> key >> kb) {
    if (key == "MemTotal:") return static_cast<double>(kb) * 1024.0;
    f.ignore(256, '\n');
  }
  return 0.0;
}

double process_rss_bytes() {
  std::ifstream f("/proc/self/statm");
  long long size = 0, resident = 0;
  if (!(f >> size >> resident)) return 0.0;
  return static_cast<double>(resident) * static_cast<double>(sysconf(_SC_PAGESIZE));
}

double sample_interval_seconds() {
  double hz = 10.0;
  if (const char* env = std::getenv("PROFILE_HZ")) {
    const double v = std::atof(env);
    if (v > 0) hz = v;
  }
  if (hz < 1.0) hz = 1.0;
  return 1.0 / hz;
}

}  // namespace

ResourceProfile profile_epoch(const std::function<void()>& work) {
  const double total = system_memory_total_bytes();
  const double interval = sample_interval_seconds();

  std::atomic<bool> done{false};
  std::vector<double> samples;
  samples.push_back(total > 0 ? process_rss_bytes() / total : std::nan(""));

  std::thread sampler([&]() {
    while (!done.load(std::memory_order_relaxed)) {
      std::this_thread::sleep_for(std::chrono::duration<double>(interval));
      if (total > 0) samples.push_back(process_rss_bytes() / total);
    }
  });

  const auto start = std::chrono::steady_clock::now();
  try {
    work();
  } catch (...) {
    done.store(true);
    sampler.join();
    throw;
  }
  const auto stop = std::chrono::steady_clock::now();
  done.store(true);
  sampler.join();
  if (total > 0) samples.push_back(process_rss_bytes() / total);

  ResourceProfile p;
  p.seconds = std::chrono::duration<double>(stop - start).count();
  if (p.seconds <= 0) p.seconds = 1e-9;
  if (total > 0 && !samples.empty()) {
    double peak = 0, sum = 0;
    for (double s : samples) {
      peak = std::max(peak, s);
      sum += s;
    }
    p.peak_mem_frac = peak;
    p.avg_mem_frac = sum / static_cast<double>(samples.size());
  }
  // power_frac stays NaN: no portable per-process power source on this
  // platform, and absence must never fail a run
  return p;
}

}  // namespace pretune
