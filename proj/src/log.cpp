#include "halludet/log.hpp"

#include <iostream>
#include <mutex>

namespace halludet::log {

namespace {
std::mutex g_mu;
Sink g_sink = [](const std::string& m) { std::cerr << "warning: " << m << '\n'; };
}  // namespace

Sink set_warning_sink(Sink sink) {
  std::lock_guard lock(g_mu);
  auto prev = std::move(g_sink);
  g_sink = std::move(sink);
  return prev;
}

void warn(const std::string& message) {
  std::lock_guard lock(g_mu);
  if (g_sink) g_sink(message);
}

}  // namespace halludet::log
