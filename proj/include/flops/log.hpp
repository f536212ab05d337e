// Copyright 2026 The FLoPS Authors
// SPDX-License-Identifier: Apache-2.0

#ifndef FLOPS_LOG_HPP
#define FLOPS_LOG_HPP

#include <atomic>
#include <iostream>
#include <mutex>
#include <string>

namespace flops::log {

inline std::atomic<bool>& quiet() {
  static std::atomic<bool> flag{false};
  return flag;
}

inline void warn(const std::string& msg) {
  static std::mutex mu;
  if (quiet()) return;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[flops] warning: " << msg << '\n';
}

inline void info(const std::string& msg) {
  static std::mutex mu;
  if (quiet()) return;
  std::lock_guard<std::mutex> lock(mu);
  std::cerr << "[flops] " << msg << '\n';
}

}  // namespace flops::log

#endif  // FLOPS_LOG_HPP
