#pragma once

#include <functional>
#include <iostream>
#include <mutex>
#include <string>

namespace greybox {

using WarningHandler = std::function<void(const std::string&)>;

namespace detail {

inline std::mutex& warning_mutex() {
    static std::mutex m;
    return m;
}

inline WarningHandler& warning_handler() {
    static WarningHandler h = [](const std::string& msg) { std::cerr << "greybox warning: " << msg << '\n'; };
    return h;
}

}  // namespace detail

/// Replaces the warning sink (default: standard error). Pass an empty
/// function to silence warnings.
inline void set_warning_handler(WarningHandler handler) {
    std::lock_guard<std::mutex> lock(detail::warning_mutex());
    detail::warning_handler() = std::move(handler);
}

inline void warn(const std::string& message) {
    std::lock_guard<std::mutex> lock(detail::warning_mutex());
    if (detail::warning_handler()) detail::warning_handler()(message);
}

}  // namespace greybox
