#pragma once

#include <functional>
#include <string>
#include <vector>

namespace ipck {

using WarningHandler = std::function<void(const std::string&)>;

/// Emit a non-fatal warning through the installed handler (stderr by default).
void warn(const std::string& message);

/// Install a handler and return the previous one.
WarningHandler set_warning_handler(WarningHandler handler);

/// RAII capture of warnings, used by tests and by the CLI reports.
class ScopedWarningCapture {
public:
    ScopedWarningCapture();
    ~ScopedWarningCapture();
    ScopedWarningCapture(const ScopedWarningCapture&) = delete;
    ScopedWarningCapture& operator=(const ScopedWarningCapture&) = delete;

    const std::vector<std::string>& messages() const { return messages_; }
    bool contains(const std::string& needle) const;

private:
    WarningHandler previous_;
    std::vector<std::string> messages_;
};

} // namespace ipck
