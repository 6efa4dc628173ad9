#include "ipck/diagnostics.hpp"

#include <iostream>
#include <mutex>
#include <vector>

namespace ipck {
namespace {

std::mutex& handler_mutex()
{
    static std::mutex m;
    return m;
}

WarningHandler& handler()
{
    static WarningHandler h = [](const std::string& msg) { std::cerr << "warning: " << msg << '\n'; };
    return h;
}

} // namespace

void warn(const std::string& message)
{
    std::lock_guard lock(handler_mutex());
    if (handler())
        handler()(message);
}

WarningHandler set_warning_handler(WarningHandler h)
{
    std::lock_guard lock(handler_mutex());
    std::swap(handler(), h);
    return h;
}

ScopedWarningCapture::ScopedWarningCapture()
{
    previous_ = set_warning_handler([this](const std::string& msg) { messages_.push_back(msg); });
}

ScopedWarningCapture::~ScopedWarningCapture() { set_warning_handler(std::move(previous_)); }

bool ScopedWarningCapture::contains(const std::string& needle) const
{
    for (const auto& m : messages_)
        if (m.find(needle) != std::string::npos)
            return true;
    return false;
}

} // namespace ipck
