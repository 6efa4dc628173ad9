#include "ipck/prompting.hpp"

#include "ipck/diagnostics.hpp"
#include "ipck/error.hpp"

#include <cctype>
#include <fstream>

namespace ipck {
namespace {

constexpr std::string_view input_slot = "{input}";
constexpr std::string_view mask_slot = "{mask}";

std::size_t count_occurrences(std::string_view text, std::string_view needle)
{
    std::size_t n = 0;
    for (auto pos = text.find(needle); pos != std::string_view::npos; pos = text.find(needle, pos + needle.size()))
        ++n;
    return n;
}

std::string neutralize(std::string_view message, std::string_view marker, std::string_view source_id)
{
    if (marker.empty() || message.find(marker) == std::string_view::npos)
        return std::string(message);
    std::string plain;
    for (char c : marker)
        if (std::isalnum(static_cast<unsigned char>(c)) || c == '_')
            plain.push_back(c);
    std::string out;
    std::size_t start = 0;
    for (auto pos = message.find(marker); pos != std::string_view::npos; pos = message.find(marker, start)) {
        out.append(message.substr(start, pos - start));
        out += plain;
        start = pos + marker.size();
    }
    out.append(message.substr(start));
    warn("message " + (source_id.empty() ? std::string("(no id)") : "'" + std::string(source_id) + "'") +
         " contains the mask marker " + std::string(marker) + "; neutralized");
    return out;
}

} // namespace

PromptTemplate validate_template(std::string_view pattern, std::string_view name)
{
    const auto masks = count_occurrences(pattern, mask_slot);
    const auto inputs = count_occurrences(pattern, input_slot);
    if (masks != 1)
        throw ConfigError("template '" + std::string(pattern) + "': " + std::to_string(masks) +
                          " mask slots (exactly 1 required)");
    if (inputs != 1)
        throw ConfigError("template '" + std::string(pattern) + "': " + std::to_string(inputs) +
                          " input slots (exactly 1 required)");
    const auto ipos = pattern.find(input_slot);
    const auto mpos = pattern.find(mask_slot);
    PromptTemplate t;
    t.name_ = std::string(name);
    t.pattern_ = std::string(pattern);
    t.input_first_ = ipos < mpos;
    const auto first = std::min(ipos, mpos);
    const auto first_len = t.input_first_ ? input_slot.size() : mask_slot.size();
    const auto second = std::max(ipos, mpos);
    const auto second_len = t.input_first_ ? mask_slot.size() : input_slot.size();
    t.head_ = std::string(pattern.substr(0, first));
    t.middle_ = std::string(pattern.substr(first + first_len, second - first - first_len));
    t.tail_ = std::string(pattern.substr(second + second_len));
    if (t.head_.empty() && t.middle_.empty() && t.tail_.empty())
        throw ConfigError("template '" + std::string(pattern) + "' has no text besides its slots");
    return t;
}

PromptTemplate default_template() { return validate_template(default_template_pattern, "default"); }

std::vector<PromptTemplate> load_templates(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in)
        throw ConfigError("cannot open template file " + path.string());
    std::vector<PromptTemplate> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r')
            line.pop_back();
        const auto first = line.find_first_not_of(" \t");
        if (first == std::string::npos || line[first] == '#')
            continue;
        out.push_back(validate_template(line, path.filename().string() + ":" + std::to_string(line_no)));
    }
    if (out.empty())
        throw ConfigError("template file " + path.string() + " contains no patterns");
    return out;
}

WrappedInput WrappedInput::with_input(std::string new_input) const
{
    WrappedInput w = *this;
    w.input = std::move(new_input);
    w.text = w.before_input + w.input + w.after_input;
    return w;
}

WrappedInput render(const PromptTemplate& tmpl, std::string_view message, std::string_view mask_marker,
                    std::string_view source_id)
{
    if (trim(message).empty())
        throw DataError("cannot render an empty message" +
                        (source_id.empty() ? std::string{} : " (id '" + std::string(source_id) + "')"));
    WrappedInput w;
    w.source_id = std::string(source_id);
    w.mask_marker = std::string(mask_marker);
    w.input = neutralize(message, mask_marker, source_id);
    if (tmpl.input_before_mask()) {
        w.before_input = tmpl.head();
        w.after_input = tmpl.middle() + std::string(mask_marker) + tmpl.tail();
    } else {
        w.before_input = tmpl.head() + std::string(mask_marker) + tmpl.middle();
        w.after_input = tmpl.tail();
    }
    w.text = w.before_input + w.input + w.after_input;
    return w;
}

} // namespace ipck
