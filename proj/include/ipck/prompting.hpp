#pragma once

#include "ipck/corpus.hpp"

#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace ipck {

inline constexpr std::string_view default_template_pattern = "{input} This commit is {mask}.";

/// A pattern with exactly one `{input}` slot and one `{mask}` slot.
class PromptTemplate {
public:
    const std::string& name() const { return name_; }
    const std::string& pattern() const { return pattern_; }
    bool input_before_mask() const { return input_first_; }

    /// Literal text before the first slot, between the slots, after the last slot.
    const std::string& head() const { return head_; }
    const std::string& middle() const { return middle_; }
    const std::string& tail() const { return tail_; }

private:
    friend PromptTemplate validate_template(std::string_view pattern, std::string_view name);
    std::string name_;
    std::string pattern_;
    std::string head_, middle_, tail_;
    bool input_first_ = true;
};

/// Parse and check a pattern. Throws ConfigError on zero or several slots of either kind.
PromptTemplate validate_template(std::string_view pattern, std::string_view name = "default");

PromptTemplate default_template();

/// One pattern per line; blank lines and `#` comments are skipped.
std::vector<PromptTemplate> load_templates(const std::filesystem::path& path);

/// A rendered prompt. The input-slot content is kept separately so the
/// backend can shorten it without touching the template text.
struct WrappedInput {
    std::string text;
    std::string source_id;
    std::string mask_marker;
    std::string before_input; ///< rendered text preceding the input slot
    std::string input;        ///< input-slot content
    std::string after_input;  ///< rendered text following the input slot

    /// The same prompt with the input slot replaced.
    WrappedInput with_input(std::string new_input) const;
};

/// Fill the template. A message that already contains the mask marker has
/// each occurrence neutralized (marker punctuation removed) with a warning.
WrappedInput render(const PromptTemplate& tmpl, std::string_view message, std::string_view mask_marker,
                    std::string_view source_id = {});

inline WrappedInput render(const PromptTemplate& tmpl, const CommitExample& x, std::string_view mask_marker)
{
    return render(tmpl, x.message, mask_marker, x.id);
}

} // namespace ipck
