#pragma once

#include <istream>
#include <string>
#include <string_view>
#include <vector>

namespace ipck::csv {

/// One parsed record and the 1-based source line it started on.
struct Record {
    std::vector<std::string> fields;
    std::size_t line = 0;
};

/// RFC 4180 reader: quoted fields may contain the delimiter, doubled quotes and newlines.
std::vector<Record> read(std::istream& in, char delimiter = ',');

/// Quote a field when it contains the delimiter, a quote, or a line break.
std::string escape(std::string_view field, char delimiter = ',');

std::string join(const std::vector<std::string>& fields, char delimiter = ',');

} // namespace ipck::csv
