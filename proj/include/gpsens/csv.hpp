#pragma once

#include <fstream>
#include <string>
#include <vector>

#include "gpsens/detail/util.hpp"
#include "gpsens/errors.hpp"

namespace gpsens {

/// Numeric CSV table with a mandatory header row. Lines starting with '#'
/// are comments; leading comment lines are preserved so files can carry
/// provenance (e.g. a config hash) without confusing the parser.
struct CsvTable {
    std::vector<std::string> comments;  // leading '#' lines, without newline
    std::vector<std::string> columns;
    std::vector<std::vector<std::string>> cells;  // raw tokens, row-major

    std::size_t rows() const { return cells.size(); }

    std::size_t column_index(const std::string& name) const {
        for (std::size_t i = 0; i < columns.size(); ++i)
            if (columns[i] == name) return i;
        throw SchemaError("missing column '" + name + "'");
    }

    /// Parses cell (r, c) as a double. Throws ParseError with 1-based
    /// data-row and column numbers on malformed content.
    double number(std::size_t r, std::size_t c) const {
        double v = 0.0;
        if (!detail::parse_double(cells[r][c], v))
            throw ParseError("malformed number '" + cells[r][c] + "'", r + 1, c + 1);
        return v;
    }
};

inline CsvTable read_csv(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw SchemaError("cannot open '" + path + "'");

    CsvTable table;
    std::string line;
    bool have_header = false;
    std::size_t data_row = 0;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::string stripped = detail::trim(line);
        if (stripped.empty()) continue;
        if (stripped[0] == '#') {
            if (!have_header) table.comments.push_back(stripped);
            continue;
        }
        auto tokens = detail::split(line, ',');
        for (auto& t : tokens) t = detail::trim(t);
        if (!have_header) {
            table.columns = std::move(tokens);
            have_header = true;
            continue;
        }
        ++data_row;
        if (tokens.size() != table.columns.size())
            throw ParseError("expected " + std::to_string(table.columns.size()) + " fields, got " +
                                 std::to_string(tokens.size()),
                             data_row, tokens.size());
        table.cells.push_back(std::move(tokens));
    }
    if (!have_header) throw SchemaError("'" + path + "' has no header row");
    return table;
}

/// Writes a numeric CSV. Values are rendered with the shortest decimal form
/// that round-trips, so a write/read cycle is lossless.
class CsvWriter {
public:
    explicit CsvWriter(const std::string& path) : out_(path) {
        if (!out_) throw SchemaError("cannot open '" + path + "' for writing");
    }

    void comment(const std::string& text) { out_ << "# " << text << "\n"; }

    void header(const std::vector<std::string>& columns) {
        write_row_impl(columns);
    }

    void row(const std::vector<std::string>& tokens) { write_row_impl(tokens); }

    void close() { out_.close(); }

private:
    void write_row_impl(const std::vector<std::string>& tokens) {
        for (std::size_t i = 0; i < tokens.size(); ++i) {
            if (i) out_ << ',';
            out_ << tokens[i];
        }
        out_ << '\n';
    }

    std::ofstream out_;
};

}  // namespace gpsens
