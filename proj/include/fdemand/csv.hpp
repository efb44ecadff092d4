#pragma once

#include <cstddef>
#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

namespace fdemand::csv {

using Row = std::vector<std::string>;

/// Splits one CSV line (RFC 4180 quoting, no embedded newlines).
Row split_line(std::string_view line);

/// A parsed CSV file: header plus data rows with their 1-based file line numbers.
struct Table {
    Row header;
    std::vector<Row> rows;
    std::vector<std::size_t> line_numbers;

    /// Column index by name, or nullopt.
    std::optional<std::size_t> find(std::string_view name) const;
    /// Column index by name; throws ContractViolation when absent.
    std::size_t require(std::string_view name) const;
};

/// Reads a UTF-8 CSV with a header row. Blank lines are skipped. Throws IoError.
Table read(const std::filesystem::path& path);
Table parse(std::string_view text);

std::string quote(std::string_view field);

/// Shortest round-trip decimal representation (deterministic).
std::string format_double(double value);
/// Fixed-point representation with the given number of decimals.
std::string format_fixed(double value, int decimals);

class Writer {
public:
    explicit Writer(std::ostream& out) : out_(out) {}

    Writer& field(std::string_view text);
    Writer& field(double value);
    Writer& field(long long value);
    Writer& field(int value) { return field(static_cast<long long>(value)); }
    Writer& field(std::size_t value) { return field(static_cast<long long>(value)); }
    Writer& empty_field();
    void end_row();
    void row(const Row& fields);

private:
    void separator();
    std::ostream& out_;
    bool row_started_ = false;
};

/// Writes text to a file atomically enough for our purposes (truncate + write). Throws IoError.
void write_file(const std::filesystem::path& path, std::string_view content);
std::string read_file(const std::filesystem::path& path);

} // namespace fdemand::csv
