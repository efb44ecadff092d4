#include "fdemand/calendar.hpp"

#include "fdemand/error.hpp"

#include <charconv>
#include <cstdio>
#include <ctime>
#include <iomanip>
#include <optional>
#include <sstream>

namespace fdemand {

using namespace std::chrono;

namespace {

bool parse_int(std::string_view s, int& out) {
    if (s.empty()) return false;
    auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), out);
    return ec == std::errc{} && ptr == s.data() + s.size();
}

std::optional<Date> parse_iso(std::string_view text) {
    if (text.size() != 10 || text[4] != '-' || text[7] != '-') return std::nullopt;
    int y = 0, m = 0, d = 0;
    if (!parse_int(text.substr(0, 4), y) || !parse_int(text.substr(5, 2), m) ||
        !parse_int(text.substr(8, 2), d)) {
        return std::nullopt;
    }
    Date date{year{y}, month{static_cast<unsigned>(m)}, day{static_cast<unsigned>(d)}};
    if (!date.ok()) return std::nullopt;
    return date;
}

std::optional<Date> parse_pattern(std::string_view text, std::string_view pattern) {
    std::tm tm{};
    tm.tm_mday = 0;
    std::istringstream in{std::string(text)};
    in >> std::get_time(&tm, std::string(pattern).c_str());
    if (in.fail()) return std::nullopt;
    in >> std::ws;
    if (!in.eof()) return std::nullopt;
    Date date{year{tm.tm_year + 1900}, month{static_cast<unsigned>(tm.tm_mon + 1)},
              day{static_cast<unsigned>(tm.tm_mday)}};
    if (!date.ok()) return std::nullopt;
    return date;
}

} // namespace

Date parse_date(std::string_view text, std::string_view fallback_pattern) {
    if (auto d = parse_iso(text)) return *d;
    if (!fallback_pattern.empty()) {
        if (auto d = parse_pattern(text, fallback_pattern)) return *d;
    }
    throw ContractViolation("unparseable date '" + std::string(text) + "'");
}

std::string format_date(const Date& date) {
    char buf[16];
    std::snprintf(buf, sizeof buf, "%04d-%02u-%02u", static_cast<int>(date.year()),
                  static_cast<unsigned>(date.month()), static_cast<unsigned>(date.day()));
    return buf;
}

int days_in_year(int y) {
    return year{y}.is_leap() ? 366 : 365;
}

CalendarFeatures calendar_features(const Date& date) {
    const sys_days sd{date};
    CalendarFeatures f;
    const weekday wd{sd};
    f.dow = static_cast<int>(wd.iso_encoding());
    f.moy = static_cast<int>(static_cast<unsigned>(date.month()));
    f.doy = (sd - sys_days{date.year() / January / 1}).count() + 1;

    // The ISO week belongs to the year containing its Thursday.
    const sys_days thursday = sd + days{4 - f.dow};
    const year_month_day thu{thursday};
    const int thu_doy = (thursday - sys_days{thu.year() / January / 1}).count() + 1;
    f.woy = (thu_doy - 1) / 7 + 1;
    return f;
}

Date date_from_doy(int y, int doy) {
    if (doy < 1 || doy > days_in_year(y)) {
        throw ContractViolation("day of year " + std::to_string(doy) + " out of range");
    }
    return Date{sys_days{year{y} / January / 1} + days{doy - 1}};
}

} // namespace fdemand
