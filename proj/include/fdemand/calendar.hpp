#pragma once

#include <chrono>
#include <string>
#include <string_view>

namespace fdemand {

using Date = std::chrono::year_month_day;

/// Calendar features of one day. dow uses Monday = 1; woy is the ISO-8601 week.
struct CalendarFeatures {
    int dow = 0;
    int woy = 0;
    int doy = 0;
    int moy = 0;
    friend bool operator==(const CalendarFeatures&, const CalendarFeatures&) = default;
};

/// Parses YYYY-MM-DD; when that fails and `fallback_pattern` is non-empty, tries the
/// pattern (std::get_time syntax, e.g. "%m/%d/%Y"). Throws ContractViolation.
Date parse_date(std::string_view text, std::string_view fallback_pattern = {});

std::string format_date(const Date& date);

CalendarFeatures calendar_features(const Date& date);

/// Day of year (1-based) to date.
Date date_from_doy(int year, int doy);

int days_in_year(int year);

} // namespace fdemand
