#pragma once

namespace fdemand {

/// Mean Earth radius in statute miles.
inline constexpr double kEarthRadiusMiles = 3958.7613;

/// Latitude/longitude in degrees. Values are kept exactly as parsed.
struct GeoPoint {
    double lat = 0.0;
    double lon = 0.0;

    bool valid() const noexcept;
    friend bool operator==(const GeoPoint&, const GeoPoint&) = default;
};

/// Returns the point after checking lat in [-90, 90] and lon in [-180, 180];
/// throws ContractViolation otherwise.
GeoPoint make_geo_point(double lat, double lon);

/// Great-circle distance in statute miles (haversine form).
double haversine_miles(const GeoPoint& a, const GeoPoint& b) noexcept;

/// Point reached by travelling `distance_miles` from `origin` along the initial
/// bearing (radians, clockwise from north).
GeoPoint destination_point(const GeoPoint& origin, double bearing_rad, double distance_miles) noexcept;

} // namespace fdemand
