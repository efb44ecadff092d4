#include "fdemand/geo.hpp"

#include "fdemand/error.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <string>

namespace fdemand {

namespace {
constexpr double kDegToRad = std::numbers::pi / 180.0;
}

bool GeoPoint::valid() const noexcept {
    return std::isfinite(lat) && std::isfinite(lon) && lat >= -90.0 && lat <= 90.0 &&
           lon >= -180.0 && lon <= 180.0;
}

GeoPoint make_geo_point(double lat, double lon) {
    GeoPoint p{lat, lon};
    if (!p.valid()) {
        throw ContractViolation("coordinate out of bounds (lat " + std::to_string(lat) +
                                ", lon " + std::to_string(lon) + ")");
    }
    return p;
}

double haversine_miles(const GeoPoint& a, const GeoPoint& b) noexcept {
    if (a == b) return 0.0;
    const double phi1 = a.lat * kDegToRad;
    const double phi2 = b.lat * kDegToRad;
    const double sin_dphi = std::sin((phi2 - phi1) / 2.0);
    const double sin_dlambda = std::sin((b.lon - a.lon) * kDegToRad / 2.0);
    double h = sin_dphi * sin_dphi + std::cos(phi1) * std::cos(phi2) * sin_dlambda * sin_dlambda;
    h = std::clamp(h, 0.0, 1.0);
    return 2.0 * kEarthRadiusMiles * std::asin(std::sqrt(h));
}

GeoPoint destination_point(const GeoPoint& origin, double bearing_rad, double distance_miles) noexcept {
    const double delta = distance_miles / kEarthRadiusMiles;
    const double phi1 = origin.lat * kDegToRad;
    const double lambda1 = origin.lon * kDegToRad;
    const double sin_phi2 = std::sin(phi1) * std::cos(delta) +
                            std::cos(phi1) * std::sin(delta) * std::cos(bearing_rad);
    const double phi2 = std::asin(std::clamp(sin_phi2, -1.0, 1.0));
    const double lambda2 =
        lambda1 + std::atan2(std::sin(bearing_rad) * std::sin(delta) * std::cos(phi1),
                             std::cos(delta) - std::sin(phi1) * sin_phi2);
    double lon = std::remainder(lambda2 / kDegToRad, 360.0);
    return GeoPoint{phi2 / kDegToRad, lon};
}

} // namespace fdemand
