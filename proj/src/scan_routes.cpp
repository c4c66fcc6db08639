#include "vssm/scan_routes.hpp"

#include <algorithm>

namespace vssm {

RouteKind route_kind_from_string(const std::string& name) {
    if (name == "row_forward") return RouteKind::row_forward;
    if (name == "row_backward") return RouteKind::row_backward;
    if (name == "col_forward") return RouteKind::col_forward;
    if (name == "col_backward") return RouteKind::col_backward;
    throw ConfigError("unknown route kind: " + name);
}

const char* route_kind_name(RouteKind kind) {
    switch (kind) {
        case RouteKind::row_forward: return "row_forward";
        case RouteKind::row_backward: return "row_backward";
        case RouteKind::col_forward: return "col_forward";
        case RouteKind::col_backward: return "col_backward";
    }
    return "?";
}

ScanRoute build_route(RouteKind kind, std::size_t height, std::size_t width) {
    if (height == 0 || width == 0) {
        throw ShapeError("build_route: grid extents must be positive");
    }
    const std::size_t l = height * width;
    ScanRoute route{kind, height, width, {}, {}};
    route.perm.reserve(l);
    switch (kind) {
        case RouteKind::row_forward:
            for (std::size_t i = 0; i < l; ++i) route.perm.push_back(i);
            break;
        case RouteKind::row_backward:
            for (std::size_t i = 0; i < l; ++i) route.perm.push_back(l - 1 - i);
            break;
        case RouteKind::col_forward:
            for (std::size_t c = 0; c < width; ++c)
                for (std::size_t r = 0; r < height; ++r) route.perm.push_back(r * width + c);
            break;
        case RouteKind::col_backward:
            for (std::size_t c = width; c-- > 0;)
                for (std::size_t r = height; r-- > 0;) route.perm.push_back(r * width + c);
            break;
    }
    route.inv.assign(l, 0);
    for (std::size_t s = 0; s < l; ++s) route.inv[route.perm[s]] = s;
    return route;
}

Tensor apply_route(const Tensor& x2d, const ScanRoute& route) {
    if (x2d.rank() != 3 || x2d.extent(0) != route.height || x2d.extent(1) != route.width) {
        throw ShapeError("apply_route: input " + x2d.shape_str() + " does not match route grid " +
                         std::to_string(route.height) + "x" + std::to_string(route.width));
    }
    const std::size_t l = route.length(), d = x2d.extent(2);
    Tensor seq({l, d});
    for (std::size_t s = 0; s < l; ++s) {
        const double* src = x2d.data() + route.perm[s] * d;
        std::copy(src, src + d, seq.data() + s * d);
    }
    return seq;
}

Tensor invert_route(const Tensor& seq, const ScanRoute& route) {
    if (seq.rank() != 2 || seq.extent(0) != route.length()) {
        throw ShapeError("invert_route: sequence " + seq.shape_str() + " does not match route of length " +
                         std::to_string(route.length()));
    }
    const std::size_t d = seq.extent(1);
    Tensor x2d({route.height, route.width, d});
    for (std::size_t g = 0; g < route.length(); ++g) {
        const double* src = seq.data() + route.inv[g] * d;
        std::copy(src, src + d, x2d.data() + g * d);
    }
    return x2d;
}

MergeRule merge_rule_from_string(const std::string& name) {
    if (name == "mean") return MergeRule::mean;
    if (name == "sum") return MergeRule::sum;
    throw ConfigError("unknown merge rule: " + name);
}

const char* merge_rule_name(MergeRule rule) {
    return rule == MergeRule::mean ? "mean" : "sum";
}

RouteSet build_route_set(const std::vector<RouteKind>& kinds, std::size_t height,
                         std::size_t width, MergeRule merge) {
    if (kinds.empty()) throw ConfigError("route set must contain at least one route");
    RouteSet set;
    set.merge = merge;
    for (RouteKind k : kinds) set.routes.push_back(build_route(k, height, width));
    return set;
}

Tensor merge_routes(const std::vector<Tensor>& outputs, MergeRule rule) {
    if (outputs.empty()) throw ShapeError("merge_routes: empty output list");
    Tensor acc = outputs.front();
    for (std::size_t i = 1; i < outputs.size(); ++i) {
        ensure_same_shape(acc, outputs[i], "merge_routes");
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] += outputs[i][j];
    }
    if (rule == MergeRule::mean) {
        const double inv = 1.0 / static_cast<double>(outputs.size());
        for (std::size_t j = 0; j < acc.size(); ++j) acc[j] *= inv;
    }
    ensure_finite(acc, "merge_routes");
    return acc;
}

}  // namespace vssm
