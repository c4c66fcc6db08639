#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "vssm/tensor.hpp"

namespace vssm {

enum class RouteKind { row_forward, row_backward, col_forward, col_backward };

RouteKind route_kind_from_string(const std::string& name);
const char* route_kind_name(RouteKind kind);

/// Bijective map between 2D grid positions and 1D sequence positions.
/// perm[s] is the flat row-major grid index visited at sequence step s;
/// inv is its inverse permutation.
struct ScanRoute {
    RouteKind kind;
    std::size_t height;
    std::size_t width;
    std::vector<std::size_t> perm;
    std::vector<std::size_t> inv;

    std::size_t length() const { return perm.size(); }
};

ScanRoute build_route(RouteKind kind, std::size_t height, std::size_t width);

/// Gathers grid rows in route order: [H x W x D] -> [L x D].
Tensor apply_route(const Tensor& x2d, const ScanRoute& route);

/// Exact inverse of apply_route: [L x D] -> [H x W x D].
Tensor invert_route(const Tensor& seq, const ScanRoute& route);

enum class MergeRule { mean, sum };

MergeRule merge_rule_from_string(const std::string& name);
const char* merge_rule_name(MergeRule rule);

/// Ordered set of routes over one grid plus the rule for merging per-route
/// outputs back into a single map.
struct RouteSet {
    std::vector<ScanRoute> routes;
    MergeRule merge = MergeRule::mean;
};

RouteSet build_route_set(const std::vector<RouteKind>& kinds, std::size_t height,
                         std::size_t width, MergeRule merge = MergeRule::mean);

/// Elementwise mean (default) or sum of per-route outputs, all [H x W x D].
Tensor merge_routes(const std::vector<Tensor>& outputs, MergeRule rule);

}  // namespace vssm
