#pragma once

#include <array>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

#include "ceperfed/errors.hpp"

namespace ceperfed {

enum class LayerKind : unsigned char { Conv, Dense };

/// Compression tier a layer belongs to. Conv layers carry Part1..Part3,
/// dense layers carry Head.
enum class Part : unsigned char { Part1, Part2, Part3, Head };

inline const char* part_name(Part p) {
    switch (p) {
        case Part::Part1: return "part1";
        case Part::Part2: return "part2";
        case Part::Part3: return "part3";
        case Part::Head: return "head";
    }
    return "?";
}

/// Static description of one layer's weight tensor.
/// Conv shape is (c_out, c_in, k_h, k_w); dense shape is (out, in, 0, 0).
struct LayerSpec {
    std::string name;
    LayerKind kind = LayerKind::Conv;
    std::array<std::size_t, 4> shape{};
    Part part = Part::Part1;

    std::size_t size() const {
        if (kind == LayerKind::Dense) return shape[0] * shape[1];
        return shape[0] * shape[1] * shape[2] * shape[3];
    }

    /// Column count of the 2-D view used by the codec: a = c_in * k_h * k_w
    /// for conv, `in` for dense.
    std::size_t flat_cols() const {
        if (kind == LayerKind::Dense) return shape[1];
        return shape[1] * shape[2] * shape[3];
    }

    std::size_t rows() const { return shape[0]; }

    bool operator==(const LayerSpec& rhs) const = default;
};

/// Ordered collection of named layer tensors. Holds model parameters and
/// gradients alike; all arithmetic requires structural compatibility.
struct ParameterSet {
    std::vector<LayerSpec> specs;
    std::vector<std::vector<double>> values;

    std::size_t layer_count() const { return specs.size(); }

    std::size_t scalar_count() const {
        std::size_t n = 0;
        for (const auto& s : specs) n += s.size();
        return n;
    }

    bool compatible_with(const ParameterSet& rhs) const { return specs == rhs.specs; }
};

inline void require_compatible(const ParameterSet& a, const ParameterSet& b, const char* op) {
    if (!a.compatible_with(b))
        throw StructuralError(std::string(op) + ": parameter sets are structurally incompatible");
}

inline ParameterSet zeros_like(const ParameterSet& ref) {
    ParameterSet out;
    out.specs = ref.specs;
    out.values.reserve(ref.values.size());
    for (const auto& v : ref.values) out.values.emplace_back(v.size(), 0.0);
    return out;
}

/// dst += scale * src
inline void add_scaled_in_place(ParameterSet& dst, const ParameterSet& src, double scale) {
    require_compatible(dst, src, "add_scaled");
    for (std::size_t l = 0; l < dst.values.size(); ++l) {
        double* d = dst.values[l].data();
        const double* s = src.values[l].data();
        const std::size_t n = dst.values[l].size();
        for (std::size_t i = 0; i < n; ++i) d[i] += scale * s[i];
    }
}

inline ParameterSet add(const ParameterSet& a, const ParameterSet& b) {
    ParameterSet out = a;
    add_scaled_in_place(out, b, 1.0);
    return out;
}

inline ParameterSet subtract(const ParameterSet& a, const ParameterSet& b) {
    ParameterSet out = a;
    add_scaled_in_place(out, b, -1.0);
    return out;
}

inline void scale_in_place(ParameterSet& a, double s) {
    for (auto& layer : a.values)
        for (double& x : layer) x *= s;
}

inline ParameterSet scaled(const ParameterSet& a, double s) {
    ParameterSet out = a;
    scale_in_place(out, s);
    return out;
}

/// Sum over all layers of elementwise products (head included).
inline double dot(const ParameterSet& a, const ParameterSet& b) {
    require_compatible(a, b, "dot");
    double acc = 0.0;
    for (std::size_t l = 0; l < a.values.size(); ++l) {
        const double* x = a.values[l].data();
        const double* y = b.values[l].data();
        const std::size_t n = a.values[l].size();
        for (std::size_t i = 0; i < n; ++i) acc += x[i] * y[i];
    }
    return acc;
}

inline double squared_norm(const ParameterSet& a) { return dot(a, a); }

inline bool all_finite(const ParameterSet& a) {
    for (const auto& layer : a.values)
        for (double x : layer)
            if (!std::isfinite(x)) return false;
    return true;
}

inline void require_finite(const ParameterSet& a, const char* context) {
    for (std::size_t l = 0; l < a.values.size(); ++l)
        for (double x : a.values[l])
            if (!std::isfinite(x))
                throw NumericError(std::string(context) + ": non-finite value in layer '" +
                                   a.specs[l].name + "'");
}

}  // namespace ceperfed
