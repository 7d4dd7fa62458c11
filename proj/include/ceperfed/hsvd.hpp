#pragma once

#include <Eigen/Dense>
#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <numeric>
#include <string>
#include <variant>
#include <vector>

#include "ceperfed/errors.hpp"
#include "ceperfed/tensor.hpp"

namespace ceperfed {

/// Codec knobs. Defaults follow the reference setup: 90% energy threshold,
/// top-10% residual mask, 64-channel groups at fixed rank 16.
struct EnergyConfig {
    double eta = 0.9;
    double gamma = 1.0;
    double residual_fraction = 0.10;
    std::size_t group_channels = 64;
    std::size_t group_rank = 16;
};

enum class CodecMode : unsigned char {
    Hierarchical,  // per-part strategies (the full scheme)
    FixedRank,     // one truncated SVD per conv layer at a fixed rank
    Dense,         // no compression
};

struct CodecConfig {
    EnergyConfig energy;
    CodecMode mode = CodecMode::Hierarchical;
    std::size_t fixed_rank = 16;  // used by CodecMode::FixedRank

    static CodecConfig lossless() {
        CodecConfig c;
        c.energy.eta = 1.0;
        c.energy.gamma = 0.0;
        return c;
    }
};

using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

/// Truncated factors of one matrix: u_prime = U_r * diag(sigma_r) (rows x r),
/// v_t = V_r^T (r x cols). Their product approximates the source matrix.
struct LowRankFactors {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::size_t rank = 0;
    std::vector<double> u_prime;  // rows x rank, row-major
    std::vector<double> v_t;      // rank x cols, row-major

    std::size_t scalar_count() const { return rank * (rows + cols); }
};

struct SparseEntry {
    std::uint32_t row = 0;
    std::uint32_t col = 0;
    double value = 0.0;  // already scaled by gamma
};

/// Compensation term for the first part: the top fraction of the truncation
/// residual by magnitude, scaled by gamma.
struct SparseResidual {
    std::vector<SparseEntry> entries;
    double gamma = 1.0;
};

struct ResidualCompensatedLayer {
    LowRankFactors factors;
    SparseResidual residual;
};

struct FactorsLayer {
    LowRankFactors factors;
};

struct GroupedLayer {
    std::vector<LowRankFactors> groups;  // one per output-channel group, in channel order
};

struct DenseLayerPayload {
    std::vector<double> values;
};

/// One layer of a compressed update. The payload variant records how the
/// layer actually travelled; shape/kind/part echo the source LayerSpec.
struct CompressedLayer {
    LayerKind kind = LayerKind::Conv;
    Part part = Part::Part1;
    std::array<std::size_t, 4> shape{};
    std::variant<ResidualCompensatedLayer, FactorsLayer, GroupedLayer, DenseLayerPayload> payload;

    std::size_t original_scalars() const {
        if (kind == LayerKind::Dense) return shape[0] * shape[1];
        return shape[0] * shape[1] * shape[2] * shape[3];
    }
};

enum class UpdateKind : unsigned char { Gradient, Parameters };

/// The only thing that crosses the simulated wire (besides scalars):
/// per-layer low-rank factors, optional sparse residual, dense head.
struct CompressedUpdate {
    UpdateKind kind = UpdateKind::Gradient;
    std::vector<CompressedLayer> layers;
};

// ---------------------------------------------------------------------------
// Reshaping

/// Conv tensor (c_o, c_i, k_h, k_w) viewed as a c_o x (c_i*k_h*k_w) matrix.
/// Row-major flattening of the trailing three axes; the inverse is exact.
inline RowMatrix reshape_2d(const LayerSpec& spec, const std::vector<double>& values) {
    if (spec.kind != LayerKind::Conv)
        throw StructuralError("reshape_2d: layer '" + spec.name + "' is not convolutional");
    if (values.size() != spec.size())
        throw StructuralError("reshape_2d: value count does not match spec shape");
    return Eigen::Map<const RowMatrix>(values.data(), static_cast<Eigen::Index>(spec.rows()),
                                       static_cast<Eigen::Index>(spec.flat_cols()));
}

inline std::vector<double> unreshape_4d(const RowMatrix& m) {
    return std::vector<double>(m.data(), m.data() + m.size());
}

// ---------------------------------------------------------------------------
// Rank selection and factorization

/// Smallest k whose leading singular values retain at least `eta` of the
/// total energy (sum of squared singular values).
inline std::size_t select_rank(const std::vector<double>& singular_values, double eta) {
    if (singular_values.empty()) throw StructuralError("select_rank: empty spectrum");
    if (!(eta > 0.0 && eta <= 1.0)) throw ConfigError("select_rank: eta must be in (0, 1]");
    double total = 0.0;
    for (std::size_t i = 0; i < singular_values.size(); ++i) {
        const double s = singular_values[i];
        if (s < 0.0 || !std::isfinite(s))
            throw StructuralError("select_rank: singular values must be finite and nonnegative");
        if (i > 0 && s > singular_values[i - 1])
            throw StructuralError("select_rank: singular values must be sorted descending");
        total += s * s;
    }
    if (total == 0.0)
        throw DegenerateInputError("select_rank: all-zero spectrum has no meaningful rank");
    double cumulative = 0.0;
    for (std::size_t k = 0; k < singular_values.size(); ++k) {
        cumulative += singular_values[k] * singular_values[k];
        if (cumulative / total >= eta) return k + 1;
    }
    return singular_values.size();
}

namespace detail {

struct SvdParts {
    Eigen::MatrixXd u;
    Eigen::VectorXd sigma;
    Eigen::MatrixXd v;
};

inline SvdParts thin_svd(const RowMatrix& m) {
    if (!m.allFinite()) throw NumericError("svd: non-finite matrix entry");
    Eigen::BDCSVD<Eigen::MatrixXd> svd(m, Eigen::ComputeThinU | Eigen::ComputeThinV);
    return {svd.matrixU(), svd.singularValues(), svd.matrixV()};
}

inline LowRankFactors take_rank(const SvdParts& svd, std::size_t rows, std::size_t cols,
                                std::size_t rank) {
    LowRankFactors f;
    f.rows = rows;
    f.cols = cols;
    f.rank = rank;
    const auto r = static_cast<Eigen::Index>(rank);
    RowMatrix u_prime = svd.u.leftCols(r) * svd.sigma.head(r).asDiagonal();
    RowMatrix v_t = svd.v.leftCols(r).transpose();
    f.u_prime.assign(u_prime.data(), u_prime.data() + u_prime.size());
    f.v_t.assign(v_t.data(), v_t.data() + v_t.size());
    return f;
}

inline LowRankFactors zero_factors(std::size_t rows, std::size_t cols) {
    LowRankFactors f;
    f.rows = rows;
    f.cols = cols;
    f.rank = 1;
    f.u_prime.assign(rows, 0.0);
    f.v_t.assign(cols, 0.0);
    return f;
}

/// ceil(fraction * count) with a guard against float noise pushing an exact
/// multiple over the next integer.
inline std::size_t residual_entry_count(double fraction, std::size_t count) {
    if (fraction <= 0.0) return 0;
    const double raw = fraction * static_cast<double>(count);
    return static_cast<std::size_t>(std::ceil(raw - 1e-9));
}

}  // namespace detail

/// Full-rank factorization plus the singular spectrum; callers truncate via
/// select_rank.
inline std::pair<LowRankFactors, std::vector<double>> truncated_svd(const RowMatrix& m) {
    const auto parts = detail::thin_svd(m);
    const std::size_t full = static_cast<std::size_t>(parts.sigma.size());
    LowRankFactors f = detail::take_rank(parts, static_cast<std::size_t>(m.rows()),
                                         static_cast<std::size_t>(m.cols()), full);
    return {std::move(f), std::vector<double>(parts.sigma.data(), parts.sigma.data() + full)};
}

inline RowMatrix reconstruct(const LowRankFactors& f) {
    Eigen::Map<const RowMatrix> u(f.u_prime.data(), static_cast<Eigen::Index>(f.rows),
                                  static_cast<Eigen::Index>(f.rank));
    Eigen::Map<const RowMatrix> v(f.v_t.data(), static_cast<Eigen::Index>(f.rank),
                                  static_cast<Eigen::Index>(f.cols));
    return u * v;
}

// ---------------------------------------------------------------------------
// Per-part strategies

/// Energy-rank truncation plus a sparse residual of the top `residual_fraction`
/// entries of |A - U'V^T|, scaled by gamma. Ties break by row-major order.
inline ResidualCompensatedLayer compress_part1(const RowMatrix& m, const EnergyConfig& cfg) {
    const std::size_t rows = static_cast<std::size_t>(m.rows());
    const std::size_t cols = static_cast<std::size_t>(m.cols());
    if (m.isZero(0.0)) return {detail::zero_factors(rows, cols), SparseResidual{{}, cfg.gamma}};

    const auto parts = detail::thin_svd(m);
    std::vector<double> sigma(parts.sigma.data(), parts.sigma.data() + parts.sigma.size());
    const std::size_t r = select_rank(sigma, cfg.eta);
    LowRankFactors factors = detail::take_rank(parts, rows, cols, r);

    RowMatrix residual = m - reconstruct(factors);
    const std::size_t want = detail::residual_entry_count(cfg.residual_fraction, rows * cols);
    std::vector<std::size_t> order(rows * cols);
    std::iota(order.begin(), order.end(), 0);
    const double* res = residual.data();  // row-major: index = row * cols + col
    const std::size_t keep = std::min(want, order.size());
    std::partial_sort(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep),
                      order.end(), [res](std::size_t a, std::size_t b) {
                          const double fa = std::abs(res[a]), fb = std::abs(res[b]);
                          if (fa != fb) return fa > fb;
                          return a < b;
                      });
    order.resize(keep);
    std::sort(order.begin(), order.end());  // canonical coordinate order on the wire

    SparseResidual sparse;
    sparse.gamma = cfg.gamma;
    sparse.entries.reserve(keep);
    for (std::size_t idx : order)
        sparse.entries.push_back({static_cast<std::uint32_t>(idx / cols),
                                  static_cast<std::uint32_t>(idx % cols),
                                  cfg.gamma * res[idx]});
    return {std::move(factors), std::move(sparse)};
}

/// Energy-rank truncation without compensation.
inline FactorsLayer compress_part2(const RowMatrix& m, const EnergyConfig& cfg) {
    const std::size_t rows = static_cast<std::size_t>(m.rows());
    const std::size_t cols = static_cast<std::size_t>(m.cols());
    if (m.isZero(0.0)) return {detail::zero_factors(rows, cols)};
    const auto parts = detail::thin_svd(m);
    std::vector<double> sigma(parts.sigma.data(), parts.sigma.data() + parts.sigma.size());
    const std::size_t r = select_rank(sigma, cfg.eta);
    return {detail::take_rank(parts, rows, cols, r)};
}

/// Output channels split into groups of `group_channels`, each decomposed
/// independently at the fixed group rank (clamped to the group's dimensions).
inline GroupedLayer compress_part3(const LayerSpec& spec, const std::vector<double>& values,
                                   const EnergyConfig& cfg) {
    if (spec.kind != LayerKind::Conv)
        throw StructuralError("compress_part3: layer '" + spec.name + "' is not convolutional");
    const std::size_t c_out = spec.rows();
    const std::size_t a = spec.flat_cols();
    if (cfg.group_channels == 0 || c_out % cfg.group_channels != 0)
        throw ConfigError("compress_part3: c_out " + std::to_string(c_out) +
                          " not divisible by group size " + std::to_string(cfg.group_channels));
    const std::size_t c = cfg.group_channels;
    const std::size_t group_count = c_out / c;
    const std::size_t r = std::max<std::size_t>(1, std::min({cfg.group_rank, c, a}));

    GroupedLayer out;
    out.groups.reserve(group_count);
    for (std::size_t g = 0; g < group_count; ++g) {
        Eigen::Map<const RowMatrix> slice(values.data() + g * c * a, static_cast<Eigen::Index>(c),
                                          static_cast<Eigen::Index>(a));
        const auto parts = detail::thin_svd(slice);
        out.groups.push_back(detail::take_rank(parts, c, a, r));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Whole-update codec

/// Scalars this layer puts on the wire: factor entries, 3 per sparse residual
/// entry (row, col, value), raw values for dense layers.
inline std::size_t transmitted_scalars(const CompressedLayer& layer) {
    struct Counter {
        std::size_t operator()(const ResidualCompensatedLayer& p) const {
            return p.factors.scalar_count() + 3 * p.residual.entries.size();
        }
        std::size_t operator()(const FactorsLayer& p) const { return p.factors.scalar_count(); }
        std::size_t operator()(const GroupedLayer& p) const {
            std::size_t n = 0;
            for (const auto& g : p.groups) n += g.scalar_count();
            return n;
        }
        std::size_t operator()(const DenseLayerPayload& p) const { return p.values.size(); }
    };
    return std::visit(Counter{}, layer.payload);
}

/// Compress one parameter set. Layers whose factorized form would not beat
/// the dense encoding fall back to dense, so a compressed layer never
/// transmits more scalars than the raw tensor.
inline CompressedUpdate compress_update(const ParameterSet& params, const CodecConfig& cfg,
                                        UpdateKind kind) {
    CompressedUpdate update;
    update.kind = kind;
    update.layers.reserve(params.specs.size());
    for (std::size_t l = 0; l < params.specs.size(); ++l) {
        const LayerSpec& spec = params.specs[l];
        const std::vector<double>& values = params.values[l];
        CompressedLayer layer;
        layer.kind = spec.kind;
        layer.part = spec.part;
        layer.shape = spec.shape;

        if (spec.kind == LayerKind::Dense || cfg.mode == CodecMode::Dense) {
            layer.payload = DenseLayerPayload{values};
            update.layers.push_back(std::move(layer));
            continue;
        }

        if (cfg.mode == CodecMode::FixedRank) {
            const RowMatrix m = reshape_2d(spec, values);
            const std::size_t full = std::min(spec.rows(), spec.flat_cols());
            const std::size_t r = std::max<std::size_t>(1, std::min(cfg.fixed_rank, full));
            const auto parts = detail::thin_svd(m);
            layer.payload = FactorsLayer{detail::take_rank(parts, spec.rows(), spec.flat_cols(), r)};
        } else {
            switch (spec.part) {
                case Part::Part1:
                    layer.payload = compress_part1(reshape_2d(spec, values), cfg.energy);
                    break;
                case Part::Part2:
                    layer.payload = compress_part2(reshape_2d(spec, values), cfg.energy);
                    break;
                case Part::Part3:
                    layer.payload = compress_part3(spec, values, cfg.energy);
                    break;
                case Part::Head:
                    layer.payload = DenseLayerPayload{values};
                    break;
            }
        }

        if (transmitted_scalars(layer) >= spec.size()) layer.payload = DenseLayerPayload{values};
        update.layers.push_back(std::move(layer));
    }
    return update;
}

namespace detail {

inline void require_layer_match(const CompressedLayer& layer, const LayerSpec& spec) {
    if (layer.kind != spec.kind || layer.shape != spec.shape)
        throw StructuralError("decompress: layer '" + spec.name +
                              "' does not match the compressed record");
}

}  // namespace detail

/// Reassemble a parameter set from a compressed update: U'V^T products, plus
/// the sparse residual for compensated layers, channel-concatenation for
/// grouped layers, verbatim copies for dense payloads.
inline ParameterSet decompress(const CompressedUpdate& update,
                               const std::vector<LayerSpec>& specs) {
    if (update.layers.size() != specs.size())
        throw StructuralError("decompress: layer count mismatch");
    ParameterSet out;
    out.specs = specs;
    out.values.reserve(specs.size());
    for (std::size_t l = 0; l < specs.size(); ++l) {
        const LayerSpec& spec = specs[l];
        const CompressedLayer& layer = update.layers[l];
        detail::require_layer_match(layer, spec);
        const std::size_t rows = spec.rows();
        const std::size_t cols = spec.flat_cols();

        if (const auto* dense = std::get_if<DenseLayerPayload>(&layer.payload)) {
            if (dense->values.size() != spec.size())
                throw StructuralError("decompress: dense payload size mismatch in '" + spec.name +
                                      "'");
            out.values.push_back(dense->values);
            continue;
        }
        if (spec.kind != LayerKind::Conv)
            throw StructuralError("decompress: dense layer '" + spec.name +
                                  "' carries a factorized payload");

        if (const auto* grouped = std::get_if<GroupedLayer>(&layer.payload)) {
            if (grouped->groups.empty() || rows % grouped->groups.size() != 0)
                throw StructuralError("decompress: bad group count in '" + spec.name + "'");
            const std::size_t c = rows / grouped->groups.size();
            std::vector<double> flat(spec.size());
            for (std::size_t g = 0; g < grouped->groups.size(); ++g) {
                const LowRankFactors& f = grouped->groups[g];
                if (f.rows != c || f.cols != cols)
                    throw StructuralError("decompress: group shape mismatch in '" + spec.name +
                                          "'");
                const RowMatrix block = reconstruct(f);
                std::copy(block.data(), block.data() + block.size(),
                          flat.begin() + static_cast<std::ptrdiff_t>(g * c * cols));
            }
            out.values.push_back(std::move(flat));
            continue;
        }

        const LowRankFactors* factors = nullptr;
        const SparseResidual* residual = nullptr;
        if (const auto* comp = std::get_if<ResidualCompensatedLayer>(&layer.payload)) {
            factors = &comp->factors;
            residual = &comp->residual;
        } else {
            factors = &std::get<FactorsLayer>(layer.payload).factors;
        }
        if (factors->rows != rows || factors->cols != cols)
            throw StructuralError("decompress: factor shape mismatch in '" + spec.name + "'");
        RowMatrix m = reconstruct(*factors);
        if (residual) {
            for (const auto& e : residual->entries) {
                if (e.row >= rows || e.col >= cols)
                    throw StructuralError("decompress: residual coordinate out of range in '" +
                                          spec.name + "'");
                m(static_cast<Eigen::Index>(e.row), static_cast<Eigen::Index>(e.col)) += e.value;
            }
        }
        out.values.push_back(unreshape_4d(m));
    }
    return out;
}

/// Scalars transmitted divided by scalars in the uncompressed model.
inline double transmission_ratio(const CompressedUpdate& update,
                                 const std::vector<LayerSpec>& specs) {
    if (update.layers.size() != specs.size())
        throw StructuralError("transmission_ratio: layer count mismatch");
    std::size_t sent = 0, original = 0;
    for (std::size_t l = 0; l < specs.size(); ++l) {
        detail::require_layer_match(update.layers[l], specs[l]);
        sent += transmitted_scalars(update.layers[l]);
        original += specs[l].size();
    }
    if (original == 0) throw StructuralError("transmission_ratio: empty model");
    return static_cast<double>(sent) / static_cast<double>(original);
}

/// Mean retained rank across the layers of one part (grouped layers average
/// over their groups; dense fallbacks count as full rank). NaN when the part
/// has no layers.
inline double mean_retained_rank(const CompressedUpdate& update, Part part) {
    double sum = 0.0;
    std::size_t count = 0;
    for (const auto& layer : update.layers) {
        if (layer.part != part || layer.kind != LayerKind::Conv) continue;
        const std::size_t rows = layer.shape[0];
        const std::size_t cols = layer.shape[1] * layer.shape[2] * layer.shape[3];
        if (const auto* comp = std::get_if<ResidualCompensatedLayer>(&layer.payload)) {
            sum += static_cast<double>(comp->factors.rank);
            ++count;
        } else if (const auto* fac = std::get_if<FactorsLayer>(&layer.payload)) {
            sum += static_cast<double>(fac->factors.rank);
            ++count;
        } else if (const auto* grouped = std::get_if<GroupedLayer>(&layer.payload)) {
            double g_sum = 0.0;
            for (const auto& g : grouped->groups) g_sum += static_cast<double>(g.rank);
            sum += g_sum / static_cast<double>(grouped->groups.size());
            ++count;
        } else {
            sum += static_cast<double>(std::min(rows, cols));
            ++count;
        }
    }
    if (count == 0) return std::numeric_limits<double>::quiet_NaN();
    return sum / static_cast<double>(count);
}

}  // namespace ceperfed
