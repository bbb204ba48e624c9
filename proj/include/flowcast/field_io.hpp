#pragma once

// JSON field files: {"kind": "analytic" | "tabulated" | "mlp", ...}.
// See docs/formats.md for the full schema.

#include <fstream>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "flowcast/fields.hpp"

namespace flowcast {

namespace detail {

inline std::vector<double> parse_vector(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) {
        throw std::runtime_error("field file: " + what + " must be a non-empty array");
    }
    std::vector<double> out;
    out.reserve(j.size());
    for (const auto& v : j) {
        if (!v.is_number()) {
            throw std::runtime_error("field file: " + what + " must contain only numbers");
        }
        out.push_back(v.get<double>());
    }
    return out;
}

inline Matrix parse_matrix(const nlohmann::json& j, const std::string& what) {
    if (!j.is_array() || j.empty()) {
        throw std::runtime_error("field file: " + what + " must be a non-empty 2D array");
    }
    Matrix out;
    out.reserve(j.size());
    for (std::size_t r = 0; r < j.size(); ++r) {
        out.push_back(parse_vector(j[r], what + "[" + std::to_string(r) + "]"));
    }
    return out;
}

inline const nlohmann::json& require_key(const nlohmann::json& j, const std::string& key,
                                         const std::string& context) {
    if (!j.contains(key)) {
        throw std::runtime_error("field file: missing \"" + key + "\" in " + context);
    }
    return j.at(key);
}

/// Flattens the nested row-major "values" array of a tabulated field,
/// checking the shape axis by axis. `axis` indexes into shape; the leaves
/// are velocity vectors of length dim.
inline void flatten_values(const nlohmann::json& j, const std::vector<std::size_t>& shape,
                           std::size_t axis, std::size_t dim, std::vector<double>& out,
                           const std::string& path) {
    if (axis == shape.size()) {
        if (!j.is_array() || j.size() != dim) {
            throw std::runtime_error("field file: values" + path +
                                     " must be a velocity vector of length " +
                                     std::to_string(dim));
        }
        for (const auto& v : j) {
            if (!v.is_number()) {
                throw std::runtime_error("field file: values" + path +
                                         " must contain only numbers");
            }
            out.push_back(v.get<double>());
        }
        return;
    }
    if (!j.is_array() || j.size() != shape[axis]) {
        throw std::runtime_error("field file: values" + path + " must have " +
                                 std::to_string(shape[axis]) + " entries along axis " +
                                 std::to_string(axis));
    }
    for (std::size_t i = 0; i < j.size(); ++i) {
        flatten_values(j[i], shape, axis + 1, dim, out, path + "[" + std::to_string(i) + "]");
    }
}

}  // namespace detail

inline std::shared_ptr<VelocityField> field_from_json(const nlohmann::json& j) {
    if (!j.is_object()) throw std::runtime_error("field file: root must be an object");
    const std::string kind = detail::require_key(j, "kind", "root").get<std::string>();

    if (kind == "analytic") {
        const std::string variant =
            detail::require_key(j, "variant", "analytic field").get<std::string>();
        if (variant == "constant") {
            return std::make_shared<ConstantField>(
                detail::parse_vector(detail::require_key(j, "c", "constant field"), "c"));
        }
        if (variant == "linear") {
            return std::make_shared<LinearField>(
                detail::parse_matrix(detail::require_key(j, "A", "linear field"), "A"),
                detail::parse_vector(detail::require_key(j, "b", "linear field"), "b"));
        }
        if (variant == "rotation") {
            const auto& omega = detail::require_key(j, "omega", "rotation field");
            if (!omega.is_number()) throw std::runtime_error("field file: omega must be a number");
            return std::make_shared<RotationField>(omega.get<double>());
        }
        if (variant == "gaussian_bridge") {
            const auto& s0 = detail::require_key(j, "sigma0", "gaussian_bridge field");
            const auto& s1 = detail::require_key(j, "sigma1", "gaussian_bridge field");
            if (!s0.is_number() || !s1.is_number()) {
                throw std::runtime_error("field file: sigma0/sigma1 must be numbers");
            }
            return std::make_shared<GaussianBridgeField>(
                detail::parse_vector(detail::require_key(j, "mu", "gaussian_bridge field"), "mu"),
                s0.get<double>(), s1.get<double>());
        }
        throw std::runtime_error("field file: unknown analytic variant \"" + variant + "\"");
    }

    if (kind == "tabulated") {
        const auto& axes_json = detail::require_key(j, "axes", "tabulated field");
        if (!axes_json.is_array() || axes_json.size() < 2) {
            throw std::runtime_error(
                "field file: axes must list at least one space axis plus the time axis");
        }
        std::vector<std::vector<double>> axes;
        std::vector<std::size_t> shape;
        for (std::size_t a = 0; a < axes_json.size(); ++a) {
            axes.push_back(detail::parse_vector(axes_json[a], "axes[" + std::to_string(a) + "]"));
            for (std::size_t i = 0; i + 1 < axes.back().size(); ++i) {
                if (!(axes.back()[i + 1] > axes.back()[i])) {
                    throw std::runtime_error("field file: axes[" + std::to_string(a) +
                                             "] is not strictly increasing at node " +
                                             std::to_string(i + 1));
                }
            }
            shape.push_back(axes.back().size());
        }
        const std::size_t dim = axes.size() - 1;
        std::vector<double> values;
        detail::flatten_values(detail::require_key(j, "values", "tabulated field"), shape, 0,
                               dim, values, "");
        return std::make_shared<TabulatedField>(std::move(axes), std::move(values));
    }

    if (kind == "mlp") {
        const auto& layers_json = detail::require_key(j, "layers", "mlp field");
        if (!layers_json.is_array() || layers_json.empty()) {
            throw std::runtime_error("field file: layers must be a non-empty array");
        }
        std::vector<MlpLayer> layers;
        for (std::size_t l = 0; l < layers_json.size(); ++l) {
            const std::string ctx = "layers[" + std::to_string(l) + "]";
            MlpLayer layer;
            layer.weights =
                detail::parse_matrix(detail::require_key(layers_json[l], "weights", ctx),
                                     ctx + ".weights");
            layer.bias = detail::parse_vector(detail::require_key(layers_json[l], "bias", ctx),
                                              ctx + ".bias");
            const std::string act =
                detail::require_key(layers_json[l], "activation", ctx).get<std::string>();
            if (act == "tanh") {
                layer.activation = Activation::tanh_act;
            } else if (act == "identity") {
                layer.activation = Activation::identity;
            } else {
                throw std::runtime_error("field file: " + ctx + " has unknown activation \"" +
                                         act + "\"");
            }
            layers.push_back(std::move(layer));
        }
        return std::make_shared<TinyMLPField>(std::move(layers));
    }

    throw std::runtime_error("field file: unknown kind \"" + kind + "\"");
}

inline std::shared_ptr<VelocityField> load_field(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("field file: cannot open \"" + path + "\"");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw std::runtime_error("field file: \"" + path + "\" is not valid JSON: " + e.what());
    }
    try {
        return field_from_json(j);
    } catch (const std::exception& e) {
        throw std::runtime_error(std::string(e.what()) + " (in \"" + path + "\")");
    }
}

}  // namespace flowcast
